// scratch calibration probe: step timings + divergence-replication signal
use divsal_core::data::{generate_synthetic, SyntheticSpec};
use divsal_core::data::synthetic::erode;
use divsal_core::model::Framework;
use divsal_core::trainer::{Batch, SamplingMode, TrainConfig, Trainer};
use divsal_core::uncertainty::{decompose, mc_predict};
use std::time::Instant;

fn bench_spec(n: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_images: n,
        canvas: 64,
        objects_min: 2,
        objects_max: 2,
        salience_probs: vec![1.0, 0.6],
        jitter_radius: 1,
        num_annotators: 5,
        seed,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("timing");

    if mode == "timing" {
        let (samples, _) = generate_synthetic(&bench_spec(8, 0)).unwrap();
        let refs: Vec<_> = samples.iter().map(|s| &s.sample).collect();
        let batch = Batch::from_samples(&refs).unwrap();
        for fw in [Framework::Ensemble, Framework::Cvae, Framework::Gan, Framework::Abp] {
            let cfg = TrainConfig::desk(fw);
            let mut tr = Trainer::new(&cfg).unwrap();
            let t0 = Instant::now();
            let steps = 6;
            for _ in 0..steps {
                tr.train_step(&batch).unwrap();
            }
            let dt = t0.elapsed().as_secs_f64() / steps as f64;
            println!("{}: {:.3} s/step (R)", fw.name(), dt);
            let cfg = TrainConfig { sampling: SamplingMode::All, ..TrainConfig::desk(fw) };
            let mut tr = Trainer::new(&cfg).unwrap();
            let t0 = Instant::now();
            for _ in 0..steps {
                tr.train_step(&batch).unwrap();
            }
            let dt = t0.elapsed().as_secs_f64() / steps as f64;
            println!("{}: {:.3} s/step (A)", fw.name(), dt);
        }
        return;
    }

    // mode = train: full criterion-5-style run at configurable scale
    let n_train: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(5);
    let lr: f32 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let fw = match args.get(5).map(|s| s.as_str()).unwrap_or("cvae") {
        "ensemble" => Framework::Ensemble,
        "gan" => Framework::Gan,
        "abp" => Framework::Abp,
        _ => Framework::Cvae,
    };
    let sampling = match args.get(6).map(|s| s.as_str()).unwrap_or("random") {
        "all" => SamplingMode::All,
        _ => SamplingMode::Random,
    };

    let (train, _) = generate_synthetic(&bench_spec(n_train, 10)).unwrap();
    let (test, _) = generate_synthetic(&bench_spec(24, 11)).unwrap();
    let data: Vec<_> = train.iter().map(|s| s.sample.clone()).collect();
    let cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        sampling,
        ..TrainConfig::desk(fw)
    };
    let t0 = Instant::now();
    let state = divsal_core::trainer::fit(&data, &cfg).unwrap();
    println!("train time: {:.1}s, {} steps", t0.elapsed().as_secs_f64(), state.step);
    let h = &state.history;
    let k = h.len() / 10;
    for c in 0..10 {
        let lo = c * k;
        let hi = ((c + 1) * k).min(h.len());
        let mean: f64 = h[lo..hi].iter().map(|r| r.breakdown.total).sum::<f64>() / (hi - lo) as f64;
        let rec: f64 = h[lo..hi].iter().map(|r| r.breakdown.rec).sum::<f64>() / (hi - lo) as f64;
        let kl: f64 = h[lo..hi].iter().filter_map(|r| r.breakdown.kl).sum::<f64>() / (hi - lo) as f64;
        let mj: f64 = h[lo..hi].iter().filter_map(|r| r.breakdown.mj).sum::<f64>() / (hi - lo) as f64;
        println!("chunk {c}: total {mean:.4} rec {rec:.4} kl {kl:.4} mj {mj:.4}");
    }

    // uncertainty ratio on the test set
    let mut trainer = Trainer::from_state(&state).unwrap();
    let mut rng = divsal_core::rng::stream_from_seed(999);
    let mut div_acc = 0.0f64;
    let mut div_n = 0usize;
    let mut con_acc = 0.0f64;
    let mut con_n = 0usize;
    let t1 = Instant::now();
    for s in &test {
        let stack = mc_predict(&mut trainer.model, &s.sample.image, 16, &mut rng).unwrap();
        let tri = decompose(&stack).unwrap();
        for obj in &s.objects {
            let interior = erode(&obj.mask, 2);
            let acc: f64 = interior
                .indexed_iter()
                .filter(|(_, &v)| v == 1)
                .map(|(idx, _)| tri.predictive[idx])
                .sum();
            let cnt = interior.iter().filter(|&&v| v == 1).count();
            if obj.p_s < 1.0 {
                div_acc += acc;
                div_n += cnt;
            } else {
                con_acc += acc;
                con_n += cnt;
            }
        }
    }
    println!("mc_predict time: {:.1}s", t1.elapsed().as_secs_f64());
    let div = div_acc / div_n as f64;
    let con = con_acc / con_n as f64;
    println!("U_p divergent interior: {div:.4}, consistent interior: {con:.4}, ratio {:.2}", div / con);

    // uncertainty-MAE vs the normalized entropy of the mean annotation
    let mut rng = divsal_core::rng::stream_from_seed(998);
    let mut u_mae_acc = 0.0f64;
    for s in &test {
        let stack = mc_predict(&mut trainer.model, &s.sample.image, 16, &mut rng).unwrap();
        let tri = decompose(&stack).unwrap();
        let gt_u = divsal_core::uncertainty::gt_predictive_uncertainty(&s.sample.annotations).unwrap();
        u_mae_acc += divsal_core::metrics::uncertainty_mae(&tri.predictive, &gt_u).unwrap();
    }
    println!("uncertainty MAE: {:.4}", u_mae_acc / test.len() as f64);
}
