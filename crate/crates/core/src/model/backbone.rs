//! Backbone encoders for the two profiles.
//!
//! The paper profile follows 50-layer residual network geometry (stem,
//! max-pool, bottleneck stages of depth 3/4/6/3) producing features of width
//! 256/512/1024/2048 at strides 4/8/16/32. The desk profile is a small
//! four-stage convolutional encoder with widths 16/32/64/128 at the same
//! strides, trained from scratch.

use crate::nn::{BatchNorm2d, Conv2d, ParamStore};
use crate::rng::Stream;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut Stream,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(store, rng, name, in_ch, out_ch, k, stride, pad, 1),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var) -> Var {
        let y = self.conv.forward(tape, store, x);
        let y = self.bn.forward(tape, store, y);
        tape.relu(y)
    }
}

#[derive(Debug, Clone)]
pub struct DeskBackbone {
    stem: ConvBnRelu,
    stages: Vec<(ConvBnRelu, ConvBnRelu)>,
}

pub const DESK_WIDTHS: [usize; 4] = [16, 32, 64, 128];

impl DeskBackbone {
    pub fn new(store: &mut ParamStore, rng: &mut Stream) -> Self {
        let stem = ConvBnRelu::new(store, rng, "backbone.stem", 3, 16, 3, 2, 1);
        let mut stages = Vec::new();
        let mut in_ch = 16;
        for (i, &w) in DESK_WIDTHS.iter().enumerate() {
            let down =
                ConvBnRelu::new(store, rng, &format!("backbone.stage{}.down", i + 1), in_ch, w, 3, 2, 1);
            let refine =
                ConvBnRelu::new(store, rng, &format!("backbone.stage{}.conv", i + 1), w, w, 3, 1, 1);
            stages.push((down, refine));
            in_ch = w;
        }
        DeskBackbone { stem, stages }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var) -> [Var; 4] {
        let mut h = self.stem.forward(tape, store, x);
        let mut levels = Vec::with_capacity(4);
        for (down, refine) in &self.stages {
            h = down.forward(tape, store, h);
            h = refine.forward(tape, store, h);
            levels.push(h);
        }
        [levels[0], levels[1], levels[2], levels[3]]
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: ConvBnRelu,
    conv: ConvBnRelu,
    expand: Conv2d,
    expand_bn: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        rng: &mut Stream,
        name: &str,
        in_ch: usize,
        width: usize,
        stride: usize,
    ) -> Self {
        let out_ch = width * 4;
        let reduce = ConvBnRelu::new(store, rng, &format!("{name}.reduce"), in_ch, width, 1, 1, 0);
        let conv = ConvBnRelu::new(store, rng, &format!("{name}.conv"), width, width, 3, stride, 1);
        let expand = Conv2d::new(store, rng, &format!("{name}.expand"), width, out_ch, 1, 1, 0, 1);
        let expand_bn = BatchNorm2d::new(store, &format!("{name}.expand.bn"), out_ch);
        let downsample = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(store, rng, &format!("{name}.down"), in_ch, out_ch, 1, stride, 0, 1),
                BatchNorm2d::new(store, &format!("{name}.down.bn"), out_ch),
            )
        });
        Bottleneck { reduce, conv, expand, expand_bn, downsample }
    }

    fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var) -> Var {
        let h = self.reduce.forward(tape, store, x);
        let h = self.conv.forward(tape, store, h);
        let h = self.expand.forward(tape, store, h);
        let h = self.expand_bn.forward(tape, store, h);
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(tape, store, x);
                bn.forward(tape, store, s)
            }
            None => x,
        };
        let sum = tape.add(h, skip);
        tape.relu(sum)
    }
}

#[derive(Debug, Clone)]
pub struct ResNet50Backbone {
    stem: ConvBnRelu,
    layers: Vec<Vec<Bottleneck>>,
}

pub const PAPER_WIDTHS: [usize; 4] = [256, 512, 1024, 2048];

impl ResNet50Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut Stream) -> Self {
        let stem = ConvBnRelu::new(store, rng, "backbone.stem", 3, 64, 7, 2, 3);
        let depths = [3usize, 4, 6, 3];
        let widths = [64usize, 128, 256, 512];
        let mut layers = Vec::new();
        let mut in_ch = 64;
        for (li, (&depth, &width)) in depths.iter().zip(&widths).enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..depth {
                let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(
                    store,
                    rng,
                    &format!("backbone.layer{}.block{}", li + 1, bi),
                    in_ch,
                    width,
                    stride,
                ));
                in_ch = width * 4;
            }
            layers.push(blocks);
        }
        ResNet50Backbone { stem, layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var) -> [Var; 4] {
        let h = self.stem.forward(tape, store, x);
        let mut h = tape.max_pool(h, 3, 2, 1);
        let mut levels = Vec::with_capacity(4);
        for blocks in &self.layers {
            for block in blocks {
                h = block.forward(tape, store, h);
            }
            levels.push(h);
        }
        [levels[0], levels[1], levels[2], levels[3]]
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Desk(DeskBackbone),
    Paper(ResNet50Backbone),
}

impl Backbone {
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var) -> [Var; 4] {
        match self {
            Backbone::Desk(b) => b.forward(tape, store, x),
            Backbone::Paper(b) => b.forward(tape, store, x),
        }
    }
}
