//! Flat parameter storage.
//!
//! Every tensor lives in one contiguous `Vec<f64>` described by a `Layout`
//! (name, offset, shape, init rule, decay flag). The optimizer, gradient
//! clipping, checkpointing, and finite-difference checks all operate on the
//! flat buffer; the forward/backward passes go through a prebuilt
//! `ModelIndex` of tensor ids so no name lookups happen per step.

use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{HourglassConfig, POINT_DIM, SHORTEN_FACTOR};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Gaussian with the given standard deviation.
    Normal(f64),
    One,
    Zero,
}

#[derive(Debug, Clone)]
pub struct TensorMeta {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub decay: bool,
    pub init: Init,
}

impl TensorMeta {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorMeta>,
    pub total: usize,
}

impl Layout {
    pub fn view<'a>(&self, data: &'a [f64], id: usize) -> ArrayView2<'a, f64> {
        let m = &self.tensors[id];
        ArrayView2::from_shape((m.rows, m.cols), &data[m.offset..m.offset + m.len()])
            .expect("layout shape")
    }

    pub fn view_mut<'a>(&self, data: &'a mut [f64], id: usize) -> ArrayViewMut2<'a, f64> {
        let m = &self.tensors[id];
        ArrayViewMut2::from_shape((m.rows, m.cols), &mut data[m.offset..m.offset + m.len()])
            .expect("layout shape")
    }

    pub fn row<'a>(&self, data: &'a [f64], id: usize) -> ArrayView1<'a, f64> {
        let m = &self.tensors[id];
        debug_assert_eq!(m.rows, 1);
        ArrayView1::from(&data[m.offset..m.offset + m.cols])
    }

    pub fn slice<'a>(&self, data: &'a [f64], id: usize) -> &'a [f64] {
        let m = &self.tensors[id];
        &data[m.offset..m.offset + m.len()]
    }

    pub fn slice_mut<'a>(&self, data: &'a mut [f64], id: usize) -> &'a mut [f64] {
        let m = &self.tensors[id];
        &mut data[m.offset..m.offset + m.len()]
    }
}

/// Per-block tensor ids. Cross-attention blocks reuse the same shape set;
/// their K/V projections read the conditioning bundle instead of the
/// sequence stream.
#[derive(Debug, Clone, Copy)]
pub struct BlockIx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub n1: usize,
    pub n2: usize,
    pub wgate: usize,
    pub wup: usize,
    pub wdown: usize,
    pub cross: bool,
}

#[derive(Debug, Clone)]
pub struct LevelIx {
    pub blocks: Vec<BlockIx>,
    /// Projection (3c -> c) feeding the next level down; None on the
    /// innermost level.
    pub shorten: Option<usize>,
    /// Projection (c -> 3c) returning from the next level down.
    pub upsample: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpIx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub struct CondIx {
    pub lift: usize,
    pub pf_norm: usize,
    pub latents: usize,
    pub blocks: Vec<BlockIx>,
    pub face: MlpIx,
    pub quad: MlpIx,
}

#[derive(Debug, Clone)]
pub struct ModelIndex {
    pub embed: usize,
    pub levels: Vec<LevelIx>,
    pub final_norm: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub cond: Option<CondIx>,
}

struct LayoutBuilder {
    tensors: Vec<TensorMeta>,
    total: usize,
    /// Every Gaussian tensor uses channels^{-1/2}, independent of fan-in.
    std: f64,
}

impl LayoutBuilder {
    fn new(channels: usize) -> Self {
        LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
            std: 1.0 / (channels as f64).sqrt(),
        }
    }

    fn push(&mut self, name: String, rows: usize, cols: usize, decay: bool, init: Init) -> usize {
        let id = self.tensors.len();
        self.tensors.push(TensorMeta {
            name,
            offset: self.total,
            rows,
            cols,
            decay,
            init,
        });
        self.total += rows * cols;
        id
    }

    fn mat(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let std = self.std;
        self.push(name, rows, cols, true, Init::Normal(std))
    }

    fn gain(&mut self, name: String, cols: usize) -> usize {
        self.push(name, 1, cols, false, Init::One)
    }

    fn bias(&mut self, name: String, cols: usize) -> usize {
        self.push(name, 1, cols, false, Init::Zero)
    }

    fn block(&mut self, prefix: &str, c: usize, h: usize, cross: bool) -> BlockIx {
        BlockIx {
            n1: self.gain(format!("{prefix}.n1.g"), c),
            wq: self.mat(format!("{prefix}.attn.wq"), c, c),
            wk: self.mat(format!("{prefix}.attn.wk"), c, c),
            wv: self.mat(format!("{prefix}.attn.wv"), c, c),
            wo: self.mat(format!("{prefix}.attn.wo"), c, c),
            n2: self.gain(format!("{prefix}.n2.g"), c),
            wgate: self.mat(format!("{prefix}.ffn.wgate"), c, h),
            wup: self.mat(format!("{prefix}.ffn.wup"), c, h),
            wdown: self.mat(format!("{prefix}.ffn.wdown"), h, c),
            cross,
        }
    }

    fn scalar_mlp(&mut self, prefix: &str, c: usize) -> MlpIx {
        MlpIx {
            w1: self.mat(format!("{prefix}.w1"), 1, c),
            b1: self.bias(format!("{prefix}.b1"), c),
            w2: self.mat(format!("{prefix}.w2"), c, c),
            b2: self.bias(format!("{prefix}.b2"), c),
        }
    }
}

pub fn build_layout(cfg: &HourglassConfig) -> (Layout, ModelIndex) {
    let c = cfg.channels;
    let h = cfg.ffn_hidden;
    let v = cfg.vocab_size();
    let mut b = LayoutBuilder::new(c);

    let embed = b.mat("embed".into(), v, c);

    let depths = cfg.levels();
    let mut levels = Vec::with_capacity(depths.len());
    for (l, &d) in depths.iter().enumerate() {
        let blocks = (0..d)
            .map(|i| b.block(&format!("l{l}.b{i}"), c, h, cfg.is_cross_block(i)))
            .collect();
        let (shorten, upsample) = if l + 1 < depths.len() {
            (
                Some(b.mat(format!("l{l}.shorten"), SHORTEN_FACTOR * c, c)),
                Some(b.mat(format!("l{l}.upsample"), c, SHORTEN_FACTOR * c)),
            )
        } else {
            (None, None)
        };
        levels.push(LevelIx {
            blocks,
            shorten,
            upsample,
        });
    }

    let final_norm = b.gain("final.g".into(), c);
    let head_w = b.mat("head.w".into(), c, v);
    let head_b = b.bias("head.b".into(), v);

    let cond = cfg.cond.as_ref().map(|cc| {
        let lift = b.mat("cond.lift".into(), POINT_DIM, c);
        let pf_norm = b.gain("cond.pf_norm.g".into(), c);
        let latents = b.mat("cond.latents".into(), cc.latents, c);
        let blocks = (0..cc.enc_depth)
            .map(|i| b.block(&format!("cond.e{i}"), c, h, true))
            .collect();
        let face = b.scalar_mlp("cond.face", c);
        let quad = b.scalar_mlp("cond.quad", c);
        CondIx {
            lift,
            pf_norm,
            latents,
            blocks,
            face,
            quad,
        }
    });

    (
        Layout {
            tensors: b.tensors,
            total: b.total,
        },
        ModelIndex {
            embed,
            levels,
            final_norm,
            head_w,
            head_b,
            cond,
        },
    )
}

#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub cfg: HourglassConfig,
    pub layout: Arc<Layout>,
    pub index: Arc<ModelIndex>,
    pub data: Vec<f64>,
}

impl ParameterSet {
    pub fn mat(&self, id: usize) -> ArrayView2<'_, f64> {
        self.layout.view(&self.data, id)
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f64> {
        self.layout.row(&self.data, id)
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Same weights with a different attention window. The layout does not
    /// depend on the window, so this is valid for evaluating a trained
    /// model under a longer or shorter context than it was trained with.
    pub fn with_window(&self, window: usize) -> Result<ParameterSet> {
        let mut cfg = self.cfg.clone();
        cfg.window = window;
        cfg.validate()?;
        Ok(ParameterSet {
            cfg,
            layout: self.layout.clone(),
            index: self.index.clone(),
            data: self.data.clone(),
        })
    }
}

/// Gradient buffer sharing the model's layout.
#[derive(Debug, Clone)]
pub struct Grads {
    pub layout: Arc<Layout>,
    pub data: Vec<f64>,
}

impl Grads {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total;
        Grads {
            layout,
            data: vec![0.0; n],
        }
    }

    pub fn mat_mut(&mut self, id: usize) -> ArrayViewMut2<'_, f64> {
        self.layout.clone().view_mut(&mut self.data, id)
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub fn init_model(cfg: &HourglassConfig, seed: u64) -> ParameterSet {
    let (layout, index) = build_layout(cfg);
    let mut data = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for meta in &layout.tensors {
        let dst = &mut data[meta.offset..meta.offset + meta.len()];
        match meta.init {
            Init::Normal(std) => {
                for x in dst {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = z * std;
                }
            }
            Init::One => dst.fill(1.0),
            Init::Zero => {}
        }
    }
    ParameterSet {
        cfg: cfg.clone(),
        layout: Arc::new(layout),
        index: Arc::new(index),
        data,
    }
}
