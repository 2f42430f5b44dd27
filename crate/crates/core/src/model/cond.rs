//! Point-cloud and scalar conditioning.
//!
//! A fixed set of learned latent rows cross-attends to lifted per-point
//! features for a few blocks; two tiny MLPs embed log10 face count and the
//! quad ratio. The bundle handed to the decoder stacks latents + the two
//! scalar rows, so its size is independent of the cloud size and the
//! decoder's cross-attention cost stays constant.

use ndarray::{s, Array2};

use super::backward::{block_backward, rms_norm_backward, BwdCtx};
use super::forward::{
    block_forward, rms_norm, rope_table, silu, silu_deriv, BlockCache, BlockCtx,
};
use super::params::{Grads, MlpIx, ParameterSet};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

#[derive(Debug, Clone)]
pub struct CondInputs {
    /// (n, 6) rows of position then normal.
    pub points: Array2<f64>,
    pub face_count: u64,
    pub quad_ratio: f64,
}

impl CondInputs {
    pub fn from_cloud(cloud: &PointCloud, face_count: u64, quad_ratio: f64) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::Shape("conditioning cloud has no points".into()));
        }
        if face_count == 0 {
            return Err(Error::Shape("conditioning face count must be positive".into()));
        }
        let n = cloud.len();
        let mut points = Array2::zeros((n, 6));
        for i in 0..n {
            for j in 0..3 {
                points[[i, j]] = cloud.positions[i][j];
                points[[i, j + 3]] = cloud.normals[i][j];
            }
        }
        Ok(CondInputs {
            points,
            face_count,
            quad_ratio,
        })
    }

    pub fn log_face_count(&self) -> f64 {
        (self.face_count as f64).log10()
    }
}

pub struct MlpCache {
    pub x: f64,
    pub h_pre: Array2<f64>,
}

pub struct CondCache {
    pub points: Array2<f64>,
    pub pf: Array2<f64>,
    pub pf_rms: Vec<f64>,
    pub pf_normed: Array2<f64>,
    pub blocks: Vec<BlockCache>,
    pub face: MlpCache,
    pub quad: MlpCache,
}

fn scalar_mlp_forward(p: &ParameterSet, ix: &MlpIx, x: f64) -> (Array2<f64>, MlpCache) {
    let c = p.cfg.channels;
    let w1 = p.row(ix.w1);
    let b1 = p.row(ix.b1);
    let mut h_pre = Array2::zeros((1, c));
    for j in 0..c {
        h_pre[[0, j]] = x * w1[j] + b1[j];
    }
    let h = h_pre.mapv(silu);
    let mut out = h.dot(&p.mat(ix.w2));
    out += &p.row(ix.b2);
    (out, MlpCache { x, h_pre })
}

fn scalar_mlp_backward(
    p: &ParameterSet,
    ix: &MlpIx,
    cache: &MlpCache,
    d_out: &Array2<f64>,
    grads: &mut Grads,
) {
    let h = cache.h_pre.mapv(silu);
    {
        let g = h.t().dot(d_out);
        let mut gw = grads.mat_mut(ix.w2);
        gw += &g;
    }
    {
        let mut gb = grads.mat_mut(ix.b2);
        gb += d_out;
    }
    let d_h = d_out.dot(&p.mat(ix.w2).t());
    let d_h_pre = Array2::from_shape_fn(d_h.dim(), |ij| d_h[ij] * silu_deriv(cache.h_pre[ij]));
    {
        let mut gb = grads.mat_mut(ix.b1);
        gb += &d_h_pre;
    }
    {
        let g = d_h_pre.mapv(|v| v * cache.x);
        let mut gw = grads.mat_mut(ix.w1);
        gw += &g;
    }
}

/// Builds the (latents + 2, channels) conditioning bundle.
pub fn encode_cond(p: &ParameterSet, inputs: &CondInputs) -> Result<(Array2<f64>, CondCache)> {
    let cfg = &p.cfg;
    let cix = p
        .index
        .cond
        .as_ref()
        .ok_or_else(|| Error::Shape("model has no conditioning branch".into()))?;
    if inputs.points.ncols() != 6 || inputs.points.nrows() == 0 {
        return Err(Error::Shape("point features must be a nonempty (n, 6) array".into()));
    }
    if inputs.face_count == 0 {
        return Err(Error::Shape("face count must be positive".into()));
    }
    let pf = inputs.points.dot(&p.mat(cix.lift));
    let (pf_normed, pf_rms) = rms_norm(&pf, p.row(cix.pf_norm));

    let k = p.mat(cix.latents).nrows();
    // Rotary table unused by cross blocks but the context carries one.
    let rope = rope_table(0, k, cfg.head_channels, cfg.rope_theta);
    let ctx = BlockCtx {
        rope: &rope,
        window: k,
        bundle: Some(&pf_normed),
        heads: cfg.heads(),
        hd: cfg.head_channels,
    };
    let mut lat = p.mat(cix.latents).to_owned();
    let mut blocks = Vec::with_capacity(cix.blocks.len());
    for bx in &cix.blocks {
        let (nx, cache) = block_forward(p, bx, lat, &ctx);
        lat = nx;
        blocks.push(cache);
    }

    let (face_row, face_cache) = scalar_mlp_forward(p, &cix.face, inputs.log_face_count());
    let (quad_row, quad_cache) = scalar_mlp_forward(p, &cix.quad, inputs.quad_ratio);

    let c = cfg.channels;
    let mut bundle = Array2::zeros((k + 2, c));
    bundle.slice_mut(s![..k, ..]).assign(&lat);
    bundle.row_mut(k).assign(&face_row.row(0));
    bundle.row_mut(k + 1).assign(&quad_row.row(0));
    Ok((
        bundle,
        CondCache {
            points: inputs.points.clone(),
            pf,
            pf_rms,
            pf_normed,
            blocks,
            face: face_cache,
            quad: quad_cache,
        },
    ))
}

/// Carries the decoder's bundle gradient back into the encoder parameters.
pub fn cond_backward(
    p: &ParameterSet,
    cache: &CondCache,
    d_bundle: &Array2<f64>,
    grads: &mut Grads,
) {
    let cfg = &p.cfg;
    let cix = p.index.cond.as_ref().expect("conditioning index");
    let k = p.mat(cix.latents).nrows();

    scalar_mlp_backward(
        p,
        &cix.face,
        &cache.face,
        &d_bundle.slice(s![k..k + 1, ..]).to_owned(),
        grads,
    );
    scalar_mlp_backward(
        p,
        &cix.quad,
        &cache.quad,
        &d_bundle.slice(s![k + 1..k + 2, ..]).to_owned(),
        grads,
    );

    let rope = rope_table(0, k, cfg.head_channels, cfg.rope_theta);
    let ctx = BwdCtx {
        rope: &rope,
        window: k,
        heads: cfg.heads(),
        hd: cfg.head_channels,
        bundle: Some(&cache.pf_normed),
    };
    let mut d_lat = d_bundle.slice(s![..k, ..]).to_owned();
    let mut d_pf_normed = Array2::zeros(cache.pf_normed.dim());
    for (bx, bc) in cix.blocks.iter().zip(&cache.blocks).rev() {
        d_lat = block_backward(p, bx, bc, &ctx, &d_lat, grads, Some(&mut d_pf_normed));
    }
    {
        let mut gl = grads.mat_mut(cix.latents);
        gl += &d_lat;
    }

    let d_pf = rms_norm_backward(
        &cache.pf,
        &cache.pf_rms,
        p.row(cix.pf_norm),
        &d_pf_normed,
        grads.mat_mut(cix.pf_norm),
    );
    {
        let g = cache.points.t().dot(&d_pf);
        let mut gw = grads.mat_mut(cix.lift);
        gw += &g;
    }
}
