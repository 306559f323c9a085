//! Temporal-then-spatial transformer with per-class tokens.
//!
//! Every patch is first encoded as an independent temporal sequence of
//! `K` class tokens followed by `T` timestep tokens. The `K` class outputs
//! of every patch are then regrouped per class and encoded spatially, one
//! sequence per class, behind a spatial class token.

use std::rc::Rc;

use ndarray::{s, Array3, Array4, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{normal, ones, xavier, zeros, BoundParams, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub temporal_layers: usize,
    pub spatial_layers: usize,
    pub heads: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub mlp_ratio: usize,
    pub k: usize,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Reference sizes: d=128, 8 temporal and 4 spatial layers, 2x2 patches.
    pub fn paper(k: usize, t: usize, c: usize, h: usize, w: usize) -> Self {
        ModelConfig {
            d: 128,
            temporal_layers: 8,
            spatial_layers: 4,
            heads: 4,
            patch_h: 2,
            patch_w: 2,
            mlp_ratio: 4,
            k,
            t,
            c,
            h,
            w,
            dropout: 0.0,
        }
    }

    pub fn desk(k: usize, t: usize, c: usize, h: usize, w: usize) -> Self {
        ModelConfig {
            d: 32,
            temporal_layers: 2,
            spatial_layers: 1,
            ..Self::paper(k, t, c, h, w)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.d, self.heads, self.patch_h, self.patch_w, self.k, self.t, self.c, self.h, self.w]
            .contains(&0)
        {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if !self.h.is_multiple_of(self.patch_h) || !self.w.is_multiple_of(self.patch_w) {
            return bad(format!(
                "image {}x{} is not divisible by patch {}x{}",
                self.h, self.w, self.patch_h, self.patch_w
            ));
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} is not divisible by heads={}", self.d, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h / self.patch_h, self.w / self.patch_w)
    }

    pub fn num_patches(&self) -> usize {
        let (nh, nw) = self.grid();
        nh * nw
    }

    pub fn patch_dim(&self) -> usize {
        self.c * self.patch_h * self.patch_w
    }
}

/// Initializes backbone and classifier parameters.
pub fn init_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::new();
    let d = cfg.d;
    p.insert("patch.weight", xavier(rng, cfg.patch_dim(), d));
    p.insert("patch.bias", zeros(&[d]));
    p.insert("temporal.pos", normal(rng, &[cfg.t, d], 1.0));
    p.insert("temporal.cls", normal(rng, &[cfg.k, d], 1.0));
    for l in 0..cfg.temporal_layers {
        init_block(&mut p, &format!("temporal.{l}"), cfg, rng);
    }
    p.insert("temporal.norm.gamma", ones(&[d]));
    p.insert("temporal.norm.beta", zeros(&[d]));
    p.insert("spatial.pos", normal(rng, &[cfg.num_patches(), d], 1.0));
    p.insert("spatial.cls", normal(rng, &[cfg.k, d], 1.0));
    for l in 0..cfg.spatial_layers {
        init_block(&mut p, &format!("spatial.{l}"), cfg, rng);
    }
    p.insert("spatial.norm.gamma", ones(&[d]));
    p.insert("spatial.norm.beta", zeros(&[d]));
    let bound = 1.0 / (d as f64).sqrt();
    p.insert(
        "classifier.weight",
        Tensor::from_shape_simple_fn(IxDyn(&[cfg.k, d]), || rng.random_range(-bound..bound)),
    );
    p
}

fn init_block(p: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d;
    let hidden = d * cfg.mlp_ratio;
    p.insert(format!("{prefix}.ln1.gamma"), ones(&[d]));
    p.insert(format!("{prefix}.ln1.beta"), zeros(&[d]));
    p.insert(format!("{prefix}.attn.qkv.weight"), xavier(rng, d, 3 * d));
    p.insert(format!("{prefix}.attn.qkv.bias"), zeros(&[3 * d]));
    p.insert(format!("{prefix}.attn.proj.weight"), xavier(rng, d, d));
    p.insert(format!("{prefix}.attn.proj.bias"), zeros(&[d]));
    p.insert(format!("{prefix}.ln2.gamma"), ones(&[d]));
    p.insert(format!("{prefix}.ln2.beta"), zeros(&[d]));
    p.insert(format!("{prefix}.mlp.fc1.weight"), xavier(rng, d, hidden));
    p.insert(format!("{prefix}.mlp.fc1.bias"), zeros(&[hidden]));
    p.insert(format!("{prefix}.mlp.fc2.weight"), xavier(rng, hidden, d));
    p.insert(format!("{prefix}.mlp.fc2.bias"), zeros(&[d]));
}

/// Cuts `[T, C, H, W]` into `[Nh*Nw, T, C*ph*pw]` patch vectors.
///
/// Patches are numbered row-major over the patch grid; features are ordered
/// `(channel, dy, dx)`.
pub fn extract_patches(series: &Array4<f32>, cfg: &ModelConfig) -> Result<Array3<f64>> {
    let (t, c, h, w) = series.dim();
    if h % cfg.patch_h != 0 || w % cfg.patch_w != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible by patch {}x{}",
            cfg.patch_h, cfg.patch_w
        )));
    }
    if (t, c, h, w) != (cfg.t, cfg.c, cfg.h, cfg.w) {
        return Err(Error::Contract(format!(
            "series shape {:?} does not match model input {:?}",
            (t, c, h, w),
            (cfg.t, cfg.c, cfg.h, cfg.w)
        )));
    }
    let (ph, pw) = (cfg.patch_h, cfg.patch_w);
    let (nh, nw) = (h / ph, w / pw);
    let mut out = Array3::<f64>::zeros((nh * nw, t, c * ph * pw));
    for gy in 0..nh {
        for gx in 0..nw {
            let p = gy * nw + gx;
            for s in 0..t {
                let mut f = 0;
                for ch in 0..c {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            out[[p, s, f]] = series[[s, ch, gy * ph + dy, gx * pw + dx]] as f64;
                            f += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Outputs of one forward pass, all on the same tape.
pub struct EncoderOutputs<'t> {
    /// `[P, K, d]`
    pub z_t_dense: Var<'t>,
    /// `[P, T, d]`
    pub z_t_seq: Var<'t>,
    /// `[K, P, d]`
    pub z_s_dense: Var<'t>,
    /// `[K, d]`
    pub z_s_global: Var<'t>,
    /// Softmaxed temporal attention per layer, each `[P, heads, K+T, K+T]`.
    pub temporal_attention: Vec<Rc<Tensor>>,
}

impl EncoderOutputs<'_> {
    /// Head-averaged class-query to timestep-key block of the last temporal
    /// layer, `[P, K, T]`.
    pub fn t2c_attention_raw(&self, k: usize) -> Tensor {
        let last = self.temporal_attention.last().expect("no temporal layers");
        let mean = last.mean_axis(Axis(1)).unwrap();
        mean.slice(s![.., ..k, k..]).to_owned().into_dyn()
    }
}

/// Dropout masks are drawn only when an RNG is supplied and the rate is positive.
pub struct Tsvit<'t, 'p> {
    pub cfg: &'p ModelConfig,
    pub params: &'p BoundParams<'t, 'p>,
}

impl<'t, 'p> Tsvit<'t, 'p> {
    pub fn new(cfg: &'p ModelConfig, params: &'p BoundParams<'t, 'p>) -> Self {
        Tsvit { cfg, params }
    }

    fn tape(&self) -> &'t Tape {
        self.params.get("patch.weight").tape()
    }

    /// Linear projection of patch vectors to `[P, T, d]`.
    pub fn patchify(&self, series: &Array4<f32>) -> Result<Var<'t>> {
        let patches = extract_patches(series, self.cfg)?;
        let x = self.tape().constant(patches.into_dyn());
        Ok(x
            .matmul(self.params.get("patch.weight"))
            .add(self.params.get("patch.bias")))
    }

    /// Temporal encoder over `[P, T, d]` tokens.
    ///
    /// `positions` optionally maps each timestep to a row of the temporal
    /// position table (e.g. acquisition-date buckets); default is order.
    pub fn temporal_forward(
        &self,
        z: Var<'t>,
        positions: Option<&[usize]>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t>, Var<'t>, Vec<Rc<Tensor>>)> {
        let cfg = self.cfg;
        let shape = z.shape();
        if shape.len() != 3 || shape[2] != cfg.d {
            return Err(Error::Contract(format!("temporal input has shape {shape:?}")));
        }
        let (p, t) = (shape[0], shape[1]);
        let mut pos = self.params.get("temporal.pos");
        if let Some(idx) = positions {
            if idx.len() != t || idx.iter().any(|&i| i >= cfg.t) {
                return Err(Error::Contract("temporal position indices out of range".into()));
            }
            let mut onehot = Tensor::zeros(IxDyn(&[t, cfg.t]));
            for (row, &i) in idx.iter().enumerate() {
                onehot[[row, i]] = 1.0;
            }
            pos = self.tape().constant(onehot).matmul(pos);
        } else if t != cfg.t {
            return Err(Error::Contract(format!("expected T={}, got {t}", cfg.t)));
        }
        let cls = self.params.get("temporal.cls").broadcast_to(&[p, cfg.k, cfg.d]);
        let mut x = Var::concat(&[cls, z.add(pos)], 1);
        let mut attention = Vec::with_capacity(cfg.temporal_layers);
        for l in 0..cfg.temporal_layers {
            let (y, a) = self.block(&format!("temporal.{l}"), x, rng.as_deref_mut());
            x = y;
            attention.push(a);
        }
        let x = x.layer_norm(
            self.params.get("temporal.norm.gamma"),
            self.params.get("temporal.norm.beta"),
        );
        Ok((x.slice(1, 0, cfg.k), x.slice(1, cfg.k, t), attention))
    }

    /// Spatial encoder over `[P, K, d]` class tokens; returns `([K, d], [K, P, d])`.
    pub fn spatial_forward(
        &self,
        z_t_dense: Var<'t>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let cfg = self.cfg;
        let shape = z_t_dense.shape();
        if shape != [cfg.num_patches(), cfg.k, cfg.d] {
            return Err(Error::Contract(format!("spatial input has shape {shape:?}")));
        }
        let p = shape[0];
        let zs = z_t_dense.permute(&[1, 0, 2]).add(self.params.get("spatial.pos"));
        let cls = self.params.get("spatial.cls").reshape(&[cfg.k, 1, cfg.d]);
        let mut x = Var::concat(&[cls, zs], 1);
        for l in 0..cfg.spatial_layers {
            x = self.block(&format!("spatial.{l}"), x, rng.as_deref_mut()).0;
        }
        let x = x.layer_norm(
            self.params.get("spatial.norm.gamma"),
            self.params.get("spatial.norm.beta"),
        );
        let global = x.slice(1, 0, 1).reshape(&[cfg.k, cfg.d]);
        Ok((global, x.slice(1, 1, p)))
    }

    pub fn forward(
        &self,
        series: &Array4<f32>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutputs<'t>> {
        let z = self.patchify(series)?;
        let (z_t_dense, z_t_seq, temporal_attention) =
            self.temporal_forward(z, None, rng.as_deref_mut())?;
        let (z_s_global, z_s_dense) = self.spatial_forward(z_t_dense, rng)?;
        Ok(EncoderOutputs {
            z_t_dense,
            z_t_seq,
            z_s_dense,
            z_s_global,
            temporal_attention,
        })
    }

    /// Pre-norm transformer block over `[B, L, d]`.
    fn block(&self, prefix: &str, x: Var<'t>, mut rng: Option<&mut ChaCha8Rng>) -> (Var<'t>, Rc<Tensor>) {
        let cfg = self.cfg;
        let g = |n: &str| self.params.get(&format!("{prefix}.{n}"));
        let shape = x.shape();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let heads = cfg.heads;
        let dh = d / heads;

        let h = x.layer_norm(g("ln1.gamma"), g("ln1.beta"));
        let qkv = h
            .matmul(g("attn.qkv.weight"))
            .add(g("attn.qkv.bias"))
            .reshape(&[b, l, 3, heads, dh])
            .permute(&[2, 0, 3, 1, 4]);
        let q = qkv.slice(0, 0, 1).reshape(&[b, heads, l, dh]);
        let k = qkv.slice(0, 1, 1).reshape(&[b, heads, l, dh]);
        let v = qkv.slice(0, 2, 1).reshape(&[b, heads, l, dh]);
        let attn = q.bmm(k, true).scale(1.0 / (dh as f64).sqrt()).softmax();
        let attn_value = attn.value();
        let ctx = attn
            .bmm(v, false)
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, l, d])
            .matmul(g("attn.proj.weight"))
            .add(g("attn.proj.bias"));
        let ctx = self.dropout(ctx, rng.as_deref_mut());
        let x = x.add(ctx);

        let h = x.layer_norm(g("ln2.gamma"), g("ln2.beta"));
        let m = h
            .matmul(g("mlp.fc1.weight"))
            .add(g("mlp.fc1.bias"))
            .gelu()
            .matmul(g("mlp.fc2.weight"))
            .add(g("mlp.fc2.bias"));
        let m = self.dropout(m, rng);
        (x.add(m), attn_value)
    }

    fn dropout(&self, x: Var<'t>, rng: Option<&mut ChaCha8Rng>) -> Var<'t> {
        let rate = self.cfg.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask = Tensor::from_shape_simple_fn(IxDyn(&x.shape()), || {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                });
                x.mul(self.tape().constant(mask))
            }
            _ => x,
        }
    }
}

/// `logit_k = w_k . token_k` for `[K, d]` tokens and weights.
pub fn classify_global<'t>(z_s_global: Var<'t>, weights: Var<'t>) -> Var<'t> {
    z_s_global.mul(weights).sum_axis(1)
}
