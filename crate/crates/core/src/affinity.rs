//! Temporal-to-class attention, temporal-aware pairwise affinity over the
//! patch grid and affinity propagation of CAMs.

use std::rc::Rc;

use ndarray::{s, Array2, Array3, ArrayView1, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};

const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLayer {
    #[default]
    Last,
    Mean,
}

/// How the temperature of a pixel's affinities is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Standard deviation of the entries of the pixel's own vector.
    #[default]
    VectorStd,
    /// Standard deviation of the cosine similarities to its neighbours.
    NeighborStd,
}

/// Feature space the affinities are measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AffinitySource {
    #[default]
    Temporal,
    /// Raw patch reflectances, shared by all classes.
    LowLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffinityConfig {
    pub iters: usize,
    pub layer: AttentionLayer,
    pub sigma: SigmaMode,
    pub source: AffinitySource,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        AffinityConfig {
            iters: 3,
            layer: AttentionLayer::Last,
            sigma: SigmaMode::VectorStd,
            source: AffinitySource::Temporal,
        }
    }
}

/// `[T, K]` attention of each class token over timesteps; columns sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalClassAttention {
    pub a_tilde: Array2<f64>,
}

/// Class-query/timestep-key attention averaged over heads and positions,
/// then softmaxed over time for each class.
///
/// `stack` holds per-layer attention maps `[P, heads, K+T, K+T]` with the
/// class tokens first.
pub fn extract_t2c_attention(
    stack: &[Rc<Tensor>],
    k: usize,
    layer: AttentionLayer,
) -> Result<TemporalClassAttention> {
    let first = stack
        .first()
        .ok_or_else(|| Error::Contract("no temporal attention maps".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 4 || shape[2] != shape[3] || shape[2] <= k {
        return Err(Error::Contract(format!(
            "attention map shape {shape:?} does not hold {k} class tokens"
        )));
    }
    let t = shape[2] - k;
    let layers: Vec<&Rc<Tensor>> = match layer {
        AttentionLayer::Last => vec![stack.last().unwrap()],
        AttentionLayer::Mean => stack.iter().collect(),
    };
    let mut raw = Array2::<f64>::zeros((k, t));
    for a in &layers {
        if a.shape() != shape.as_slice() {
            return Err(Error::Contract("attention maps differ in shape across layers".into()));
        }
        let block = a.slice(s![.., .., ..k, k..]);
        let mean = block.mean_axis(Axis(0)).unwrap().mean_axis(Axis(0)).unwrap();
        raw += &mean;
    }
    raw /= layers.len() as f64;
    let mut a_tilde = raw.reversed_axes().as_standard_layout().to_owned();
    for mut col in a_tilde.columns_mut() {
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - m).exp());
        let z = col.sum();
        col.mapv_inplace(|v| v / z);
    }
    Ok(TemporalClassAttention { a_tilde })
}

/// `v[k, i, :] = sum_t a_tilde[t, k] * z_t_seq[i, t, :]`, returned `[K, P, d]`.
pub fn reweight(z_t_seq: &Array3<f64>, attn: &TemporalClassAttention) -> Result<Array3<f64>> {
    let (p, t, d) = z_t_seq.dim();
    let (ta, k) = attn.a_tilde.dim();
    if ta != t {
        return Err(Error::Contract(format!(
            "attention covers {ta} timesteps but embeddings have {t}"
        )));
    }
    let mut v = Array3::<f64>::zeros((k, p, d));
    for c in 0..k {
        for i in 0..p {
            let mut out = v.slice_mut(s![c, i, ..]);
            for tt in 0..t {
                out.scaled_add(attn.a_tilde[[tt, c]], &z_t_seq.slice(s![i, tt, ..]));
            }
        }
    }
    Ok(v)
}

/// Flattened raw patch vectors `[P, T * F]` from patches `[P, T, F]`.
pub fn low_level_features(patches: &Array3<f64>) -> Array2<f64> {
    let (p, t, f) = patches.dim();
    patches
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((p, t * f))
        .unwrap()
}

/// Sparse 8-neighbour affinities on an `nh x nw` grid. Stored as logits
/// `cos(v_i, v_j) / sigma_i`; the affinity itself is their exponential.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinity {
    pub nh: usize,
    pub nw: usize,
    pub sigma: Vec<f64>,
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

impl Affinity {
    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.neighbors[i]
            .iter()
            .find(|(n, _)| *n == j)
            .map(|(_, logit)| logit.exp())
    }
}

pub fn neighbors8(i: usize, nh: usize, nw: usize) -> impl Iterator<Item = usize> {
    let (y, x) = ((i / nw) as isize, (i % nw) as isize);
    (-1isize..=1)
        .flat_map(move |dy| (-1isize..=1).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy != 0 || dx != 0)
        .filter_map(move |(dy, dx)| {
            let (ny, nx) = (y + dy, x + dx);
            (ny >= 0 && nx >= 0 && (ny as usize) < nh && (nx as usize) < nw)
                .then(|| ny as usize * nw + nx as usize)
        })
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

fn std_dev(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

pub fn pairwise_affinity(v: &Array2<f64>, nh: usize, nw: usize, sigma: SigmaMode) -> Result<Affinity> {
    let p = v.nrows();
    if p != nh * nw {
        return Err(Error::Contract(format!("{p} vectors do not fill a {nh}x{nw} grid")));
    }
    let mut sigmas = Vec::with_capacity(p);
    let mut neighbors = Vec::with_capacity(p);
    for i in 0..p {
        let cos: Vec<(usize, f64)> = neighbors8(i, nh, nw)
            .map(|j| (j, cosine(v.row(i), v.row(j))))
            .collect();
        let s = match sigma {
            SigmaMode::VectorStd => std_dev(v.row(i).iter().copied()),
            SigmaMode::NeighborStd => std_dev(cos.iter().map(|c| c.1)),
        }
        .max(SIGMA_FLOOR);
        sigmas.push(s);
        neighbors.push(cos.into_iter().map(|(j, c)| (j, c / s)).collect());
    }
    Ok(Affinity {
        nh,
        nw,
        sigma: sigmas,
        neighbors,
    })
}

/// Iterated neighbour averaging of one CAM channel, weighted by affinity.
pub fn propagate_channel(m: &[f64], aff: &Affinity, iters: usize) -> Result<Vec<f64>> {
    if iters == 0 {
        return Err(Error::Config("propagation needs at least one iteration".into()));
    }
    if m.len() != aff.neighbors.len() {
        return Err(Error::Contract("cam and affinity cover different grids".into()));
    }
    let mut cur = m.to_vec();
    for _ in 0..iters {
        let next = aff
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                if nb.is_empty() {
                    return cur[i];
                }
                let top = nb.iter().map(|n| n.1).fold(f64::NEG_INFINITY, f64::max);
                let (mut num, mut den) = (0.0, 0.0);
                for &(j, logit) in nb {
                    let w = (logit - top).exp();
                    num += w * cur[j];
                    den += w;
                }
                num / den
            })
            .collect();
        cur = next;
    }
    Ok(cur)
}

/// Propagates every channel of `cam` `[P, K]` with its own affinity.
pub fn propagate(cam: &Array2<f64>, affinities: &[Affinity], iters: usize) -> Result<Array2<f64>> {
    let (p, k) = cam.dim();
    if affinities.len() != k && affinities.len() != 1 {
        return Err(Error::Contract(format!(
            "{} affinities for {k} cam channels",
            affinities.len()
        )));
    }
    let mut out = Array2::<f64>::zeros((p, k));
    for c in 0..k {
        let aff = &affinities[if affinities.len() == 1 { 0 } else { c }];
        let channel: Vec<f64> = cam.column(c).to_vec();
        let refined = propagate_channel(&channel, aff, iters)?;
        out.column_mut(c).assign(&ndarray::Array1::from(refined));
    }
    Ok(out)
}

/// Full refinement: attention extraction, reweighting, affinities and
/// propagation. `patches` is needed only for the low-level source.
pub fn refine_cam(
    cam: &Array2<f64>,
    z_t_seq: &Array3<f64>,
    attention: &[Rc<Tensor>],
    patches: Option<&Array3<f64>>,
    grid: (usize, usize),
    cfg: &AffinityConfig,
) -> Result<(TemporalClassAttention, Array2<f64>)> {
    let k = cam.ncols();
    let attn = extract_t2c_attention(attention, k, cfg.layer)?;
    let (nh, nw) = grid;
    let affinities = match cfg.source {
        AffinitySource::Temporal => {
            let v = reweight(z_t_seq, &attn)?;
            v.outer_iter()
                .map(|vk| pairwise_affinity(&vk.to_owned(), nh, nw, cfg.sigma))
                .collect::<Result<Vec<_>>>()?
        }
        AffinitySource::LowLevel => {
            let patches = patches
                .ok_or_else(|| Error::Contract("low-level affinity needs the raw patches".into()))?;
            vec![pairwise_affinity(&low_level_features(patches), nh, nw, cfg.sigma)?]
        }
    };
    let refined = propagate(cam, &affinities, cfg.iters)?;
    Ok((attn, refined))
}

/// Sum over present classes of the mean absolute gap between the CAM `m`
/// `[P, K]` and its constant refinement `m_tilde`.
pub fn tap_loss<'t>(m: Var<'t>, m_tilde: &Array2<f64>, image_labels: &[bool]) -> Result<Var<'t>> {
    let value = m.value();
    let shape = value.shape();
    if shape != [m_tilde.nrows(), m_tilde.ncols()] || image_labels.len() != m_tilde.ncols() {
        return Err(Error::Contract(format!(
            "tap_loss shapes disagree: cam {shape:?}, target {:?}, labels {}",
            m_tilde.dim(),
            image_labels.len()
        )));
    }
    let (p, k) = m_tilde.dim();
    let mut grad = Tensor::zeros(IxDyn(&[p, k]));
    let mut total = 0.0;
    for c in 0..k {
        if !image_labels[c] {
            continue;
        }
        for i in 0..p {
            let diff = m_tilde[[i, c]] - value[[i, c]];
            total += diff.abs() / p as f64;
            if diff != 0.0 {
                grad[[i, c]] = -diff.signum() / p as f64;
            }
        }
    }
    Ok(m.tape().scalar_fn(m, total, grad))
}
