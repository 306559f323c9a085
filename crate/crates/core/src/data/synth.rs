//! Synthetic SITS generator with crop phenology, mixed boundary pixels and
//! cloud anomalies.
//!
//! Each sample is a Voronoi partition of the image into parcels. Parcels are
//! separated by one-pixel background boundaries, so every mask carries
//! background. A crop parcel follows its class phenology (a piecewise-linear
//! bump with a class-specific peak time), a background parcel follows a low
//! flat curve with a weak bump at a random time.

use ndarray::{Array2, Array4};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::labels::derive_image_labels;
use super::SitsSample;
use crate::error::{Error, Result};

/// Intensity distribution that overwrites a cloudy timestep.
pub const CLOUD_MEAN: f64 = 0.9;
pub const CLOUD_STD: f64 = 0.05;

const PROFILE_BASE: f64 = 0.1;
const PROFILE_AMPLITUDE: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub parcels_per_image: usize,
    /// One curve of length `t` per foreground class.
    pub phenology_profiles: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub cloud_prob: f64,
    /// Weight of the 4-neighbour average mixed into every pixel.
    pub boundary_mixing: f64,
    /// Largest per-parcel shift of the phenology peak, in timesteps.
    pub peak_jitter: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Desk-scale benchmark: K=4 crops, T=12, C=4, 16x16 images.
    pub fn desk(seed: u64) -> Self {
        let (t, k) = (12, 4);
        SynthConfig {
            t,
            c: 4,
            h: 16,
            w: 16,
            k,
            parcels_per_image: 6,
            phenology_profiles: bump_profiles(k, t, t as f64 / k as f64),
            noise_std: 0.03,
            cloud_prob: 0.1,
            boundary_mixing: 0.3,
            peak_jitter: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t == 0 || self.c == 0 || self.h == 0 || self.w == 0 || self.k == 0 {
            return bad(format!(
                "dimensions must be positive (T={}, C={}, H={}, W={}, K={})",
                self.t, self.c, self.h, self.w, self.k
            ));
        }
        if self.k >= u16::MAX as usize {
            return bad(format!("class count {} does not fit the mask dtype", self.k));
        }
        if self.parcels_per_image == 0 {
            return bad("parcels_per_image must be at least 1".into());
        }
        if self.phenology_profiles.len() != self.k {
            return bad(format!(
                "expected {} phenology profiles, got {}",
                self.k,
                self.phenology_profiles.len()
            ));
        }
        if let Some(p) = self.phenology_profiles.iter().find(|p| p.len() != self.t) {
            return bad(format!("profile length {} differs from T={}", p.len(), self.t));
        }
        for (a, pa) in self.phenology_profiles.iter().enumerate() {
            for (b, pb) in self.phenology_profiles.iter().enumerate().skip(a + 1) {
                let sep: f64 = pa.iter().zip(pb).map(|(x, y)| (x - y).powi(2)).sum();
                if sep <= 0.0 {
                    return bad(format!("phenology profiles {} and {} coincide", a + 1, b + 1));
                }
            }
        }
        if !(0.0..1.0).contains(&self.cloud_prob) {
            return bad(format!("cloud_prob must lie in [0, 1), got {}", self.cloud_prob));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if !(0.0..=1.0).contains(&self.boundary_mixing) {
            return bad(format!("boundary_mixing must lie in [0, 1], got {}", self.boundary_mixing));
        }
        Ok(())
    }

    pub fn profile_max(&self) -> f64 {
        self.phenology_profiles
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Piecewise-linear bumps with evenly spaced peaks.
pub fn bump_profiles(k: usize, t: usize, half_width: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|j| {
            let peak = (j as f64 + 0.5) * t as f64 / k as f64 - 0.5;
            (0..t)
                .map(|s| PROFILE_BASE + PROFILE_AMPLITUDE * bump(s as f64, peak, half_width))
                .collect()
        })
        .collect()
}

fn bump(t: f64, peak: f64, half_width: f64) -> f64 {
    (1.0 - (t - peak).abs() / half_width).max(0.0)
}

/// Stream ids keep the train and test splits independent of each other.
fn stream_id(split_tag: u64, index: usize) -> u64 {
    (split_tag << 40) | index as u64
}

/// Generates one sample. Output depends only on `(config, split_tag, index)`.
pub fn generate_sample(
    config: &SynthConfig,
    split_tag: u64,
    index: usize,
    min_frac: f64,
) -> Result<SitsSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream_id(split_tag, index));

    let (t_len, c_len, h, w, k) = (config.t, config.c, config.h, config.w, config.k);

    // Parcel layout.
    let seeds: Vec<(f64, f64)> = (0..config.parcels_per_image)
        .map(|_| (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64))
        .collect();
    let cell = Array2::from_shape_fn((h, w), |(y, x)| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        seeds
            .iter()
            .enumerate()
            .map(|(i, (sy, sx))| (i, (py - sy).powi(2) + (px - sx).powi(2)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0
    });

    // Classes present in this image, then one class per parcel.
    let max_present = k.min(3);
    let n_present = rng.random_range(1..=max_present);
    let chosen: Vec<usize> = {
        let mut v: Vec<usize> = sample_indices(&mut rng, k, n_present)
            .into_iter()
            .map(|j| j + 1)
            .collect();
        v.sort_unstable();
        v
    };
    let parcel_class: Vec<usize> = (0..config.parcels_per_image)
        .map(|_| {
            if rng.random::<f64>() < 0.25 {
                0
            } else {
                chosen[rng.random_range(0..chosen.len())]
            }
        })
        .collect();

    let mut mask = Array2::<u16>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let c = cell[[y, x]];
            let boundary = (x + 1 < w && cell[[y, x + 1]] != c) || (y + 1 < h && cell[[y + 1, x]] != c);
            mask[[y, x]] = if boundary { 0 } else { parcel_class[c] as u16 };
        }
    }
    if mask.iter().all(|&v| v != 0) {
        mask.row_mut(h - 1).fill(0);
    }

    // Per-parcel temporal curves.
    let jitter = config.peak_jitter as i64;
    let parcel_curves: Vec<Vec<f64>> = parcel_class
        .iter()
        .map(|&cls| {
            if cls == 0 {
                background_curve(&mut rng, t_len)
            } else {
                let shift = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
                let scale = rng.random_range(0.85..=1.0);
                let base = &config.phenology_profiles[cls - 1];
                let floor = base.iter().copied().fold(f64::INFINITY, f64::min);
                (0..t_len as i64)
                    .map(|s| {
                        let src = (s - shift).clamp(0, t_len as i64 - 1) as usize;
                        floor + scale * (base[src] - floor)
                    })
                    .collect()
            }
        })
        .collect();
    let boundary_curve = vec![0.2; t_len];

    // Clean field [T x H x W], then mixed with the 4-neighbourhood.
    let mut field = ndarray::Array3::<f64>::zeros((t_len, h, w));
    for y in 0..h {
        for x in 0..w {
            let curve = if mask[[y, x]] == 0 && parcel_class[cell[[y, x]]] != 0 {
                &boundary_curve
            } else {
                &parcel_curves[cell[[y, x]]]
            };
            for s in 0..t_len {
                field[[s, y, x]] = curve[s];
            }
        }
    }
    if config.boundary_mixing > 0.0 {
        let clean = field.clone();
        let m = config.boundary_mixing;
        for s in 0..t_len {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                            acc += clean[[s, ny as usize, nx as usize]];
                            n += 1.0;
                        }
                    }
                    field[[s, y, x]] = (1.0 - m) * clean[[s, y, x]] + m * acc / n;
                }
            }
        }
    }

    // Channels are attenuated copies of the field plus sensor noise.
    let noise = Normal::new(0.0, config.noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let cloud = Normal::new(CLOUD_MEAN, CLOUD_STD).unwrap();
    let mut series = Array4::<f32>::zeros((t_len, c_len, h, w));
    for s in 0..t_len {
        let cloudy = rng.random::<f64>() < config.cloud_prob;
        for c in 0..c_len {
            let gain = 1.0 - 0.1 * c as f64 / c_len.max(1) as f64;
            for y in 0..h {
                for x in 0..w {
                    let v = if cloudy {
                        cloud.sample(&mut rng)
                    } else {
                        let n = if config.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        field[[s, y, x]] * gain + n
                    };
                    series[[s, c, y, x]] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    let image_labels = derive_image_labels(&mask, k, min_frac)?;
    Ok(SitsSample {
        series,
        mask,
        image_labels,
        sample_id: format!("s{index:05}"),
    })
}

fn background_curve(rng: &mut ChaCha8Rng, t_len: usize) -> Vec<f64> {
    let level = rng.random_range(0.12..0.3);
    let peak = rng.random::<f64>() * t_len as f64;
    let amp = rng.random_range(0.0..0.15);
    (0..t_len)
        .map(|s| level + amp * bump(s as f64, peak, 2.0))
        .collect()
}
