//! Dataset generation, labels and on-disk layout.

mod labels;
mod manifest;
mod synth;

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4, Ix2, Ix4};
use rayon::prelude::*;

pub use labels::{derive_image_labels, present_classes, DEFAULT_MIN_FRAC};
pub use manifest::{DatasetManifest, ManifestEntry, Split, FORMAT_VERSION, MANIFEST_FILE};
pub use synth::{bump_profiles, generate_sample, SynthConfig, CLOUD_MEAN, CLOUD_STD};

use crate::error::{Error, Result};
use crate::tensor_io::{read_tensor_file, write_tensor_file, TensorData};

/// One multi-spectral time series with its dense mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SitsSample {
    /// `[T, C, H, W]` reflectance-like values.
    pub series: Array4<f32>,
    /// `[H, W]` class indices, 0 = background.
    pub mask: Array2<u16>,
    /// Entry `j` refers to foreground class `j + 1`.
    pub image_labels: Vec<bool>,
    pub sample_id: String,
}

/// Generates `n_samples` samples and writes them with a manifest under `out_dir`.
pub fn synth_dataset(
    config: &SynthConfig,
    n_samples: usize,
    split: Split,
    min_frac: f64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    for sub in ["series", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let samples: Vec<SitsSample> = (0..n_samples)
        .into_par_iter()
        .map(|i| generate_sample(config, split.stream_tag(), i, min_frac))
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(n_samples);
    for s in &samples {
        let entry = ManifestEntry {
            sample_id: s.sample_id.clone(),
            series_path: Path::new("series").join(format!("{}.stsr", s.sample_id)),
            mask_path: Path::new("masks").join(format!("{}.stsr", s.sample_id)),
            image_labels: s.image_labels.clone(),
        };
        write_tensor_file(out_dir.join(&entry.series_path), &TensorData::F32(s.series.clone().into_dyn()))?;
        write_tensor_file(out_dir.join(&entry.mask_path), &TensorData::U16(s.mask.clone().into_dyn()))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        split,
        num_classes: config.k,
        min_frac,
        entries,
        format_version: FORMAT_VERSION,
        root: out_dir.to_path_buf(),
    };
    manifest.write()?;
    Ok(manifest)
}

pub fn read_mask(path: &Path) -> Result<Array2<u16>> {
    read_tensor_file(path)?
        .into_u16()
        .ok_or_else(|| Error::format(path, "mask file must hold u16 data"))?
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::format(path, "mask file must be rank 2"))
}

pub fn write_mask(path: &Path, mask: &Array2<u16>) -> Result<()> {
    write_tensor_file(path, &TensorData::U16(mask.clone().into_dyn()))
}

/// Loads every sample of a manifest and checks label consistency.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<SitsSample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let spath = manifest.resolve(&e.series_path);
            let series = read_tensor_file(&spath)?
                .into_f32()
                .ok_or_else(|| Error::format(&spath, "series file must hold f32 data"))?
                .into_dimensionality::<Ix4>()
                .map_err(|_| Error::format(&spath, "series file must be rank 4"))?;
            let mask = read_mask(&manifest.resolve(&e.mask_path))?;
            if mask.dim() != (series.dim().2, series.dim().3) {
                return Err(Error::Data(format!("{}: mask and series sizes differ", e.sample_id)));
            }
            let derived = derive_image_labels(&mask, manifest.num_classes, manifest.min_frac)?;
            if derived != e.image_labels {
                return Err(Error::Data(format!(
                    "{}: manifest labels disagree with the mask",
                    e.sample_id
                )));
            }
            Ok(SitsSample {
                series,
                mask,
                image_labels: e.image_labels.clone(),
                sample_id: e.sample_id.clone(),
            })
        })
        .collect()
}
