//! Named-tensor checkpoint directories.
//!
//! A checkpoint is a directory holding `checkpoint.toml` (version, kind,
//! optional model configuration, free-form metadata and the list of tensors
//! with their shapes) and one tensor file per entry.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::clues::PrototypeBank;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor_io::{read_tensor_file, write_tensor_file, TensorData};

pub const CHECKPOINT_FILE: &str = "checkpoint.toml";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const BANK_DIR: &str = "bank";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    #[serde(default)]
    tensor: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub model: Option<ModelConfig>,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn write_container(dir: &Path, container: &Container) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(container.tensors.len());
    for (i, (name, t)) in container.tensors.iter().enumerate() {
        let file = format!("t{i:04}.stsr");
        write_tensor_file(dir.join(&file), &TensorData::F64(t.clone()))?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        kind: container.kind.clone(),
        model: container.model.clone(),
        meta: container.meta.clone(),
        tensor: entries,
    };
    let text = toml::to_string(&header)
        .map_err(|e| Error::Config(format!("cannot serialize checkpoint header: {e}")))?;
    let path = dir.join(CHECKPOINT_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_container(dir: &Path, expected_kind: &str) -> Result<Container> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: Header =
        toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint version {}", header.format_version),
        ));
    }
    if header.kind != expected_kind {
        return Err(Error::format(
            &path,
            format!("expected a {expected_kind} checkpoint, found {}", header.kind),
        ));
    }
    let mut tensors = Vec::with_capacity(header.tensor.len());
    for entry in &header.tensor {
        let tpath = dir.join(&entry.file);
        let t = read_tensor_file(&tpath)?
            .into_f64()
            .ok_or_else(|| Error::format(&tpath, "checkpoint tensors must be f64"))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::format(
                &tpath,
                format!("shape {:?} disagrees with manifest {:?}", t.shape(), entry.shape),
            ));
        }
        tensors.push((entry.name.clone(), t));
    }
    Ok(Container {
        kind: header.kind,
        model: header.model,
        meta: header.meta,
        tensors,
    })
}

pub fn save_model(dir: &Path, kind: &str, cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    write_container(
        dir,
        &Container {
            kind: kind.to_string(),
            model: Some(cfg.clone()),
            meta: BTreeMap::new(),
            tensors: params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        },
    )
}

pub fn load_model(dir: &Path, kind: &str) -> Result<(ModelConfig, ParamStore)> {
    let c = read_container(dir, kind)?;
    let cfg = c
        .model
        .ok_or_else(|| Error::format(dir.join(CHECKPOINT_FILE), "missing model configuration"))?;
    let mut params = ParamStore::new();
    for (n, t) in c.tensors {
        params.insert(n, t);
    }
    Ok((cfg, params))
}

pub fn save_bank(dir: &Path, bank: &PrototypeBank) -> Result<()> {
    write_container(
        dir,
        &Container {
            kind: "prototype_bank".into(),
            model: None,
            meta: BTreeMap::new(),
            tensors: bank.to_named(),
        },
    )
}

/// Loads the bank stored under `checkpoint_dir/bank`.
pub fn load_bank(checkpoint_dir: &Path) -> Result<PrototypeBank> {
    let dir = checkpoint_dir.join(BANK_DIR);
    if !dir.join(CHECKPOINT_FILE).is_file() {
        return Err(Error::Generation(format!(
            "prototype bank missing under {}",
            checkpoint_dir.display()
        )));
    }
    PrototypeBank::from_named(&read_container(&dir, "prototype_bank")?.tensors)
}

/// SHA-256 over every regular file of a directory tree, in sorted path order.
pub fn directory_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    Ok(())
}
