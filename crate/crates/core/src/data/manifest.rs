//! Plain-text dataset manifest.
//!
//! ```text
//! format_version = 1
//! split = train
//! classes = 4
//! min_frac = 0.01
//! entry = s00000 series/s00000.stsr masks/s00000.stsr 1,3
//! ```
//!
//! Paths are relative to the manifest's directory. Labels list the 1-based
//! foreground classes that are present; `-` marks an empty list.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Random-stream tag used by the generator.
    pub fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub series_path: PathBuf,
    pub mask_path: PathBuf,
    pub image_labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub num_classes: usize,
    pub min_frac: f64,
    pub entries: Vec<ManifestEntry>,
    pub format_version: u32,
    /// Directory the relative paths resolve against. Not serialized.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "format_version = {}", self.format_version).unwrap();
        writeln!(out, "split = {}", self.split.as_str()).unwrap();
        writeln!(out, "classes = {}", self.num_classes).unwrap();
        writeln!(out, "min_frac = {}", self.min_frac).unwrap();
        for e in &self.entries {
            let labels: Vec<String> = e
                .image_labels
                .iter()
                .enumerate()
                .filter(|(_, on)| **on)
                .map(|(j, _)| (j + 1).to_string())
                .collect();
            let labels = if labels.is_empty() { "-".to_string() } else { labels.join(",") };
            writeln!(
                out,
                "entry = {} {} {} {}",
                e.sample_id,
                e.series_path.display(),
                e.mask_path.display(),
                labels
            )
            .unwrap();
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let err = |line: usize, m: &str| Error::format(root.join(MANIFEST_FILE), format!("line {line}: {m}"));
        let mut version = None;
        let mut split = None;
        let mut classes = None;
        let mut min_frac = None;
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(n + 1, "expected 'key = value'"))?;
            match key {
                "format_version" => {
                    version = Some(value.parse::<u32>().map_err(|e| err(n + 1, &e.to_string()))?)
                }
                "split" => split = Some(value.parse::<Split>().map_err(|e| err(n + 1, &e.to_string()))?),
                "classes" => {
                    classes = Some(value.parse::<usize>().map_err(|e| err(n + 1, &e.to_string()))?)
                }
                "min_frac" => {
                    min_frac = Some(value.parse::<f64>().map_err(|e| err(n + 1, &e.to_string()))?)
                }
                "entry" => {
                    let k = classes.ok_or_else(|| err(n + 1, "'classes' must precede entries"))?;
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 4 {
                        return Err(err(n + 1, "entry needs id, series path, mask path and labels"));
                    }
                    let mut labels = vec![false; k];
                    if parts[3] != "-" {
                        for tok in parts[3].split(',') {
                            let c: usize = tok.parse().map_err(|_| err(n + 1, "bad label index"))?;
                            if c == 0 || c > k {
                                return Err(err(n + 1, &format!("label {c} outside 1..={k}")));
                            }
                            labels[c - 1] = true;
                        }
                    }
                    entries.push(ManifestEntry {
                        sample_id: parts[0].to_string(),
                        series_path: PathBuf::from(parts[1]),
                        mask_path: PathBuf::from(parts[2]),
                        image_labels: labels,
                    });
                }
                other => return Err(err(n + 1, &format!("unknown key '{other}'"))),
            }
        }
        let format_version = version.ok_or_else(|| err(0, "missing format_version"))?;
        if format_version != FORMAT_VERSION {
            return Err(err(0, &format!("unsupported format_version {format_version}")));
        }
        Ok(DatasetManifest {
            split: split.ok_or_else(|| err(0, "missing split"))?,
            num_classes: classes.ok_or_else(|| err(0, "missing classes"))?,
            min_frac: min_frac.unwrap_or(super::labels::DEFAULT_MIN_FRAC),
            entries,
            format_version,
            root,
        })
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads `dir/manifest.txt`, or the file itself if `path` names one.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Self::parse(&text, root)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }
}
