use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{window_count, GraphSequence, RecordingClip, UNLABELED};
use crate::error::{Error, Result};
use crate::io::{read_blob_f32, read_blob_u8, write_blob, Payload};

pub const MANIFEST_VERSION: u32 = 1;
const SIGNALS_FILE: &str = "signals.bin";
const LABELS_FILE: &str = "labels.bin";
const PLANTED_FILE: &str = "planted.bin";

/// A collection of equally shaped clips plus optional planted graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub sample_rate: u32,
    pub clip_seconds: u32,
    pub window_seconds: f64,
    pub class_names: Vec<String>,
    pub seed: Option<u64>,
    pub clips: Vec<RecordingClip>,
    pub planted: Option<Vec<GraphSequence>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub dtype: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "N")]
    pub channels: usize,
    pub sample_rate: u32,
    pub clip_seconds: u32,
    pub window_seconds: f64,
    pub class_names: Vec<String>,
    /// Clips per class, indexed like `class_names`; unlabeled clips are not counted.
    pub counts: Vec<usize>,
    pub clips: usize,
    pub seed: Option<u64>,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        sample_rate: u32,
        clip_seconds: u32,
        window_seconds: f64,
        class_names: Vec<String>,
        seed: Option<u64>,
        clips: Vec<RecordingClip>,
        planted: Option<Vec<GraphSequence>>,
    ) -> Result<Self> {
        let ds = Dataset {
            channels,
            sample_rate,
            clip_seconds,
            window_seconds,
            class_names,
            seed,
            clips,
            planted,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn windows(&self) -> Result<usize> {
        window_count(self.clip_seconds, self.window_seconds)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.windows()?;
        for (i, c) in self.clips.iter().enumerate() {
            if c.channels != self.channels
                || c.sample_rate != self.sample_rate
                || c.clip_seconds != self.clip_seconds
            {
                return Err(Error::data(format!(
                    "clip {i} does not match the dataset shape"
                )));
            }
            c.validate()?;
            if let Some(y) = c.label {
                if y as usize >= self.class_names.len() {
                    return Err(Error::data(format!(
                        "clip {i} has label {y} but only {} classes",
                        self.class_names.len()
                    )));
                }
            }
        }
        if let Some(planted) = &self.planted {
            if planted.len() != self.clips.len() {
                return Err(Error::data("one planted graph sequence per clip required"));
            }
            if planted
                .iter()
                .any(|g| g.windows != t || g.nodes != self.channels)
            {
                return Err(Error::data(
                    "planted graphs do not match windows x channels",
                ));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Option<Vec<u8>> {
        self.clips.iter().map(|c| c.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for y in self.clips.iter().filter_map(|c| c.label) {
            counts[y as usize] += 1;
        }
        counts
    }

    /// A new dataset holding the clips at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            clips: indices.iter().map(|&i| self.clips[i].clone()).collect(),
            planted: self
                .planted
                .as_ref()
                .map(|p| indices.iter().map(|&i| p[i].clone()).collect()),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            channels: self.channels,
            sample_rate: self.sample_rate,
            clip_seconds: self.clip_seconds,
            window_seconds: self.window_seconds,
            class_names: self.class_names.clone(),
            seed: self.seed,
            clips: Vec::new(),
            planted: None,
        }
    }

    fn manifest(&self) -> Result<Manifest> {
        let s = self.sample_rate as usize * self.clip_seconds as usize;
        let mut arrays = BTreeMap::new();
        arrays.insert(
            "signals".to_string(),
            ArrayEntry {
                file: SIGNALS_FILE.into(),
                dtype: "f32".into(),
                dims: vec![self.clips.len(), self.channels, s],
            },
        );
        arrays.insert(
            "labels".to_string(),
            ArrayEntry {
                file: LABELS_FILE.into(),
                dtype: "u8".into(),
                dims: vec![self.clips.len()],
            },
        );
        if self.planted.is_some() {
            let t = self.windows()?;
            arrays.insert(
                "planted".to_string(),
                ArrayEntry {
                    file: PLANTED_FILE.into(),
                    dtype: "u8".into(),
                    dims: vec![self.clips.len(), t, self.channels, self.channels],
                },
            );
        }
        Ok(Manifest {
            version: MANIFEST_VERSION,
            channels: self.channels,
            sample_rate: self.sample_rate,
            clip_seconds: self.clip_seconds,
            window_seconds: self.window_seconds,
            class_names: self.class_names.clone(),
            counts: self.class_counts(),
            clips: self.clips.len(),
            seed: self.seed,
            arrays,
        })
    }
}

/// Writes `dataset` as a directory: `manifest.json` plus one blob per array.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    std::fs::create_dir_all(dir)?;
    let manifest = dataset.manifest()?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join("manifest.json"), json)?;

    let signals: Vec<f32> = dataset
        .clips
        .iter()
        .flat_map(|c| c.samples.iter().copied())
        .collect();
    write_blob(
        &dir.join(SIGNALS_FILE),
        &manifest.arrays["signals"].dims,
        Payload::F32(&signals),
    )?;
    let labels: Vec<u8> = dataset
        .clips
        .iter()
        .map(|c| c.label.unwrap_or(UNLABELED))
        .collect();
    write_blob(
        &dir.join(LABELS_FILE),
        &[labels.len()],
        Payload::U8(&labels),
    )?;
    if let Some(planted) = &dataset.planted {
        let bytes: Vec<u8> = planted
            .iter()
            .flat_map(|g| g.edges.iter().map(|&e| e as u8))
            .collect();
        write_blob(
            &dir.join(PLANTED_FILE),
            &manifest.arrays["planted"].dims,
            Payload::U8(&bytes),
        )?;
    } else {
        let stale = dir.join(PLANTED_FILE);
        if stale.exists() {
            std::fs::remove_file(stale)?;
        }
    }
    Ok(())
}

fn dims_error(path: &Path, expected: &[usize], got: &[usize]) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: 8,
        reason: format!("dims {got:?} disagree with manifest {expected:?}"),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        offset: 0,
        reason: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            path,
            offset: 0,
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let entry = |name: &str| {
        manifest.arrays.get(name).ok_or_else(|| Error::Format {
            path: dir.join("manifest.json"),
            offset: 0,
            reason: format!("manifest lacks the `{name}` array"),
        })
    };

    let sig = entry("signals")?;
    let sig_path = dir.join(&sig.file);
    let (dims, values) = read_blob_f32(&sig_path)?;
    let s = manifest.sample_rate as usize * manifest.clip_seconds as usize;
    let expected = [manifest.clips, manifest.channels, s];
    if dims != expected || sig.dims != expected {
        return Err(dims_error(&sig_path, &expected, &dims));
    }

    let lab = entry("labels")?;
    let lab_path = dir.join(&lab.file);
    let (ldims, labels) = read_blob_u8(&lab_path)?;
    if ldims != [manifest.clips] {
        return Err(dims_error(&lab_path, &[manifest.clips], &ldims));
    }

    let per_clip = manifest.channels * s;
    let clips = (0..manifest.clips)
        .map(|i| {
            let label = (labels[i] != UNLABELED).then_some(labels[i]);
            RecordingClip::new(
                manifest.channels,
                manifest.sample_rate,
                manifest.clip_seconds,
                values[i * per_clip..(i + 1) * per_clip].to_vec(),
                label,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let planted = match manifest.arrays.get("planted") {
        None => None,
        Some(p) => {
            let path = dir.join(&p.file);
            let (pdims, bytes) = read_blob_u8(&path)?;
            let t = window_count(manifest.clip_seconds, manifest.window_seconds)?;
            let n = manifest.channels;
            let expected = [manifest.clips, t, n, n];
            if pdims != expected {
                return Err(dims_error(&path, &expected, &pdims));
            }
            if let Some(pos) = bytes.iter().position(|&b| b > 1) {
                return Err(Error::Format {
                    path,
                    offset: (pos + 8 + 4 * (1 + pdims.len())) as u64,
                    reason: "boolean graph entry is neither 0 nor 1".into(),
                });
            }
            let stride = t * n * n;
            Some(
                bytes
                    .chunks_exact(stride)
                    .map(|c| GraphSequence {
                        windows: t,
                        nodes: n,
                        edges: c.iter().map(|&b| b == 1).collect(),
                    })
                    .collect(),
            )
        }
    };

    Dataset::new(
        manifest.channels,
        manifest.sample_rate,
        manifest.clip_seconds,
        manifest.window_seconds,
        manifest.class_names,
        manifest.seed,
        clips,
        planted,
    )
}
