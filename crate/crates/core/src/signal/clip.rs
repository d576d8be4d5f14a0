use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value written for clips without a class.
pub const UNLABELED: u8 = u8::MAX;

/// A fixed-length multichannel clip, channel-major (`channels x samples`).
#[derive(Clone, Debug, PartialEq)]
pub struct RecordingClip {
    pub channels: usize,
    pub sample_rate: u32,
    pub clip_seconds: u32,
    pub samples: Vec<f32>,
    pub label: Option<u8>,
}

impl RecordingClip {
    pub fn new(
        channels: usize,
        sample_rate: u32,
        clip_seconds: u32,
        samples: Vec<f32>,
        label: Option<u8>,
    ) -> Result<Self> {
        let clip = RecordingClip {
            channels,
            sample_rate,
            clip_seconds,
            samples,
            label,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn samples_per_channel(&self) -> usize {
        self.sample_rate as usize * self.clip_seconds as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::data("clip has no channels"));
        }
        if self.samples.len() != self.channels * self.samples_per_channel() {
            return Err(Error::data(format!(
                "clip holds {} samples, expected {} channels x {} Hz x {} s",
                self.samples.len(),
                self.channels,
                self.sample_rate,
                self.clip_seconds
            )));
        }
        if self.label == Some(UNLABELED) {
            return Err(Error::data("label 255 is reserved for unlabeled clips"));
        }
        Ok(())
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let s = self.samples_per_channel();
        &self.samples[c * s..(c + 1) * s]
    }
}

/// Splits a long `channels x total` recording into non-overlapping clips.
///
/// Clips are left-aligned; a trailing remainder shorter than one clip is
/// dropped. A recording shorter than one clip yields no clips.
pub fn segment_clips(
    recording: &[f32],
    channels: usize,
    sample_rate: u32,
    clip_seconds: u32,
    label: Option<u8>,
) -> Result<Vec<RecordingClip>> {
    if channels == 0 || !recording.len().is_multiple_of(channels) {
        return Err(Error::data(format!(
            "{} samples do not divide into {channels} channels",
            recording.len()
        )));
    }
    let total = recording.len() / channels;
    let per_clip = sample_rate as usize * clip_seconds as usize;
    if per_clip == 0 {
        return Err(Error::config("clip length must be positive"));
    }
    let n_clips = total / per_clip;
    if n_clips == 0 {
        log::warn!("recording of {total} samples is shorter than one {per_clip}-sample clip");
        return Ok(Vec::new());
    }
    let discarded = total - n_clips * per_clip;
    if discarded > 0 {
        log::debug!("discarding {discarded} trailing samples per channel");
    }
    (0..n_clips)
        .map(|k| {
            let mut samples = Vec::with_capacity(channels * per_clip);
            for c in 0..channels {
                let start = c * total + k * per_clip;
                samples.extend_from_slice(&recording[start..start + per_clip]);
            }
            RecordingClip::new(channels, sample_rate, clip_seconds, samples, label)
        })
        .collect()
}

/// Ground-truth directed graphs, one `n x n` boolean matrix per window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSequence {
    pub windows: usize,
    pub nodes: usize,
    pub edges: Vec<bool>,
}

impl GraphSequence {
    pub fn empty(windows: usize, nodes: usize) -> Self {
        GraphSequence {
            windows,
            nodes,
            edges: vec![false; windows * nodes * nodes],
        }
    }

    pub fn get(&self, t: usize, i: usize, j: usize) -> bool {
        self.edges[(t * self.nodes + i) * self.nodes + j]
    }

    pub fn set(&mut self, t: usize, i: usize, j: usize, v: bool) {
        self.edges[(t * self.nodes + i) * self.nodes + j] = v;
    }

    pub fn window(&self, t: usize) -> &[bool] {
        let n2 = self.nodes * self.nodes;
        &self.edges[t * n2..(t + 1) * n2]
    }

    /// Fraction of the `n(n-1)` off-diagonal slots present in window `t`.
    pub fn density(&self, t: usize) -> f64 {
        let n = self.nodes;
        let count = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.get(t, i, j))
            .count();
        count as f64 / (n * (n - 1)) as f64
    }

    pub fn max_row_degree(&self) -> usize {
        let n = self.nodes;
        (0..self.windows)
            .flat_map(|t| (0..n).map(move |i| (t, i)))
            .map(|(t, i)| (0..n).filter(|&j| j != i && self.get(t, i, j)).count())
            .max()
            .unwrap_or(0)
    }
}
