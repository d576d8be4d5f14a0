use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::RecordingClip;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Window shape applied before the transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Taper {
    #[default]
    Rectangular,
    Hann,
}

/// Per-window, per-channel spectral features: `windows x nodes x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedFeatures {
    pub windows: usize,
    pub nodes: usize,
    pub dim: usize,
    pub window_seconds: f64,
    pub values: Vec<f64>,
}

impl WindowedFeatures {
    pub fn new(
        windows: usize,
        nodes: usize,
        dim: usize,
        window_seconds: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != windows * nodes * dim {
            return Err(Error::Shape {
                op: "windowed_features",
                lhs: vec![windows, nodes, dim],
                rhs: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite feature value"));
        }
        Ok(WindowedFeatures {
            windows,
            nodes,
            dim,
            window_seconds,
            values,
        })
    }

    /// Row-major `nodes x dim` slice for window `t`.
    pub fn window(&self, t: usize) -> &[f64] {
        let k = self.nodes * self.dim;
        &self.values[t * k..(t + 1) * k]
    }

    pub fn window_tensor(&self, t: usize) -> Tensor {
        Tensor::matrix(self.nodes, self.dim, self.window(t).to_vec()).expect("sized")
    }

    pub fn node(&self, t: usize, i: usize) -> &[f64] {
        let start = (t * self.nodes + i) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Applies the channel relabeling `perm` (new node `i` is old `perm[i]`).
    pub fn permute_nodes(&self, perm: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for t in 0..self.windows {
            for &src in perm {
                values.extend_from_slice(self.node(t, src));
            }
        }
        WindowedFeatures {
            values,
            ..self.clone()
        }
    }
}

/// Number of windows per clip; the ratio must be integral.
pub fn window_count(clip_seconds: u32, window_seconds: f64) -> Result<usize> {
    if !(window_seconds > 0.0) {
        return Err(Error::config(format!(
            "window length {window_seconds} s must be positive"
        )));
    }
    let ratio = clip_seconds as f64 / window_seconds;
    let t = ratio.round();
    if (ratio - t).abs() > 1e-9 || t < 1.0 {
        return Err(Error::config(format!(
            "{clip_seconds} s clips do not split into whole {window_seconds} s windows"
        )));
    }
    Ok(t as usize)
}

/// Samples per window; must be a whole number of at least two.
pub fn window_samples(sample_rate: u32, window_seconds: f64) -> Result<usize> {
    let s = sample_rate as f64 * window_seconds;
    let r = s.round();
    if (s - r).abs() > 1e-9 || r < 2.0 {
        return Err(Error::config(format!(
            "{window_seconds} s at {sample_rate} Hz is not a whole window of >= 2 samples"
        )));
    }
    Ok(r as usize)
}

/// Feature width for a given window length (after zero padding to a power of two).
pub fn feature_dim(window_samples: usize) -> usize {
    window_samples.next_power_of_two() / 2 + 1
}

/// `log(1 + |DFT|)` of every channel in every window, keeping the
/// non-redundant bins `0..=n/2` of the (zero-padded) transform.
pub fn featurize_frequency(
    clip: &RecordingClip,
    window_seconds: f64,
    taper: Taper,
) -> Result<WindowedFeatures> {
    clip.validate()?;
    let windows = window_count(clip.clip_seconds, window_seconds)?;
    let w = window_samples(clip.sample_rate, window_seconds)?;
    let fft_len = w.next_power_of_two();
    let dim = feature_dim(w);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_len);
    let weights: Vec<f64> = match taper {
        Taper::Rectangular => vec![1.0; w],
        Taper::Hann => (0..w)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / w as f64).cos())
            .collect(),
    };

    let mut values = vec![0.0; windows * clip.channels * dim];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    for c in 0..clip.channels {
        let signal = clip.channel(c);
        if let Some(pos) = signal.iter().position(|x| !x.is_finite()) {
            return Err(Error::data(format!(
                "non-finite sample at channel {c}, index {pos}"
            )));
        }
        for t in 0..windows {
            buf.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
            for (n, z) in buf.iter_mut().take(w).enumerate() {
                z.re = signal[t * w + n] as f64 * weights[n];
            }
            fft.process(&mut buf);
            let out = &mut values[(t * clip.channels + c) * dim..][..dim];
            for (k, o) in out.iter_mut().enumerate() {
                *o = buf[k].norm().ln_1p();
            }
        }
    }
    WindowedFeatures::new(windows, clip.channels, dim, window_seconds, values)
}

/// Featurizes clips in parallel; output order follows input order.
pub fn featurize_all(
    clips: &[RecordingClip],
    window_seconds: f64,
    taper: Taper,
) -> Result<Vec<WindowedFeatures>> {
    clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            featurize_frequency(clip, window_seconds, taper).map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("clip {i}: {msg}")),
                other => other,
            })
        })
        .collect()
}
