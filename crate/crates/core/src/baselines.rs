//! Reference graph constructors: electrode distance, lagged cross-correlation
//! and feature cosine similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{window_samples, RecordingClip, WindowedFeatures};

/// Channel names of the 19-electrode 10-20 montage, in layout order.
pub const MONTAGE_10_20: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz",
    "P4", "T6", "O1", "O2",
];

/// Idealized projected scalp positions (nose toward +y, unit outer ring).
const POSITIONS_10_20: [(f64, f64); 19] = [
    (-0.309, 0.951),
    (0.309, 0.951),
    (-0.809, 0.588),
    (-0.4, 0.5),
    (0.0, 0.5),
    (0.4, 0.5),
    (0.809, 0.588),
    (-1.0, 0.0),
    (-0.5, 0.0),
    (0.0, 0.0),
    (0.5, 0.0),
    (1.0, 0.0),
    (-0.809, -0.588),
    (-0.4, -0.5),
    (0.0, -0.5),
    (0.4, -0.5),
    (0.809, -0.588),
    (-0.309, -0.951),
    (0.309, -0.951),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeLayout {
    pub positions: Vec<(f64, f64)>,
}

impl ElectrodeLayout {
    pub fn montage_10_20() -> Self {
        ElectrodeLayout {
            positions: POSITIONS_10_20.to_vec(),
        }
    }

    /// The 10-20 montage for 19 channels, otherwise channels evenly spaced
    /// on the unit circle.
    pub fn for_channels(n: usize) -> Self {
        if n == 19 {
            return Self::montage_10_20();
        }
        let positions = (0..n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect();
        ElectrodeLayout { positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Gaussian-kernel weights `exp(-d^2 / sigma^2)` with `sigma` the standard
/// deviation of all pairwise distances; weights below `tau` are dropped.
pub fn distance_graph(layout: &ElectrodeLayout, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::config(format!(
            "distance threshold must be positive, got {tau}"
        )));
    }
    let n = layout.len();
    let dist = |i: usize, j: usize| {
        let (a, b) = (layout.positions[i], layout.positions[j]);
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    };
    let pairs: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| dist(i, j))
        .collect();
    let mut w = vec![0.0; n * n];
    if pairs.is_empty() {
        return Ok(w);
    }
    let mean = pairs.iter().sum::<f64>() / pairs.len() as f64;
    let var = pairs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / pairs.len() as f64;
    if var == 0.0 {
        return Err(Error::data("all electrode distances are equal"));
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = (-dist(i, j).powi(2) / var).exp();
                if v >= tau {
                    w[i * n + j] = v;
                }
            }
        }
    }
    Ok(w)
}

/// Lag in `[-max_lag, max_lag]` maximizing `|r(k)|` and that magnitude, where
/// `r(k) = sum_t x_t y_{t+k} / sqrt(sum x^2 sum y^2)` on mean-removed inputs.
/// Ties go to the lag of smallest magnitude, then the negative one.
pub fn xcorr_peak(x: &[f64], y: &[f64], max_lag: usize) -> (isize, f64) {
    let len = x.len().min(y.len());
    let center = |v: &[f64]| {
        let m = v[..len].iter().sum::<f64>() / len as f64;
        v[..len].iter().map(|a| a - m).collect::<Vec<_>>()
    };
    let (xc, yc) = (center(x), center(y));
    let ex: f64 = xc.iter().map(|a| a * a).sum();
    let ey: f64 = yc.iter().map(|a| a * a).sum();
    let denom = (ex * ey).sqrt();
    if denom == 0.0 {
        return (0, 0.0);
    }
    let mut best = (0isize, -1.0f64);
    let lags = (0..=max_lag as isize).flat_map(|k| if k == 0 { vec![0] } else { vec![-k, k] });
    for k in lags {
        let mut s = 0.0;
        for (t, a) in xc.iter().enumerate() {
            let u = t as isize + k;
            if u >= 0 && (u as usize) < len {
                s += a * yc[u as usize];
            }
        }
        let r = (s / denom).abs();
        if r > best.1 {
            best = (k, r);
        }
    }
    (best.0, best.1.min(1.0))
}

/// Max-lag absolute normalized cross-correlation between every pair of
/// channels of one window (`signals` channel-major, `n x len`).
pub fn cross_correlation_graph(
    signals: &[f64],
    n: usize,
    max_lag: usize,
    threshold: f64,
) -> Result<Vec<f64>> {
    if n == 0 || !signals.len().is_multiple_of(n) {
        return Err(Error::contract(
            "signal buffer is not channel-major n x len",
        ));
    }
    let len = signals.len() / n;
    if len <= max_lag {
        return Err(Error::contract(format!(
            "window of {len} samples not longer than max lag {max_lag}"
        )));
    }
    let ch = |i: usize| &signals[i * len..(i + 1) * len];
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let (_, r) = xcorr_peak(ch(i), ch(j), max_lag);
            if r >= threshold && r > 0.0 {
                w[i * n + j] = r;
                w[j * n + i] = r;
            }
        }
    }
    Ok(w)
}

/// Cosine similarity of node vectors clipped to `[0, 1]`; zero vectors have
/// similarity 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sparsify {
    Threshold(f64),
    TopK(usize),
}

/// Cosine-similarity graph of one window's `n x d` node features.
pub fn temporal_similarity_graph(features: &[f64], n: usize, mode: Sparsify) -> Result<Vec<f64>> {
    if n == 0 || !features.len().is_multiple_of(n) {
        return Err(Error::contract("feature buffer is not n x d"));
    }
    let d = features.len() / n;
    let row = |i: usize| &features[i * d..(i + 1) * d];
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sim[i * n + j] = cosine_similarity(row(i), row(j));
            }
        }
    }
    match mode {
        Sparsify::Threshold(t) => {
            for v in &mut sim {
                if *v < t || *v == 0.0 {
                    *v = 0.0;
                }
            }
        }
        Sparsify::TopK(k) => {
            if k == 0 || k > n.saturating_sub(1) {
                return Err(Error::config(format!(
                    "top-k {k} outside [1, {}]",
                    n.saturating_sub(1)
                )));
            }
            for i in 0..n {
                let mut cols: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                cols.sort_by(|&a, &b| sim[i * n + b].total_cmp(&sim[i * n + a]).then(a.cmp(&b)));
                for &j in &cols[k..] {
                    sim[i * n + j] = 0.0;
                }
            }
        }
    }
    Ok(sim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub distance_threshold: f64,
    pub xcorr_threshold: f64,
    /// Maximum lag as a fraction of the window length.
    pub xcorr_max_lag_fraction: f64,
    pub temporal: Sparsify,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            distance_threshold: 0.1,
            xcorr_threshold: 0.3,
            xcorr_max_lag_fraction: 0.25,
            temporal: Sparsify::Threshold(0.5),
        }
    }
}

/// Per-window cross-correlation graphs of one clip.
pub fn clip_xcorr_graphs(
    clip: &RecordingClip,
    window_seconds: f64,
    cfg: &BaselineConfig,
) -> Result<Vec<Vec<f64>>> {
    let w = window_samples(clip.sample_rate, window_seconds)?;
    let n = clip.channels;
    let per = clip.samples_per_channel();
    let windows = per / w;
    let max_lag = (cfg.xcorr_max_lag_fraction * w as f64).floor() as usize;
    (0..windows)
        .map(|t| {
            let mut buf = Vec::with_capacity(n * w);
            for i in 0..n {
                buf.extend(
                    clip.channel(i)[t * w..(t + 1) * w]
                        .iter()
                        .map(|&v| f64::from(v)),
                );
            }
            cross_correlation_graph(&buf, n, max_lag, cfg.xcorr_threshold)
        })
        .collect()
}

/// Per-window temporal-similarity graphs of one clip's features.
pub fn clip_temporal_graphs(
    features: &WindowedFeatures,
    cfg: &BaselineConfig,
) -> Result<Vec<Vec<f64>>> {
    (0..features.windows)
        .map(|t| temporal_similarity_graph(features.window(t), features.nodes, cfg.temporal))
        .collect()
}
