//! Vector-autoregressive clips with planted, time-varying connectivity.
//!
//! Channels are partitioned into small groups; within a group every pair is
//! coupled at lag one, so the planted graph of a window is a union of
//! cliques. Background windows redraw the partition once per segment.
//! Seizure clips contain a run of motif windows whose groups are larger
//! (denser graph) and whose channels resonate at a type-specific frequency.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{window_count, window_samples, Dataset, GraphSequence, RecordingClip};
use crate::error::{Error, Result};
use crate::rng::{substream, substream_indexed, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub sample_rate: u32,
    pub clip_seconds: u32,
    pub window_seconds: f64,
    pub clips: usize,
    /// Fraction of clips that carry a seizure motif.
    pub seizure_fraction: f64,
    pub seizure_types: usize,
    /// VAR order; resonant motifs need at least 2.
    pub var_order: usize,
    /// Clique size of background graphs (row degree `size - 1`).
    pub background_group: usize,
    /// Clique size of seizure-motif graphs.
    pub motif_group: usize,
    /// Background partitions per clip.
    pub segments: usize,
    pub motif_windows: usize,
    /// Self term used when a regime has no resonance.
    pub self_coupling: f64,
    /// Pole radius of the per-group background resonance; 0 replaces it by
    /// plain `self_coupling` damping.
    pub group_radius: f64,
    /// Resonance of background group `g` is `group_freqs_hz[g % len]`.
    pub group_freqs_hz: Vec<f64>,
    /// Share of each channel's dynamics pooled across its group, in `[0, 1]`.
    pub coupling: f64,
    pub motif_coupling: f64,
    pub motif_radius: f64,
    pub motif_freq_hz: f64,
    pub motif_freq_step_hz: f64,
    pub noise_std: f64,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            channels: 8,
            sample_rate: 64,
            clip_seconds: 12,
            window_seconds: 1.0,
            clips: 120,
            seizure_fraction: 0.5,
            seizure_types: 1,
            var_order: 2,
            background_group: 4,
            motif_group: 8,
            segments: 2,
            motif_windows: 6,
            self_coupling: 0.1,
            group_radius: 0.9,
            group_freqs_hz: vec![14.0, 19.0, 24.0],
            coupling: 0.9,
            motif_coupling: 0.9,
            motif_radius: 0.9,
            motif_freq_hz: 10.0,
            motif_freq_step_hz: 6.0,
            noise_std: 1.0,
            burn_in: 128,
            seed: 0,
        }
    }
}

/// Which coefficient family drives a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Background,
    Motif(usize),
}

/// Lag matrices `C_1..C_p`, each `nodes x nodes`, row `i` driving channel `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarCoefficients {
    pub order: usize,
    pub nodes: usize,
    pub lags: Vec<f64>,
}

impl VarCoefficients {
    pub fn zeros(order: usize, nodes: usize) -> Self {
        VarCoefficients {
            order,
            nodes,
            lags: vec![0.0; order * nodes * nodes],
        }
    }

    pub fn get(&self, lag: usize, i: usize, j: usize) -> f64 {
        self.lags[((lag - 1) * self.nodes + i) * self.nodes + j]
    }

    pub fn set(&mut self, lag: usize, i: usize, j: usize, v: f64) {
        self.lags[((lag - 1) * self.nodes + i) * self.nodes + j] = v;
    }

    /// Largest eigenvalue modulus of the companion matrix.
    pub fn spectral_radius(&self) -> f64 {
        let (p, n) = (self.order, self.nodes);
        let mut m = DMatrix::<f64>::zeros(p * n, p * n);
        for lag in 1..=p {
            for i in 0..n {
                for j in 0..n {
                    m[(i, (lag - 1) * n + j)] = self.get(lag, i, j);
                }
            }
        }
        for k in n..p * n {
            m[(k, k - n)] = 1.0;
        }
        // the unbounded Schur iteration can stall on defective matrices
        match nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
            Some(schur) => schur
                .complex_eigenvalues()
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max),
            None => gelfand_radius(m),
        }
    }

    /// Off-diagonal support of all lags.
    pub fn support(&self) -> Vec<bool> {
        let n = self.nodes;
        let mut s = vec![false; n * n];
        for lag in 1..=self.order {
            for i in 0..n {
                for j in 0..n {
                    if i != j && self.get(lag, i, j) != 0.0 {
                        s[i * n + j] = true;
                    }
                }
            }
        }
        s
    }
}

impl SyntheticSpec {
    /// Largest planted row degree.
    pub fn k_plant(&self) -> usize {
        self.background_group
            .max(self.motif_group)
            .min(self.channels)
            - 1
    }

    pub fn windows(&self) -> Result<usize> {
        window_count(self.clip_seconds, self.window_seconds)
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec!["background".to_string()];
        if self.seizure_types == 1 {
            names.push("seizure".to_string());
        } else {
            names.extend((1..=self.seizure_types).map(|k| format!("seizure-{k}")));
        }
        names
    }

    fn omega(&self, hz: f64) -> f64 {
        2.0 * std::f64::consts::PI * hz / self.sample_rate as f64
    }

    /// Lag-1 and lag-2 self terms of an AR(2) resonance, or plain damping
    /// when the model is first order or the radius is zero.
    fn self_terms(&self, radius: f64, hz: f64) -> (f64, f64) {
        if self.var_order >= 2 && radius > 0.0 {
            (2.0 * radius * self.omega(hz).cos(), -radius * radius)
        } else {
            (self.self_coupling, 0.0)
        }
    }

    /// Coefficients for `regime` on the given channel partition.
    ///
    /// Each group of size `m` shares one AR(2) resonance: its block of every
    /// lag is `phi_l * (mix * J / m + (1 - mix) * I)`, so the group's common
    /// mode resonates at full strength while the differences between its
    /// channels are damped by `1 - mix`. `mix` is the regime's coupling.
    pub fn coefficients(&self, groups: &[Vec<usize>], regime: Regime) -> VarCoefficients {
        let n = self.channels;
        let mut c = VarCoefficients::zeros(self.var_order, n);
        for (g, members) in groups.iter().enumerate() {
            let (phi1, phi2, mix) = match regime {
                Regime::Background => {
                    let hz = match self.group_freqs_hz.as_slice() {
                        [] => 0.0,
                        f => f[g % f.len()],
                    };
                    let radius = if self.group_freqs_hz.is_empty() {
                        0.0
                    } else {
                        self.group_radius
                    };
                    let (a, b) = self.self_terms(radius, hz);
                    (a, b, self.coupling)
                }
                Regime::Motif(kind) => {
                    let hz = self.motif_freq_hz + kind as f64 * self.motif_freq_step_hz;
                    let (a, b) = self.self_terms(self.motif_radius, hz);
                    (a, b, self.motif_coupling)
                }
            };
            let m = members.len() as f64;
            for &i in members {
                for &j in members {
                    let w = mix / m + if i == j { 1.0 - mix } else { 0.0 };
                    c.set(1, i, j, w * phi1);
                    if self.var_order >= 2 {
                        c.set(2, i, j, w * phi2);
                    }
                }
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.channels < 2 {
            return bad("need at least two channels".into());
        }
        if self.clips == 0 {
            return bad("need at least one clip".into());
        }
        if !(0.0..=1.0).contains(&self.seizure_fraction) {
            return bad("seizure_fraction must lie in [0, 1]".into());
        }
        if self.seizure_types == 0 || self.seizure_types > 254 {
            return bad("seizure_types must be in 1..=254".into());
        }
        if self.var_order == 0 {
            return bad("var_order must be positive".into());
        }
        if self.background_group < 1 || self.motif_group < 1 {
            return bad("group sizes must be positive".into());
        }
        if self.motif_group <= self.background_group {
            return bad("motif groups must be larger than background groups".into());
        }
        if self.segments == 0 {
            return bad("segments must be positive".into());
        }
        if !(0.0..1.0).contains(&self.group_radius) || !(0.0..1.0).contains(&self.motif_radius) {
            return bad("resonance radii must lie in [0, 1)".into());
        }
        if self
            .group_freqs_hz
            .iter()
            .any(|f| !(f.is_finite() && *f >= 0.0))
        {
            return bad("group frequencies must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.coupling) || !(0.0..=1.0).contains(&self.motif_coupling) {
            return bad("couplings must lie in [0, 1]".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        let t = self.windows()?;
        window_samples(self.sample_rate, self.window_seconds)?;
        if self.motif_windows == 0 || self.motif_windows > t {
            return bad(format!("motif_windows must be in 1..={t}"));
        }
        if self.segments > t {
            return bad(format!(
                "cannot split {t} windows into {} segments",
                self.segments
            ));
        }
        let canonical = |size: usize| -> Vec<Vec<usize>> {
            (0..self.channels)
                .collect::<Vec<_>>()
                .chunks(size)
                .map(<[usize]>::to_vec)
                .collect()
        };
        let mut regimes = vec![(Regime::Background, self.background_group)];
        regimes.extend((0..self.seizure_types).map(|k| (Regime::Motif(k), self.motif_group)));
        for (regime, size) in regimes {
            let rho = self
                .coefficients(&canonical(size), regime)
                .spectral_radius();
            if !(rho < 1.0) {
                return bad(format!(
                    "{regime:?} coefficients are unstable (spectral radius {rho:.4})"
                ));
            }
        }
        Ok(())
    }
}

fn random_partition(n: usize, size: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(size)
        .map(|c| {
            let mut g = c.to_vec();
            g.sort_unstable();
            g
        })
        .collect()
}

/// Simulates `x[n] = sum_l C_l x[n-l] + noise_std * e[n]` window by window.
///
/// The process starts at rest and is run for `burn_in` samples under the
/// first window's coefficients. Output is channel-major.
pub fn simulate_var(
    coefficients: &[VarCoefficients],
    window_samples: usize,
    noise_std: f64,
    burn_in: usize,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let first = coefficients
        .first()
        .ok_or_else(|| Error::contract("no windows to simulate"))?;
    let (p, n) = (first.order, first.nodes);
    if coefficients.iter().any(|c| c.order != p || c.nodes != n) {
        return Err(Error::contract("coefficient shapes differ across windows"));
    }
    let total = coefficients.len() * window_samples;
    let mut history: Vec<Vec<f64>> = vec![vec![0.0; n]; p];
    let mut out = vec![0.0; n * total];
    let mut next = vec![0.0; n];
    for step in 0..burn_in + total {
        let c = if step < burn_in {
            first
        } else {
            &coefficients[(step - burn_in) / window_samples]
        };
        for (i, x) in next.iter_mut().enumerate() {
            let mut acc = noise_std * rng.sample::<f64, _>(StandardNormal);
            for lag in 1..=p {
                let past = &history[lag - 1];
                for (j, v) in past.iter().enumerate() {
                    acc += c.get(lag, i, j) * v;
                }
            }
            *x = acc;
        }
        history.rotate_right(1);
        history[0].copy_from_slice(&next);
        if step >= burn_in {
            let k = step - burn_in;
            for i in 0..n {
                out[i * total + k] = next[i];
            }
        }
    }
    Ok(out)
}

struct ClipPlan {
    label: u8,
}

/// `||M^k||^(1/k)` for `k = 2^12`, via repeated squaring in log scale.
fn gelfand_radius(mut m: DMatrix<f64>) -> f64 {
    let mut log_scale = 0.0;
    let squarings = 12;
    for s in 0..squarings {
        let norm = m.norm();
        if norm == 0.0 {
            return 0.0;
        }
        m /= norm;
        log_scale += norm.ln() / f64::powi(2.0, s);
        m = &m * &m;
    }
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (log_scale + norm.ln() / f64::powi(2.0, squarings)).exp()
}

/// Generates a labeled dataset together with the planted graph of every
/// window. Identical specs produce identical bytes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let windows = spec.windows()?;
    let w = window_samples(spec.sample_rate, spec.window_seconds)?;

    let n_seizure = (spec.clips as f64 * spec.seizure_fraction).round() as usize;
    let mut label_rng = substream(spec.seed, "synthetic-labels");
    let mut order: Vec<usize> = (0..spec.clips).collect();
    order.shuffle(&mut label_rng);
    let mut plans: Vec<ClipPlan> = (0..spec.clips).map(|_| ClipPlan { label: 0 }).collect();
    for &i in order.iter().take(n_seizure) {
        plans[i].label = 1 + label_rng.random_range(0..spec.seizure_types) as u8;
    }

    let generated: Vec<(RecordingClip, GraphSequence)> = plans
        .par_iter()
        .enumerate()
        .map(|(idx, plan)| generate_clip(spec, idx, plan.label, windows, w))
        .collect::<Result<_>>()?;

    let (clips, planted): (Vec<_>, Vec<_>) = generated.into_iter().unzip();
    Dataset::new(
        spec.channels,
        spec.sample_rate,
        spec.clip_seconds,
        spec.window_seconds,
        spec.class_names(),
        Some(spec.seed),
        clips,
        Some(planted),
    )
}

fn generate_clip(
    spec: &SyntheticSpec,
    idx: usize,
    label: u8,
    windows: usize,
    w: usize,
) -> Result<(RecordingClip, GraphSequence)> {
    let n = spec.channels;
    let mut rng = substream_indexed(spec.seed, "synthetic-clip", idx as u64);
    let segment_groups: Vec<Vec<Vec<usize>>> = (0..spec.segments)
        .map(|_| random_partition(n, spec.background_group, &mut rng))
        .collect();
    let motif = if label > 0 {
        let start = rng.random_range(0..=windows - spec.motif_windows);
        let groups = random_partition(n, spec.motif_group, &mut rng);
        Some((start, groups, label as usize - 1))
    } else {
        None
    };

    let mut coefficients = Vec::with_capacity(windows);
    let mut planted = GraphSequence::empty(windows, n);
    for t in 0..windows {
        let c = match &motif {
            Some((start, groups, kind)) if (*start..start + spec.motif_windows).contains(&t) => {
                spec.coefficients(groups, Regime::Motif(*kind))
            }
            _ => {
                let seg = t * spec.segments / windows;
                spec.coefficients(&segment_groups[seg], Regime::Background)
            }
        };
        for (k, &e) in c.support().iter().enumerate() {
            planted.set(t, k / n, k % n, e);
        }
        coefficients.push(c);
    }
    let signal = simulate_var(&coefficients, w, spec.noise_std, spec.burn_in, &mut rng)?;
    let samples = signal.into_iter().map(|x| x as f32).collect();
    let clip = RecordingClip::new(n, spec.sample_rate, spec.clip_seconds, samples, Some(label))?;
    Ok((clip, planted))
}
