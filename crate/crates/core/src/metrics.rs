//! Classification metrics with exact tie handling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(i, j)` counts samples of true class `i` predicted as `j`.
pub fn confusion_matrix(
    y_true: &[usize],
    y_pred: &[usize],
    classes: usize,
) -> Result<Vec<Vec<u64>>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::contract("label and prediction counts differ"));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= classes || p >= classes {
            return Err(Error::contract(format!("label outside [0, {classes})")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn nonempty(y_true: &[usize], y_pred: &[usize]) -> Result<()> {
    if y_true.is_empty() {
        return Err(Error::Undefined("no samples".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::contract("label and prediction counts differ"));
    }
    Ok(())
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_from(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * (p * r) / (p + r)
    }
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    nonempty(y_true, y_pred)?;
    let hit = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hit as f64 / y_true.len() as f64)
}

/// Precision and recall of class `positive`; `0/0` counts as 0.
pub fn precision_recall(y_true: &[usize], y_pred: &[usize], positive: usize) -> Result<(f64, f64)> {
    nonempty(y_true, y_pred)?;
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t == positive, p == positive) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    Ok((ratio(tp, tp + fp), ratio(tp, tp + fn_)))
}

/// Recall of class 1.
pub fn recall(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    Ok(precision_recall(y_true, y_pred, 1)?.1)
}

/// F1 of class 1.
pub fn f1_binary(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let (p, r) = precision_recall(y_true, y_pred, 1)?;
    Ok(f1_from(p, r))
}

/// Unweighted mean of per-class F1 over `classes`.
pub fn f1_macro(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<f64> {
    let mut s = 0.0;
    for c in 0..classes {
        let (p, r) = precision_recall(y_true, y_pred, c)?;
        s += f1_from(p, r);
    }
    Ok(s / classes as f64)
}

/// Unweighted mean of per-class recall.
pub fn recall_macro(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<f64> {
    let mut s = 0.0;
    for c in 0..classes {
        s += precision_recall(y_true, y_pred, c)?.1;
    }
    Ok(s / classes as f64)
}

/// Mann-Whitney estimate of `P(s+ > s-) + P(s+ == s-) / 2` via midranks.
pub fn auroc(y_true: &[bool], scores: &[f64]) -> Result<f64> {
    if y_true.len() != scores.len() {
        return Err(Error::contract("label and score counts differ"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("NaN score"));
    }
    let pos = y_true.iter().filter(|&&y| y).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUROC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of positive ranks (1-based, ties share their mean rank), doubled
    // to stay in integers
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let p = order[i..=j].iter().filter(|&&k| y_true[k]).count() as u128;
        rank_sum2 += twice_mid * p;
        i = j + 1;
    }
    let (pos, neg) = (pos as u128, neg as u128);
    // 2U = 2R - P(P+1)
    let twice_u = rank_sum2 - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Mean one-vs-rest AUROC over classes that have both positives and
/// negatives; `probs` is row-major `n x classes`.
pub fn auroc_macro(y_true: &[usize], probs: &[f64], classes: usize) -> Result<f64> {
    if probs.len() != y_true.len() * classes {
        return Err(Error::contract("probability matrix has the wrong size"));
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let labels: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
        if labels.iter().all(|&b| b) || labels.iter().all(|&b| !b) {
            continue;
        }
        let s: Vec<f64> = (0..y_true.len()).map(|i| probs[i * classes + c]).collect();
        total += auroc(&labels, &s)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Undefined("AUROC needs both classes present".into()));
    }
    Ok(total / used as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Binary seizure vs background.
    #[default]
    Detect,
    /// Seizure type among seizure clips.
    Classify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub confusion: Vec<Vec<u64>>,
    pub n: usize,
}

impl EvalResult {
    /// Binary metrics use class 1 as positive; multi-class ones are macro
    /// averages. `probs` is row-major `n x classes` with rows summing to 1.
    pub fn compute(y_true: &[usize], probs: &[f64], classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if probs.len() != y_true.len() * classes {
            return Err(Error::contract("probability matrix has the wrong size"));
        }
        let y_pred: Vec<usize> = probs.chunks(classes).map(crate::encoder::argmax).collect();
        let confusion = confusion_matrix(y_true, &y_pred, classes)?;
        let (recall, f1, auroc) = if classes == 2 {
            let labels: Vec<bool> = y_true.iter().map(|&y| y == 1).collect();
            let s: Vec<f64> = probs.chunks(2).map(|r| r[1]).collect();
            (
                recall(y_true, &y_pred)?,
                f1_binary(y_true, &y_pred)?,
                auroc(&labels, &s)?,
            )
        } else {
            (
                recall_macro(y_true, &y_pred, classes)?,
                f1_macro(y_true, &y_pred, classes)?,
                auroc_macro(y_true, probs, classes)?,
            )
        };
        Ok(EvalResult {
            accuracy: accuracy(y_true, &y_pred)?,
            recall,
            f1,
            auroc,
            confusion,
            n: y_true.len(),
        })
    }

    pub fn confusion_csv(&self) -> String {
        let c = self.confusion.len();
        let mut s = String::from("true\\pred");
        for j in 0..c {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
}

/// Per-seed results with their mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub clip_seconds: u32,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<EvalResult>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

impl MetricReport {
    pub fn new(
        task: Task,
        clip_seconds: u32,
        seeds: Vec<u64>,
        per_seed: Vec<EvalResult>,
    ) -> Result<Self> {
        if per_seed.is_empty() || seeds.len() != per_seed.len() {
            return Err(Error::contract("report needs one result per seed"));
        }
        let k = per_seed.len() as f64;
        let pick = |f: fn(&EvalResult) -> f64| {
            let m = per_seed.iter().map(f).sum::<f64>() / k;
            let v = per_seed.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / k;
            (m, v.sqrt())
        };
        let (a, b, c, d) = (
            pick(|r| r.accuracy),
            pick(|r| r.recall),
            pick(|r| r.f1),
            pick(|r| r.auroc),
        );
        Ok(MetricReport {
            task,
            clip_seconds,
            seeds,
            per_seed,
            mean: MetricSummary {
                accuracy: a.0,
                recall: b.0,
                f1: c.0,
                auroc: d.0,
            },
            std: MetricSummary {
                accuracy: a.1,
                recall: b.1,
                f1: c.1,
                auroc: d.1,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auroc(y: &[bool], s: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] && !y[j] {
                    pairs += 1.0;
                    if s[i] > s[j] {
                        wins += 1.0;
                    } else if s[i] == s[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_basic_cases() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&y, &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auroc(&y, &[0.5; 4]).unwrap(), 0.5);
        assert_eq!(auroc(&y, &[0.9, 0.8, 0.2, 0.1]).unwrap(), 0.0);
        assert!(matches!(
            auroc(&[true, true], &[0.1, 0.2]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn auroc_matches_pairwise_count_on_small_instances() {
        let mut rng = crate::rng::substream(0, "auroc");
        let mut checked = 0;
        while checked < 1000 {
            let n = rng.random_range(2..=8);
            let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
                continue;
            }
            // coarse grid makes ties common
            let s: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..4) as f64 * 0.25)
                .collect();
            assert_eq!(auroc(&y, &s).unwrap(), brute_auroc(&y, &s));
            checked += 1;
        }
    }

    #[test]
    fn confusion_cases() {
        let y = [0, 1, 2, 1, 0];
        let m = confusion_matrix(&y, &y, 3).unwrap();
        assert_eq!(m, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let m = confusion_matrix(&y, &[1; 5], 3).unwrap();
        assert_eq!(m, vec![vec![0, 2, 0], vec![0, 2, 0], vec![0, 1, 0]]);
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
    }

    #[test]
    fn degenerate_f1_is_zero() {
        let y = [1, 0, 1, 0];
        assert_eq!(f1_binary(&y, &[0; 4]).unwrap(), 0.0);
        assert_eq!(f1_binary(&y, &y).unwrap(), 1.0);
        assert_eq!(recall(&y, &y).unwrap(), 1.0);
        assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
        assert_eq!(f1_macro(&y, &y, 2).unwrap(), 1.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Undefined(_))));
    }

    #[test]
    fn metrics_match_confusion_formulas() {
        let mut rng = crate::rng::substream(1, "metrics");
        for _ in 0..500 {
            let n = rng.random_range(1..30);
            let c = rng.random_range(2..5);
            let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let m = confusion_matrix(&t, &p, c).unwrap();
            assert_eq!(m.iter().flatten().sum::<u64>(), n as u64);
            let diag: u64 = (0..c).map(|i| m[i][i]).sum();
            assert_eq!(accuracy(&t, &p).unwrap(), diag as f64 / n as f64);
            let col = |j: usize| (0..c).map(|i| m[i][j]).sum::<u64>();
            let row = |i: usize| m[i].iter().sum::<u64>();
            let per_class = |k: usize| {
                let pr = if col(k) == 0 {
                    0.0
                } else {
                    m[k][k] as f64 / col(k) as f64
                };
                let rc = if row(k) == 0 {
                    0.0
                } else {
                    m[k][k] as f64 / row(k) as f64
                };
                (pr, rc)
            };
            let (pr, rc) = per_class(1);
            let f1 = if pr + rc == 0.0 {
                0.0
            } else {
                2.0 * (pr * rc) / (pr + rc)
            };
            assert_eq!(f1_binary(&t, &p).unwrap(), f1);
            assert_eq!(recall(&t, &p).unwrap(), rc);
            let macro_f1 = (0..c)
                .map(|k| {
                    let (a, b) = per_class(k);
                    if a + b == 0.0 {
                        0.0
                    } else {
                        2.0 * (a * b) / (a + b)
                    }
                })
                .sum::<f64>()
                / c as f64;
            assert_eq!(f1_macro(&t, &p, c).unwrap(), macro_f1);
        }
    }

    #[test]
    fn eval_result_on_tied_constant_model() {
        let y = [0, 1, 0, 1];
        let probs = [0.6, 0.4, 0.6, 0.4, 0.6, 0.4, 0.6, 0.4];
        let r = EvalResult::compute(&y, &probs, 2).unwrap();
        assert_eq!(r.auroc, 0.5);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.f1, 0.0);
        assert_eq!(r.confusion, vec![vec![2, 0], vec![2, 0]]);
        assert!(r.confusion_csv().starts_with("true\\pred,0,1\n0,2,0\n"));
    }

    #[test]
    fn report_mean_and_std() {
        let mk = |a: f64| EvalResult {
            accuracy: a,
            recall: a,
            f1: a,
            auroc: a,
            confusion: vec![],
            n: 1,
        };
        let r = MetricReport::new(Task::Detect, 12, vec![0, 1], vec![mk(0.5), mk(1.0)]).unwrap();
        assert_eq!(r.mean.auroc, 0.75);
        assert_eq!(r.std.f1, 0.25);
    }

    proptest! {
        #[test]
        fn auroc_flips_under_negation(seed in any::<u64>(), n in 2usize..40) {
            let mut rng = crate::rng::substream(seed, "flip");
            let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            y[0] = true;
            y[1] = false;
            let s: Vec<f64> = (0..n).map(|i| i as f64 + rng.random_range(0.0..0.5)).collect();
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let a = auroc(&y, &s).unwrap();
            prop_assert!((a + auroc(&y, &neg).unwrap() - 1.0).abs() < 1e-12);
            let mono: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(a, auroc(&y, &mono).unwrap());
        }

        #[test]
        fn metrics_invariant_to_sample_order(seed in any::<u64>(), n in 2usize..30) {
            use rand::seq::SliceRandom;
            let mut rng = crate::rng::substream(seed, "order");
            let mut t: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            t[0] = 0;
            t[1] = 1;
            let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let tp: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
            let pp: Vec<usize> = idx.iter().map(|&i| p[i]).collect();
            let sp: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            prop_assert_eq!(f1_binary(&t, &p).unwrap(), f1_binary(&tp, &pp).unwrap());
            prop_assert_eq!(accuracy(&t, &p).unwrap(), accuracy(&tp, &pp).unwrap());
            let yb: Vec<bool> = t.iter().map(|&v| v == 1).collect();
            let ybp: Vec<bool> = tp.iter().map(|&v| v == 1).collect();
            prop_assert_eq!(auroc(&yb, &s).unwrap(), auroc(&ybp, &sp).unwrap());
        }
    }
}
