//! Turning class probabilities into label sets with tuned thresholds.

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabelSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    #[default]
    PerClass,
    Global,
}

impl ThresholdMode {
    pub fn parse(s: &str) -> Option<ThresholdMode> {
        match s {
            "per_class" | "per-class" => Some(ThresholdMode::PerClass),
            "global" => Some(ThresholdMode::Global),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    /// (τ_C, τ_E, τ_N)
    pub tau: [f64; 3],
    pub step: f64,
    pub mode: ThresholdMode,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            tau: [0.5; 3],
            step: 0.05,
            mode: ThresholdMode::PerClass,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        grid(self.step)?;
        if self.tau.iter().any(|t| !(0.1 - 1e-12..=0.9 + 1e-12).contains(t)) {
            return Err(Error::Config(format!("thresholds {:?} outside [0.1, 0.9]", self.tau)));
        }
        Ok(())
    }
}

/// Classes with `p_c ≥ τ_c`; an empty result falls back to the single
/// most probable class, ties going to the earlier class in C, E, N order.
pub fn predict_label_set(probs: [f64; 3], tau: [f64; 3]) -> LabelSet {
    let set: LabelSet = Label::ALL
        .iter()
        .copied()
        .filter(|l| probs[l.index()] >= tau[l.index()])
        .collect();
    if !set.is_empty() {
        return set;
    }
    let mut best = 0;
    for c in 1..3 {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    LabelSet::single(Label::from_index(best))
}

/// Grid values on `[0.1, 0.9]` at `step`, computed in whole hundredths so
/// every value is the nearest double to `k/100`.
pub fn grid(step: f64) -> Result<Vec<f64>> {
    let hundredths = (step * 100.0).round();
    if !(hundredths >= 1.0) || (hundredths / 100.0 - step).abs() > 1e-9 || 80.0 % hundredths != 0.0 {
        return Err(Error::Config(format!(
            "grid step {step} must be a whole number of hundredths dividing 0.8"
        )));
    }
    let s = hundredths as u32;
    Ok((0..=80 / s).map(|i| (10 + s * i) as f64 / 100.0).collect())
}

/// One dev (instance, annotator) pair to calibrate on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DevItem {
    pub probs: [f64; 3],
    pub gold: LabelSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub config: ThresholdConfig,
    pub mean_jaccard: f64,
    pub evaluated: usize,
}

/// 6 × Jaccard, an integer for subsets of a 3-element set.
fn jaccard6(a: LabelSet, b: LabelSet) -> u64 {
    let u = a.union(b).len() as u64;
    if u == 0 {
        return 6;
    }
    6 * a.intersection(b).len() as u64 / u
}

/// Exhaustive grid search maximizing mean Jaccard; ties resolve to the
/// lexicographically smallest threshold triple.
pub fn tune_thresholds(items: &[DevItem], mode: ThresholdMode, step: f64) -> Result<TuneResult> {
    if items.is_empty() {
        return Err(Error::EmptySplit("dev".into()));
    }
    let g = grid(step)?;
    let n = g.len();
    let score = |tau: [f64; 3]| -> u64 {
        items
            .iter()
            .map(|it| jaccard6(predict_label_set(it.probs, tau), it.gold))
            .sum()
    };
    let mut best: Option<(u64, [f64; 3])> = None;
    let mut evaluated = 0;
    let mut consider = |tau: [f64; 3]| {
        evaluated += 1;
        let s = score(tau);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, tau));
        }
    };
    match mode {
        ThresholdMode::PerClass => {
            for &a in &g {
                for &b in &g {
                    for &c in &g {
                        consider([a, b, c]);
                    }
                }
            }
        }
        ThresholdMode::Global => {
            for &a in &g {
                consider([a, a, a]);
            }
        }
    }
    let expected = match mode {
        ThresholdMode::PerClass => n * n * n,
        ThresholdMode::Global => n,
    };
    assert_eq!(evaluated, expected, "grid not exhaustively evaluated");
    let (s, tau) = best.expect("non-empty grid");
    Ok(TuneResult {
        config: ThresholdConfig { tau, step, mode },
        mean_jaccard: s as f64 / (6 * items.len()) as f64,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(s: &str) -> LabelSet {
        s.chars().map(|c| Label::parse(&c.to_string()).unwrap()).collect()
    }

    #[test]
    fn prediction_examples() {
        assert_eq!(predict_label_set([0.2, 0.8, 0.4], [0.5; 3]), set("E"));
        assert_eq!(predict_label_set([0.1, 0.1, 0.1], [0.5; 3]), set("C"));
        assert_eq!(predict_label_set([0.6, 0.7, 0.1], [0.5; 3]), set("CE"));
        assert_eq!(predict_label_set([0.1, 0.3, 0.3], [0.5; 3]), set("E"));
    }

    #[test]
    fn grid_values() {
        let g = grid(0.05).unwrap();
        assert_eq!(g.len(), 17);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[1], 0.15);
        assert_eq!(g[16], 0.9);
        assert!(grid(0.03).is_err());
        assert!(grid(0.0).is_err());
        assert_eq!(grid(0.4).unwrap(), vec![0.1, 0.5, 0.9]);
    }

    #[test]
    fn separated_probabilities_pick_the_smallest_triple() {
        let items = vec![
            DevItem {
                probs: [0.97, 0.02, 0.01],
                gold: set("C"),
            },
            DevItem {
                probs: [0.03, 0.96, 0.99],
                gold: set("EN"),
            },
        ];
        let r = tune_thresholds(&items, ThresholdMode::PerClass, 0.05).unwrap();
        assert_eq!(r.mean_jaccard, 1.0);
        assert_eq!(r.config.tau, [0.1, 0.1, 0.1]);
        assert_eq!(r.evaluated, 4913);
    }

    #[test]
    fn global_is_the_diagonal_optimum() {
        let items: Vec<DevItem> = (0..30)
            .map(|i| {
                let x = (i as f64 * 0.37).fract();
                DevItem {
                    probs: [x, (x * 3.1).fract(), (x * 7.3).fract()],
                    gold: LabelSet::from_bits(1 + (i % 7) as u8),
                }
            })
            .collect();
        let g = tune_thresholds(&items, ThresholdMode::Global, 0.05).unwrap();
        let mut best = (0u64, 0.0);
        for t in grid(0.05).unwrap() {
            let s: u64 = items
                .iter()
                .map(|it| jaccard6(predict_label_set(it.probs, [t; 3]), it.gold))
                .sum();
            if s > best.0 {
                best = (s, t);
            }
        }
        assert_eq!(g.config.tau, [best.1; 3]);
        let p = tune_thresholds(&items, ThresholdMode::PerClass, 0.05).unwrap();
        assert!(p.mean_jaccard >= g.mean_jaccard);
        assert!(tune_thresholds(&[], ThresholdMode::Global, 0.05).is_err());
    }
}
