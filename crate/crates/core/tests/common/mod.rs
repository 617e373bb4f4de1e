//! Independent brute-force references shared by the oracle tests.
#![allow(dead_code)]

use perspective_core::calibrate::{DevItem, ThresholdMode};
use perspective_core::corpus::LabelSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn members(s: LabelSet) -> Vec<bool> {
    (0..3).map(|c| s.bits() & (1 << c) != 0).collect()
}

pub fn ref_jaccard(a: LabelSet, b: LabelSet) -> f64 {
    let (a, b) = (members(a), members(b));
    let inter = (0..3).filter(|&c| a[c] && b[c]).count();
    let union = (0..3).filter(|&c| a[c] || b[c]).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn ref_macro_f1(pairs: &[(LabelSet, LabelSet)], zero_fill: bool) -> Option<f64> {
    let mut f1s = Vec::new();
    for c in 0..3 {
        let pred: Vec<bool> = pairs.iter().map(|(p, _)| members(*p)[c]).collect();
        let gold: Vec<bool> = pairs.iter().map(|(_, g)| members(*g)[c]).collect();
        let tp = (0..pairs.len()).filter(|&i| pred[i] && gold[i]).count() as f64;
        let pp = pred.iter().filter(|&&x| x).count() as f64;
        let gp = gold.iter().filter(|&&x| x).count() as f64;
        if pp == 0.0 && gp == 0.0 {
            if zero_fill {
                f1s.push(0.0);
            }
            continue;
        }
        let precision = if pp > 0.0 { tp / pp } else { 0.0 };
        let recall = if gp > 0.0 { tp / gp } else { 0.0 };
        f1s.push(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        });
    }
    if f1s.is_empty() {
        None
    } else {
        Some(f1s.iter().sum::<f64>() / f1s.len() as f64)
    }
}

/// LCS by enumerating every subsequence of the shorter sequence.
pub fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |sub: &[&String]| {
        let mut it = long.iter();
        sub.iter().all(|x| it.any(|y| y == *x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<&String> = (0..short.len()).filter(|i| mask & (1 << i) != 0).map(|i| &short[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

pub fn ref_rouge(c: &[String], r: &[String]) -> f64 {
    let l = brute_lcs(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
    2.0 * p * rec / (p + rec)
}

pub fn oracle_predict(p: [f64; 3], tau: [f64; 3]) -> [bool; 3] {
    let mut out = [p[0] >= tau[0], p[1] >= tau[1], p[2] >= tau[2]];
    if out.iter().all(|x| !x) {
        let mut best = 0;
        for c in [1, 2] {
            if p[c] > p[best] {
                best = c;
            }
        }
        out[best] = true;
    }
    out
}

pub fn oracle_jaccard(a: [bool; 3], b: LabelSet) -> f64 {
    let b: Vec<bool> = (0..3).map(|c| b.bits() & (1 << c) != 0).collect();
    let inter = (0..3).filter(|&c| a[c] && b[c]).count() as f64;
    let union = (0..3).filter(|&c| a[c] || b[c]).count() as f64;
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// Scores every grid triple, then picks the lexicographically smallest among
/// the maximizers.
pub fn oracle(items: &[DevItem], mode: ThresholdMode) -> ([f64; 3], f64, usize) {
    let grid: Vec<f64> = (10..=90).step_by(5).map(|k| k as f64 / 100.0).collect();
    let mut scored = Vec::new();
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                if mode == ThresholdMode::Global && !(a == b && b == c) {
                    continue;
                }
                let tau = [a, b, c];
                let mean = items.iter().map(|it| oracle_jaccard(oracle_predict(it.probs, tau), it.gold)).sum::<f64>()
                    / items.len() as f64;
                scored.push((tau, mean));
            }
        }
    }
    let best = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let mut winners: Vec<[f64; 3]> = scored.iter().filter(|s| (s.1 - best).abs() < 1e-12).map(|s| s.0).collect();
    winners.sort_by(|x, y| x.partial_cmp(y).unwrap());
    (winners[0], best, scored.len())
}

pub fn random_dump(rng: &mut ChaCha8Rng) -> Vec<DevItem> {
    let n = rng.random_range(5..40);
    let coarse = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            let probs = std::array::from_fn(|_| {
                if coarse {
                    rng.random_range(0..=20) as f64 * 0.05
                } else {
                    rng.random::<f64>()
                }
            });
            DevItem {
                probs,
                gold: LabelSet::from_bits(rng.random_range(1u8..8)),
            }
        })
        .collect()
}

/// Seeded random dump source for callers without their own RNG.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
