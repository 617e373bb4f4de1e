//! Set metrics, text-overlap metrics, and faithfulness summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabelSet};
use crate::error::{Error, Result};
use crate::text::tokenize;

pub fn jaccard(a: LabelSet, b: LabelSet) -> f64 {
    let u = a.union(b).len();
    if u == 0 {
        return 1.0;
    }
    a.intersection(b).len() as f64 / u as f64
}

/// Mean Jaccard over (predicted, gold) pairs.
pub fn mean_jaccard(pairs: &[(LabelSet, LabelSet)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Metric("mean Jaccard over zero pairs".into()));
    }
    Ok(pairs.iter().map(|&(p, g)| jaccard(p, g)).sum::<f64>() / pairs.len() as f64)
}

pub fn exact_match_rate(pairs: &[(LabelSet, LabelSet)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Metric("exact match over zero observed pairs".into()));
    }
    Ok(pairs.iter().filter(|(p, g)| p == g).count() as f64 / pairs.len() as f64)
}

/// What to do with a class that has no gold and no predicted positives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedClass {
    #[default]
    Exclude,
    ZeroFill,
}

/// Binary F1 from confusion counts; `None` when the class never occurs.
pub fn binary_f1(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    if tp + fp + fn_ == 0 {
        return None;
    }
    Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Macro-F1 over the three classes for one annotator's pairs.
pub fn macro_f1(pairs: &[(LabelSet, LabelSet)], policy: UndefinedClass) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Metric("macro-F1 over zero observed pairs".into()));
    }
    let mut scores = Vec::with_capacity(3);
    for l in Label::ALL {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for &(p, g) in pairs {
            match (p.contains(l), g.contains(l)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        match (binary_f1(tp, fp, fn_), policy) {
            (Some(f), _) => scores.push(f),
            (None, UndefinedClass::ZeroFill) => scores.push(0.0),
            (None, UndefinedClass::Exclude) => {}
        }
    }
    if scores.is_empty() {
        return Err(Error::Metric("every class undefined for macro-F1".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Pairs grouped by annotator, in the order annotators are given.
fn by_annotator<'a>(
    items: &'a [ScoredPair],
    annotators: &[String],
) -> Result<Vec<(&'a str, Vec<&'a ScoredPair>)>> {
    let mut groups: BTreeMap<&str, Vec<&ScoredPair>> = BTreeMap::new();
    for it in items {
        if !annotators.iter().any(|a| a == &it.annotator_id) {
            return Err(Error::UnknownAnnotator(it.annotator_id.clone()));
        }
        groups.entry(it.annotator_id.as_str()).or_default().push(it);
    }
    annotators
        .iter()
        .filter_map(|a| groups.remove_entry(a.as_str()))
        .map(Ok)
        .collect()
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure on tokens from the crate tokenizer.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64> {
    let r = tokenize(reference);
    if r.is_empty() {
        return Err(Error::Metric("ROUGE-L with an empty reference".into()));
    }
    Ok(rouge_l_tokens(&tokenize(candidate), &r))
}

pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> f64 {
    rouge_l_prf(candidate, reference).2
}

/// (precision, recall, F) of the LCS match.
pub fn rouge_l_prf(candidate: &[String], reference: &[String]) -> (f64, f64, f64) {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    (p, r, 2.0 * p * r / (p + r))
}

/// Anything that maps a text to a fixed-size vector.
pub trait Embedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Cosine similarity linearly mapped from `[-1, 1]` to `[0, 1]`.
pub fn cosine01(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Metric("cosine similarity with a zero vector".into()));
    }
    Ok(((dot / (na * nb)).clamp(-1.0, 1.0) + 1.0) / 2.0)
}

pub fn semantic_similarity(candidate: &str, reference: &str, embedder: &dyn Embedder) -> Result<f64> {
    if candidate.trim().is_empty() || reference.trim().is_empty() {
        return Err(Error::Metric("semantic similarity of an empty text".into()));
    }
    cosine01(&embedder.embed(candidate)?, &embedder.embed(reference)?)
}

/// One evaluated (instance, annotator) pair. Text fields are filled when an
/// explanation was generated for the pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub instance_id: String,
    pub annotator_id: String,
    pub predicted: LabelSet,
    pub gold: LabelSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub annotator: String,
    pub pairs: usize,
    pub macro_f1: f64,
    pub exact_match: f64,
    pub jaccard: f64,
    pub rouge_l: Option<f64>,
    pub semantic_similarity: Option<f64>,
}

/// Per-annotator rows plus their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: String,
    pub undefined_class: UndefinedClass,
    pub rows: Vec<ReportRow>,
    pub aggregate: ReportRow,
    pub evaluated_pairs: usize,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<Option<f64>> = values.collect();
    if v.is_empty() || v.iter().any(Option::is_none) {
        return None;
    }
    Some(v.iter().flatten().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    /// `annotators` fixes the row order; annotators without pairs are skipped.
    pub fn build(
        items: &[ScoredPair],
        annotators: &[String],
        regime: impl Into<String>,
        policy: UndefinedClass,
    ) -> Result<EvalReport> {
        if items.is_empty() {
            return Err(Error::Metric("evaluation over zero observed pairs".into()));
        }
        let mut rows = Vec::new();
        for (a, group) in by_annotator(items, annotators)? {
            let sets: Vec<(LabelSet, LabelSet)> = group.iter().map(|p| (p.predicted, p.gold)).collect();
            rows.push(ReportRow {
                annotator: a.to_string(),
                pairs: group.len(),
                macro_f1: macro_f1(&sets, policy)?,
                exact_match: exact_match_rate(&sets)?,
                jaccard: mean_jaccard(&sets)?,
                rouge_l: mean_opt(group.iter().map(|p| p.rouge_l)),
                semantic_similarity: mean_opt(group.iter().map(|p| p.semantic_similarity)),
            });
        }
        let n = rows.len() as f64;
        let aggregate = ReportRow {
            annotator: "aggregate".into(),
            pairs: items.len(),
            macro_f1: rows.iter().map(|r| r.macro_f1).sum::<f64>() / n,
            exact_match: rows.iter().map(|r| r.exact_match).sum::<f64>() / n,
            jaccard: rows.iter().map(|r| r.jaccard).sum::<f64>() / n,
            rouge_l: mean_opt(rows.iter().map(|r| r.rouge_l)),
            semantic_similarity: mean_opt(rows.iter().map(|r| r.semantic_similarity)),
        };
        Ok(EvalReport {
            regime: regime.into(),
            undefined_class: policy,
            rows,
            aggregate,
            evaluated_pairs: items.len(),
        })
    }

    pub fn render_table(&self) -> String {
        let fmt = |x: Option<f64>| x.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into());
        let mut s = format!("regime: {}\n", self.regime);
        s += &format!(
            "{:<12} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "annotator", "pairs", "F1", "EM", "Jaccard", "ROUGE-L", "SemSim"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            s += &format!(
                "{:<12} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
                r.annotator,
                r.pairs,
                fmt(Some(r.macro_f1)),
                fmt(Some(r.exact_match)),
                fmt(Some(r.jaccard)),
                fmt(r.rouge_l),
                fmt(r.semantic_similarity)
            );
        }
        s
    }
}

/// Median, quartiles and 10 equal-width bin counts over `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub bins: [usize; 10],
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Histogram {
    pub fn of(values: &[f64]) -> Result<Histogram> {
        if values.is_empty() {
            return Err(Error::Metric("histogram of zero values".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Metric(format!("score {v} outside [0, 1]")));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut bins = [0usize; 10];
        for &v in values {
            bins[((v * 10.0).floor() as usize).min(9)] += 1;
        }
        Ok(Histogram {
            count: values.len(),
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            bins,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessItem {
    pub instance_id: String,
    pub annotator_id: String,
    pub mode: String,
    pub semantic_similarity: f64,
    pub rouge_l: f64,
    pub entailment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub items: Vec<FaithfulnessItem>,
    pub excluded: usize,
    pub semantic_similarity: Histogram,
    pub rouge_l: Histogram,
    pub entailment: Histogram,
}

impl FaithfulnessReport {
    pub fn from_items(items: Vec<FaithfulnessItem>, excluded: usize) -> Result<FaithfulnessReport> {
        let col = |f: fn(&FaithfulnessItem) -> f64| items.iter().map(f).collect::<Vec<_>>();
        Ok(FaithfulnessReport {
            semantic_similarity: Histogram::of(&col(|i| i.semantic_similarity))?,
            rouge_l: Histogram::of(&col(|i| i.rouge_l))?,
            entailment: Histogram::of(&col(|i| i.entailment))?,
            items,
            excluded,
        })
    }

    /// Tab-separated per-item columns for external plotting.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("instance_id\tannotator_id\tmode\tsemantic_similarity\trouge_l\tentailment\n");
        for i in &self.items {
            s += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                i.instance_id, i.annotator_id, i.mode, i.semantic_similarity, i.rouge_l, i.entailment
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(s: &str) -> LabelSet {
        s.chars().map(|c| Label::parse(&c.to_string()).unwrap()).collect()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(set("E"), set("E")), 1.0);
        assert_eq!(jaccard(set("E"), set("EN")), 0.5);
        assert_eq!(jaccard(set("C"), set("EN")), 0.0);
    }

    #[test]
    fn exact_match_examples() {
        let p = [(set("E"), set("E")), (set("N"), set("N")), (set("C"), set("C")), (set("C"), set("E"))];
        assert_eq!(exact_match_rate(&p).unwrap(), 0.75);
        assert!(exact_match_rate(&[]).is_err());
    }

    #[test]
    fn macro_f1_extremes() {
        let golds = [set("E"), set("CN"), set("N"), set("C")];
        let perfect: Vec<_> = golds.iter().map(|&g| (g, g)).collect();
        assert_eq!(macro_f1(&perfect, UndefinedClass::Exclude).unwrap(), 1.0);
        let comp: Vec<_> = golds
            .iter()
            .map(|&g| (LabelSet::from_bits(0b111 & !g.bits()), g))
            .collect();
        assert_eq!(macro_f1(&comp, UndefinedClass::Exclude).unwrap(), 0.0);
        // class C undefined: excluded vs zero-filled
        let p = [(set("E"), set("E")), (set("N"), set("N"))];
        assert_eq!(macro_f1(&p, UndefinedClass::Exclude).unwrap(), 1.0);
        assert!((macro_f1(&p, UndefinedClass::ZeroFill).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rouge_hand_example() {
        let f = rouge_l("a b c d", "a c e").unwrap();
        assert!((f - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l("x y", "x y").unwrap(), 1.0);
        assert_eq!(rouge_l("p q", "x y").unwrap(), 0.0);
        assert!(rouge_l("x", "").is_err());
        // swapping roles swaps precision and recall; F is unchanged
        let t = |s: &str| tokenize(s);
        let ab = rouge_l_prf(&t("a b c d"), &t("a c"));
        let ba = rouge_l_prf(&t("a c"), &t("a b c d"));
        assert_eq!((ab.0, ab.1), (0.5, 1.0));
        assert_eq!((ba.0, ba.1), (ab.1, ab.0));
        assert_eq!(ab.2, ba.2);
    }

    #[test]
    fn histogram_bins_and_quartiles() {
        let h = Histogram::of(&[0.0, 0.05, 0.1, 0.95, 1.0]).unwrap();
        assert_eq!(h.bins.iter().sum::<usize>(), 5);
        assert_eq!(h.bins[0], 2);
        assert_eq!(h.bins[1], 1);
        assert_eq!(h.bins[9], 2);
        assert_eq!(h.median, 0.1);
        assert!(Histogram::of(&[1.5]).is_err());
    }

    #[test]
    fn aggregate_is_mean_of_rows() {
        let items: Vec<ScoredPair> = (0..9)
            .map(|i| ScoredPair {
                instance_id: format!("i{i}"),
                annotator_id: format!("A{}", i % 3),
                predicted: LabelSet::from_bits(1 + (i % 7) as u8),
                gold: LabelSet::from_bits(1 + ((i * 5) % 7) as u8),
                rouge_l: Some(i as f64 / 10.0),
                semantic_similarity: None,
            })
            .collect();
        let ann: Vec<String> = (0..3).map(|i| format!("A{i}")).collect();
        let r = EvalReport::build(&items, &ann, "tau=0.5", UndefinedClass::Exclude).unwrap();
        let mean = r.rows.iter().map(|x| x.macro_f1).sum::<f64>() / 3.0;
        assert!((r.aggregate.macro_f1 - mean).abs() < 1e-12);
        assert!(r.aggregate.semantic_similarity.is_none());
        assert!(r.render_table().contains("aggregate"));
    }
}
