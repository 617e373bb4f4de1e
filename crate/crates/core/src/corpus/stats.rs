use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Corpus, Instance, Label, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCount {
    pub label: Label,
    pub count: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    /// `train`, `dev`, `test`, or `total`.
    pub name: String,
    pub instances: usize,
    pub annotators: usize,
    pub annotations: usize,
    pub avg_annotations_per_instance: f64,
    pub explanations: usize,
    pub avg_explanation_length: f64,
    /// Class order C, E, N.
    pub labels: Vec<LabelCount>,
    /// Corpus annotator order.
    pub per_annotator: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub splits: Vec<SplitStats>,
}

impl StatsReport {
    pub fn get(&self, name: &str) -> Option<&SplitStats> {
        self.splits.iter().find(|s| s.name == name)
    }

    /// Plain-text table in the train / dev / test / total column layout.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<34}", "Statistic");
        for s in &self.splits {
            let _ = write!(out, "{:>16}", s.name);
        }
        out.push('\n');
        let row = |out: &mut String, name: &str, f: &dyn Fn(&SplitStats) -> String| {
            let _ = write!(out, "{name:<34}");
            for s in &self.splits {
                let _ = write!(out, "{:>16}", f(s));
            }
            out.push('\n');
        };
        row(&mut out, "Instances", &|s| s.instances.to_string());
        row(&mut out, "Annotators", &|s| s.annotators.to_string());
        row(&mut out, "Annotations", &|s| s.annotations.to_string());
        row(&mut out, "Avg. annotations / instance", &|s| {
            format!("{:.2}", s.avg_annotations_per_instance)
        });
        row(&mut out, "Explanations", &|s| s.explanations.to_string());
        row(&mut out, "Avg. explanation length (words)", &|s| {
            format!("{:.2}", s.avg_explanation_length)
        });
        for (label, name) in [
            (Label::E, "Entailment"),
            (Label::N, "Neutral"),
            (Label::C, "Contradiction"),
        ] {
            row(&mut out, name, &|s| {
                let lc = &s.labels[label.index()];
                format!("{} ({:.1}%)", lc.count, lc.percent)
            });
        }
        if let Some(first) = self.splits.first() {
            for (k, (id, _)) in first.per_annotator.iter().enumerate() {
                row(&mut out, id, &|s| s.per_annotator[k].1.to_string());
            }
        }
        out
    }
}

pub(super) fn corpus_stats(corpus: &Corpus) -> StatsReport {
    let mut splits: Vec<SplitStats> = Split::ALL
        .iter()
        .map(|&s| {
            let instances: Vec<&Instance> = corpus.split(s).collect();
            split_stats(corpus, s.as_str(), &instances)
        })
        .collect();
    let all: Vec<&Instance> = corpus.instances().iter().collect();
    splits.push(split_stats(corpus, "total", &all));
    StatsReport { splits }
}

fn split_stats(corpus: &Corpus, name: &str, instances: &[&Instance]) -> SplitStats {
    let mut label_counts = [0usize; 3];
    let mut per_annotator = vec![0usize; corpus.annotators().len()];
    let mut pairs = 0usize;
    let mut words = 0usize;
    for inst in instances {
        for j in &inst.judgments {
            let a = corpus.annotator_index(&j.annotator_id).expect("validated corpus");
            for p in &j.pairs {
                pairs += 1;
                per_annotator[a] += 1;
                label_counts[p.label.index()] += 1;
                words += p.rationale.split_whitespace().count();
            }
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    SplitStats {
        name: name.to_string(),
        instances: instances.len(),
        annotators: per_annotator.iter().filter(|&&c| c > 0).count(),
        annotations: pairs,
        avg_annotations_per_instance: ratio(pairs, instances.len()),
        explanations: pairs,
        avg_explanation_length: ratio(words, pairs),
        labels: Label::ALL
            .iter()
            .map(|&l| LabelCount {
                label: l,
                count: label_counts[l.index()],
                percent: 100.0 * ratio(label_counts[l.index()], pairs),
            })
            .collect(),
        per_annotator: corpus
            .annotators()
            .iter()
            .zip(per_annotator)
            .map(|(a, c)| (a.id.clone(), c))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::fixture;
    use super::super::*;

    #[test]
    fn counts_pairs_as_annotations() {
        let c = fixture();
        let r = c.stats();
        let train = r.get("train").unwrap();
        assert_eq!(train.instances, 1);
        assert_eq!(train.annotations, 3);
        assert_eq!(train.explanations, 3);
        assert_eq!(train.annotators, 2);
        let total = r.get("total").unwrap();
        assert_eq!(total.annotations, 5);
        let sum: usize = total.per_annotator.iter().map(|(_, c)| c).sum();
        assert_eq!(sum, total.annotations);
        let pct: f64 = total.labels.iter().map(|l| l.percent).sum();
        assert!((pct - 100.0).abs() < 0.1);
        assert!(r.render_table().contains("Contradiction"));
    }

    #[test]
    fn single_pair_of_five_words() {
        let text = r#"{"kind":"annotator","id":"A1","gender":"F","age":22,"nationality":"CN","education":"MSc"}
{"kind":"instance","id":"x","split":"train","context":"c","statement":"s","judgments":{"A1":[{"label":"N","rationale":"one two three four five"}]}}"#;
        let c = Corpus::parse_jsonl(text).unwrap();
        assert_eq!(c.stats().get("train").unwrap().avg_explanation_length, 5.0);
    }
}
