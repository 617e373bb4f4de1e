//! Disaggregated NLI corpus: instances, annotator profiles, per-annotator
//! judgments, and the masked supervision tensors derived from them.
//!
//! On disk a corpus is a JSON-lines file with two record kinds:
//!
//! ```text
//! {"kind":"annotator","id":"Ann1","gender":"F","age":22,"nationality":"CN","education":"MSc"}
//! {"kind":"instance","id":"17","split":"train","context":"...","statement":"...",
//!  "judgments":{"Ann1":[{"label":"E","rationale":"..."}]}}
//! ```
//!
//! Unknown fields (for example second-round validity judgments) are ignored.

mod lewidi;
mod stats;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lewidi::{import_lewidi, LewidiImport};
pub use stats::{LabelCount, SplitStats, StatsReport};

/// NLI label. The declaration order (C, E, N) is the canonical class order
/// used by every tensor and report in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    C,
    E,
    N,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::C, Label::E, Label::N];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Label {
        Label::ALL[i]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::C => "C",
            Label::E => "E",
            Label::N => "N",
        }
    }

    /// Accepts the single-letter codes and the full English names.
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "c" | "contradiction" => Some(Label::C),
            "e" | "entailment" => Some(Label::E),
            "n" | "neutral" => Some(Label::N),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A subset of {C, E, N} stored as a 3-bit mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSet(u8);

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);

    pub fn from_bits(bits: u8) -> LabelSet {
        LabelSet(bits & 0b111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn single(label: Label) -> LabelSet {
        LabelSet(1 << label.index())
    }

    pub fn insert(&mut self, label: Label) {
        self.0 |= 1 << label.index();
    }

    pub fn contains(self, label: Label) -> bool {
        self.0 & (1 << label.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn intersection(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & other.0)
    }

    pub fn union(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 | other.0)
    }

    /// Labels in canonical C < E < N order.
    pub fn iter(self) -> impl Iterator<Item = Label> {
        Label::ALL.into_iter().filter(move |l| self.contains(*l))
    }

    /// Binary indicator vector in class order.
    pub fn to_vector(self) -> [u8; 3] {
        [0, 1, 2].map(|i| (self.0 >> i) & 1)
    }

    pub fn from_vector(v: [u8; 3]) -> LabelSet {
        let mut s = LabelSet::EMPTY;
        for (i, &b) in v.iter().enumerate() {
            if b != 0 {
                s.insert(Label::from_index(i));
            }
        }
        s
    }
}

impl FromIterator<Label> for LabelSet {
    fn from_iter<I: IntoIterator<Item = Label>>(iter: I) -> Self {
        let mut s = LabelSet::EMPTY;
        for l in iter {
            s.insert(l);
        }
        s
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.iter().map(Label::as_str).collect();
        f.write_str(&parts.join(" "))
    }
}

impl LabelSet {
    /// Parses whitespace-separated labels such as `"E N"`.
    pub fn parse(s: &str) -> Option<LabelSet> {
        s.split_whitespace().map(Label::parse).collect::<Option<LabelSet>>()
    }
}

impl Serialize for LabelSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LabelSet::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad label set `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "dev" | "validation" | "val" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub id: String,
    pub gender: String,
    pub age: u32,
    pub nationality: String,
    pub education: String,
}

/// One (label, rationale) pair. A pair is the counting unit for both
/// annotations and explanations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRationale {
    pub label: Label,
    pub rationale: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatorJudgment {
    pub annotator_id: String,
    pub pairs: Vec<LabeledRationale>,
}

impl AnnotatorJudgment {
    pub fn label_set(&self) -> LabelSet {
        self.pairs.iter().map(|p| p.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub split: Split,
    pub context: String,
    pub statement: String,
    /// Ordered by the corpus annotator declaration order.
    pub judgments: Vec<AnnotatorJudgment>,
}

impl Instance {
    pub fn judgment(&self, annotator_id: &str) -> Option<&AnnotatorJudgment> {
        self.judgments.iter().find(|j| j.annotator_id == annotator_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    annotators: Vec<AnnotatorProfile>,
    instances: Vec<Instance>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Annotator(AnnotatorProfile),
    Instance(InstanceRecord),
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    split: Split,
    context: String,
    statement: String,
    judgments: BTreeMap<String, Vec<LabeledRationale>>,
}

impl Corpus {
    /// Validates every corpus invariant and orders judgments by annotator.
    pub fn new(annotators: Vec<AnnotatorProfile>, mut instances: Vec<Instance>) -> Result<Corpus> {
        let mut seen = BTreeSet::new();
        for a in &annotators {
            if a.id.trim().is_empty() {
                return Err(Error::Invariant("annotator with empty id".into()));
            }
            if !seen.insert(a.id.as_str()) {
                return Err(Error::Invariant(format!("duplicate annotator id {}", a.id)));
            }
            if a.age == 0 {
                return Err(Error::Invariant(format!("non-positive age for annotator {}", a.id)));
            }
        }
        let order: HashMap<&str, usize> = annotators
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.as_str(), i))
            .collect();

        let mut ids = BTreeSet::new();
        for inst in &mut instances {
            if !ids.insert(inst.id.clone()) {
                return Err(Error::Invariant(format!("duplicate instance id {}", inst.id)));
            }
            if inst.context.trim().is_empty() {
                return Err(Error::Invariant(format!("empty context at {}", inst.id)));
            }
            if inst.statement.trim().is_empty() {
                return Err(Error::Invariant(format!("empty statement at {}", inst.id)));
            }
            let mut judged = BTreeSet::new();
            for j in &inst.judgments {
                if !order.contains_key(j.annotator_id.as_str()) {
                    return Err(Error::UnknownAnnotator(format!(
                        "{} (instance {})",
                        j.annotator_id, inst.id
                    )));
                }
                if !judged.insert(j.annotator_id.as_str()) {
                    return Err(Error::Invariant(format!(
                        "duplicate judgment by {} at {}",
                        j.annotator_id, inst.id
                    )));
                }
                if j.pairs.is_empty() {
                    return Err(Error::Invariant(format!(
                        "empty judgment by {} at {}",
                        j.annotator_id, inst.id
                    )));
                }
                let mut labels = BTreeSet::new();
                for p in &j.pairs {
                    if p.rationale.trim().is_empty() {
                        return Err(Error::Invariant(format!("empty rationale at {}", inst.id)));
                    }
                    if !labels.insert(p.label) {
                        return Err(Error::Invariant(format!(
                            "repeated label {} by {} at {}",
                            p.label, j.annotator_id, inst.id
                        )));
                    }
                }
            }
            inst.judgments
                .sort_by_key(|j| order[j.annotator_id.as_str()]);
        }
        Ok(Corpus {
            annotators,
            instances,
        })
    }

    pub fn annotators(&self) -> &[AnnotatorProfile] {
        &self.annotators
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn annotator_ids(&self) -> Vec<String> {
        self.annotators.iter().map(|a| a.id.clone()).collect()
    }

    pub fn annotator_index(&self, id: &str) -> Result<usize> {
        self.annotators
            .iter()
            .position(|a| a.id == id)
            .ok_or_else(|| Error::UnknownAnnotator(id.to_string()))
    }

    pub fn profile(&self, id: &str) -> Result<&AnnotatorProfile> {
        Ok(&self.annotators[self.annotator_index(id)?])
    }

    pub fn instance(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |i| i.split == split)
    }

    /// A corpus with the same annotators restricted to the chosen instances.
    pub fn subset<F: Fn(&Instance) -> bool>(&self, keep: F) -> Corpus {
        Corpus {
            annotators: self.annotators.clone(),
            instances: self.instances.iter().filter(|i| keep(i)).cloned().collect(),
        }
    }

    /// Returns a copy with every instance reassigned to `split`.
    pub fn with_split(&self, split: Split) -> Corpus {
        let mut c = self.clone();
        for i in &mut c.instances {
            i.split = split;
        }
        c
    }

    pub fn parse_jsonl(text: &str) -> Result<Corpus> {
        let mut annotators = Vec::new();
        let mut instances = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(line)
                .map_err(|e| Error::parse(format!("line {}", lineno + 1), e.to_string()))?;
            match record {
                Record::Annotator(a) => annotators.push(a),
                Record::Instance(r) => instances.push(Instance {
                    id: r.id,
                    split: r.split,
                    context: r.context,
                    statement: r.statement,
                    judgments: r
                        .judgments
                        .into_iter()
                        .map(|(annotator_id, pairs)| AnnotatorJudgment {
                            annotator_id,
                            pairs,
                        })
                        .collect(),
                }),
            }
        }
        Corpus::new(annotators, instances)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for a in &self.annotators {
            out.push_str(&serde_json::to_string(&Record::Annotator(a.clone())).expect("serializable"));
            out.push('\n');
        }
        for i in &self.instances {
            let record = Record::Instance(InstanceRecord {
                id: i.id.clone(),
                split: i.split,
                context: i.context.clone(),
                statement: i.statement.clone(),
                judgments: i
                    .judgments
                    .iter()
                    .map(|j| (j.annotator_id.clone(), j.pairs.clone()))
                    .collect(),
            });
            out.push_str(&serde_json::to_string(&record).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn stats(&self) -> StatsReport {
        stats::corpus_stats(self)
    }

    /// Distinct values of each categorical metadata field, sorted.
    pub fn category_vocabularies(&self) -> CategoryVocabularies {
        let collect = |f: fn(&AnnotatorProfile) -> &str| -> Vec<String> {
            self.annotators
                .iter()
                .map(|a| f(a).to_string())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        };
        CategoryVocabularies {
            gender: collect(|a| &a.gender),
            nationality: collect(|a| &a.nationality),
            education: collect(|a| &a.education),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocabularies {
    pub gender: Vec<String>,
    pub nationality: Vec<String>,
    pub education: Vec<String>,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::parse_jsonl(&text)
}

/// Instance × annotator × class indicator array with an observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationTensor {
    pub instance_ids: Vec<String>,
    pub annotator_ids: Vec<String>,
    labels: Vec<u8>,
    mask: Vec<u8>,
}

impl AnnotationTensor {
    pub fn n_instances(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn n_annotators(&self) -> usize {
        self.annotator_ids.len()
    }

    pub fn label(&self, i: usize, j: usize, c: usize) -> u8 {
        self.labels[(i * self.n_annotators() + j) * 3 + c]
    }

    pub fn labels_of(&self, i: usize, j: usize) -> [u8; 3] {
        let o = (i * self.n_annotators() + j) * 3;
        [self.labels[o], self.labels[o + 1], self.labels[o + 2]]
    }

    pub fn label_set(&self, i: usize, j: usize) -> LabelSet {
        LabelSet::from_vector(self.labels_of(i, j))
    }

    pub fn mask(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n_annotators() + j] != 0
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }

    pub fn row_of(&self, instance_id: &str) -> Option<usize> {
        self.instance_ids.iter().position(|i| i == instance_id)
    }

    pub fn column_of(&self, annotator_id: &str) -> Option<usize> {
        self.annotator_ids.iter().position(|a| a == annotator_id)
    }

    /// Observed (row, column) pairs in row-major order.
    pub fn observed(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let a = self.n_annotators();
        (0..self.n_instances())
            .flat_map(move |i| (0..a).map(move |j| (i, j)))
            .filter(move |&(i, j)| self.mask(i, j))
    }

    /// Raw label buffer, `[instance][annotator][class]` row-major.
    pub fn raw_labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_mask(&self) -> &[u8] {
        &self.mask
    }

    /// Builds a tensor directly from arrays; checks the mask/label invariants.
    pub fn from_parts(
        instance_ids: Vec<String>,
        annotator_ids: Vec<String>,
        labels: Vec<u8>,
        mask: Vec<u8>,
    ) -> Result<AnnotationTensor> {
        let (n, a) = (instance_ids.len(), annotator_ids.len());
        if labels.len() != n * a * 3 || mask.len() != n * a {
            return Err(Error::Shape(format!(
                "annotation tensor for {n}x{a} given {} labels and {} mask cells",
                labels.len(),
                mask.len()
            )));
        }
        let t = AnnotationTensor {
            instance_ids,
            annotator_ids,
            labels,
            mask,
        };
        for i in 0..n {
            for j in 0..a {
                let any = t.labels_of(i, j).iter().any(|&b| b != 0);
                if t.mask(i, j) != any {
                    return Err(Error::Invariant(format!(
                        "mask/label mismatch at instance {} annotator {}",
                        t.instance_ids[i], t.annotator_ids[j]
                    )));
                }
            }
        }
        Ok(t)
    }
}

pub fn build_annotation_tensor(corpus: &Corpus, split: Split) -> Result<AnnotationTensor> {
    let instances: Vec<&Instance> = corpus.split(split).collect();
    if instances.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    Ok(tensor_for(corpus, &instances))
}

/// Tensor over an explicit list of instances (any split).
pub fn tensor_for(corpus: &Corpus, instances: &[&Instance]) -> AnnotationTensor {
    let a = corpus.annotators.len();
    let mut labels = vec![0u8; instances.len() * a * 3];
    let mut mask = vec![0u8; instances.len() * a];
    for (i, inst) in instances.iter().enumerate() {
        for judgment in &inst.judgments {
            let j = corpus
                .annotator_index(&judgment.annotator_id)
                .expect("validated corpus");
            mask[i * a + j] = 1;
            for pair in &judgment.pairs {
                labels[(i * a + j) * 3 + pair.label.index()] = 1;
            }
        }
    }
    AnnotationTensor {
        instance_ids: instances.iter().map(|i| i.id.clone()).collect(),
        annotator_ids: corpus.annotator_ids(),
        labels,
        mask,
    }
}

/// Mean of the observed annotators' label vectors for every instance.
pub fn soft_targets(tensor: &AnnotationTensor) -> Result<Vec<[f64; 3]>> {
    (0..tensor.n_instances())
        .map(|i| {
            let mut sums = [0u32; 3];
            let mut observed = 0u32;
            for j in 0..tensor.n_annotators() {
                if tensor.mask(i, j) {
                    observed += 1;
                    for (c, s) in sums.iter_mut().enumerate() {
                        *s += tensor.label(i, j, c) as u32;
                    }
                }
            }
            if observed == 0 {
                return Err(Error::Unobserved(tensor.instance_ids[i].clone()));
            }
            Ok(sums.map(|s| s as f64 / observed as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fixture() -> Corpus {
        let text = r#"{"kind":"annotator","id":"A1","gender":"F","age":22,"nationality":"CN","education":"MSc"}
{"kind":"annotator","id":"A2","gender":"M","age":33,"nationality":"DE","education":"Postdoc"}
{"kind":"annotator","id":"A3","gender":"F","age":25,"nationality":"CN","education":"MSc"}
{"kind":"annotator","id":"A4","gender":"M","age":25,"nationality":"CN","education":"MSc"}
{"kind":"instance","id":"i1","split":"train","context":"The cat sat on the mat.","statement":"A cat is sitting.","judgments":{"A1":[{"label":"E","rationale":"the cat sat so it is sitting"}],"A2":[{"label":"E","rationale":"sitting is implied"},{"label":"N","rationale":"maybe it stood up later"}]}}
{"kind":"instance","id":"i2","split":"dev","context":"It rained all day.","statement":"The ground is dry.","judgments":{"A3":[{"label":"C","rationale":"rain makes the ground wet"}],"A4":[{"label":"N","rationale":"the ground could be covered"}]}}
"#;
        Corpus::parse_jsonl(text).unwrap()
    }

    #[test]
    fn loads_fixture() {
        let c = fixture();
        assert_eq!(c.instances().len(), 2);
        assert_eq!(c.annotators().len(), 4);
        let j = c.instances()[0].judgment("A2").unwrap();
        assert_eq!(j.label_set(), [Label::E, Label::N].into_iter().collect());
    }

    #[test]
    fn empty_rationale_is_rejected() {
        let text = r#"{"kind":"annotator","id":"A1","gender":"F","age":22,"nationality":"CN","education":"MSc"}
{"kind":"instance","id":"x9","split":"train","context":"c","statement":"s","judgments":{"A1":[{"label":"E","rationale":"  "}]}}"#;
        let err = Corpus::parse_jsonl(text).unwrap_err();
        assert_eq!(err.to_string(), "empty rationale at x9");
    }

    #[test]
    fn unknown_annotator_is_rejected() {
        let text = r#"{"kind":"annotator","id":"A1","gender":"F","age":22,"nationality":"CN","education":"MSc"}
{"kind":"instance","id":"x","split":"train","context":"c","statement":"s","judgments":{"B7":[{"label":"E","rationale":"r"}]}}"#;
        assert!(matches!(
            Corpus::parse_jsonl(text),
            Err(Error::UnknownAnnotator(_))
        ));
    }

    #[test]
    fn parse_error_names_the_line() {
        let text = "{\"kind\":\"annotator\",\"id\":\"A1\",\"gender\":\"F\",\"age\":22,\"nationality\":\"CN\",\"education\":\"MSc\"}\n{broken";
        match Corpus::parse_jsonl(text) {
            Err(Error::Parse { locus, .. }) => assert_eq!(locus, "line 2"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_labels_and_zero_age_rejected() {
        let dup = r#"{"kind":"annotator","id":"A1","gender":"F","age":22,"nationality":"CN","education":"MSc"}
{"kind":"instance","id":"x","split":"train","context":"c","statement":"s","judgments":{"A1":[{"label":"E","rationale":"r"},{"label":"E","rationale":"q"}]}}"#;
        assert!(Corpus::parse_jsonl(dup).is_err());
        let age = r#"{"kind":"annotator","id":"A1","gender":"F","age":0,"nationality":"CN","education":"MSc"}"#;
        assert!(Corpus::parse_jsonl(age).is_err());
    }

    #[test]
    fn extra_fields_are_ignored() {
        let text = r#"{"kind":"annotator","id":"A1","gender":"F","age":22,"nationality":"CN","education":"MSc"}
{"kind":"instance","id":"x","split":"test","context":"c","statement":"s","validity":{"A1":[true]},"judgments":{"A1":[{"label":"N","rationale":"r"}]}}"#;
        assert_eq!(Corpus::parse_jsonl(text).unwrap().instances().len(), 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let c = fixture();
        assert_eq!(Corpus::parse_jsonl(&c.to_jsonl()).unwrap(), c);
    }

    #[test]
    fn tensor_rows_and_mask() {
        let c = fixture();
        let t = build_annotation_tensor(&c, Split::Train).unwrap();
        assert_eq!(t.labels_of(0, 0), [0, 1, 0]);
        assert!(t.mask(0, 0));
        assert_eq!(t.labels_of(0, 2), [0, 0, 0]);
        assert!(!t.mask(0, 2));
        assert_eq!(t.labels_of(0, 1), [0, 1, 1]);
        assert!(build_annotation_tensor(&c.subset(|i| i.split == Split::Dev), Split::Train).is_err());
    }

    fn tensor_from_rows(rows: &[Option<[u8; 3]>]) -> AnnotationTensor {
        let mut labels = Vec::new();
        let mut mask = Vec::new();
        for r in rows {
            labels.extend_from_slice(&r.unwrap_or([0, 0, 0]));
            mask.push(r.is_some() as u8);
        }
        AnnotationTensor::from_parts(
            vec!["i".into()],
            (0..rows.len()).map(|j| format!("a{j}")).collect(),
            labels,
            mask,
        )
        .unwrap()
    }

    #[test]
    fn soft_target_unanimity_and_mean() {
        let t = tensor_from_rows(&[Some([0, 1, 0]); 4]);
        assert_eq!(soft_targets(&t).unwrap()[0], [0.0, 1.0, 0.0]);
        let t = tensor_from_rows(&[
            Some([1, 0, 0]),
            Some([0, 1, 0]),
            Some([0, 1, 0]),
            Some([0, 0, 1]),
        ]);
        assert_eq!(soft_targets(&t).unwrap()[0], [0.25, 0.5, 0.25]);
    }

    #[test]
    fn soft_target_excludes_masked_annotator() {
        let rows = [Some([1, 1, 0]), None, Some([0, 1, 0]), Some([0, 0, 1])];
        let t = tensor_from_rows(&rows);
        // brute force over observed rows only
        let observed: Vec<[u8; 3]> = rows.iter().flatten().copied().collect();
        let expect: Vec<f64> = (0..3)
            .map(|c| observed.iter().map(|r| r[c] as f64).sum::<f64>() / observed.len() as f64)
            .collect();
        let got = soft_targets(&t).unwrap()[0];
        assert_eq!(got.to_vec(), expect);
        assert_eq!(got[1], 2.0 / 3.0);
    }

    #[test]
    fn soft_target_unobserved_instance_errors() {
        let t = tensor_from_rows(&[None, None]);
        assert!(matches!(soft_targets(&t), Err(Error::Unobserved(_))));
    }

    #[test]
    fn from_parts_rejects_inconsistent_mask() {
        let err = AnnotationTensor::from_parts(
            vec!["i".into()],
            vec!["a".into()],
            vec![1, 0, 0],
            vec![0],
        );
        assert!(err.is_err());
    }

    #[test]
    fn label_set_display_is_canonical() {
        let s: LabelSet = [Label::N, Label::E].into_iter().collect();
        assert_eq!(s.to_string(), "E N");
        assert_eq!(Label::parse("Entailment"), Some(Label::E));
    }
}
