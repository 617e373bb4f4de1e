//! Rule-based synthetic corpus with known annotator behaviour.
//!
//! Each context plants keyword evidence for the three classes at levels
//! 0..=3. A persona labels class `c` when its level reaches the persona's
//! threshold `θ_c`; if nothing qualifies it falls back to the class with the
//! largest `level − θ` (ties C < E < N). Every (persona, label) pair has one
//! fixed rationale template.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    AnnotatorJudgment, AnnotatorProfile, Corpus, Instance, Label, LabelSet, LabeledRationale, Split,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Persona {
    pub profile: AnnotatorProfile,
    /// Evidence level needed per class (C, E, N).
    pub thresholds: [u8; 3],
    /// Rationale per class (C, E, N).
    pub templates: [String; 3],
}

impl Persona {
    pub fn label_set(&self, levels: [u8; 3]) -> LabelSet {
        let set: LabelSet = Label::ALL
            .into_iter()
            .filter(|l| levels[l.index()] >= self.thresholds[l.index()])
            .collect();
        if !set.is_empty() {
            return set;
        }
        let margin = |c: usize| levels[c] as i32 - self.thresholds[c] as i32;
        let mut best = 0;
        for c in 1..3 {
            if margin(c) > margin(best) {
                best = c;
            }
        }
        LabelSet::single(Label::from_index(best))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_instances: usize,
    pub personas: Vec<Persona>,
    /// Train and dev fractions; the remainder is test.
    pub train_fraction: f64,
    pub dev_fraction: f64,
    /// Probability that a second class receives weaker evidence.
    pub secondary_rate: f64,
    /// Tokens per context, keywords included.
    pub context_len: usize,
    pub seed: u64,
}

fn profile(id: &str, gender: &str, age: u32, nationality: &str, education: &str) -> AnnotatorProfile {
    AnnotatorProfile {
        id: id.into(),
        gender: gender.into(),
        age,
        nationality: nationality.into(),
        education: education.into(),
    }
}

fn templates(c: &str, e: &str, n: &str) -> [String; 3] {
    [c.into(), e.into(), n.into()]
}

pub fn default_personas() -> Vec<Persona> {
    vec![
        Persona {
            profile: profile("Ann1", "F", 22, "CN", "MSc"),
            thresholds: [1, 1, 1],
            templates: templates(
                "the premise flatly rules this out",
                "the premise spells this out directly",
                "the premise says nothing either way",
            ),
        },
        Persona {
            profile: profile("Ann2", "M", 33, "DE", "Postdoc"),
            thresholds: [2, 2, 2],
            templates: templates(
                "these two claims cannot both hold",
                "anyone reading this would infer it",
                "there is too little detail to decide",
            ),
        },
        Persona {
            profile: profile("Ann3", "F", 25, "CN", "MSc"),
            thresholds: [1, 2, 2],
            templates: templates(
                "i see a clear conflict here",
                "i think it follows from the text",
                "i cannot tell from what is given",
            ),
        },
        Persona {
            profile: profile("Ann4", "M", 25, "CN", "MSc"),
            thresholds: [2, 1, 1],
            templates: templates(
                "contradiction because the facts clash",
                "entailment since the facts match",
                "neutral as the facts are unrelated",
            ),
        },
    ]
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_instances: 200,
            personas: default_personas(),
            train_fraction: 0.7,
            dev_fraction: 0.15,
            secondary_rate: 0.25,
            context_len: 12,
            seed: 7,
        }
    }
}

/// Evidence keywords per class.
pub const KEYWORDS: [[&str; 3]; 3] = [
    ["never", "refused", "denied"],
    ["certainly", "confirmed", "indeed"],
    ["perhaps", "rumored", "unclear"],
];

const FILLER: [&str; 32] = [
    "the", "a", "man", "woman", "child", "dog", "park", "city", "morning", "evening", "walked", "talked",
    "near", "with", "old", "young", "house", "street", "friend", "market", "river", "book", "window", "garden",
    "quiet", "busy", "small", "large", "train", "station", "letter", "table",
];

const SUBJECTS: [&str; 8] = ["someone", "the man", "the woman", "a child", "the dog", "a friend", "the group", "people"];
const VERBS: [&str; 6] = ["was outside", "went home", "met others", "stayed late", "saw something", "left early"];

/// Per-instance ground truth recorded alongside the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub instance_id: String,
    pub split: Split,
    pub levels: [u8; 3],
    pub labels: BTreeMap<String, LabelSet>,
}

/// Statistics implied by the generator, computed without the corpus code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyStats {
    pub instances: BTreeMap<String, usize>,
    pub annotations: BTreeMap<String, usize>,
    /// Per split, counts in C, E, N order.
    pub labels: BTreeMap<String, [usize; 3]>,
    pub per_annotator: BTreeMap<String, usize>,
    pub explanation_words: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub spec: SyntheticSpec,
    pub entries: Vec<KeyEntry>,
    pub stats: KeyStats,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 || self.personas.is_empty() {
            return Err(Error::Config("synthetic corpus needs instances and personas".into()));
        }
        if !(self.train_fraction > 0.0 && self.dev_fraction > 0.0 && self.train_fraction + self.dev_fraction <= 1.0) {
            return Err(Error::Config("split fractions must be positive and sum to at most 1".into()));
        }
        if self.context_len < 6 + 2 {
            return Err(Error::Config("context_len must leave room for six keywords".into()));
        }
        for p in &self.personas {
            let mut seen = std::collections::BTreeSet::new();
            for t in &p.templates {
                if t.trim().is_empty() || !seen.insert(t) {
                    return Err(Error::Config(format!("templates of {} must be non-empty and distinct", p.profile.id)));
                }
            }
            if p.thresholds.iter().any(|&t| t == 0 || t > 3) {
                return Err(Error::Config(format!("thresholds of {} must lie in 1..=3", p.profile.id)));
            }
        }
        Ok(())
    }

    /// Generates the corpus and its answer key.
    pub fn generate(&self) -> Result<(Corpus, AnswerKey)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.n_instances;
        let n_train = ((n as f64) * self.train_fraction).round() as usize;
        let n_dev = ((n as f64) * self.dev_fraction).round() as usize;
        let mut splits: Vec<Split> = (0..n)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_dev {
                    Split::Dev
                } else {
                    Split::Test
                }
            })
            .collect();
        splits.shuffle(&mut rng);

        let mut instances = Vec::with_capacity(n);
        let mut entries = Vec::with_capacity(n);
        for (i, split) in splits.into_iter().enumerate() {
            let id = format!("syn-{:04}", i + 1);
            let levels = self.sample_levels(&mut rng);
            let context = self.context(levels, &mut rng);
            let statement = format!("{} {}.", SUBJECTS.choose(&mut rng).unwrap(), VERBS.choose(&mut rng).unwrap());
            let mut labels = BTreeMap::new();
            let judgments = self
                .personas
                .iter()
                .map(|p| {
                    let set = p.label_set(levels);
                    labels.insert(p.profile.id.clone(), set);
                    AnnotatorJudgment {
                        annotator_id: p.profile.id.clone(),
                        pairs: set
                            .iter()
                            .map(|l| LabeledRationale {
                                label: l,
                                rationale: p.templates[l.index()].clone(),
                            })
                            .collect(),
                    }
                })
                .collect();
            instances.push(Instance {
                id: id.clone(),
                split,
                context,
                statement,
                judgments,
            });
            entries.push(KeyEntry {
                instance_id: id,
                split,
                levels,
                labels,
            });
        }
        let corpus = Corpus::new(self.personas.iter().map(|p| p.profile.clone()).collect(), instances)?;
        let stats = self.key_stats(&entries);
        Ok((
            corpus,
            AnswerKey {
                spec: self.clone(),
                entries,
                stats,
            },
        ))
    }

    fn sample_levels(&self, rng: &mut ChaCha8Rng) -> [u8; 3] {
        let mut levels = [0u8; 3];
        let primary = rng.random_range(0..3);
        levels[primary] = rng.random_range(1..=3);
        if levels[primary] >= 2 && rng.random::<f64>() < self.secondary_rate {
            let other = (primary + rng.random_range(1..3)) % 3;
            levels[other] = rng.random_range(1..levels[primary]);
        }
        levels
    }

    fn context(&self, levels: [u8; 3], rng: &mut ChaCha8Rng) -> String {
        let mut words: Vec<&str> = Vec::with_capacity(self.context_len);
        for (c, &lvl) in levels.iter().enumerate() {
            for _ in 0..lvl {
                words.push(KEYWORDS[c].choose(rng).unwrap());
            }
        }
        while words.len() < self.context_len {
            words.push(FILLER.choose(rng).unwrap());
        }
        words.shuffle(rng);
        format!("{}.", words.join(" "))
    }

    fn key_stats(&self, entries: &[KeyEntry]) -> KeyStats {
        let mut s = KeyStats {
            instances: BTreeMap::new(),
            annotations: BTreeMap::new(),
            labels: BTreeMap::new(),
            per_annotator: BTreeMap::new(),
            explanation_words: BTreeMap::new(),
        };
        let template_words = |p: &Persona, l: Label| p.templates[l.index()].split_whitespace().count();
        for e in entries {
            for name in [e.split.as_str(), "total"] {
                *s.instances.entry(name.into()).or_default() += 1;
                for p in &self.personas {
                    let set = e.labels[&p.profile.id];
                    *s.annotations.entry(name.into()).or_default() += set.len();
                    let counts = s.labels.entry(name.into()).or_default();
                    for l in set.iter() {
                        counts[l.index()] += 1;
                        *s.explanation_words.entry(name.into()).or_default() += template_words(p, l);
                    }
                    if name == "total" {
                        *s.per_annotator.entry(p.profile.id.clone()).or_default() += set.len();
                    }
                }
            }
        }
        s
    }
}

impl AnswerKey {
    /// Fraction of (instance, persona) label sets in `corpus` that the
    /// recorded rules regenerate.
    pub fn audit(&self, corpus: &Corpus) -> Result<f64> {
        let personas: BTreeMap<&str, &Persona> =
            self.spec.personas.iter().map(|p| (p.profile.id.as_str(), p)).collect();
        let mut total = 0usize;
        let mut ok = 0usize;
        for e in &self.entries {
            let inst = corpus
                .instance(&e.instance_id)
                .ok_or_else(|| Error::Alignment(format!("instance {} missing from corpus", e.instance_id)))?;
            for (a, p) in &personas {
                total += 1;
                let got = inst.judgment(a).map(|j| j.label_set()).unwrap_or_default();
                if got == p.label_set(e.levels) {
                    ok += 1;
                }
            }
        }
        Ok(ok as f64 / total.max(1) as f64)
    }

    /// Every (persona id, label, template) triple.
    pub fn templates(&self) -> Vec<(String, Label, String)> {
        self.spec
            .personas
            .iter()
            .flat_map(|p| Label::ALL.map(|l| (p.profile.id.clone(), l, p.templates[l.index()].clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let spec = SyntheticSpec::default();
        let (a, key) = spec.generate().unwrap();
        let (b, _) = spec.generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.instances().len(), 200);
        let judgments: usize = a.instances().iter().map(|i| i.judgments.len()).sum();
        assert_eq!(judgments, 800);
        assert_eq!(key.audit(&a).unwrap(), 1.0);
        assert_eq!(key.stats.instances["total"], 200);
    }

    #[test]
    fn rule_examples() {
        let p = &default_personas()[1];
        assert_eq!(p.label_set([0, 1, 0]), LabelSet::single(Label::E));
        assert_eq!(p.label_set([2, 0, 3]), LabelSet::parse("C N").unwrap());
        let p = &default_personas()[3];
        assert_eq!(p.label_set([1, 0, 0]), LabelSet::single(Label::C));
        assert_eq!(p.label_set([3, 1, 0]), LabelSet::parse("C E").unwrap());
    }

    #[test]
    fn personas_disagree_somewhere() {
        let (c, _) = SyntheticSpec::default().generate().unwrap();
        assert!(c.instances().iter().any(|i| {
            let sets: Vec<LabelSet> = i.judgments.iter().map(|j| j.label_set()).collect();
            sets.windows(2).any(|w| w[0] != w[1])
        }));
    }

    #[test]
    fn corpus_stats_match_key() {
        let (c, key) = SyntheticSpec::default().generate().unwrap();
        let report = c.stats();
        for name in ["train", "dev", "test", "total"] {
            let s = report.get(name).unwrap();
            assert_eq!(s.instances, key.stats.instances[name]);
            assert_eq!(s.annotations, key.stats.annotations[name]);
        }
    }
}
