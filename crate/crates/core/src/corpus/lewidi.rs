//! Importer for the LeWiDi shared-task release layout of VariErrNLI.
//!
//! The release is a directory of JSON files, one object per split keyed by
//! item id, plus an optional annotator metadata file. Each item carries
//! `text.context`, `text.statement`, a comma-separated label string per
//! annotator under `annotations`, and per-label explanations under
//! `explanations` or `other_info.explanations`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use super::{AnnotatorJudgment, AnnotatorProfile, Corpus, Instance, Label, LabeledRationale, Split};
use crate::error::{Error, Result};

/// Summary of an import run.
#[derive(Debug, Clone)]
pub struct LewidiImport {
    pub corpus: Corpus,
    pub files: Vec<PathBuf>,
    pub used_builtin_profiles: bool,
}

/// Demographics of the four VariErrNLI annotators, used when the release
/// ships without a metadata file.
fn builtin_profile(id: &str) -> Option<AnnotatorProfile> {
    let (gender, age, nationality, education) = match id {
        "Ann1" => ("F", 22, "CN", "MSc"),
        "Ann2" => ("M", 33, "DE", "Postdoc"),
        "Ann3" => ("F", 25, "CN", "MSc"),
        "Ann4" => ("M", 25, "CN", "MSc"),
        _ => return None,
    };
    Some(AnnotatorProfile {
        id: id.to_string(),
        gender: gender.into(),
        age,
        nationality: nationality.into(),
        education: education.into(),
    })
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::parse(
            format!("{} line {} column {}", path.display(), e.line(), e.column()),
            e.to_string(),
        )
    })
}

fn is_meta_file(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.to_ascii_lowercase().contains("meta"))
        .unwrap_or(false)
}

fn split_from_name(path: &Path) -> Option<Split> {
    let name = path.file_stem()?.to_str()?.to_ascii_lowercase();
    ["train", "dev", "test"]
        .into_iter()
        .find(|s| name.contains(s))
        .and_then(Split::parse)
}

fn field<'a>(obj: &'a Map<String, Value>, names: &[&str]) -> Option<&'a Value> {
    names.iter().find_map(|n| {
        obj.iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(n))
            .map(|(_, v)| v)
    })
}

fn as_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_profiles(meta: &Value, path: &Path) -> Result<Vec<AnnotatorProfile>> {
    let obj = meta
        .as_object()
        .ok_or_else(|| Error::parse(path.display().to_string(), "metadata must be an object keyed by annotator id"))?;
    let mut out = Vec::new();
    for (id, v) in obj {
        let locus = format!("{} annotator {id}", path.display());
        let fields = v
            .as_object()
            .ok_or_else(|| Error::parse(&locus, "metadata entry must be an object"))?;
        let get = |names: &[&str]| -> Result<String> {
            field(fields, names)
                .and_then(as_text)
                .ok_or_else(|| Error::parse(&locus, format!("missing field {}", names[0])))
        };
        let age_text = get(&["age"])?;
        let age = age_text
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::parse(&locus, format!("age `{age_text}` is not a number")))?
            .round() as u32;
        out.push(AnnotatorProfile {
            id: id.clone(),
            gender: get(&["gender"])?,
            age,
            nationality: get(&["nationality"])?,
            education: get(&["education"])?,
        });
    }
    Ok(out)
}

fn labels_of(v: &Value, locus: &str) -> Result<Vec<Label>> {
    let raw: Vec<String> = match v {
        Value::String(s) => s.split(',').map(|x| x.to_string()).collect(),
        Value::Array(items) => items.iter().filter_map(as_text).collect(),
        Value::Null => Vec::new(),
        _ => return Err(Error::parse(locus, "annotation must be a string or list")),
    };
    raw.iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| Label::parse(s).ok_or_else(|| Error::parse(locus, format!("unknown label `{s}`"))))
        .collect()
}

fn explanations_of(v: &Value) -> Vec<String> {
    match v {
        Value::String(s) => vec![s.clone()],
        Value::Array(items) => items.iter().filter_map(as_text).collect(),
        _ => Vec::new(),
    }
}

struct RawItem {
    key: String,
    split: Split,
    context: String,
    statement: String,
    judgments: Vec<AnnotatorJudgment>,
}

fn parse_item(key: &str, v: &Value, default_split: Option<Split>, path: &Path) -> Result<RawItem> {
    let locus = format!("{} record {key}", path.display());
    let obj = v
        .as_object()
        .ok_or_else(|| Error::parse(&locus, "record must be an object"))?;
    let text = field(obj, &["text"]).and_then(Value::as_object);
    let pick = |names: &[&str]| -> Option<String> {
        text.and_then(|t| field(t, names))
            .or_else(|| field(obj, names))
            .and_then(as_text)
    };
    let context = pick(&["context", "premise"])
        .ok_or_else(|| Error::parse(&locus, "missing text.context"))?;
    let statement = pick(&["statement", "hypothesis"])
        .ok_or_else(|| Error::parse(&locus, "missing text.statement"))?;
    let split = match field(obj, &["split"]).and_then(as_text) {
        Some(s) => Split::parse(&s).ok_or_else(|| Error::parse(&locus, format!("unknown split `{s}`")))?,
        None => default_split.ok_or_else(|| Error::parse(&locus, "split not given and not inferable from file name"))?,
    };
    let annotations = match field(obj, &["annotations"]) {
        Some(Value::Object(m)) => m.clone(),
        Some(Value::Null) | None => Map::new(),
        Some(_) => return Err(Error::parse(&locus, "annotations must be an object keyed by annotator")),
    };
    let explanations = field(obj, &["explanations", "rationales"])
        .or_else(|| {
            field(obj, &["other_info"])
                .and_then(Value::as_object)
                .and_then(|o| field(o, &["explanations", "explanation", "rationales"]))
        })
        .and_then(Value::as_object)
        .cloned()
        .unwrap_or_default();

    let mut judgments = Vec::new();
    for (annotator, raw) in &annotations {
        let alocus = format!("{locus} annotator {annotator}");
        let labels = labels_of(raw, &alocus)?;
        if labels.is_empty() {
            continue;
        }
        let texts = explanations.get(annotator).map(explanations_of).unwrap_or_default();
        if texts.len() != labels.len() {
            return Err(Error::parse(
                &alocus,
                format!(
                    "schema mismatch: {} labels but {} explanations (expected one explanation per label)",
                    labels.len(),
                    texts.len()
                ),
            ));
        }
        judgments.push(AnnotatorJudgment {
            annotator_id: annotator.clone(),
            pairs: labels
                .into_iter()
                .zip(texts)
                .map(|(label, rationale)| LabeledRationale {
                    label,
                    rationale: rationale.trim().to_string(),
                })
                .collect(),
        });
    }
    Ok(RawItem {
        key: key.to_string(),
        split,
        context: context.trim().to_string(),
        statement: statement.trim().to_string(),
        judgments,
    })
}

fn key_order(k: &str) -> (u64, String) {
    (k.parse::<u64>().unwrap_or(u64::MAX), k.to_string())
}

/// Converts a release directory (or a single release file) into a corpus.
pub fn import_lewidi(release: impl AsRef<Path>) -> Result<LewidiImport> {
    let release = release.as_ref();
    let mut data_files = Vec::new();
    let mut meta_files = Vec::new();
    if release.is_dir() {
        let entries = std::fs::read_dir(release).map_err(|e| Error::io(release, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(release, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            if is_meta_file(&path) {
                meta_files.push(path);
            } else {
                data_files.push(path);
            }
        }
    } else if release.exists() {
        data_files.push(release.to_path_buf());
    } else {
        return Err(Error::Missing(format!("release path {}", release.display())));
    }
    if data_files.is_empty() {
        return Err(Error::Missing(format!("no release json files under {}", release.display())));
    }
    data_files.sort_by_key(|p| (split_from_name(p), p.clone()));
    meta_files.sort();

    let mut items = Vec::new();
    for path in &data_files {
        let value = read_json(path)?;
        let obj = value.as_object().ok_or_else(|| {
            Error::parse(path.display().to_string(), "release file must be an object keyed by item id")
        })?;
        let mut keys: Vec<&String> = obj.keys().collect();
        keys.sort_by_key(|k| key_order(k));
        for key in keys {
            items.push(parse_item(key, &obj[key], split_from_name(path), path)?);
        }
    }

    let mut used_builtin = false;
    let mut profiles: BTreeMap<String, AnnotatorProfile> = BTreeMap::new();
    for path in &meta_files {
        for p in parse_profiles(&read_json(path)?, path)? {
            profiles.insert(p.id.clone(), p);
        }
    }
    let judged: BTreeSet<&str> = items
        .iter()
        .flat_map(|i| i.judgments.iter().map(|j| j.annotator_id.as_str()))
        .collect();
    for id in judged {
        if !profiles.contains_key(id) {
            let p = builtin_profile(id).ok_or_else(|| {
                Error::Missing(format!("metadata for annotator {id} (no *meta*.json in release)"))
            })?;
            used_builtin = true;
            profiles.insert(id.to_string(), p);
        }
    }
    let mut annotators: Vec<AnnotatorProfile> = profiles.into_values().collect();
    annotators.sort_by_key(|a| key_order(a.id.trim_start_matches(|c: char| !c.is_ascii_digit())));

    let mut seen = BTreeSet::new();
    let collide = items.iter().any(|i| !seen.insert(i.key.as_str()));
    let instances = items
        .into_iter()
        .map(|i| Instance {
            id: if collide {
                format!("{}-{}", i.split, i.key)
            } else {
                i.key
            },
            split: i.split,
            context: i.context,
            statement: i.statement,
            judgments: i.judgments,
        })
        .collect();
    Ok(LewidiImport {
        corpus: Corpus::new(annotators, instances)?,
        files: data_files,
        used_builtin_profiles: used_builtin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRAIN: &str = r#"{
      "2": {"text": {"context": "A man plays guitar.", "statement": "Someone makes music."},
            "annotators": "Ann1,Ann2", "number of annotations": 2,
            "annotations": {"Ann1": "entailment", "Ann2": "entailment,neutral"},
            "other_info": {"explanations": {"Ann1": ["guitar is music"], "Ann2": ["playing makes music", "could be tuning"]}},
            "split": "train", "lang": "en"},
      "10": {"text": {"context": "It is sunny.", "statement": "It rains."},
            "annotations": {"Ann3": "contradiction"},
            "explanations": {"Ann3": "sunny means no rain"}}
    }"#;

    #[test]
    fn imports_release_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("VariErrNLI_train.json"), TRAIN).unwrap();
        let imp = import_lewidi(dir.path()).unwrap();
        assert!(imp.used_builtin_profiles);
        let c = &imp.corpus;
        assert_eq!(c.instances().len(), 2);
        assert_eq!(c.instances()[0].id, "2");
        assert_eq!(c.instances()[1].split, Split::Train);
        assert_eq!(c.annotators().len(), 3);
        let s = c.stats();
        assert_eq!(s.get("train").unwrap().annotations, 4);
    }

    #[test]
    fn import_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("VariErrNLI_train.json"), TRAIN).unwrap();
        let a = import_lewidi(dir.path()).unwrap().corpus.to_jsonl();
        let b = import_lewidi(dir.path()).unwrap().corpus.to_jsonl();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_reports_locus() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("VariErrNLI_dev.json"), &TRAIN[..120]).unwrap();
        match import_lewidi(dir.path()) {
            Err(Error::Parse { locus, .. }) => assert!(locus.contains("VariErrNLI_dev.json")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_explanations_are_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = r#"{"1": {"text": {"context": "c", "statement": "s"}, "split": "dev",
                      "annotations": {"Ann1": "entailment,neutral"},
                      "explanations": {"Ann1": ["only one"]}}}"#;
        std::fs::write(dir.path().join("x.json"), bad).unwrap();
        let err = import_lewidi(dir.path()).unwrap_err().to_string();
        assert!(err.contains("schema mismatch"), "{err}");
    }

    #[test]
    fn metadata_file_overrides_builtin_profiles() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("VariErrNLI_train.json"), TRAIN).unwrap();
        let meta = r#"{"Ann1": {"Gender": "Female", "Age": "22", "Nationality": "Chinese", "Education": "Master"},
                       "Ann2": {"Gender": "Male", "Age": 33, "Nationality": "German", "Education": "Postdoc"},
                       "Ann3": {"Gender": "Female", "Age": 25, "Nationality": "Chinese", "Education": "Master"}}"#;
        std::fs::write(dir.path().join("VariErrNLI_annotators_meta.json"), meta).unwrap();
        let imp = import_lewidi(dir.path()).unwrap();
        assert!(!imp.used_builtin_profiles);
        assert_eq!(imp.corpus.profile("Ann2").unwrap().nationality, "German");
    }
}
