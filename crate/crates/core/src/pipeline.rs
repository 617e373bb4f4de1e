//! End-to-end stages over a run directory. Each stage reads its inputs from
//! the directory (or the configured corpus), writes its outputs there and
//! appends one manifest record.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::{predict_label_set, tune_thresholds, DevItem, ThresholdConfig, TuneResult};
use crate::corpus::{import_lewidi, load_corpus, Corpus, Instance, Split, StatsReport};
use crate::error::{Error, Result};
use crate::explainer::{
    prompt_vocabulary, reference_rationale, train_explainer, Decoding, ExplainerEpoch, ExplainerMode, ExplainerModel,
    ExplainerSettings, GeneratedExplanation, TokenEmbeddingProbe,
};
use crate::gradsuite::{run_suite, summarize, BlockSummary};
use crate::manifest::Manifest;
use crate::metrics::{
    rouge_l, semantic_similarity, EvalReport, Embedder, FaithfulnessItem, FaithfulnessReport, ScoredPair,
    UndefinedClass,
};
use crate::passport::{predict_pairs, train_classifier, EpochRecord, PassportClassifier, PredictionRecord};
use crate::synth::{AnswerKey, SyntheticSpec};
use crate::tensorcore::{ModelConfig, TrainConfig};
use crate::text::{build_vocab_with, Vocab};

/// Which encoder scores semantic similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderChoice {
    #[default]
    Posthoc,
    Bridge,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub undefined_class: UndefinedClass,
    pub embedder: EmbedderChoice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Canonical corpus file; when absent the run directory's corpus is used.
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub seed: u64,
    pub min_freq: usize,
    pub eval_split: Split,
    pub model: ModelConfig,
    pub classifier: TrainConfig,
    /// Keys left out keep the explainer defaults, not the classifier's.
    #[serde(deserialize_with = "explainer_train_config")]
    pub explainer: TrainConfig,
    pub generation: ExplainerSettings,
    pub thresholds: ThresholdConfig,
    pub metrics: MetricsConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            out: PathBuf::from("runs/default"),
            seed: 13,
            min_freq: 1,
            eval_split: Split::Test,
            model: ModelConfig::default(),
            classifier: TrainConfig::classifier(),
            explainer: TrainConfig::explainer(),
            generation: ExplainerSettings::default(),
            thresholds: ThresholdConfig::default(),
            metrics: MetricsConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

fn explainer_train_config<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Value::deserialize(d)?;
    let mut merged = serde_json::to_value(TrainConfig::explainer()).expect("serializable");
    match given {
        serde_json::Value::Object(map) => {
            let base = merged.as_object_mut().expect("struct serializes to an object");
            for (k, v) in map {
                base.insert(k, v);
            }
        }
        _ => return Err(D::Error::custom("explainer settings must be a table")),
    }
    serde_json::from_value(merged).map_err(D::Error::custom)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.classifier.validate()?;
        self.explainer.validate()?;
        self.thresholds.validate()?;
        if self.min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        Ok(())
    }

    /// Configuration echo for the manifest (the output directory excluded).
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest(&self) -> Manifest {
        Manifest::new(&self.out)
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn record(&self, command: &str, results: impl Serialize, artifacts: &[&str]) -> Result<()> {
        self.manifest().append(
            command,
            self.seed,
            self.echo(),
            serde_json::to_value(results).expect("serializable"),
            artifacts,
        )?;
        Ok(())
    }
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const ANSWER_KEY_FILE: &str = "answer_key.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const DEV_PREDICTIONS_FILE: &str = "predictions_dev.jsonl";
pub const THRESHOLDS_FILE: &str = "thresholds.json";

pub fn explainer_file(mode: ExplainerMode) -> String {
    format!("explainer_{mode}.ckpt")
}

pub fn generations_file(mode: ExplainerMode) -> String {
    format!("generations_{mode}.jsonl")
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(format!("{what} not found at {}", path.display())))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("serializable"));
        s.push('\n');
    }
    write(path, &s)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(format!("{} record {}", path.display(), i + 1), e.to_string())))
        .collect()
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Corpus for the run: the configured file, else the run directory's.
pub fn load_run_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = cfg.corpus.clone().unwrap_or_else(|| cfg.path(CORPUS_FILE));
    require(&path, "corpus")?;
    load_corpus(&path)
}

pub fn load_classifier(cfg: &RunConfig) -> Result<PassportClassifier> {
    let path = cfg.path(CLASSIFIER_FILE);
    require(&path, "classifier checkpoint")?;
    PassportClassifier::load(&path)
}

pub fn load_explainer(cfg: &RunConfig, mode: ExplainerMode) -> Result<ExplainerModel> {
    let path = cfg.path(&explainer_file(mode));
    require(&path, &format!("{mode} explainer checkpoint"))?;
    let m = ExplainerModel::load(&path)?;
    if m.mode != mode {
        return Err(Error::Checkpoint(format!("{} holds a {} explainer", path.display(), m.mode)));
    }
    Ok(m)
}

pub fn load_thresholds(cfg: &RunConfig) -> Result<TuneResult> {
    let path = cfg.path(THRESHOLDS_FILE);
    require(&path, "tuned thresholds")?;
    read_json(&path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub instances: usize,
    pub judgments: usize,
    pub files: Vec<String>,
    pub used_builtin_profiles: bool,
}

pub fn import_stage(cfg: &RunConfig, release: &Path) -> Result<ImportSummary> {
    cfg.ensure_out()?;
    let imp = import_lewidi(release)?;
    imp.corpus.save(cfg.path(CORPUS_FILE))?;
    let summary = ImportSummary {
        instances: imp.corpus.instances().len(),
        judgments: imp.corpus.instances().iter().map(|i| i.judgments.len()).sum(),
        files: imp
            .files
            .iter()
            .map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
        used_builtin_profiles: imp.used_builtin_profiles,
    };
    cfg.record("import", &summary, &[CORPUS_FILE])?;
    Ok(summary)
}

pub fn synth_stage(cfg: &RunConfig) -> Result<(Corpus, AnswerKey)> {
    cfg.ensure_out()?;
    let (corpus, key) = cfg.synthetic.generate()?;
    corpus.save(cfg.path(CORPUS_FILE))?;
    write(&cfg.path(ANSWER_KEY_FILE), &pretty(&key))?;
    let audit = key.audit(&corpus)?;
    cfg.record(
        "synth",
        serde_json::json!({
            "instances": corpus.instances().len(),
            "judgments": corpus.instances().iter().map(|i| i.judgments.len()).sum::<usize>(),
            "rule_audit": audit,
            "stats": key.stats,
        }),
        &[CORPUS_FILE, ANSWER_KEY_FILE],
    )?;
    Ok((corpus, key))
}

pub fn stats_stage(cfg: &RunConfig) -> Result<StatsReport> {
    cfg.ensure_out()?;
    let corpus = load_run_corpus(cfg)?;
    let report = corpus.stats();
    write(&cfg.path("stats.txt"), &report.render_table())?;
    write(&cfg.path("stats.json"), &pretty(&report))?;
    cfg.record("stats", &report, &["stats.txt", "stats.json"])?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub vocab_size: usize,
    pub parameters: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
    pub class_weights: [f64; 3],
    pub checksum: String,
}

pub fn build_run_vocab(cfg: &RunConfig, corpus: &Corpus) -> Result<Vocab> {
    build_vocab_with(corpus, cfg.min_freq, &prompt_vocabulary(corpus.annotators()))
}

pub fn train_classifier_stage(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<ClassifierSummary> {
    cfg.validate()?;
    cfg.ensure_out()?;
    let corpus = load_run_corpus(cfg)?;
    let vocab = build_run_vocab(cfg, &corpus)?;
    vocab.save(cfg.path(VOCAB_FILE))?;
    let model = PassportClassifier::for_corpus(cfg.model.clone(), vocab.clone(), &corpus)?;
    let train: Vec<&Instance> = corpus.split(Split::Train).collect();
    let dev: Vec<&Instance> = corpus.split(Split::Dev).collect();
    let run = train_classifier(model, &corpus, &train, &dev, &cfg.classifier, cfg.seed, &mut on_epoch)?;
    run.model.to_bundle(Some(run.optimizer.clone())).save(cfg.path(CLASSIFIER_FILE))?;
    let preds = predict_pairs(&run.model, &corpus, &dev)?;
    write_jsonl(&cfg.path(DEV_PREDICTIONS_FILE), &preds)?;
    let summary = ClassifierSummary {
        vocab_size: vocab.len(),
        parameters: run.model.params.count(),
        history: run.history,
        best_epoch: run.best_epoch,
        steps: run.steps,
        class_weights: run.class_weights,
        checksum: run.model.checksum(),
    };
    cfg.record(
        "train-classifier",
        &summary,
        &[VOCAB_FILE, CLASSIFIER_FILE, DEV_PREDICTIONS_FILE],
    )?;
    Ok(summary)
}

/// Observed dev pairs of a prediction dump, ready for calibration.
pub fn dev_items(preds: &[PredictionRecord]) -> Vec<DevItem> {
    preds
        .iter()
        .filter_map(|p| p.gold.map(|gold| DevItem { probs: p.probs, gold }))
        .collect()
}

pub fn tune_stage(cfg: &RunConfig) -> Result<TuneResult> {
    cfg.thresholds.validate()?;
    let path = cfg.path(DEV_PREDICTIONS_FILE);
    require(&path, "dev prediction dump")?;
    let preds: Vec<PredictionRecord> = read_jsonl(&path)?;
    let result = tune_thresholds(&dev_items(&preds), cfg.thresholds.mode, cfg.thresholds.step)?;
    write(&cfg.path(THRESHOLDS_FILE), &pretty(&result))?;
    cfg.record("tune-thresholds", &result, &[THRESHOLDS_FILE])?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerSummary {
    pub mode: ExplainerMode,
    pub parameters: usize,
    pub history: Vec<ExplainerEpoch>,
    pub best_epoch: usize,
    pub steps: usize,
    pub checksum: String,
    pub classifier_checksum_before: String,
    pub classifier_checksum_after: String,
}

pub fn train_explainer_stage(
    cfg: &RunConfig,
    mode: ExplainerMode,
    mut on_epoch: impl FnMut(&ExplainerEpoch),
) -> Result<ExplainerSummary> {
    cfg.validate()?;
    let corpus = load_run_corpus(cfg)?;
    let classifier = load_classifier(cfg)?;
    let before = classifier.checksum();
    let model = ExplainerModel::for_classifier(mode, cfg.model.clone(), cfg.generation.clone(), &classifier)?;
    let train: Vec<&Instance> = corpus.split(Split::Train).collect();
    let dev: Vec<&Instance> = corpus.split(Split::Dev).collect();
    let run = train_explainer(model, &classifier, &train, &dev, &cfg.explainer, cfg.seed, &mut on_epoch)?;
    let file = explainer_file(mode);
    run.model.to_bundle(Some(run.optimizer.clone())).save(cfg.path(&file))?;
    let after = PassportClassifier::load(cfg.path(CLASSIFIER_FILE))?.checksum();
    if after != before {
        return Err(Error::Freeze(format!("classifier checkpoint changed from {before} to {after}")));
    }
    let summary = ExplainerSummary {
        mode,
        parameters: run.model.params.count(),
        history: run.history,
        best_epoch: run.best_epoch,
        steps: run.steps,
        checksum: run.model.checksum(),
        classifier_checksum_before: before,
        classifier_checksum_after: after,
    };
    cfg.record(&format!("train-explainer:{mode}"), &summary, &[&file])?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub mode: ExplainerMode,
    pub split: Split,
    pub decoding: Decoding,
    pub generated: usize,
    pub empty: usize,
}

/// Observed (instance, annotator) pairs of a split.
pub fn observed_pairs(corpus: &Corpus, split: Split) -> Vec<(&Instance, String)> {
    corpus
        .split(split)
        .flat_map(|i| i.judgments.iter().map(move |j| (i, j.annotator_id.clone())))
        .collect()
}

pub fn generate_stage(cfg: &RunConfig, mode: ExplainerMode, decoding: Option<Decoding>) -> Result<GenerationSummary> {
    let corpus = load_run_corpus(cfg)?;
    let classifier = load_classifier(cfg)?;
    let explainer = load_explainer(cfg, mode)?;
    let decoding = decoding.unwrap_or(cfg.generation.decoding);
    let mut out = Vec::new();
    for (inst, a) in observed_pairs(&corpus, cfg.eval_split) {
        out.push(explainer.generate(&classifier, inst, &a, decoding)?);
    }
    let file = generations_file(mode);
    write_jsonl(&cfg.path(&file), &out)?;
    let summary = GenerationSummary {
        mode,
        split: cfg.eval_split,
        decoding,
        generated: out.len(),
        empty: out.iter().filter(|g| g.empty).count(),
    };
    cfg.record(&format!("generate:{mode}"), &summary, &[&file])?;
    Ok(summary)
}

/// Semantic-similarity embedder selected by the configuration.
pub enum RunEmbedder {
    Encoder(ExplainerModel),
    Probe(ExplainerModel),
}

impl Embedder for RunEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        match self {
            RunEmbedder::Encoder(m) => m.embed(text),
            RunEmbedder::Probe(m) => TokenEmbeddingProbe(m).embed(text),
        }
    }
}

pub fn load_embedder(cfg: &RunConfig) -> Result<RunEmbedder> {
    Ok(match cfg.metrics.embedder {
        EmbedderChoice::Posthoc => RunEmbedder::Encoder(load_explainer(cfg, ExplainerMode::Posthoc)?),
        EmbedderChoice::Bridge => RunEmbedder::Encoder(load_explainer(cfg, ExplainerMode::Bridge)?),
        EmbedderChoice::Probe => RunEmbedder::Probe(load_explainer(cfg, ExplainerMode::Posthoc)?),
    })
}

fn load_generations(cfg: &RunConfig, mode: ExplainerMode, corpus: &Corpus) -> Result<Vec<GeneratedExplanation>> {
    let path = cfg.path(&generations_file(mode));
    require(&path, &format!("{mode} generation dump"))?;
    let gens: Vec<GeneratedExplanation> = read_jsonl(&path)?;
    for g in &gens {
        let inst = corpus
            .instance(&g.instance_id)
            .ok_or_else(|| Error::Alignment(format!("generated instance {} is not in the corpus", g.instance_id)))?;
        if inst.judgment(&g.annotator_id).is_none() {
            return Err(Error::Alignment(format!(
                "annotator {} did not judge instance {}",
                g.annotator_id, g.instance_id
            )));
        }
    }
    Ok(gens)
}

/// ROUGE-L and semantic similarity of a generation against its reference;
/// empty generations score 0 on both.
fn text_scores(text: &str, reference: &str, embedder: &dyn Embedder) -> Result<(f64, f64)> {
    if text.trim().is_empty() {
        return Ok((0.0, 0.0));
    }
    Ok((rouge_l(text, reference)?, semantic_similarity(text, reference, embedder)?))
}

pub fn evaluate_stage(cfg: &RunConfig, mode: Option<ExplainerMode>) -> Result<EvalReport> {
    let corpus = load_run_corpus(cfg)?;
    let classifier = load_classifier(cfg)?;
    let tuned = load_thresholds(cfg)?;
    let instances: Vec<&Instance> = corpus.split(cfg.eval_split).collect();
    if instances.is_empty() {
        return Err(Error::EmptySplit(cfg.eval_split.to_string()));
    }
    let preds = predict_pairs(&classifier, &corpus, &instances)?;
    let mut items: Vec<ScoredPair> = preds
        .iter()
        .filter_map(|p| {
            p.gold.map(|gold| ScoredPair {
                instance_id: p.instance_id.clone(),
                annotator_id: p.annotator_id.clone(),
                predicted: predict_label_set(p.probs, tuned.config.tau),
                gold,
                rouge_l: None,
                semantic_similarity: None,
            })
        })
        .collect();
    let tag = match mode {
        Some(m) => {
            let gens = load_generations(cfg, m, &corpus)?;
            let embedder = load_embedder(cfg)?;
            let by_pair: HashMap<(&str, &str), &GeneratedExplanation> =
                gens.iter().map(|g| ((g.instance_id.as_str(), g.annotator_id.as_str()), g)).collect();
            for it in &mut items {
                let Some(g) = by_pair.get(&(it.instance_id.as_str(), it.annotator_id.as_str())) else {
                    return Err(Error::Alignment(format!(
                        "no {m} generation for ({}, {})",
                        it.instance_id, it.annotator_id
                    )));
                };
                let inst = corpus.instance(&it.instance_id).expect("predicted from corpus");
                let (_, reference) = reference_rationale(inst, &it.annotator_id).expect("observed pair");
                let (r, s) = text_scores(&g.text, &reference, &embedder)?;
                it.rouge_l = Some(r);
                it.semantic_similarity = Some(s);
            }
            m.as_str()
        }
        None => "labels",
    };
    let regime = format!(
        "{} thresholds tau=({:.2}, {:.2}, {:.2}) on {} split, {} observed pairs",
        serde_json::to_value(tuned.config.mode).expect("serializable").as_str().unwrap_or_default(),
        tuned.config.tau[0],
        tuned.config.tau[1],
        tuned.config.tau[2],
        cfg.eval_split,
        items.len()
    );
    let report = EvalReport::build(&items, &classifier.annotator_ids(), regime, cfg.metrics.undefined_class)?;
    let json = format!("eval_{tag}.json");
    let table = format!("eval_{tag}.txt");
    let pairs = format!("eval_{tag}_pairs.jsonl");
    write(&cfg.path(&json), &pretty(&report))?;
    write(&cfg.path(&table), &report.render_table())?;
    write_jsonl(&cfg.path(&pairs), &items)?;
    cfg.record(&format!("evaluate:{tag}"), &report, &[&json, &table, &pairs])?;
    Ok(report)
}

/// Classifier `p_E` for (premise, hypothesis), averaged over annotators.
pub fn entailment_score(classifier: &PassportClassifier, premise: &str, hypothesis: &str) -> Result<f64> {
    let probs = classifier.predict(premise, hypothesis)?;
    Ok(probs.iter().map(|p| p[1]).sum::<f64>() / probs.len() as f64)
}

pub fn faithfulness_stage(cfg: &RunConfig, mode: ExplainerMode) -> Result<FaithfulnessReport> {
    let corpus = load_run_corpus(cfg)?;
    let classifier = load_classifier(cfg)?;
    let gens = load_generations(cfg, mode, &corpus)?;
    let embedder = load_embedder(cfg)?;
    let mut items = Vec::new();
    let mut excluded = 0;
    for g in &gens {
        if g.empty || g.text.trim().is_empty() {
            excluded += 1;
            continue;
        }
        let inst = corpus.instance(&g.instance_id).expect("aligned");
        let (_, reference) = reference_rationale(inst, &g.annotator_id).expect("aligned");
        let premise = format!("{} {}", inst.context, inst.statement);
        items.push(FaithfulnessItem {
            instance_id: g.instance_id.clone(),
            annotator_id: g.annotator_id.clone(),
            mode: mode.to_string(),
            semantic_similarity: semantic_similarity(&g.text, &reference, &embedder)?,
            rouge_l: rouge_l(&g.text, &reference)?,
            entailment: entailment_score(&classifier, &premise, &g.text)?,
        });
    }
    let report = FaithfulnessReport::from_items(items, excluded)?;
    let tsv = format!("faithfulness_{mode}.tsv");
    let json = format!("faithfulness_{mode}.json");
    write(&cfg.path(&tsv), &report.to_tsv())?;
    write(&cfg.path(&json), &pretty(&report))?;
    cfg.record(
        &format!("faithfulness:{mode}"),
        serde_json::json!({
            "items": report.items.len(),
            "excluded": report.excluded,
            "semantic_similarity": report.semantic_similarity,
            "rouge_l": report.rouge_l,
            "entailment": report.entailment,
        }),
        &[&tsv, &json],
    )?;
    Ok(report)
}

pub fn gradcheck_stage(cfg: &RunConfig, blocks: &[String], seeds: &[u64]) -> Result<Vec<BlockSummary>> {
    cfg.ensure_out()?;
    let results = run_suite(blocks, seeds)?;
    let summary = summarize(&results);
    write(&cfg.path("gradcheck.json"), &pretty(&serde_json::json!({"blocks": summary, "runs": results})))?;
    cfg.record("gradcheck", &summary, &["gradcheck.json"])?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub classifier: ClassifierSummary,
    pub thresholds: TuneResult,
    pub labels: EvalReport,
    pub explainers: BTreeMap<String, ExplainerSummary>,
    pub evaluations: BTreeMap<String, EvalReport>,
    pub faithfulness: BTreeMap<String, FaithfulnessReport>,
}

/// Every stage in order. Without a configured corpus a synthetic one is
/// generated first.
pub fn run_pipeline(cfg: &RunConfig, mut log: impl FnMut(&str)) -> Result<PipelineSummary> {
    cfg.validate()?;
    if cfg.corpus.is_none() {
        synth_stage(cfg)?;
        log("synth: corpus written");
    }
    stats_stage(cfg)?;
    let classifier = train_classifier_stage(cfg, |e| {
        log(&format!("classifier epoch {} dev macro-F1 {:.4}", e.epoch, e.dev_macro_f1))
    })?;
    let thresholds = tune_stage(cfg)?;
    log(&format!("thresholds {:?} dev Jaccard {:.4}", thresholds.config.tau, thresholds.mean_jaccard));
    let labels = evaluate_stage(cfg, None)?;
    let mut explainers = BTreeMap::new();
    let mut evaluations = BTreeMap::new();
    let mut faithfulness = BTreeMap::new();
    for mode in [ExplainerMode::Posthoc, ExplainerMode::Bridge] {
        let s = train_explainer_stage(cfg, mode, |e| {
            log(&format!("{mode} explainer epoch {} dev loss {:.4}", e.epoch, e.dev_loss))
        })?;
        explainers.insert(mode.to_string(), s);
        generate_stage(cfg, mode, None)?;
    }
    for mode in [ExplainerMode::Posthoc, ExplainerMode::Bridge] {
        evaluations.insert(mode.to_string(), evaluate_stage(cfg, Some(mode))?);
        faithfulness.insert(mode.to_string(), faithfulness_stage(cfg, mode)?);
    }
    Ok(PipelineSummary {
        classifier,
        thresholds,
        labels,
        explainers,
        evaluations,
        faithfulness,
    })
}
