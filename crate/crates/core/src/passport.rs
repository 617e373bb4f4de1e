//! Annotator-aware NLI classifier.
//!
//! The pooled text vector `h` is fused with a learned annotator embedding
//! `u_j` and a projection `m_j` of the annotator's metadata into
//! `z = [h; u_j; m_j]`, and a linear head with element-wise sigmoids yields
//! independent (C, E, N) probabilities for every annotator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::predict_label_set;
use crate::corpus::{tensor_for, AnnotationTensor, AnnotatorProfile, CategoryVocabularies, Corpus, Instance, LabelSet};
use crate::error::{Error, Result};
use crate::metrics::{mean_jaccard, EvalReport, ScoredPair, UndefinedClass};
use crate::tensorcore::checkpoint::Bundle;
use crate::tensorcore::nn::{encode_sequence, Embedding, Encoder, Linear};
use crate::tensorcore::{
    clip_global_norm, AdamW, Graph, LinearWarmup, ModelConfig, NodeId, ParamBuilder, ParamId, ParamStore, Tensor,
    TrainConfig,
};
use crate::text::{encode_tokens, tokenize, Vocab};

pub const CHECKPOINT_KIND: &str = "classifier";
/// Token placed between context and statement in classifier inputs.
pub const SEPARATOR: &str = "|";

/// One-hot gender, nationality and education plus min-max scaled age.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataFeaturizer {
    pub categories: CategoryVocabularies,
    pub age_min: u32,
    pub age_max: u32,
}

impl MetadataFeaturizer {
    pub fn from_corpus(corpus: &Corpus) -> MetadataFeaturizer {
        let ages = corpus.annotators().iter().map(|a| a.age);
        MetadataFeaturizer {
            categories: corpus.category_vocabularies(),
            age_min: ages.clone().min().unwrap_or(0),
            age_max: ages.max().unwrap_or(0),
        }
    }

    pub fn dim(&self) -> usize {
        let c = &self.categories;
        c.gender.len() + c.nationality.len() + c.education.len() + 1
    }

    pub fn features(&self, p: &AnnotatorProfile) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.dim());
        let c = &self.categories;
        for (vocab, value, field) in [
            (&c.gender, &p.gender, "gender"),
            (&c.nationality, &p.nationality, "nationality"),
            (&c.education, &p.education, "education"),
        ] {
            let idx = vocab.iter().position(|v| v == value).ok_or_else(|| {
                Error::Invariant(format!("{field} `{value}` of {} not in the declared vocabulary", p.id))
            })?;
            out.extend((0..vocab.len()).map(|i| if i == idx { 1.0 } else { 0.0 }));
        }
        out.push(if self.age_max == self.age_min {
            0.5
        } else {
            (p.age as f64 - self.age_min as f64) / (self.age_max - self.age_min) as f64
        });
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClassifierMeta {
    model: ModelConfig,
    vocab: Vocab,
    annotators: Vec<AnnotatorProfile>,
    featurizer: MetadataFeaturizer,
}

/// The classifier with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PassportClassifier {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub annotators: Vec<AnnotatorProfile>,
    pub featurizer: MetadataFeaturizer,
    pub params: ParamStore,
    pub embed: Embedding,
    pub encoder: Encoder,
    pub annotator_table: ParamId,
    pub meta_proj: Linear,
    pub head: Linear,
    meta_features: Tensor,
}

/// Outputs of a batched forward pass; row `r = i·A + j`.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub z: NodeId,
    pub probs: NodeId,
}

impl PassportClassifier {
    pub fn new(
        config: ModelConfig,
        vocab: Vocab,
        annotators: Vec<AnnotatorProfile>,
        featurizer: MetadataFeaturizer,
    ) -> Result<PassportClassifier> {
        config.validate()?;
        if annotators.is_empty() {
            return Err(Error::Config("classifier needs at least one annotator".into()));
        }
        let rows: Vec<Vec<f64>> = annotators.iter().map(|a| featurizer.features(a)).collect::<Result<_>>()?;
        let f = featurizer.dim();
        let meta_features = Tensor::from_vec(annotators.len(), f, rows.concat());
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = ParamBuilder {
            store: &mut params,
            rng: &mut rng,
            init_std: config.init_std,
        };
        let d = config.d_model;
        let embed = Embedding::new(&mut pb, "clf.embed", vocab.len(), d);
        let encoder = Encoder::new(
            &mut pb,
            "clf.encoder",
            d,
            config.n_layers,
            config.n_heads,
            config.ffn_dim,
            config.dropout,
        );
        let annotator_table = pb.normal("clf.annotator", annotators.len(), config.annotator_embed_dim);
        let meta_proj = Linear::new(&mut pb, "clf.meta_proj", f, config.metadata_dim);
        let head = Linear::new(&mut pb, "clf.head", config.fused_dim(), 3);
        Ok(PassportClassifier {
            config,
            vocab,
            annotators,
            featurizer,
            params,
            embed,
            encoder,
            annotator_table,
            meta_proj,
            head,
            meta_features,
        })
    }

    /// Fresh model for a corpus, with the given vocabulary.
    pub fn for_corpus(config: ModelConfig, vocab: Vocab, corpus: &Corpus) -> Result<PassportClassifier> {
        let featurizer = MetadataFeaturizer::from_corpus(corpus);
        PassportClassifier::new(config, vocab, corpus.annotators().to_vec(), featurizer)
    }

    pub fn n_annotators(&self) -> usize {
        self.annotators.len()
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

    /// BOS, context tokens, separator, statement tokens, EOS; truncated from
    /// the right to the classifier length limit.
    pub fn input_ids(&self, context: &str, statement: &str) -> Result<Vec<usize>> {
        let mut toks = tokenize(context);
        toks.push(SEPARATOR.to_string());
        toks.extend(tokenize(statement));
        Ok(encode_tokens(&toks, &self.vocab, self.config.max_len_classifier, true)?.ids)
    }

    pub fn instance_ids(&self, inst: &Instance) -> Result<Vec<usize>> {
        self.input_ids(&inst.context, &inst.statement)
    }

    /// `u` for every annotator (`A × E`) and `m` for every annotator (`A × M`).
    pub fn annotator_vectors(&self, g: &mut Graph<'_>) -> (NodeId, NodeId) {
        let u = g.param(self.annotator_table);
        let feats = g.constant(self.meta_features.clone());
        let m = self.meta_proj.forward(g, feats);
        (u, m)
    }

    /// Pooled text vector `h` (`1 × H`) of one input.
    pub fn pooled(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<NodeId> {
        Ok(encode_sequence(g, &self.embed, &self.encoder, ids, self.config.dropout)?.pooled)
    }

    /// `z = [h; u_j; m_j]` for a single `1 × H` text vector.
    pub fn fuse(&self, g: &mut Graph<'_>, h: NodeId, annotator_id: &str) -> Result<NodeId> {
        let j = self.annotator_index(annotator_id)?;
        let (u, m) = self.annotator_vectors(g);
        Ok(fuse_rows(g, h, u, m, &[(0, j)]))
    }

    /// Probabilities from fused rows.
    pub fn classify(&self, g: &mut Graph<'_>, z: NodeId) -> NodeId {
        let logits = self.head.forward(g, z);
        g.sigmoid(logits)
    }

    /// Every (instance, annotator) row for a batch of encoded inputs.
    pub fn forward(&self, g: &mut Graph<'_>, batch: &[Vec<usize>]) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let pooled: Vec<NodeId> = batch.iter().map(|ids| self.pooled(g, ids)).collect::<Result<_>>()?;
        let h = g.concat_rows(&pooled);
        let (u, m) = self.annotator_vectors(g);
        let a = self.n_annotators();
        let pairs: Vec<(usize, usize)> = (0..batch.len()).flat_map(|i| (0..a).map(move |j| (i, j))).collect();
        let z = fuse_rows(g, h, u, m, &pairs);
        let probs = self.classify(g, z);
        Ok(Forward { z, probs })
    }

    /// Probabilities for every annotator on one input (`A` rows).
    pub fn predict_ids(&self, ids: &[usize]) -> Result<Vec<[f64; 3]>> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, &[ids.to_vec()])?;
        Ok(rows3(g.value(f.probs)))
    }

    pub fn predict(&self, context: &str, statement: &str) -> Result<Vec<[f64; 3]>> {
        self.predict_ids(&self.input_ids(context, statement)?)
    }

    /// Fused vector `z` for one (input, annotator), computed without dropout.
    pub fn fused_vector(&self, context: &str, statement: &str, annotator_id: &str) -> Result<Tensor> {
        let ids = self.input_ids(context, statement)?;
        let mut g = Graph::new(&self.params);
        let h = self.pooled(&mut g, &ids)?;
        let z = self.fuse(&mut g, h, annotator_id)?;
        Ok(g.value(z).clone())
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn to_bundle(&self, optimizer: Option<AdamW>) -> Bundle {
        let meta = ClassifierMeta {
            model: self.config.clone(),
            vocab: self.vocab.clone(),
            annotators: self.annotators.clone(),
            featurizer: self.featurizer.clone(),
        };
        Bundle {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::to_value(meta).expect("serializable"),
            params: self.params.clone(),
            optimizer,
        }
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<PassportClassifier> {
        bundle.expect_kind(CHECKPOINT_KIND)?;
        let meta: ClassifierMeta = serde_json::from_value(bundle.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("classifier metadata: {e}")))?;
        let vocab = Vocab::from_json(&serde_json::to_string(&meta.vocab).expect("serializable"))?;
        let mut model = PassportClassifier::new(meta.model, vocab, meta.annotators, meta.featurizer)?;
        load_params(&mut model.params, &bundle.params)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<PassportClassifier> {
        PassportClassifier::from_bundle(&Bundle::load(path)?)
    }
}

/// Copies values into a freshly built store after checking names and shapes.
pub(crate) fn load_params(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    for ((_, a, ta), (_, b, tb)) in dst.iter().zip(src.iter()) {
        if a != b || ta.shape() != tb.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter layout mismatch: {a} {:?} vs {b} {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
    }
    dst.copy_from(src);
    Ok(())
}

/// Stacks `[h_i; u_j; m_j]` for each `(i, j)` pair.
pub fn fuse_rows(g: &mut Graph<'_>, h: NodeId, u: NodeId, m: NodeId, pairs: &[(usize, usize)]) -> NodeId {
    let hi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let aj: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let hr = g.gather_rows(h, &hi);
    let ur = g.gather_rows(u, &aj);
    let mr = g.gather_rows(m, &aj);
    g.concat_cols(&[hr, ur, mr])
}

pub(crate) fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    (0..t.rows()).map(|r| [t.get(r, 0), t.get(r, 1), t.get(r, 2)]).collect()
}

/// Per-instance mean of observed annotators' label vectors, from raw arrays.
pub fn soft_from_raw(labels: &[u8], mask: &[bool], n_annotators: usize) -> Result<Vec<[f64; 3]>> {
    let b = mask.len() / n_annotators;
    (0..b)
        .map(|i| {
            let rows: Vec<usize> = (i * n_annotators..(i + 1) * n_annotators).filter(|&r| mask[r]).collect();
            if rows.is_empty() {
                return Err(Error::Unobserved(format!("batch row {i}")));
            }
            let mut s = [0.0; 3];
            for &r in &rows {
                for (c, v) in s.iter_mut().enumerate() {
                    *v += labels[r * 3 + c] as f64;
                }
            }
            Ok(s.map(|v| v / rows.len() as f64))
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: NodeId,
    pub focal: NodeId,
    pub alignment: NodeId,
}

/// Masked focal BCE plus `λ_soft` times the soft-label alignment term.
/// Labels at masked cells are never read.
pub fn batch_loss(
    g: &mut Graph<'_>,
    probs: NodeId,
    labels: &[u8],
    mask: &[bool],
    n_annotators: usize,
    alpha: [f64; 3],
    cfg: &TrainConfig,
) -> Result<LossParts> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Unobserved("every cell of the batch is masked".into()));
    }
    let soft = soft_from_raw(labels, mask, n_annotators)?;
    let focal = g.focal_bce(probs, labels, mask, alpha, cfg.focal_gamma);
    let alignment = g.soft_alignment(probs, mask, &soft, n_annotators);
    let weighted = g.scale(alignment, cfg.lambda_soft);
    let total = g.sum(&[focal, weighted]);
    Ok(LossParts {
        total,
        focal,
        alignment,
    })
}

/// `α_c` = negatives / positives among observed cells, clamped to [0.1, 10].
pub fn compute_class_weights(tensor: &AnnotationTensor) -> Result<[f64; 3]> {
    let mut pos = [0usize; 3];
    let mut total = 0usize;
    for (i, j) in tensor.observed() {
        total += 1;
        for (c, p) in pos.iter_mut().enumerate() {
            *p += tensor.label(i, j, c) as usize;
        }
    }
    let mut alpha = [0.0; 3];
    for c in 0..3 {
        if pos[c] == 0 {
            return Err(Error::Invariant(format!(
                "class {} never positive in the training split",
                crate::corpus::Label::from_index(c)
            )));
        }
        alpha[c] = ((total - pos[c]) as f64 / pos[c] as f64).clamp(0.1, 10.0);
    }
    Ok(alpha)
}

/// Patience-based early stopping on a metric to maximize. Only strict
/// improvements reset the counter.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records the metric of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_macro_f1: f64,
    pub dev_mean_jaccard: f64,
    pub lr: f64,
}

pub struct ClassifierRun {
    pub model: PassportClassifier,
    pub optimizer: AdamW,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub class_weights: [f64; 3],
    pub steps: usize,
}

/// Dev scores at threshold 0.5: aggregated macro-F1 and mean Jaccard.
pub fn dev_scores(model: &PassportClassifier, corpus: &Corpus, dev: &[&Instance]) -> Result<(f64, f64)> {
    let preds = predict_pairs(model, corpus, dev)?;
    let items: Vec<ScoredPair> = preds
        .iter()
        .filter_map(|p| {
            p.gold.map(|gold| ScoredPair {
                instance_id: p.instance_id.clone(),
                annotator_id: p.annotator_id.clone(),
                predicted: predict_label_set(p.probs, [0.5; 3]),
                gold,
                rouge_l: None,
                semantic_similarity: None,
            })
        })
        .collect();
    let report = EvalReport::build(&items, &model.annotator_ids(), "tau=0.5", UndefinedClass::Exclude)?;
    let sets: Vec<(LabelSet, LabelSet)> = items.iter().map(|p| (p.predicted, p.gold)).collect();
    Ok((report.aggregate.macro_f1, mean_jaccard(&sets)?))
}

/// Probabilities for one (instance, annotator) pair; `gold` is set when
/// the annotator judged the instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub annotator_id: String,
    pub probs: [f64; 3],
    pub gold: Option<LabelSet>,
}

pub fn predict_pairs(model: &PassportClassifier, corpus: &Corpus, instances: &[&Instance]) -> Result<Vec<PredictionRecord>> {
    let tensor = tensor_for(corpus, instances);
    check_annotators(model, &tensor)?;
    let mut out = Vec::with_capacity(instances.len() * model.n_annotators());
    for (i, inst) in instances.iter().enumerate() {
        let probs = model.predict_ids(&model.instance_ids(inst)?)?;
        for (j, p) in probs.into_iter().enumerate() {
            out.push(PredictionRecord {
                instance_id: inst.id.clone(),
                annotator_id: model.annotators[j].id.clone(),
                probs: p,
                gold: tensor.mask(i, j).then(|| tensor.label_set(i, j)),
            });
        }
    }
    Ok(out)
}

fn check_annotators(model: &PassportClassifier, tensor: &AnnotationTensor) -> Result<()> {
    if tensor.annotator_ids != model.annotator_ids() {
        return Err(Error::Alignment(format!(
            "corpus annotators {:?} differ from classifier annotators {:?}",
            tensor.annotator_ids,
            model.annotator_ids()
        )));
    }
    Ok(())
}

/// Per-step dropout seed derived from the run seed.
pub(crate) fn step_seed(seed: u64, stream: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ (step as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Trains on `train`, early-stopping on dev macro-F1 at threshold 0.5, and
/// returns the best-epoch parameters.
pub fn train_classifier(
    mut model: PassportClassifier,
    corpus: &Corpus,
    train: &[&Instance],
    dev: &[&Instance],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ClassifierRun> {
    cfg.validate()?;
    let train: Vec<&Instance> = train.iter().copied().filter(|i| !i.judgments.is_empty()).collect();
    let dev: Vec<&Instance> = dev.iter().copied().filter(|i| !i.judgments.is_empty()).collect();
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if dev.is_empty() {
        return Err(Error::EmptySplit("dev".into()));
    }
    let tensor = tensor_for(corpus, &train);
    check_annotators(&model, &tensor)?;
    let alpha = match cfg.class_weights {
        Some(a) => a,
        None => compute_class_weights(&tensor)?,
    };
    let inputs: Vec<Vec<usize>> = train.iter().map(|i| model.instance_ids(i)).collect::<Result<_>>()?;
    let a = model.n_annotators();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = LinearWarmup::new(cfg.peak_lr(), cfg.warmup_ratio, per_epoch * cfg.epochs);
    let mut opt = AdamW::new(cfg.adamw(), &model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed, 1, epoch));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let mut labels = Vec::with_capacity(chunk.len() * a * 3);
            let mut mask = Vec::with_capacity(chunk.len() * a);
            for &i in chunk {
                for j in 0..a {
                    labels.extend_from_slice(&tensor.labels_of(i, j));
                    mask.push(tensor.mask(i, j));
                }
            }
            let grads = {
                let mut g = Graph::training(&model.params, step_seed(seed, 2, step));
                let f = model.forward(&mut g, &batch)?;
                let loss = batch_loss(&mut g, f.probs, &labels, &mask, a, alpha, cfg)?;
                let v = g.value(loss.total).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        detail: format!("classifier loss {v}"),
                    });
                }
                loss_sum += v * chunk.len() as f64;
                g.backward(loss.total)
            };
            let mut grads = grads;
            clip_global_norm(&mut grads, cfg.clip_max_norm);
            opt.step(&mut model.params, &grads, schedule.lr_at(step))
                .map_err(|e| match e {
                    Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
                    other => other,
                })?;
            step += 1;
        }
        let (f1, jac) = dev_scores(&model, corpus, &dev)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev_macro_f1: f1,
            dev_mean_jaccard: jac,
            lr: schedule.lr_at(step.saturating_sub(1)),
        };
        on_epoch(&record);
        history.push(record);
        match stopper.observe(epoch, f1) {
            StopDecision::Improved => best_params = model.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    model.params = best_params;
    Ok(ClassifierRun {
        model,
        optimizer: opt,
        history,
        best_epoch: stopper.best_epoch,
        class_weights: alpha,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_annotation_tensor, Split};
    use crate::tensorcore::graph::sigmoid;
    use crate::text::build_vocab_with;

    fn fixture() -> Corpus {
        crate::corpus::tests_support::fixture()
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            annotator_embed_dim: 4,
            metadata_dim: 3,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn model() -> (Corpus, PassportClassifier) {
        let c = fixture();
        let v = build_vocab_with(&c, 1, &[SEPARATOR.to_string()]).unwrap();
        let m = PassportClassifier::for_corpus(tiny_config(), v, &c).unwrap();
        (c, m)
    }

    #[test]
    fn fuse_concatenates_in_order() {
        let mut s = ParamStore::new();
        let h = s.add("h", Tensor::row_vector(vec![1.0, 2.0]), false);
        let u = s.add("u", Tensor::from_vec(2, 2, vec![3.0, 4.0, 9.0, 9.0]), false);
        let m = s.add("m", Tensor::from_vec(2, 2, vec![5.0, 6.0, 8.0, 8.0]), false);
        let mut g = Graph::new(&s);
        let (hn, un, mn) = (g.param(h), g.param(u), g.param(m));
        let z = fuse_rows(&mut g, hn, un, mn, &[(0, 0), (0, 1)]);
        assert_eq!(g.value(z).row(0), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(&g.value(z).row(1)[..2], &[1.0, 2.0]);
    }

    #[test]
    fn fused_vectors_differ_only_after_h() {
        let (c, m) = model();
        let i = &c.instances()[0];
        let z1 = m.fused_vector(&i.context, &i.statement, "A1").unwrap();
        let z2 = m.fused_vector(&i.context, &i.statement, "A2").unwrap();
        let d = m.config.d_model;
        assert_eq!(z1.cols(), m.config.fused_dim());
        assert_eq!(&z1.data()[..d], &z2.data()[..d]);
        assert_ne!(&z1.data()[d..], &z2.data()[d..]);
        assert!(m.fused_vector(&i.context, &i.statement, "nobody").is_err());
    }

    #[test]
    fn zero_head_gives_one_half() {
        let (_, mut m) = model();
        for id in [m.head.weight, m.head.bias] {
            m.params.get_mut(id).data_mut().fill(0.0);
        }
        let p = m.predict("a cat", "a dog").unwrap();
        assert!(p.iter().flatten().all(|&x| x == 0.5));
        assert!((sigmoid(10.0) - 0.9999546).abs() < 1e-7);
        assert!((sigmoid(-10.0) - 0.0000454).abs() < 1e-7);
    }

    #[test]
    fn focal_examples() {
        let p = Tensor::from_vec(1, 3, vec![0.5, 0.5, 0.5]);
        let (v, _) = crate::tensorcore::graph::focal_bce_forward(&p, &[1, 0, 0], &[true], [1.0; 3], 0.0);
        assert!((v - 3.0 * 2f64.ln()).abs() < 1e-12);
        let p = Tensor::from_vec(1, 3, vec![0.9, 1e-300, 1e-300]);
        let (v, _) = crate::tensorcore::graph::focal_bce_forward(&p, &[1, 0, 0], &[true], [1.0; 3], 2.0);
        assert!((v - 0.01 * -(0.9f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn class_weights() {
        let c = fixture();
        let t = build_annotation_tensor(&c, Split::Train).unwrap();
        // train: A1 {E}, A2 {E, N} → no contradiction positives
        assert!(compute_class_weights(&t).is_err());
        let t = AnnotationTensor::from_parts(
            (0..4).map(|i| i.to_string()).collect(),
            vec!["a".into()],
            vec![1, 1, 1, 1, 1, 0, 1, 0, 0, 1, 0, 0],
            vec![1; 4],
        )
        .unwrap();
        let w = compute_class_weights(&t).unwrap();
        assert_eq!(w[1], 1.0);
        assert_eq!(w[0], 0.1);
        assert_eq!(w[2], 3.0);
    }

    #[test]
    fn early_stopping_sequence() {
        let mut s = EarlyStopping::new(3);
        let seq = [0.5, 0.6, 0.6, 0.6, 0.6, 0.9];
        let mut stopped = None;
        for (e, &m) in seq.iter().enumerate() {
            if s.observe(e + 1, m) == StopDecision::Stop {
                stopped = Some(e + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(5));
        assert_eq!(s.best_epoch, 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, m) = model();
        let back = PassportClassifier::from_bundle(&Bundle::from_bytes(&m.to_bundle(None).to_bytes()).unwrap()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.predict("x", "y").unwrap(), m.predict("x", "y").unwrap());
    }

    #[test]
    fn metadata_features() {
        let c = fixture();
        let f = MetadataFeaturizer::from_corpus(&c);
        // genders F,M; nationalities CN,DE; educations MSc,Postdoc; age
        assert_eq!(f.dim(), 7);
        let v = f.features(c.profile("A2").unwrap()).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let v = f.features(c.profile("A3").unwrap()).unwrap();
        assert!((v[6] - 3.0 / 11.0).abs() < 1e-15);
    }
}
