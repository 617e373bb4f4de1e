//! Annotator-conditioned rationale generation.
//!
//! A compact encoder-decoder reads a prompt that names the annotator (control
//! token plus persona) and the instance. In post-hoc mode the prompt also
//! carries labels: the gold set during training, the classifier's
//! probabilities at inference. In bridge mode the frozen classifier's fused
//! vector `z` is projected by a small MLP into `k` prefix vectors that are
//! prepended to the encoder input.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatorProfile, Instance, Label, LabelSet};
use crate::error::{Error, Result};
use crate::metrics::Embedder;
use crate::passport::{load_params, step_seed, EarlyStopping, PassportClassifier, StopDecision};
use crate::tensorcore::checkpoint::Bundle;
use crate::tensorcore::nn::{sinusoidal, Decoder, Embedding, Encoder, Linear};
use crate::tensorcore::{
    clip_global_norm, AdamW, Gradients, Graph, LinearWarmup, ModelConfig, NodeId, ParamBuilder, ParamStore, Tensor,
    TrainConfig,
};
use crate::text::{control_token, tokenize, Vocab, BOS, EOS, PAD};

pub const CHECKPOINT_KIND: &str = "explainer";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerMode {
    Posthoc,
    Bridge,
}

impl ExplainerMode {
    pub fn parse(s: &str) -> Option<ExplainerMode> {
        match s {
            "posthoc" | "post-hoc" => Some(ExplainerMode::Posthoc),
            "bridge" => Some(ExplainerMode::Bridge),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExplainerMode::Posthoc => "posthoc",
            ExplainerMode::Bridge => "bridge",
        }
    }
}

impl fmt::Display for ExplainerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Decoding {
    #[default]
    Greedy,
    Beam {
        width: usize,
    },
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decoding::Greedy => f.write_str("greedy"),
            Decoding::Beam { width } => write!(f, "beam{width}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainerSettings {
    /// Keep the label block in bridge-mode prompts.
    pub bridge_label_block: bool,
    pub decoding: Decoding,
}

impl Default for ExplainerSettings {
    fn default() -> Self {
        ExplainerSettings {
            bridge_label_block: false,
            decoding: Decoding::Greedy,
        }
    }
}

/// What the label block of a prompt shows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelInfo {
    Gold(LabelSet),
    Probs([f64; 3]),
    Omitted,
}

impl LabelInfo {
    pub fn block(&self) -> Option<String> {
        match self {
            LabelInfo::Gold(set) => Some(set.to_string()),
            LabelInfo::Probs(p) => Some(format!("probs C={:.3} E={:.3} N={:.3}", p[0], p[1], p[2])),
            LabelInfo::Omitted => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub ids: Vec<usize>,
    /// Context tokens dropped to respect the input length limit.
    pub truncated: usize,
}

fn persona_text(p: &AnnotatorProfile) -> String {
    format!("persona: {}, age {}, {}, {}", p.gender, p.age, p.nationality, p.education)
}

/// Builds the encoder prompt
/// `[ANN:<id>] persona: ... | context: <c> | statement: <s> | labels: <block>`.
/// The control token is one vocabulary id; the context is truncated from the
/// right when the whole prompt plus EOS would exceed `max_len`.
pub fn build_prompt(
    vocab: &Vocab,
    profile: &AnnotatorProfile,
    context: &str,
    statement: &str,
    labels: LabelInfo,
    max_len: usize,
) -> Result<Prompt> {
    let control = vocab.control_id(&profile.id)?;
    let head = tokenize(&format!("{} | context:", persona_text(profile)));
    let ctx = tokenize(context);
    let mut tail = tokenize(&format!("| statement: {}", statement));
    let block = labels.block();
    if let Some(b) = &block {
        tail.extend(tokenize(&format!("| labels: {b}")));
    }
    let fixed = 1 + head.len() + tail.len() + 1;
    if fixed >= max_len {
        return Err(Error::Shape(format!(
            "prompt needs {fixed} tokens without context, limit is {max_len}"
        )));
    }
    let keep = ctx.len().min(max_len - fixed);
    let mut ids = Vec::with_capacity(fixed + keep);
    ids.push(control);
    ids.extend(head.iter().chain(&ctx[..keep]).chain(&tail).map(|t| vocab.token_id(t)));
    ids.push(EOS);
    let mut text = format!("{} {} | context: {} | statement: {}", control_token(&profile.id), persona_text(profile), context, statement);
    if let Some(b) = block {
        text.push_str(" | labels: ");
        text.push_str(&b);
    }
    Ok(Prompt {
        text,
        ids,
        truncated: ctx.len() - keep,
    })
}

/// Fixed prompt tokens that must be in the vocabulary regardless of corpus
/// frequency: scaffolding words, label letters, probability digits and every
/// annotator's persona fields.
pub fn prompt_vocabulary(annotators: &[AnnotatorProfile]) -> Vec<String> {
    let mut out: Vec<String> = ["|", "persona", ":", ",", "age", "context", "statement", "labels", "probs", "c", "e", "n", "=", ".", "0", "1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    out.extend((0..1000).map(|k| format!("{k:03}")));
    for a in annotators {
        out.push(persona_text(a));
    }
    out
}

/// `fc2(tanh(fc1(z)))` reshaped to `k × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixBridge {
    pub fc1: Linear,
    pub fc2: Linear,
    pub input_dim: usize,
    pub prefix_len: usize,
    pub d_model: usize,
}

impl PrefixBridge {
    pub fn project(&self, g: &mut Graph<'_>, z: NodeId) -> Result<NodeId> {
        let shape = g.value(z).shape();
        if shape != [1, self.input_dim] {
            return Err(Error::Shape(format!(
                "bridge expects a 1×{} fused vector, got {}×{}",
                self.input_dim, shape[0], shape[1]
            )));
        }
        let h = self.fc1.forward(g, z);
        let h = g.tanh(h);
        let p = self.fc2.forward(g, h);
        Ok(g.reshape(p, self.prefix_len, self.d_model))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ExplainerMeta {
    mode: ExplainerMode,
    model: ModelConfig,
    settings: ExplainerSettings,
    vocab: Vocab,
    annotators: Vec<AnnotatorProfile>,
    fused_dim: usize,
    classifier_checksum: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainerModel {
    pub mode: ExplainerMode,
    pub config: ModelConfig,
    pub settings: ExplainerSettings,
    pub vocab: Vocab,
    pub annotators: Vec<AnnotatorProfile>,
    pub fused_dim: usize,
    /// Checksum of the frozen classifier a bridge model was trained against.
    pub classifier_checksum: Option<String>,
    pub params: ParamStore,
    pub embed: Embedding,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub bridge: Option<PrefixBridge>,
}

/// Inputs for one teacher-forced example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub instance_id: String,
    pub annotator_id: String,
    pub prompt: Vec<usize>,
    /// Fused classifier vector; bridge mode only.
    pub z: Option<Tensor>,
    /// Target tokens without BOS/EOS.
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedExplanation {
    pub instance_id: String,
    pub annotator_id: String,
    pub mode: ExplainerMode,
    pub text: String,
    pub tokens: usize,
    /// Set when decoding produced no tokens.
    pub empty: bool,
    pub decoding: Decoding,
    pub prompt: String,
}

impl ExplainerModel {
    pub fn new(
        mode: ExplainerMode,
        config: ModelConfig,
        settings: ExplainerSettings,
        vocab: Vocab,
        annotators: Vec<AnnotatorProfile>,
        fused_dim: usize,
    ) -> Result<ExplainerModel> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_E4B1);
        let mut pb = ParamBuilder {
            store: &mut params,
            rng: &mut rng,
            init_std: config.init_std,
        };
        let d = config.d_model;
        let embed = Embedding::new(&mut pb, "exp.embed", vocab.len(), d);
        let encoder = Encoder::new(&mut pb, "exp.encoder", d, config.n_layers, config.n_heads, config.ffn_dim, config.dropout);
        let decoder = Decoder::new(
            &mut pb,
            "exp.decoder",
            d,
            config.n_layers,
            config.n_heads,
            config.ffn_dim,
            vocab.len(),
            config.dropout,
        );
        let bridge = (mode == ExplainerMode::Bridge).then(|| PrefixBridge {
            fc1: Linear::new(&mut pb, "bridge.fc1", fused_dim, config.bridge_hidden),
            fc2: Linear::new(&mut pb, "bridge.fc2", config.bridge_hidden, config.prefix_len * d),
            input_dim: fused_dim,
            prefix_len: config.prefix_len,
            d_model: d,
        });
        Ok(ExplainerModel {
            mode,
            config,
            settings,
            vocab,
            annotators,
            fused_dim,
            classifier_checksum: None,
            params,
            embed,
            encoder,
            decoder,
            bridge,
        })
    }

    /// Fresh model sharing the classifier's vocabulary and annotators.
    pub fn for_classifier(
        mode: ExplainerMode,
        config: ModelConfig,
        settings: ExplainerSettings,
        classifier: &PassportClassifier,
    ) -> Result<ExplainerModel> {
        let mut m = ExplainerModel::new(
            mode,
            config,
            settings,
            classifier.vocab.clone(),
            classifier.annotators.clone(),
            classifier.config.fused_dim(),
        )?;
        if mode == ExplainerMode::Bridge {
            m.classifier_checksum = Some(classifier.checksum());
        }
        Ok(m)
    }

    pub fn profile(&self, annotator_id: &str) -> Result<&AnnotatorProfile> {
        self.annotators
            .iter()
            .find(|a| a.id == annotator_id)
            .ok_or_else(|| Error::UnknownAnnotator(annotator_id.to_string()))
    }

    fn uses_label_block(&self) -> bool {
        self.mode == ExplainerMode::Posthoc || self.settings.bridge_label_block
    }

    /// Prompt for training (gold labels) or inference (probabilities).
    pub fn prompt(&self, inst: &Instance, annotator_id: &str, labels: LabelInfo) -> Result<Prompt> {
        let labels = if self.uses_label_block() { labels } else { LabelInfo::Omitted };
        build_prompt(
            &self.vocab,
            self.profile(annotator_id)?,
            &inst.context,
            &inst.statement,
            labels,
            self.config.max_len_explainer_in,
        )
    }

    /// Prefix rows for a fused vector (bridge mode).
    pub fn bridge_project(&self, g: &mut Graph<'_>, z: &Tensor) -> Result<NodeId> {
        let bridge = self
            .bridge
            .as_ref()
            .ok_or_else(|| Error::Config("bridge projection requested from a post-hoc explainer".into()))?;
        let zn = g.constant(z.clone());
        bridge.project(g, zn)
    }

    /// Encoder states and key mask for a prompt, with the prefix (if any)
    /// at positions `0..k` and tokens from position `k`.
    pub fn encode(&self, g: &mut Graph<'_>, prompt: &[usize], z: Option<&Tensor>) -> Result<(NodeId, Vec<bool>)> {
        if prompt.is_empty() {
            return Err(Error::Shape("empty prompt".into()));
        }
        let (prefix, k) = match (self.mode, z) {
            (ExplainerMode::Bridge, Some(z)) if self.config.prefix_len == 0 => {
                if z.shape() != [1, self.fused_dim] {
                    return Err(Error::Shape(format!("bridge expects a 1×{} fused vector", self.fused_dim)));
                }
                (None, 0)
            }
            (ExplainerMode::Bridge, Some(z)) => {
                let p = self.bridge_project(g, z)?;
                let k = self.config.prefix_len;
                let pe = g.constant(sinusoidal(0, k, self.config.d_model));
                (Some(g.add(p, pe)), k)
            }
            (ExplainerMode::Bridge, None) => {
                return Err(Error::Config("bridge explainer needs a fused vector".into()));
            }
            (ExplainerMode::Posthoc, _) => (None, 0),
        };
        let x = self.embed.embed_positions(g, prompt, k);
        let x = match prefix {
            Some(p) if k > 0 => g.concat_rows(&[p, x]),
            _ => x,
        };
        let x = g.dropout(x, self.config.dropout);
        let mut mask = vec![true; k];
        mask.extend(prompt.iter().map(|&t| t != PAD));
        let key_mask = if mask.iter().all(|&m| m) { None } else { Some(mask.as_slice()) };
        let states = self.encoder.forward(g, x, key_mask);
        Ok((states, mask))
    }

    /// Decoder logits for `BOS ⧺ prefix_tokens`.
    fn decode_logits(&self, g: &mut Graph<'_>, memory: NodeId, mask: &[bool], tokens: &[usize]) -> NodeId {
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(BOS);
        input.extend_from_slice(tokens);
        let y = self.embed.embed_positions(g, &input, 0);
        let y = g.dropout(y, self.config.dropout);
        let key_mask = if mask.iter().all(|&m| m) { None } else { Some(mask) };
        self.decoder.forward(g, y, memory, key_mask)
    }

    /// Summed token cross-entropy of one example (targets = tokens ⧺ EOS),
    /// and the number of target tokens.
    pub fn example_loss(&self, g: &mut Graph<'_>, ex: &Example) -> Result<(NodeId, usize)> {
        let (memory, mask) = self.encode(g, &ex.prompt, ex.z.as_ref())?;
        let logits = self.decode_logits(g, memory, &mask, &ex.target);
        let mut targets = ex.target.clone();
        targets.push(EOS);
        Ok((g.cross_entropy_sum(logits, &targets), targets.len()))
    }

    /// Mean token-level cross-entropy over a batch.
    pub fn batch_loss(&self, g: &mut Graph<'_>, batch: &[&Example]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut parts = Vec::with_capacity(batch.len());
        let mut tokens = 0;
        for ex in batch {
            let (l, n) = self.example_loss(g, ex)?;
            parts.push(l);
            tokens += n;
        }
        let total = g.sum(&parts);
        Ok(g.scale(total, 1.0 / tokens as f64))
    }

    /// Target ids for a rationale, capped so that EOS still fits.
    pub fn target_ids(&self, rationale: &str) -> Vec<usize> {
        let cap = self.config.max_len_explainer_out.saturating_sub(1);
        tokenize(rationale).iter().take(cap).map(|t| self.vocab.token_id(t)).collect()
    }

    /// One example per (label, rationale) pair of every judgment, with the
    /// gold label set in the prompt.
    pub fn examples(&self, classifier: Option<&PassportClassifier>, instances: &[&Instance]) -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for inst in instances {
            for j in &inst.judgments {
                let prompt = self.prompt(inst, &j.annotator_id, LabelInfo::Gold(j.label_set()))?;
                let z = match (self.mode, classifier) {
                    (ExplainerMode::Bridge, Some(c)) => {
                        Some(c.fused_vector(&inst.context, &inst.statement, &j.annotator_id)?)
                    }
                    (ExplainerMode::Bridge, None) => {
                        return Err(Error::Config("bridge examples need the frozen classifier".into()))
                    }
                    _ => None,
                };
                for p in &j.pairs {
                    out.push(Example {
                        instance_id: inst.id.clone(),
                        annotator_id: j.annotator_id.clone(),
                        prompt: prompt.ids.clone(),
                        z: z.clone(),
                        target: self.target_ids(&p.rationale),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Mean token cross-entropy over `examples` without dropout.
    pub fn eval_loss(&self, examples: &[Example]) -> Result<f64> {
        let mut sum = 0.0;
        let mut tokens = 0;
        for ex in examples {
            let mut g = Graph::new(&self.params);
            let (l, n) = self.example_loss(&mut g, ex)?;
            sum += g.value(l).item();
            tokens += n;
        }
        if tokens == 0 {
            return Err(Error::EmptySplit("dev".into()));
        }
        Ok(sum / tokens as f64)
    }

    fn next_log_probs(&self, g: &mut Graph<'_>, memory: NodeId, mask: &[bool], tokens: &[usize]) -> Vec<f64> {
        let logits = self.decode_logits(g, memory, mask, tokens);
        let lv = g.value(logits);
        let row = lv.row(lv.rows() - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.iter().map(|x| x - lse).collect()
    }

    /// Decodes a token sequence (EOS excluded) for a prepared prompt.
    pub fn decode(&self, prompt: &[usize], z: Option<&Tensor>, decoding: Decoding) -> Result<Vec<usize>> {
        let max = self.config.max_len_explainer_out;
        let mut g = Graph::new(&self.params);
        let (memory, mask) = self.encode(&mut g, prompt, z)?;
        match decoding {
            Decoding::Greedy => {
                let mut out = Vec::new();
                while out.len() < max {
                    let lp = self.next_log_probs(&mut g, memory, &mask, &out);
                    let next = argmax_allowed(&lp);
                    if next == EOS {
                        break;
                    }
                    out.push(next);
                }
                Ok(out)
            }
            Decoding::Beam { width } => Ok(self.beam(&mut g, memory, &mask, width.max(1), max)),
        }
    }

    fn beam(&self, g: &mut Graph<'_>, memory: NodeId, mask: &[bool], width: usize, max: usize) -> Vec<usize> {
        let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        for _ in 0..max {
            let mut cand: Vec<(Vec<usize>, f64, bool)> = Vec::new();
            for (seq, score) in &beams {
                let lp = self.next_log_probs(g, memory, mask, seq);
                let mut order: Vec<usize> = (0..lp.len()).filter(|&t| allowed(t)).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &t in order.iter().take(width) {
                    let mut s = seq.clone();
                    let done = t == EOS;
                    if !done {
                        s.push(t);
                    }
                    cand.push((s, score + lp[t], done));
                }
            }
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            beams.clear();
            for (s, sc, done) in cand.into_iter().take(width) {
                if done {
                    finished.push((s, sc));
                } else {
                    beams.push((s, sc));
                }
            }
            let best_open = beams.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
            let best_done = finished.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
            if beams.is_empty() || best_done >= best_open {
                break;
            }
        }
        finished.extend(beams);
        finished.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        finished.into_iter().next().map(|b| b.0).unwrap_or_default()
    }

    /// Explanation for one (instance, annotator). Post-hoc mode inserts the
    /// classifier's live probabilities; bridge mode feeds its fused vector.
    pub fn generate(
        &self,
        classifier: &PassportClassifier,
        inst: &Instance,
        annotator_id: &str,
        decoding: Decoding,
    ) -> Result<GeneratedExplanation> {
        let j = classifier.annotator_index(annotator_id)?;
        self.profile(annotator_id)?;
        let (labels, z) = match self.mode {
            ExplainerMode::Posthoc => {
                let probs = classifier.predict(&inst.context, &inst.statement)?[j];
                (LabelInfo::Probs(probs), None)
            }
            ExplainerMode::Bridge => {
                self.check_classifier(classifier)?;
                let probs = if self.settings.bridge_label_block {
                    LabelInfo::Probs(classifier.predict(&inst.context, &inst.statement)?[j])
                } else {
                    LabelInfo::Omitted
                };
                (probs, Some(classifier.fused_vector(&inst.context, &inst.statement, annotator_id)?))
            }
        };
        let prompt = self.prompt(inst, annotator_id, labels)?;
        self.generate_from(inst, annotator_id, &prompt, z.as_ref(), decoding)
    }

    /// Generation from an explicit prompt and fused vector.
    pub fn generate_from(
        &self,
        inst: &Instance,
        annotator_id: &str,
        prompt: &Prompt,
        z: Option<&Tensor>,
        decoding: Decoding,
    ) -> Result<GeneratedExplanation> {
        let ids = self.decode(&prompt.ids, z, decoding)?;
        Ok(GeneratedExplanation {
            instance_id: inst.id.clone(),
            annotator_id: annotator_id.to_string(),
            mode: self.mode,
            text: self.vocab.decode_text(&ids),
            tokens: ids.len(),
            empty: ids.is_empty(),
            decoding,
            prompt: prompt.text.clone(),
        })
    }

    pub fn check_classifier(&self, classifier: &PassportClassifier) -> Result<()> {
        if classifier.config.fused_dim() != self.fused_dim {
            return Err(Error::Config(format!(
                "classifier fused dimension {} does not match explainer bridge input {}",
                classifier.config.fused_dim(),
                self.fused_dim
            )));
        }
        if let Some(expected) = &self.classifier_checksum {
            let got = classifier.checksum();
            if &got != expected {
                return Err(Error::Checkpoint(format!(
                    "bridge explainer was trained against classifier {expected}, got {got}"
                )));
            }
        }
        Ok(())
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn to_bundle(&self, optimizer: Option<AdamW>) -> Bundle {
        let meta = ExplainerMeta {
            mode: self.mode,
            model: self.config.clone(),
            settings: self.settings.clone(),
            vocab: self.vocab.clone(),
            annotators: self.annotators.clone(),
            fused_dim: self.fused_dim,
            classifier_checksum: self.classifier_checksum.clone(),
        };
        Bundle {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::to_value(meta).expect("serializable"),
            params: self.params.clone(),
            optimizer,
        }
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<ExplainerModel> {
        bundle.expect_kind(CHECKPOINT_KIND)?;
        let meta: ExplainerMeta = serde_json::from_value(bundle.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("explainer metadata: {e}")))?;
        let vocab = Vocab::from_json(&serde_json::to_string(&meta.vocab).expect("serializable"))?;
        let mut m = ExplainerModel::new(meta.mode, meta.model, meta.settings, vocab, meta.annotators, meta.fused_dim)?;
        m.classifier_checksum = meta.classifier_checksum;
        load_params(&mut m.params, &bundle.params)?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<ExplainerModel> {
        ExplainerModel::from_bundle(&Bundle::load(path)?)
    }
}

fn allowed(t: usize) -> bool {
    t != PAD && t != BOS
}

fn argmax_allowed(lp: &[f64]) -> usize {
    let mut best = EOS;
    for (t, &v) in lp.iter().enumerate() {
        if allowed(t) && v > lp[best] {
            best = t;
        }
    }
    best
}

/// Explainer encoder, mean-pooled over a plain-text input.
impl Embedder for ExplainerModel {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut ids: Vec<usize> = tokenize(text)
            .iter()
            .take(self.config.max_len_explainer_in - 1)
            .map(|t| self.vocab.token_id(t))
            .collect();
        ids.push(EOS);
        let mut g = Graph::new(&self.params);
        let x = self.embed.embed_positions(&mut g, &ids, 0);
        let states = self.encoder.forward(&mut g, x, None);
        let pooled = g.mean_rows(states, &vec![true; ids.len()]);
        Ok(g.value(pooled).data().to_vec())
    }
}

/// Mean of raw token embeddings; a context-free probe for comparison with
/// the encoder-based embedder.
pub struct TokenEmbeddingProbe<'a>(pub &'a ExplainerModel);

impl Embedder for TokenEmbeddingProbe<'_> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let m = self.0;
        let table = m.params.get(m.embed.table);
        let toks = tokenize(text);
        let mut v = vec![0.0; table.cols()];
        if toks.is_empty() {
            return Ok(v);
        }
        for t in &toks {
            for (a, b) in v.iter_mut().zip(table.row(m.vocab.token_id(t))) {
                *a += b;
            }
        }
        let n = toks.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
    pub classifier_checksum: String,
}

pub struct ExplainerRun {
    pub model: ExplainerModel,
    pub optimizer: AdamW,
    pub history: Vec<ExplainerEpoch>,
    pub best_epoch: usize,
    pub steps: usize,
    pub classifier_checksum: String,
}

fn freeze_check(classifier: &PassportClassifier, expected: &str) -> Result<String> {
    let now = classifier.checksum();
    if now != expected {
        return Err(Error::Freeze(format!("classifier checksum changed from {expected} to {now}")));
    }
    Ok(now)
}

/// Trains the explainer with teacher forcing and early stopping on dev
/// loss. The classifier is read only: its checksum is verified before
/// training and after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_explainer(
    mut model: ExplainerModel,
    classifier: &PassportClassifier,
    train: &[&Instance],
    dev: &[&Instance],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&ExplainerEpoch),
) -> Result<ExplainerRun> {
    cfg.validate()?;
    model.check_classifier(classifier)?;
    let frozen = classifier.checksum();
    if model.mode == ExplainerMode::Bridge {
        model.classifier_checksum = Some(frozen.clone());
    }
    let with_z = (model.mode == ExplainerMode::Bridge).then_some(classifier);
    let train_ex = model.examples(with_z, train)?;
    let dev_ex = model.examples(with_z, dev)?;
    if train_ex.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if dev_ex.is_empty() {
        return Err(Error::EmptySplit("dev".into()));
    }
    let per_epoch = train_ex.len().div_ceil(cfg.batch_size);
    let schedule = LinearWarmup::new(cfg.peak_lr(), cfg.warmup_ratio, per_epoch * cfg.epochs);
    let mut opt = AdamW::new(cfg.adamw(), &model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed, 1, epoch));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_ex[i]).collect();
            let mut grads = {
                let mut g = Graph::training(&model.params, step_seed(seed, 2, step));
                let loss = model.batch_loss(&mut g, &batch)?;
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        detail: format!("explainer loss {v}"),
                    });
                }
                loss_sum += v * chunk.len() as f64;
                g.backward(loss)
            };
            clip_global_norm(&mut grads, cfg.clip_max_norm);
            opt.step(&mut model.params, &grads, schedule.lr_at(step))
                .map_err(|e| match e {
                    Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
                    other => other,
                })?;
            step += 1;
        }
        let checksum = freeze_check(classifier, &frozen)?;
        let dev_loss = model.eval_loss(&dev_ex)?;
        let record = ExplainerEpoch {
            epoch,
            train_loss: loss_sum / train_ex.len() as f64,
            dev_loss,
            lr: schedule.lr_at(step.saturating_sub(1)),
            classifier_checksum: checksum,
        };
        on_epoch(&record);
        history.push(record);
        match stopper.observe(epoch, -dev_loss) {
            StopDecision::Improved => best_params = model.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    freeze_check(classifier, &frozen)?;
    model.params = best_params;
    Ok(ExplainerRun {
        model,
        optimizer: opt,
        history,
        best_epoch: stopper.best_epoch,
        steps: step,
        classifier_checksum: frozen,
    })
}

/// Gradients of one bridge-mode training batch, split by owner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientPartition {
    /// Classifier parameters that received a nonzero gradient.
    pub classifier_nonzero: Vec<String>,
    pub bridge_nonzero: usize,
    pub generator_nonzero: usize,
    pub classifier_checksum_before: String,
    pub classifier_checksum_after: String,
}

/// Runs one bridge backward pass on `batch` and reports which parameters
/// received gradient. The classifier is consulted only through its fused
/// vectors, so its parameters are looked up by name in the gradient set.
pub fn gradient_partition(
    model: &ExplainerModel,
    classifier: &PassportClassifier,
    batch: &[Example],
) -> Result<GradientPartition> {
    if model.mode != ExplainerMode::Bridge {
        return Err(Error::Config("gradient partition applies to bridge explainers".into()));
    }
    let before = classifier.checksum();
    let refs: Vec<&Example> = batch.iter().collect();
    let grads: Gradients = {
        let mut g = Graph::new(&model.params);
        let loss = model.batch_loss(&mut g, &refs)?;
        g.backward(loss)
    };
    let clf_names: std::collections::HashSet<&str> = classifier.params.iter().map(|(_, n, _)| n).collect();
    let mut out = GradientPartition {
        classifier_nonzero: Vec::new(),
        bridge_nonzero: 0,
        generator_nonzero: 0,
        classifier_checksum_before: before,
        classifier_checksum_after: String::new(),
    };
    for (id, gt) in grads.iter() {
        if gt.max_abs() == 0.0 {
            continue;
        }
        let name = model.params.name(id);
        if clf_names.contains(name) {
            out.classifier_nonzero.push(name.to_string());
        } else if name.starts_with("bridge.") {
            out.bridge_nonzero += 1;
        } else {
            out.generator_nonzero += 1;
        }
    }
    out.classifier_checksum_after = classifier.checksum();
    Ok(out)
}

/// Label set of an instance's gold judgment, used to pick a reference
/// rationale: the rationale of the first gold label in C, E, N order.
pub fn reference_rationale(inst: &Instance, annotator_id: &str) -> Option<(Label, String)> {
    let j = inst.judgment(annotator_id)?;
    Label::ALL.iter().find_map(|&l| {
        j.pairs.iter().find(|p| p.label == l).map(|p| (l, p.rationale.clone()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Split};
    use crate::text::build_vocab_with;

    fn fixture() -> Corpus {
        crate::corpus::tests_support::fixture()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            annotator_embed_dim: 4,
            metadata_dim: 3,
            prefix_len: 2,
            bridge_hidden: 6,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn setup(mode: ExplainerMode) -> (Corpus, PassportClassifier, ExplainerModel) {
        let c = fixture();
        let vocab = build_vocab_with(&c, 1, &prompt_vocabulary(c.annotators())).unwrap();
        let clf = PassportClassifier::for_corpus(tiny(), vocab, &c).unwrap();
        let exp = ExplainerModel::for_classifier(mode, tiny(), ExplainerSettings::default(), &clf).unwrap();
        (c, clf, exp)
    }

    #[test]
    fn label_blocks() {
        assert_eq!(LabelInfo::Gold(LabelSet::parse("N E").unwrap()).block().unwrap(), "E N");
        assert_eq!(
            LabelInfo::Probs([0.1234, 0.5, 0.9]).block().unwrap(),
            "probs C=0.123 E=0.500 N=0.900"
        );
    }

    #[test]
    fn prompt_layout_and_determinism() {
        let (c, _, exp) = setup(ExplainerMode::Posthoc);
        let inst = c.instance("i1").unwrap();
        let a = exp.prompt(inst, "A2", LabelInfo::Gold(LabelSet::parse("E N").unwrap())).unwrap();
        let b = exp.prompt(inst, "A2", LabelInfo::Gold(LabelSet::parse("E N").unwrap())).unwrap();
        assert_eq!(a, b);
        assert!(a.text.starts_with("[ANN:A2] persona: M, age 33, DE, Postdoc | context: "));
        assert!(a.text.ends_with(" | labels: E N"));
        assert_eq!(a.ids[0], exp.vocab.control_id("A2").unwrap());
        assert_eq!(*a.ids.last().unwrap(), EOS);
        assert!(!a.ids.contains(&crate::text::UNK));
        let p = exp.prompt(inst, "A2", LabelInfo::Probs([0.1234, 0.5, 0.9])).unwrap();
        assert!(!p.ids.contains(&crate::text::UNK));
    }

    #[test]
    fn prompt_truncates_context_then_errors() {
        let (c, _, exp) = setup(ExplainerMode::Posthoc);
        let p = c.profile("A1").unwrap();
        let long = "word ".repeat(600);
        let pr = build_prompt(&exp.vocab, p, &long, "s", LabelInfo::Omitted, 512).unwrap();
        assert_eq!(pr.ids.len(), 512);
        assert!(pr.truncated > 0);
        assert!(build_prompt(&exp.vocab, p, "c", &long, LabelInfo::Omitted, 512).is_err());
    }

    #[test]
    fn bridge_shapes_and_zero_layer() {
        let (c, clf, mut exp) = setup(ExplainerMode::Bridge);
        let inst = c.instance("i1").unwrap();
        let z = clf.fused_vector(&inst.context, &inst.statement, "A1").unwrap();
        {
            let mut g = Graph::new(&exp.params);
            let p = exp.bridge_project(&mut g, &z).unwrap();
            assert_eq!(g.value(p).shape(), [2, 8]);
            let bad = Tensor::zeros(1, z.cols() + 1);
            assert!(exp.bridge_project(&mut g, &bad).is_err());
        }
        let fc2 = exp.bridge.clone().unwrap().fc2;
        exp.params.get_mut(fc2.weight).data_mut().fill(0.0);
        let mut g = Graph::new(&exp.params);
        let p = exp.bridge_project(&mut g, &z).unwrap();
        assert_eq!(g.value(p).max_abs(), 0.0);
    }

    #[test]
    fn bridge_mask_covers_prefix() {
        let (c, clf, exp) = setup(ExplainerMode::Bridge);
        let inst = c.instance("i1").unwrap();
        let prompt = exp.prompt(inst, "A1", LabelInfo::Gold(LabelSet::parse("E").unwrap())).unwrap();
        assert!(!prompt.text.contains("labels"));
        let z = clf.fused_vector(&inst.context, &inst.statement, "A1").unwrap();
        let mut g = Graph::new(&exp.params);
        let (states, mask) = exp.encode(&mut g, &prompt.ids, Some(&z)).unwrap();
        assert_eq!(mask.len(), 2 + prompt.ids.len());
        assert_eq!(g.value(states).rows(), mask.len());
    }

    #[test]
    fn zero_prefix_matches_posthoc_encoder() {
        let (c, clf, _) = setup(ExplainerMode::Bridge);
        let cfg = ModelConfig { prefix_len: 0, ..tiny() };
        let bridge = ExplainerModel::for_classifier(ExplainerMode::Bridge, cfg.clone(), ExplainerSettings::default(), &clf).unwrap();
        let mut post = ExplainerModel::for_classifier(ExplainerMode::Posthoc, cfg, ExplainerSettings::default(), &clf).unwrap();
        for (_, name, t) in bridge.params.iter() {
            if let Some(id) = post.params.id(name) {
                *post.params.get_mut(id) = t.clone();
            }
        }
        let inst = c.instance("i2").unwrap();
        let prompt = bridge.prompt(inst, "A3", LabelInfo::Omitted).unwrap();
        let z = clf.fused_vector(&inst.context, &inst.statement, "A3").unwrap();
        let mut g1 = Graph::new(&bridge.params);
        let (s1, _) = bridge.encode(&mut g1, &prompt.ids, Some(&z)).unwrap();
        let mut g2 = Graph::new(&post.params);
        let (s2, _) = post.encode(&mut g2, &prompt.ids, None).unwrap();
        assert_eq!(g1.value(s1).data(), g2.value(s2).data());
    }

    #[test]
    fn teacher_forcing_loss_matches_direct_cross_entropy() {
        let (c, clf, exp) = setup(ExplainerMode::Bridge);
        let train: Vec<&Instance> = c.split(Split::Train).collect();
        let ex = exp.examples(Some(&clf), &train).unwrap();
        assert_eq!(ex.len(), 3);
        let refs: Vec<&Example> = ex.iter().collect();
        let mut g = Graph::new(&exp.params);
        let loss = exp.batch_loss(&mut g, &refs).unwrap();
        let got = g.value(loss).item();

        let mut total = 0.0;
        let mut count = 0;
        for e in &ex {
            let mut g = Graph::new(&exp.params);
            let (mem, mask) = exp.encode(&mut g, &e.prompt, e.z.as_ref()).unwrap();
            let logits = exp.decode_logits(&mut g, mem, &mask, &e.target);
            let lv = g.value(logits).clone();
            let mut targets = e.target.clone();
            targets.push(EOS);
            for (r, &t) in targets.iter().enumerate() {
                let row = lv.row(r);
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                total += -(row[t].exp() / z).ln();
                count += 1;
            }
        }
        assert!((got - total / count as f64).abs() < 1e-9, "{got} vs {}", total / count as f64);
    }

    #[test]
    fn gradients_stay_out_of_the_classifier() {
        let (c, clf, exp) = setup(ExplainerMode::Bridge);
        let train: Vec<&Instance> = c.split(Split::Train).collect();
        let ex = exp.examples(Some(&clf), &train).unwrap();
        let part = gradient_partition(&exp, &clf, &ex).unwrap();
        assert!(part.classifier_nonzero.is_empty());
        assert!(part.bridge_nonzero > 0);
        assert!(part.generator_nonzero > 0);
        assert_eq!(part.classifier_checksum_before, part.classifier_checksum_after);
    }

    #[test]
    fn greedy_is_deterministic_and_eos_first_is_empty() {
        let (c, clf, mut exp) = setup(ExplainerMode::Posthoc);
        let inst = c.instance("i1").unwrap();
        let a = exp.generate(&clf, inst, "A1", Decoding::Greedy).unwrap();
        let b = exp.generate(&clf, inst, "A1", Decoding::Greedy).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens <= 128);
        let head = exp.decoder.head.clone();
        exp.params.get_mut(head.weight).data_mut().fill(0.0);
        let bias = exp.params.get_mut(head.bias);
        bias.data_mut().fill(0.0);
        bias.data_mut()[EOS] = 5.0;
        let e = exp.generate(&clf, inst, "A1", Decoding::Greedy).unwrap();
        assert!(e.empty);
        assert_eq!(e.text, "");
        let beam = exp.generate(&clf, inst, "A1", Decoding::Beam { width: 3 }).unwrap();
        assert!(beam.empty);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, clf, exp) = setup(ExplainerMode::Bridge);
        let b = Bundle::from_bytes(&exp.to_bundle(None).to_bytes()).unwrap();
        let back = ExplainerModel::from_bundle(&b).unwrap();
        assert_eq!(back, exp);
        back.check_classifier(&clf).unwrap();
    }

    #[test]
    fn reference_is_first_canonical_label() {
        let c = fixture();
        let (l, _) = reference_rationale(c.instance("i1").unwrap(), "A2").unwrap();
        assert_eq!(l, Label::E);
        assert!(reference_rationale(c.instance("i1").unwrap(), "A3").is_none());
    }
}
