//! Finite-difference checks of every differentiable block of the real
//! models at toy dimensions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    tensor_for, AnnotatorJudgment, AnnotatorProfile, Corpus, Instance, Label, LabeledRationale, Split,
};
use crate::error::Result;
use crate::explainer::{prompt_vocabulary, ExplainerModel, ExplainerMode, ExplainerSettings};
use crate::passport::{batch_loss, PassportClassifier};
use crate::tensorcore::gradcheck::{check, CheckOutcome, TOLERANCE};
use crate::tensorcore::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::tensorcore::{Graph, ModelConfig, NodeId, ParamBuilder, ParamStore, Tensor, TrainConfig};
use crate::text::build_vocab_with;

pub const BLOCKS: [&str; 11] = [
    "embedding",
    "attention",
    "layer_norm",
    "ffn",
    "encoder_pooled",
    "fusion_head",
    "focal_loss",
    "soft_alignment",
    "classifier_loss",
    "bridge_mlp",
    "decoder_cross_entropy",
];

/// Entries checked per parameter tensor.
const PER_PARAM: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub block: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst: String,
    pub entries: usize,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.entries > 0
    }
}

/// Per-block maximum over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: String,
    pub max_rel_error: f64,
    pub seeds: usize,
    pub entries: usize,
    pub passed: bool,
}

pub fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 12,
        dropout: 0.0,
        annotator_embed_dim: 4,
        metadata_dim: 3,
        prefix_len: 2,
        bridge_hidden: 6,
        init_std: 0.3,
        seed,
        ..ModelConfig::default()
    }
}

/// Small corpus used by the model-level blocks.
pub fn toy_corpus() -> Corpus {
    let profile = |id: &str, gender: &str, age, nat: &str, edu: &str| AnnotatorProfile {
        id: id.into(),
        gender: gender.into(),
        age,
        nationality: nat.into(),
        education: edu.into(),
    };
    let judgment = |a: &str, pairs: &[(Label, &str)]| AnnotatorJudgment {
        annotator_id: a.into(),
        pairs: pairs
            .iter()
            .map(|(label, r)| LabeledRationale {
                label: *label,
                rationale: r.to_string(),
            })
            .collect(),
    };
    let instance = |id: &str, context: &str, statement: &str, judgments| Instance {
        id: id.into(),
        split: Split::Train,
        context: context.into(),
        statement: statement.into(),
        judgments,
    };
    Corpus::new(
        vec![
            profile("A1", "F", 22, "CN", "MSc"),
            profile("A2", "M", 33, "DE", "Postdoc"),
            profile("A3", "F", 25, "CN", "MSc"),
        ],
        vec![
            instance(
                "t1",
                "A man walks a dog.",
                "Someone is outside.",
                vec![
                    judgment("A1", &[(Label::E, "walking a dog is outside")]),
                    judgment("A2", &[(Label::E, "dogs are walked outside"), (Label::N, "could be a treadmill")]),
                ],
            ),
            instance(
                "t2",
                "The shop is closed.",
                "The shop sells bread.",
                vec![
                    judgment("A3", &[(Label::N, "nothing about bread")]),
                    judgment("A1", &[(Label::C, "closed shops sell nothing")]),
                ],
            ),
        ],
    )
    .expect("valid toy corpus")
}

fn outcome(block: &str, seed: u64, o: CheckOutcome) -> BlockResult {
    BlockResult {
        block: block.into(),
        seed,
        max_rel_error: o.max_rel_error,
        worst: o.worst,
        entries: o.entries,
    }
}

fn projection(g: &Graph<'_>, node: NodeId, rng: &mut ChaCha8Rng) -> Tensor {
    let [r, c] = g.value(node).shape();
    Tensor::randn(r, c, 1.0, rng)
}

fn standalone<F>(block: &str, seed: u64, build: F) -> BlockResult
where
    F: FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>, &mut ChaCha8Rng) -> Box<dyn Fn(&mut Graph<'_>) -> NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut build_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10C);
    let mut store = ParamStore::new();
    let f = {
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
            init_std: 0.5,
        };
        build(&mut pb, &mut build_rng)
    };
    outcome(block, seed, check(&mut store, |g| f(g), |_| true, PER_PARAM))
}

fn input(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(rows, cols, 1.0, rng)
}

fn run_block(block: &str, seed: u64) -> Result<BlockResult> {
    let d = 8;
    let r = match block {
        "embedding" => standalone(block, seed, |pb, rng| {
            let table = pb.normal("embed", 11, d);
            let ids = vec![1, 4, 4, 7, 10, 2];
            let w = Tensor::randn(ids.len(), d, 1.0, rng);
            let emb = crate::tensorcore::nn::Embedding { table, dim: d };
            Box::new(move |g| {
                let x = emb.embed_positions(g, &ids, 3);
                g.weighted_sum(x, w.clone())
            })
        }),
        "attention" => standalone(block, seed, |pb, rng| {
            let attn = MultiHeadAttention::new(pb, "attn", d, 2);
            let x = input(5, d, rng);
            let mem = input(4, d, rng);
            let w1 = Tensor::randn(5, d, 1.0, rng);
            let w2 = Tensor::randn(5, d, 1.0, rng);
            Box::new(move |g| {
                let xn = g.constant(x.clone());
                let mn = g.constant(mem.clone());
                let mask = [true, false, true, true];
                let s = attn.forward(g, xn, xn, None, true);
                let c = attn.forward(g, xn, mn, Some(&mask), false);
                let a = g.weighted_sum(s, w1.clone());
                let b = g.weighted_sum(c, w2.clone());
                g.sum(&[a, b])
            })
        }),
        "layer_norm" => standalone(block, seed, |pb, rng| {
            let ln = LayerNorm::new(pb, "ln", d);
            let x = pb.normal("x", 4, d);
            let w = Tensor::randn(4, d, 1.0, rng);
            let shift = Tensor::randn(1, d, 0.3, rng);
            let gamma = ln.gamma;
            Box::new(move |g| {
                let xn = g.param(x);
                let gp = g.param(gamma);
                let sn = g.constant(shift.clone());
                let gs = g.add(gp, sn);
                let beta = g.param(ln.beta);
                let y = g.layer_norm(xn, gs, beta);
                g.weighted_sum(y, w.clone())
            })
        }),
        "ffn" => standalone(block, seed, |pb, rng| {
            let ffn = FeedForward::new(pb, "ffn", d, 12);
            let x = input(4, d, rng);
            let w = Tensor::randn(4, d, 1.0, rng);
            Box::new(move |g| {
                let xn = g.constant(x.clone());
                let y = ffn.forward(g, xn, 0.0);
                g.weighted_sum(y, w.clone())
            })
        }),
        "encoder_pooled" => {
            let (_, mut clf) = toy_classifier(seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE1);
            let ids = vec![1, 5, 6, 7, 2, 0, 0];
            let w = Tensor::randn(1, d, 1.0, &mut rng);
            let mut store = std::mem::take(&mut clf.params);
            let o = check(
                &mut store,
                |g| {
                    let h = clf.pooled(g, &ids).expect("non-empty input");
                    g.weighted_sum(h, w.clone())
                },
                |n| n.starts_with("clf.embed") || n.starts_with("clf.encoder"),
                PER_PARAM,
            );
            outcome(block, seed, o)
        }
        "fusion_head" => {
            let (_, mut clf) = toy_classifier(seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF5);
            let h = Tensor::randn(1, d, 1.0, &mut rng);
            let w = Tensor::randn(1, 3, 1.0, &mut rng);
            let mut store = std::mem::take(&mut clf.params);
            let o = check(
                &mut store,
                |g| {
                    let hn = g.constant(h.clone());
                    let z = clf.fuse(g, hn, "A2").expect("known annotator");
                    let p = clf.classify(g, z);
                    g.weighted_sum(p, w.clone())
                },
                |n| n.starts_with("clf.annotator") || n.starts_with("clf.meta_proj") || n.starts_with("clf.head"),
                PER_PARAM,
            );
            outcome(block, seed, o)
        }
        "focal_loss" => standalone(block, seed, |pb, rng| {
            let logits = pb.normal("logits", 6, 3);
            let labels: Vec<u8> = (0..18).map(|_| rng.random_range(0..2)).collect();
            let mask = vec![true, true, false, true, false, true];
            let alpha = [1.3, 0.7, 2.1];
            pb.store.get_mut(logits).scale_in_place(4.0);
            Box::new(move |g| {
                let l = g.param(logits);
                let p = g.sigmoid(l);
                g.focal_bce(p, &labels, &mask, alpha, 2.0)
            })
        }),
        "soft_alignment" => standalone(block, seed, |pb, rng| {
            let logits = pb.normal("logits", 6, 3);
            pb.store.get_mut(logits).scale_in_place(4.0);
            let mask = vec![true, false, true, true, true, false];
            let soft: Vec<[f64; 3]> = (0..2).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            Box::new(move |g| {
                let l = g.param(logits);
                let p = g.sigmoid(l);
                g.soft_alignment(p, &mask, &soft, 3)
            })
        }),
        "classifier_loss" => {
            let (corpus, mut clf) = toy_classifier(seed)?;
            let train: Vec<&Instance> = corpus.split(Split::Train).collect();
            let tensor = tensor_for(&corpus, &train);
            let batch: Vec<Vec<usize>> = train.iter().map(|i| clf.instance_ids(i)).collect::<Result<_>>()?;
            let a = clf.n_annotators();
            let mut labels = Vec::new();
            let mut mask = Vec::new();
            for i in 0..train.len() {
                for j in 0..a {
                    labels.extend_from_slice(&tensor.labels_of(i, j));
                    mask.push(tensor.mask(i, j));
                }
            }
            let cfg = TrainConfig::classifier();
            let mut store = std::mem::take(&mut clf.params);
            let o = check(
                &mut store,
                |g| {
                    let f = clf.forward(g, &batch).expect("forward");
                    batch_loss(g, f.probs, &labels, &mask, a, [1.0, 1.5, 0.8], &cfg).expect("loss").total
                },
                |_| true,
                6,
            );
            outcome(block, seed, o)
        }
        "bridge_mlp" => {
            let (corpus, clf) = toy_classifier(seed)?;
            let mut exp = ExplainerModel::for_classifier(ExplainerMode::Bridge, toy_config(seed), ExplainerSettings::default(), &clf)?;
            let inst = &corpus.instances()[0];
            let z = clf.fused_vector(&inst.context, &inst.statement, "A1")?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB2);
            let w = {
                let mut g = Graph::new(&exp.params);
                let p = exp.bridge_project(&mut g, &z)?;
                projection(&g, p, &mut rng)
            };
            let mut store = std::mem::take(&mut exp.params);
            let o = check(
                &mut store,
                |g| {
                    let p = exp.bridge_project(g, &z).expect("bridge");
                    g.weighted_sum(p, w.clone())
                },
                |n| n.starts_with("bridge."),
                PER_PARAM,
            );
            outcome(block, seed, o)
        }
        "decoder_cross_entropy" => {
            let (corpus, clf) = toy_classifier(seed)?;
            let mut exp = ExplainerModel::for_classifier(ExplainerMode::Bridge, toy_config(seed), ExplainerSettings::default(), &clf)?;
            let train: Vec<&Instance> = corpus.split(Split::Train).collect();
            let ex = exp.examples(Some(&clf), &train)?;
            let refs: Vec<_> = ex.iter().take(2).collect();
            let mut store = std::mem::take(&mut exp.params);
            let o = check(
                &mut store,
                |g| exp.batch_loss(g, &refs).expect("loss"),
                |_| true,
                4,
            );
            outcome(block, seed, o)
        }
        other => {
            return Err(crate::error::Error::Config(format!(
                "unknown gradcheck block {other}; known: {}",
                BLOCKS.join(", ")
            )))
        }
    };
    Ok(r)
}

fn toy_classifier(seed: u64) -> Result<(Corpus, PassportClassifier)> {
    let corpus = toy_corpus();
    let vocab = build_vocab_with(&corpus, 1, &prompt_vocabulary(corpus.annotators()))?;
    let clf = PassportClassifier::for_corpus(toy_config(seed), vocab, &corpus)?;
    Ok((corpus, clf))
}

/// Checks `blocks` (all when empty) on every seed.
pub fn run_suite(blocks: &[String], seeds: &[u64]) -> Result<Vec<BlockResult>> {
    let names: Vec<String> = if blocks.is_empty() {
        BLOCKS.iter().map(|s| s.to_string()).collect()
    } else {
        blocks.to_vec()
    };
    let mut out = Vec::new();
    for b in &names {
        for &s in seeds {
            out.push(run_block(b, s)?);
        }
    }
    Ok(out)
}

pub fn summarize(results: &[BlockResult]) -> Vec<BlockSummary> {
    let mut out: Vec<BlockSummary> = Vec::new();
    for r in results {
        match out.iter_mut().find(|s| s.block == r.block) {
            Some(s) => {
                s.max_rel_error = s.max_rel_error.max(r.max_rel_error);
                s.seeds += 1;
                s.entries += r.entries;
                s.passed &= r.passed();
            }
            None => out.push(BlockSummary {
                block: r.block.clone(),
                max_rel_error: r.max_rel_error,
                seeds: 1,
                entries: r.entries,
                passed: r.passed(),
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes_on_one_seed() {
        let res = run_suite(&[], &[11]).unwrap();
        assert_eq!(res.len(), BLOCKS.len());
        for r in &res {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn unknown_block_is_rejected() {
        assert!(run_suite(&["nope".into()], &[1]).is_err());
    }
}
