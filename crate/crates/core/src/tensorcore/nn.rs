//! Transformer building blocks on top of [`Graph`].
//!
//! Blocks are pre-LN: `x + drop(f(ln(x)))`, with a final layer norm on the
//! stack output.

use rand::Rng;

use super::graph::AttentionSpec;
use super::params::ParamBuilder;
use super::{Graph, NodeId, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::text::PAD;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weight is stored `in × out` so `y = x·W + b`.
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            weight: pb.normal(&format!("{name}.weight"), din, dout),
            bias: pb.zeros(&format!("{name}.bias"), 1, dout, false),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gamma: pb.ones(&format!("{name}.gamma"), 1, d),
            beta: pb.zeros(&format!("{name}.beta"), 1, d, false),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, heads: usize) -> MultiHeadAttention {
        MultiHeadAttention {
            q: Linear::new(pb, &format!("{name}.q"), d, d),
            k: Linear::new(pb, &format!("{name}.k"), d, d),
            v: Linear::new(pb, &format!("{name}.v"), d, d),
            o: Linear::new(pb, &format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query: NodeId,
        memory: NodeId,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> NodeId {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let spec = AttentionSpec {
            heads: self.heads,
            key_mask,
            causal,
        };
        let a = g.attention(q, k, v, spec);
        self.o.forward(g, a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            up: Linear::new(pb, &format!("{name}.up"), d, hidden),
            down: Linear::new(pb, &format!("{name}.down"), hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, dropout: f64) -> NodeId {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        let h = g.dropout(h, dropout);
        self.down.forward(g, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, key_mask: Option<&[bool]>, dropout: f64) -> NodeId {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, key_mask, false);
        let a = g.dropout(a, dropout);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h, dropout);
        let f = g.dropout(f, dropout);
        g.add(x, f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        memory: NodeId,
        memory_mask: Option<&[bool]>,
        dropout: f64,
    ) -> NodeId {
        let h = self.ln1.forward(g, x);
        let a = self.self_attn.forward(g, h, h, None, true);
        let a = g.dropout(a, dropout);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let c = self.cross_attn.forward(g, h, memory, memory_mask, false);
        let c = g.dropout(c, dropout);
        let x = g.add(x, c);
        let h = self.ln3.forward(g, x);
        let f = self.ffn.forward(g, h, dropout);
        let f = g.dropout(f, dropout);
        g.add(x, f)
    }
}

/// Stack of encoder layers plus a final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        d: usize,
        n_layers: usize,
        heads: usize,
        ffn: usize,
        dropout: f64,
    ) -> Encoder {
        let layers = (0..n_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(pb, &format!("{p}.ln1"), d),
                    attn: MultiHeadAttention::new(pb, &format!("{p}.attn"), d, heads),
                    ln2: LayerNorm::new(pb, &format!("{p}.ln2"), d),
                    ffn: FeedForward::new(pb, &format!("{p}.ffn"), d, ffn),
                }
            })
            .collect();
        Encoder {
            layers,
            norm: LayerNorm::new(pb, &format!("{name}.norm"), d),
            dropout,
        }
    }

    /// Runs the stack over already-embedded rows.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, key_mask: Option<&[bool]>) -> NodeId {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h, key_mask, self.dropout);
        }
        self.norm.forward(g, h)
    }
}

/// Causal decoder stack with cross-attention and an untied output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub dropout: f64,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        d: usize,
        n_layers: usize,
        heads: usize,
        ffn: usize,
        vocab: usize,
        dropout: f64,
    ) -> Decoder {
        let layers = (0..n_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                DecoderLayer {
                    ln1: LayerNorm::new(pb, &format!("{p}.ln1"), d),
                    self_attn: MultiHeadAttention::new(pb, &format!("{p}.self_attn"), d, heads),
                    ln2: LayerNorm::new(pb, &format!("{p}.ln2"), d),
                    cross_attn: MultiHeadAttention::new(pb, &format!("{p}.cross_attn"), d, heads),
                    ln3: LayerNorm::new(pb, &format!("{p}.ln3"), d),
                    ffn: FeedForward::new(pb, &format!("{p}.ffn"), d, ffn),
                }
            })
            .collect();
        Decoder {
            layers,
            norm: LayerNorm::new(pb, &format!("{name}.norm"), d),
            head: Linear::new(pb, &format!("{name}.head"), d, vocab),
            dropout,
        }
    }

    /// Logits (`T × vocab`) for embedded target rows attending to `memory`.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, memory: NodeId, memory_mask: Option<&[bool]>) -> NodeId {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h, memory, memory_mask, self.dropout);
        }
        let h = self.norm.forward(g, h);
        self.head.forward(g, h)
    }
}

/// Token embedding table, scaled by `sqrt(d)` on lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, vocab: usize, dim: usize) -> Embedding {
        Embedding {
            table: pb.normal(name, vocab, dim),
            dim,
        }
    }

    pub fn lookup(&self, g: &mut Graph<'_>, ids: &[usize]) -> NodeId {
        let t = g.param(self.table);
        let e = g.gather_rows(t, ids);
        g.scale(e, (self.dim as f64).sqrt())
    }

    /// Scaled embeddings plus sinusoidal positions starting at `offset`.
    pub fn embed_positions(&self, g: &mut Graph<'_>, ids: &[usize], offset: usize) -> NodeId {
        let e = self.lookup(g, ids);
        let pe = g.constant(sinusoidal(offset, ids.len(), self.dim));
        g.add(e, pe)
    }
}

/// Sinusoidal position table for positions `offset..offset+len`.
pub fn sinusoidal(offset: usize, len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for r in 0..len {
        let pos = (offset + r) as f64;
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
            t.set(r, i, v);
        }
    }
    t
}

/// Per-token states and mean-pooled sentence vector of one sequence.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub states: NodeId,
    pub pooled: NodeId,
}

/// Embeds and encodes one padded row. PAD positions are masked from
/// attention and excluded from the pooled mean.
pub fn encode_sequence(
    g: &mut Graph<'_>,
    emb: &Embedding,
    encoder: &Encoder,
    ids: &[usize],
    embed_dropout: f64,
) -> Result<Encoded> {
    let mask: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::Shape("sequence consists only of padding".into()));
    }
    let x = emb.embed_positions(g, ids, 0);
    let x = g.dropout(x, embed_dropout);
    let key_mask = if mask.iter().all(|&m| m) { None } else { Some(mask.as_slice()) };
    let states = encoder.forward(g, x, key_mask);
    let pooled = g.mean_rows(states, &mask);
    Ok(Encoded { states, pooled })
}

/// Encodes every row of a padded batch; pooled vectors are stacked `B × d`.
pub fn encode_batch(
    g: &mut Graph<'_>,
    emb: &Embedding,
    encoder: &Encoder,
    batch: &[Vec<usize>],
    embed_dropout: f64,
) -> Result<(Vec<Encoded>, NodeId)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut out = Vec::with_capacity(batch.len());
    for ids in batch {
        out.push(encode_sequence(g, emb, encoder, ids, embed_dropout)?);
    }
    let pooled: Vec<NodeId> = out.iter().map(|e| e.pooled).collect();
    let h = g.concat_rows(&pooled);
    Ok((out, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamStore, Embedding, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
            init_std: 0.2,
        };
        let emb = Embedding::new(&mut pb, "emb", 12, 8);
        let enc = Encoder::new(&mut pb, "enc", 8, 2, 2, 16, 0.0);
        (store, emb, enc)
    }

    #[test]
    fn padding_does_not_change_pooled_vector() {
        let (store, emb, enc) = tiny();
        let mut g = Graph::new(&store);
        let a = encode_sequence(&mut g, &emb, &enc, &[1, 5, 6, 2], 0.0).unwrap();
        let b = encode_sequence(&mut g, &emb, &enc, &[1, 5, 6, 2, 0, 0, 0], 0.0).unwrap();
        let (va, vb) = (g.value(a.pooled), g.value(b.pooled));
        for (x, y) in va.data().iter().zip(vb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn all_padding_is_rejected() {
        let (store, emb, enc) = tiny();
        let mut g = Graph::new(&store);
        assert!(encode_sequence(&mut g, &emb, &enc, &[0, 0], 0.0).is_err());
    }

    #[test]
    fn single_token_pool_equals_its_state() {
        let (store, emb, enc) = tiny();
        let mut g = Graph::new(&store);
        let e = encode_sequence(&mut g, &emb, &enc, &[7], 0.0).unwrap();
        assert_eq!(g.value(e.states).data(), g.value(e.pooled).data());
    }

    #[test]
    fn sinusoid_first_row() {
        let t = sinusoidal(0, 2, 4);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((t.get(1, 2) - (0.01f64).sin()).abs() < 1e-15);
    }
}
