//! Word-level tokenizer and vocabulary with reserved special tokens and one
//! control token per annotator.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const VOCAB_VERSION: u32 = 1;

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '‘' | '’' | '“' | '”' | '–' | '—' | '…' | '«' | '»' | '¿' | '¡' | '·'
        )
}

/// Lowercases, splits on whitespace, and emits every punctuation character
/// as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if is_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.extend(c.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn control_token(annotator_id: &str) -> String {
    format!("[ANN:{annotator_id}]")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    version: u32,
    min_freq: usize,
    n_annotators: usize,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, min_freq: usize, n_annotators: usize) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            version: VOCAB_VERSION,
            min_freq,
            n_annotators,
            tokens,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id of an annotator's control token.
    pub fn control_id(&self, annotator_id: &str) -> Result<usize> {
        self.id(&control_token(annotator_id))
            .ok_or_else(|| Error::UnknownAnnotator(annotator_id.to_string()))
    }

    /// True for PAD/BOS/EOS/UNK and the annotator control tokens.
    pub fn is_special(&self, id: usize) -> bool {
        id < RESERVED.len() + self.n_annotators
    }

    /// Content tokens (everything after the reserved and control ids).
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len() + self.n_annotators..]
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.id(token).filter(|&i| !self.is_special(i)).unwrap_or(UNK)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Vocab> {
        let v: Vocab =
            serde_json::from_str(text).map_err(|e| Error::parse("vocab", e.to_string()))?;
        if v.version != VOCAB_VERSION {
            return Err(Error::parse("vocab", format!("unsupported version {}", v.version)));
        }
        if v.tokens.len() < RESERVED.len() + v.n_annotators
            || v.tokens[..RESERVED.len()] != RESERVED
        {
            return Err(Error::parse("vocab", "reserved tokens missing or reordered"));
        }
        let n = v.tokens.len();
        let rebuilt = Vocab::from_tokens(v.tokens, v.min_freq, v.n_annotators);
        if rebuilt.index.len() != n {
            return Err(Error::parse("vocab", "duplicate tokens"));
        }
        Ok(rebuilt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_json(&text)
    }

    /// Maps ids back to surface tokens, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    pub fn decode_text(&self, ids: &[usize]) -> String {
        self.decode(ids).join(" ")
    }
}

/// Builds a vocabulary from train-split contexts, statements and rationales.
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Result<Vocab> {
    build_vocab_with(corpus, min_freq, &[])
}

/// Like [`build_vocab`], additionally forcing `extra` tokens in regardless of
/// frequency (used for fixed prompt scaffolding).
pub fn build_vocab_with(corpus: &Corpus, min_freq: usize, extra: &[String]) -> Result<Vocab> {
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut any = false;
    for inst in corpus.split(Split::Train) {
        any = true;
        let mut add = |t: &str| {
            for tok in tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        };
        add(&inst.context);
        add(&inst.statement);
        for j in &inst.judgments {
            for p in &j.pairs {
                add(&p.rationale);
            }
        }
    }
    if !any {
        return Err(Error::EmptySplit("train".into()));
    }
    let mut content: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq)
        .collect();
    content.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(corpus.annotators().iter().map(|a| control_token(&a.id)));
    let n_fixed = tokens.len();
    tokens.extend(content.into_iter().map(|(t, _)| t));
    let present: std::collections::HashSet<String> = tokens[n_fixed..].iter().cloned().collect();
    let mut forced: Vec<String> = extra
        .iter()
        .flat_map(|e| tokenize(e))
        .filter(|t| !present.contains(t))
        .collect();
    forced.sort();
    forced.dedup();
    tokens.extend(forced);
    Ok(Vocab::from_tokens(tokens, min_freq, corpus.annotators().len()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Right-pads with PAD up to `len`; never truncates.
    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut ids = self.ids.clone();
        if ids.len() < len {
            ids.resize(len, PAD);
        }
        TokenSequence { ids }
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != PAD).collect()
    }
}

/// Maps content tokens to ids (UNK for unseen). Truncation keeps the left
/// part; with `add_bos_eos` the BOS/EOS pair counts toward `max_len`.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize, add_bos_eos: bool) -> Result<TokenSequence> {
    encode_tokens(&tokenize(text), vocab, max_len, add_bos_eos)
}

pub fn encode_tokens(
    tokens: &[String],
    vocab: &Vocab,
    max_len: usize,
    add_bos_eos: bool,
) -> Result<TokenSequence> {
    if add_bos_eos && max_len < 2 {
        return Err(Error::Config(format!(
            "max_len {max_len} cannot hold BOS and EOS"
        )));
    }
    let budget = if add_bos_eos { max_len - 2 } else { max_len };
    let mut ids = Vec::with_capacity(budget.min(tokens.len()) + 2);
    if add_bos_eos {
        ids.push(BOS);
    }
    ids.extend(tokens.iter().take(budget).map(|t| vocab.token_id(t)));
    if add_bos_eos {
        ids.push(EOS);
    }
    Ok(TokenSequence { ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;
    use proptest::prelude::*;

    fn tiny(train_text: &str) -> Corpus {
        let rec = serde_json::json!({
            "kind": "instance", "id": "1", "split": "train", "context": train_text,
            "statement": "b", "judgments": {"A1": [{"label": "E", "rationale": "a"}]}
        });
        let text = format!(
            "{}\n{}\n",
            r#"{"kind":"annotator","id":"A1","gender":"F","age":22,"nationality":"CN","education":"MSc"}"#,
            rec
        );
        Corpus::parse_jsonl(&text).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The cat, sat."), vec!["the", "cat", ",", "sat", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("[ANN:A1]"), vec!["[", "ann", ":", "a1", "]"]);
    }

    #[test]
    fn min_freq_filters_content() {
        // context "a" + statement "b" + rationale "a" => a:2, b:1
        let v = build_vocab(&tiny("a"), 2).unwrap();
        assert_eq!(v.content_tokens(), &["a".to_string()]);
        assert_eq!(v.len(), 4 + 1 + 1);
        assert!(v.control_id("A1").is_ok());
        assert!(build_vocab(&tiny("a"), 0).is_err());
    }

    #[test]
    fn vocab_is_deterministic_and_round_trips() {
        let a = build_vocab(&tiny("x y y z z z"), 1).unwrap();
        let b = build_vocab(&tiny("x y y z z z"), 1).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.content_tokens()[0], "z");
        let back = Vocab::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.id("y"), a.id("y"));
    }

    #[test]
    fn encode_examples() {
        let v = build_vocab(&tiny("the cat sat"), 1).unwrap();
        let s = encode("the cat sat", &v, 10, true).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.ids[0], BOS);
        assert_eq!(s.ids[4], EOS);
        let s = encode("the dog sat", &v, 10, false).unwrap();
        assert_eq!(s.ids[1], UNK);
        let long = vec!["cat"; 600].join(" ");
        assert_eq!(encode(&long, &v, 512, true).unwrap().len(), 512);
        assert_eq!(encode(&long, &v, 512, false).unwrap().len(), 512);
        assert!(encode("cat", &v, 1, true).is_err());
    }

    #[test]
    fn control_surface_is_unreachable() {
        let v = build_vocab(&tiny("[ANN:A1] a"), 1).unwrap();
        let s = encode("[ANN:A1]", &v, 20, false).unwrap();
        assert!(s.ids.iter().all(|&i| !v.is_special(i) || i == UNK));
    }

    proptest! {
        #[test]
        fn retokenize_is_idempotent(s in "[a-zA-Z ,.!?'’-]{0,60}") {
            let t = tokenize(&s);
            prop_assert_eq!(tokenize(&t.join(" ")), t);
        }

        #[test]
        fn decode_encode_matches_tokenize(s in "[a-e ,.]{0,40}") {
            let v = build_vocab(&tiny("a b c ,"), 1).unwrap();
            let ids = encode(&s, &v, 1000, true).unwrap();
            let back = v.decode(&ids.ids);
            let expect: Vec<String> = tokenize(&s)
                .into_iter()
                .map(|t| if v.id(&t).is_some() { t } else { "<unk>".into() })
                .collect();
            prop_assert_eq!(back, expect);
            prop_assert!(ids.ids[1..ids.len() - 1].iter().all(|&i| i == UNK || !v.is_special(i)));
        }
    }
}
