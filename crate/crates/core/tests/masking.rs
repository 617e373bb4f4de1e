use perspective_core::explainer::prompt_vocabulary;
use perspective_core::gradsuite::{toy_config, toy_corpus};
use perspective_core::passport::{batch_loss, PassportClassifier};
use perspective_core::tensorcore::{Graph, TrainConfig};
use perspective_core::text::build_vocab_with;
use proptest::prelude::*;

fn classifier(seed: u64) -> PassportClassifier {
    let corpus = toy_corpus();
    let vocab = build_vocab_with(&corpus, 1, &prompt_vocabulary(corpus.annotators())).unwrap();
    PassportClassifier::for_corpus(toy_config(seed), vocab, &corpus).unwrap()
}

/// Loss bits and every gradient entry's bits.
fn loss_and_grads(clf: &PassportClassifier, batch: &[Vec<usize>], labels: &[u8], mask: &[bool]) -> (u64, Vec<(String, Vec<u64>)>) {
    let cfg = TrainConfig::classifier();
    let mut g = Graph::new(&clf.params);
    let f = clf.forward(&mut g, batch).unwrap();
    let loss = batch_loss(&mut g, f.probs, labels, mask, clf.n_annotators(), [1.0, 2.0, 0.5], &cfg).unwrap();
    let grads = g.backward(loss.total);
    let mut out: Vec<(String, Vec<u64>)> = grads
        .iter()
        .map(|(id, t)| (clf.params.name(id).to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    out.sort();
    (g.value(loss.total).get(0, 0).to_bits(), out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_cells_never_reach_loss_or_gradients(
        seed in 0u64..1000,
        cells in prop::collection::vec((any::<bool>(), 1u8..8, 0u8..8), 6),
    ) {
        let clf = classifier(seed);
        let a = clf.n_annotators();
        let corpus = toy_corpus();
        let batch: Vec<Vec<usize>> = corpus.instances().iter().map(|i| clf.instance_ids(i).unwrap()).collect();
        prop_assume!(cells.len() == batch.len() * a);
        let mut mask: Vec<bool> = cells.iter().map(|c| c.0).collect();
        // every instance keeps at least one observed annotator
        for i in 0..batch.len() {
            mask[i * a] = true;
        }
        let bits = |b: u8| [b & 1, (b >> 1) & 1, (b >> 2) & 1];
        let mut clean = Vec::new();
        let mut flipped = Vec::new();
        for (r, c) in cells.iter().enumerate() {
            if mask[r] {
                clean.extend(bits(c.1));
                flipped.extend(bits(c.1));
            } else {
                clean.extend([0, 0, 0]);
                flipped.extend(bits(c.2));
            }
        }
        let x = loss_and_grads(&clf, &batch, &clean, &mask);
        let y = loss_and_grads(&clf, &batch, &flipped, &mask);
        prop_assert_eq!(x.0, y.0);
        prop_assert!(!x.1.is_empty());
        prop_assert_eq!(x.1, y.1);
    }
}

#[test]
fn observed_label_change_moves_the_loss() {
    let clf = classifier(3);
    let a = clf.n_annotators();
    let corpus = toy_corpus();
    let batch: Vec<Vec<usize>> = corpus.instances().iter().map(|i| clf.instance_ids(i).unwrap()).collect();
    let mask = vec![true; batch.len() * a];
    let labels = vec![1u8, 0, 0].repeat(batch.len() * a);
    let mut other = labels.clone();
    other[0] = 0;
    other[1] = 1;
    assert_ne!(
        loss_and_grads(&clf, &batch, &labels, &mask).0,
        loss_and_grads(&clf, &batch, &other, &mask).0
    );
}
