use proptest::prelude::*;
use recinit_core::corpus::{generate_synthetic, SynthParams};
use recinit_core::probe::{
    capture, item_spans, layer_blocks, similarity, stratification_score, AttentionTrace, SimilarityMetric,
};
use recinit_core::textenc::{Encoder, EncoderConfig, Tokenizer};

fn trace_from(layers: usize, heads: usize, tokens: usize, weights: Vec<f32>) -> AttentionTrace {
    AttentionTrace {
        layers,
        heads,
        tokens,
        weights,
        item_positions: vec![0; tokens],
        token_types: vec![0; tokens],
    }
}

proptest! {
    #[test]
    fn similarity_is_symmetric_with_unit_diagonal(
        raw in prop::collection::vec(0.01f32..1.0, 4 * 2 * 7),
    ) {
        // normalise each row into a distribution
        let mut w = raw;
        for row in w.chunks_mut(7) {
            let s: f32 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let t = trace_from(4, 2, 7, w);
        for metric in [SimilarityMetric::Cosine, SimilarityMetric::JensenShannon] {
            let m = similarity(&t, metric).unwrap();
            prop_assert_eq!(m.n, 8);
            for i in 0..8 {
                prop_assert_eq!(m.get(i, i), 1.0);
                for j in 0..8 {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                    prop_assert!((0.0..=1.0).contains(&m.get(i, j)));
                }
            }
        }
    }
}

#[test]
fn block_constant_traces_fully_stratify() {
    // three layer groups of two layers each; each group puts all its mass
    // on its own token, so rows agree within a group and are disjoint across
    let (layers, heads, tokens) = (6, 2, 5);
    let mut w = vec![0.0f32; layers * heads * tokens];
    for l in 0..layers {
        for h in 0..heads {
            w[(l * heads + h) * tokens + l / 2] = 1.0;
        }
    }
    let t = trace_from(layers, heads, tokens, w);
    let blocks = layer_blocks(layers, heads, 3).unwrap();
    for metric in [SimilarityMetric::Cosine, SimilarityMetric::JensenShannon] {
        let m = similarity(&t, metric).unwrap();
        let (within, between) = stratification_score(&m, &blocks).unwrap();
        assert!((within - 1.0).abs() < 1e-12, "{metric:?} within {within}");
        assert!(between.abs() < 1e-12, "{metric:?} between {between}");
    }
}

#[test]
fn captured_trace_covers_the_history() {
    let s = generate_synthetic(&SynthParams {
        users: 20,
        ..SynthParams::default()
    })
    .unwrap();
    let tok = Tokenizer::build(&[&s.catalog], 1).unwrap();
    let cfg = EncoderConfig {
        layers: 3,
        heads: 2,
        dim: 8,
        ffn: 16,
        max_tokens: 64,
        vocab_size: tok.vocab_size(),
        dropout: 0.1,
    };
    let enc = Encoder::new(cfg, 2).unwrap();
    let t = capture(&enc, &[4, 9, 11], &s.catalog, &tok).unwrap();
    assert_eq!(item_spans(&t).len(), 3);
    // capture runs in evaluation mode, so it is repeatable despite dropout
    assert_eq!(t, capture(&enc, &[4, 9, 11], &s.catalog, &tok).unwrap());
    let mismatched = Encoder::new(EncoderConfig { vocab_size: tok.vocab_size() + 1, ..cfg }, 2).unwrap();
    assert!(capture(&mismatched, &[4], &s.catalog, &tok).is_err());
}
