use recinit_core::corpus::{generate_synthetic, ItemCatalog, SynthParams};
use recinit_core::pipeline::{apply_layer_mask, iic_loss, mlm_mask, LayerSet};
use recinit_core::textenc::{
    flatten_history, Encoder, EncoderConfig, Tokenizer, CLS, FIRST_LEARNED, MASK,
};
use recinit_core::{Graph, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(dim: usize, ffn: usize) -> (ItemCatalog, Tokenizer, Encoder) {
    let s = generate_synthetic(&SynthParams {
        users: 50,
        ..SynthParams::default()
    })
    .unwrap();
    let tok = Tokenizer::build(&[&s.catalog], 1).unwrap();
    let cfg = EncoderConfig {
        layers: 3,
        heads: 2,
        dim,
        ffn,
        max_tokens: 30,
        vocab_size: tok.vocab_size(),
        dropout: 0.1,
    };
    let enc = Encoder::new(cfg, 3).unwrap();
    (s.catalog, tok, enc)
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn history_layout_most_recent_first_and_truncated() {
    let (cat, tok, _) = setup(8, 16);
    let one = flatten_history(&[5], &cat, &tok, 100).unwrap();
    let per_item = one.len() - 1;
    let x = flatten_history(&[1, 2, 3], &cat, &tok, 1 + 2 * per_item).unwrap();
    assert_eq!(x.tokens[0], CLS);
    assert_eq!(x.len(), 1 + 2 * per_item);
    // item 3 is the most recent and sits right after CLS
    let three = flatten_history(&[3], &cat, &tok, 100).unwrap();
    assert_eq!(&x.tokens[1..=per_item], &three.tokens[1..]);
    assert!(x.item_positions[1..=per_item].iter().all(|&p| p == 1));
    assert!(x.item_positions[per_item + 1..].iter().all(|&p| p == 2));
    // a lone item longer than the budget is cut at its tail
    let cut = flatten_history(&[3], &cat, &tok, 4).unwrap();
    assert_eq!(cut.tokens, three.tokens[..4]);
    assert!(flatten_history(&[], &cat, &tok, 10).is_err());
}

#[test]
fn padding_does_not_change_encodings() {
    let (cat, tok, enc) = setup(16, 32);
    let short = flatten_history(&[4], &cat, &tok, 30).unwrap();
    let long = flatten_history(&[1, 2, 3, 9], &cat, &tok, 30).unwrap();
    assert!(long.len() > short.len());
    let alone = enc.encode(&short, false).unwrap().0;
    let batch = enc.encode_batch(&[long.clone(), short.clone()]).unwrap();
    assert!(close(&alone, &batch[1], 1e-5));
    assert!(close(&enc.encode(&long, false).unwrap().0, &batch[0], 1e-5));
    let norm: f32 = alone.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
}

#[test]
fn every_token_can_influence_cls() {
    let (cat, tok, enc) = setup(16, 32);
    let x = flatten_history(&[1, 2], &cat, &tok, 30).unwrap();
    let base = enc.encode(&x, false).unwrap().0;
    let mut y = x.clone();
    let last = y.len() - 1;
    y.tokens[last] = if y.tokens[last] == FIRST_LEARNED { FIRST_LEARNED + 1 } else { FIRST_LEARNED };
    let changed = enc.encode(&y, false).unwrap().0;
    assert!(!close(&base, &changed, 1e-6));
}

#[test]
fn captured_attention_rows_are_distributions() {
    let (cat, tok, enc) = setup(16, 32);
    let x = flatten_history(&[7, 8, 9], &cat, &tok, 30).unwrap();
    let (_, trace) = enc.encode(&x, true).unwrap();
    let t = trace.unwrap();
    assert_eq!((t.layers, t.heads, t.tokens), (3, 2, x.len()));
    for l in 0..t.layers {
        for h in 0..t.heads {
            let s: f32 = t.row(l, h).iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "layer {l} head {h} sums to {s}");
        }
    }
}

#[test]
fn single_layer_mask_trains_one_block() {
    for (d, f) in [(8, 32), (16, 24)] {
        let (_, _, mut enc) = setup(d, f);
        // attention: four d x d projections with biases; two layer norms;
        // two feed-forward projections with biases
        let expected = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d);
        assert_eq!(apply_layer_mask(&mut enc, &LayerSet::of(&[1])).unwrap(), expected);
        assert_eq!(apply_layer_mask(&mut enc, &LayerSet::of(&[0, 2])).unwrap(), 2 * expected);
        assert_eq!(apply_layer_mask(&mut enc, &LayerSet::None).unwrap(), 0);
        let total = enc.store.total_count();
        assert_eq!(apply_layer_mask(&mut enc, &LayerSet::All).unwrap(), total);
        assert!(apply_layer_mask(&mut enc, &LayerSet::of(&[3])).is_err());
    }
}

#[test]
fn iic_closed_form_on_orthonormal_batch() {
    let b = 8;
    let mut eye = vec![0.0f32; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(vec![b, b], eye.clone()).unwrap());
    let n = g.constant(Tensor::new(vec![b, b], eye).unwrap());
    let l = iic_loss(&mut g, s, n, 0.05).unwrap();
    let e20 = 20.0f64.exp();
    let expected = -(e20 / (e20 + 7.0)).ln();
    assert!((g.scalar(l) as f64 - expected).abs() < 1e-6);
}

#[test]
fn mlm_mask_proportions() {
    let tokens: Vec<u32> = (0..20000).map(|i| FIRST_LEARNED + (i % 50)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = mlm_mask(&tokens, 0.15, 60, &mut rng).unwrap().unwrap();
    let sel = m.labels.len() as f64 / tokens.len() as f64;
    assert!((sel - 0.15).abs() < 0.01, "selected {sel}");
    let masked = m.labels.iter().filter(|&&(p, _)| m.ids[p] == MASK).count() as f64;
    assert!((masked / m.labels.len() as f64 - 0.8).abs() < 0.03);
    assert!(m.labels.iter().all(|&(p, t)| tokens[p] == t));
    // special tokens are never selected
    let specials = vec![CLS; 100];
    assert!(mlm_mask(&specials, 0.5, 60, &mut rng).unwrap().is_none());
}
