//! Central-difference checks of every autograd op and of the composed
//! training losses. Step 1e-3; each case returns the relative L2 error
//! between the analytic and numeric gradients, to be compared with `TOL`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recinit_core::corpus::{generate_synthetic, SynthParams};
use recinit_core::corpus::{filter_and_build, ItemCatalog, ItemId};
use recinit_core::pipeline::{ft_loss, pt_loss, Stage, StageConfig};
use recinit_core::rng::LabRng;
use recinit_core::seqmodels::{BackboneConfig, EmbeddingTable, SeqModel};
use recinit_core::textenc::{Encoder, EncoderConfig, Tokenizer};
use recinit_core::{Graph, ParamId, ParamStore, Result, Tensor, Var};

const H: f32 = 1e-3;
pub const TOL: f64 = 1e-3;

pub type Case = (&'static str, fn() -> f64);

fn rel_err(a: &[f32], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(&x, &y)| (x as f64 - y).powi(2)).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum();
    let nn: f64 = n.iter().map(|y| y * y).sum();
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-6 {
        return diff.sqrt();
    }
    diff.sqrt() / scale
}

/// Analytic and central-difference gradients of every parameter in the
/// store that `store` selects from `obj`, concatenated in store order. `loss`
/// must be deterministic in the parameter values.
fn gradients<T, S, F>(obj: &mut T, store: S, mut loss: F) -> (Vec<f32>, Vec<f64>)
where
    S: Fn(&mut T) -> &mut ParamStore,
    F: FnMut(&T, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(obj, &mut g).unwrap();
    let grads = g.backward(l).unwrap();
    let ids: Vec<ParamId> = store(obj).ids().collect();
    let mut eval = |o: &T| -> f64 {
        let mut g = Graph::new();
        let l = loss(o, &mut g).unwrap();
        g.scalar(l) as f64
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for id in ids {
        let n = store(obj).get(id).len();
        match grads.param(store(obj), id) {
            Some(a) => analytic.extend_from_slice(a),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for i in 0..n {
            let orig = store(obj).get(id).data()[i];
            store(obj).get_mut(id).data_mut()[i] = orig + H;
            let up = eval(obj);
            store(obj).get_mut(id).data_mut()[i] = orig - H;
            let down = eval(obj);
            store(obj).get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * H as f64));
        }
    }
    (analytic, numeric)
}

fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).unwrap().with_requires_grad(true)
}

/// Reduces an arbitrary node to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(randn(shape, &mut r).with_requires_grad(false));
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

fn op_err(shapes: &[Vec<usize>], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(&format!("x{i}"), randn(s.clone(), &mut rng)).unwrap())
        .collect();
    let (a, n) = gradients(
        &mut store,
        |s| s,
        |s, g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = f(g, &vars);
            Ok(weighted_sum(g, y, 99))
        },
    );
    rel_err(&a, &n)
}

/// Every differentiable op on small random inputs.
pub fn ops() -> Vec<Case> {
    vec![
        ("matmul", || op_err(&[vec![3, 4], vec![4, 5]], |g, v| g.matmul(v[0], v[1]).unwrap())),
        ("matmul_nt", || op_err(&[vec![3, 4], vec![5, 4]], |g, v| g.matmul_nt(v[0], v[1]).unwrap())),
        ("bmm", || op_err(&[vec![2, 3, 4], vec![2, 4, 5]], |g, v| g.bmm(v[0], v[1]).unwrap())),
        ("bmm_nt", || op_err(&[vec![2, 3, 4], vec![2, 5, 4]], |g, v| g.bmm_nt(v[0], v[1]).unwrap())),
        ("add", || op_err(&[vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1]).unwrap())),
        ("add_bias", || op_err(&[vec![3, 4], vec![4]], |g, v| g.add_bias(v[0], v[1]).unwrap())),
        ("mul", || op_err(&[vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1]).unwrap())),
        ("scale", || op_err(&[vec![3, 4]], |g, v| g.scale(v[0], -2.5))),
        ("gelu", || op_err(&[vec![3, 4]], |g, v| g.gelu(v[0]))),
        ("relu", || op_err(&[vec![3, 4]], |g, v| g.relu(v[0]))),
        ("sum", || {
            op_err(&[vec![3, 4]], |g, v| {
                let s = g.sum(v[0]);
                g.mul(s, s).unwrap()
            })
        }),
        ("mean", || {
            op_err(&[vec![3, 4]], |g, v| {
                let s = g.mean(v[0]);
                g.mul(s, s).unwrap()
            })
        }),
        ("dropout", || {
            op_err(&[vec![4, 6]], |g, v| {
                let mut r = ChaCha8Rng::seed_from_u64(3);
                g.dropout(v[0], 0.3, &mut r).unwrap()
            })
        }),
        ("softmax axis 1", || op_err(&[vec![3, 5]], |g, v| g.softmax(v[0], 1).unwrap())),
        ("softmax axis 0", || op_err(&[vec![3, 5]], |g, v| g.softmax(v[0], 0).unwrap())),
        ("layer_norm", || {
            op_err(&[vec![3, 6], vec![6], vec![6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())
        }),
        ("l2_normalize", || op_err(&[vec![3, 5]], |g, v| g.l2_normalize(v[0]))),
        ("gather_rows", || op_err(&[vec![5, 3]], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap())),
        ("concat_rows", || op_err(&[vec![2, 3], vec![4, 3]], |g, v| g.concat_rows(v[0], v[1]).unwrap())),
        ("reshape", || {
            op_err(&[vec![2, 6]], |g, v| {
                let r = g.reshape(v[0], vec![3, 4]).unwrap();
                g.gelu(r)
            })
        }),
        ("swap_axes12", || op_err(&[vec![2, 3, 4, 2]], |g, v| g.swap_axes12(v[0], [2, 3, 4, 2]).unwrap())),
        ("cross_entropy", || op_err(&[vec![4, 6]], |g, v| g.cross_entropy(v[0], &[5, 0, 2, 2]).unwrap())),
    ]
}

fn tiny_corpus() -> (ItemCatalog, Vec<(Vec<ItemId>, ItemId)>) {
    let p = SynthParams {
        clusters: 2,
        items_per_cluster: 6,
        users: 30,
        min_len: 3,
        max_len: 4,
        vocab_per_cluster: 4,
        shared_vocab: 2,
        seed: 11,
        ..SynthParams::default()
    };
    let s = generate_synthetic(&p).unwrap();
    let data = filter_and_build(&s.log, s.catalog.len(), 1, 1).unwrap();
    let pairs = data
        .users
        .iter()
        .take(3)
        .map(|u| {
            let n = u.items.len();
            (u.items[..n - 1].to_vec(), u.items[n - 1])
        })
        .collect();
    (s.catalog, pairs)
}

fn tiny_encoder(vocab: usize) -> Encoder {
    let cfg = EncoderConfig {
        layers: 2,
        heads: 2,
        dim: 8,
        ffn: 16,
        max_tokens: 20,
        vocab_size: vocab,
        dropout: 0.0,
    };
    Encoder::new(cfg, 5).unwrap()
}

fn pretraining_loss() -> f64 {
    let (catalog, pairs) = tiny_corpus();
    let tok = Tokenizer::build(&[&catalog], 1).unwrap();
    let mut enc = tiny_encoder(tok.vocab_size());
    let cfg = StageConfig::new(Stage::Pt, 0);
    let (a, n) = gradients(
        &mut enc,
        |e| &mut e.store,
        |e, g| {
            let mut r = LabRng::seed_from_u64(1);
            Ok(pt_loss(e, g, &pairs, &catalog, &tok, &cfg, &mut r)?.expect("batch of three"))
        },
    );
    rel_err(&a, &n)
}

fn fine_tuning_loss_with_trainable_table() -> f64 {
    let (catalog, pairs) = tiny_corpus();
    let tok = Tokenizer::build(&[&catalog], 1).unwrap();
    let enc = tiny_encoder(tok.vocab_size());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tables = ParamStore::new();
    let table = tables.add("ft.table", randn(vec![catalog.len(), 8], &mut rng)).unwrap();
    let mut both = (enc, tables);
    let loss = |(e, t): &(Encoder, ParamStore), g: &mut Graph| {
        let v = g.param(t, table);
        let v = g.l2_normalize(v);
        let mut r = LabRng::seed_from_u64(1);
        ft_loss(e, g, &pairs, v, &catalog, &tok, 0.05, &mut r)
    };
    let (mut a, mut n) = gradients(&mut both, |b| &mut b.0.store, loss);
    let (ta, tn) = gradients(&mut both, |b| &mut b.1, loss);
    a.extend(ta);
    n.extend(tn);
    rel_err(&a, &n)
}

fn seq_err(cfg: BackboneConfig) -> f64 {
    let (catalog, pairs) = tiny_corpus();
    let table = EmbeddingTable::random(catalog.len(), cfg.dim, 3);
    let mut model = SeqModel::new(cfg, table, 4).unwrap();
    model.set_table_trainable(true);
    let batch: Vec<Vec<ItemId>> = pairs
        .iter()
        .map(|(h, n)| {
            let mut v = h.clone();
            v.push(*n);
            v
        })
        .collect();
    let refs: Vec<&[ItemId]> = batch.iter().map(|v| v.as_slice()).collect();
    let (a, n) = gradients(
        &mut model,
        |m| &mut m.store,
        |m, g| {
            let mut r = LabRng::seed_from_u64(1);
            m.loss(g, &refs, &mut r, false)
        },
    );
    rel_err(&a, &n)
}
fn sasrec_loss() -> f64 {
    let mut c = BackboneConfig::sasrec(8);
    c.dropout = 0.0;
    seq_err(c)
}

fn bert4rec_loss() -> f64 {
    let mut c = BackboneConfig::bert4rec(8);
    c.dropout = 0.0;
    seq_err(c)
}

/// End-to-end training losses on a 12-item catalog with d = 8.
pub fn losses() -> Vec<Case> {
    vec![
        ("sasrec", sasrec_loss),
        ("bert4rec", bert4rec_loss),
        ("stage-pt mlm+iic", pretraining_loss),
        ("stage-ft2 trainable table", fine_tuning_loss_with_trainable_table),
    ]
}
