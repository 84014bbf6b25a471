//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order, so node ids are a valid
//! topological order and the backward pass is a single reverse sweep.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, gemm, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SwapAxes12 {
        x: Var,
        dims: [usize; 4],
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Build ops through the methods below, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<(usize, ParamId), Var>,
}

/// Per-node gradients produced by [`Graph::backward`]. Only leaf and parameter
/// gradients are retained.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<((usize, ParamId), Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    /// Frozen parameters are skipped.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &((uid, id), var) in &self.params {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = self.wrt(var) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Gradient of parameter `id` of `store`, if it took part in the graph.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&[f32]> {
        self.params
            .iter()
            .find(|(p, _)| *p == (store.uid(), id))
            .and_then(|&(_, v)| self.wrt(v))
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Leaf that receives a gradient when the tensor requires one.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    /// Parameter node; one node per parameter per graph, so repeated uses
    /// accumulate into a single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param,
            t.requires_grad(),
        );
        self.params.insert(key, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `a [.., k] @ b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || last_dim(&sa) != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        self.mm(a, b, 1, m, k, n, false, out_shape)
    }

    /// `a [.., k] @ b[n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || last_dim(&sa) != sb[1] {
            return Err(Error::shape("matmul_nt", format!("{sa:?} @ {sb:?}^T")));
        }
        let k = sb[1];
        let n = sb[0];
        let m = numel(&sa) / k;
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        self.mm(a, b, 1, m, k, n, true, out_shape)
    }

    /// Batched `a [B, m, k] @ b [B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{sa:?} @ {sb:?}")));
        }
        self.mm(a, b, sa[0], sa[1], sa[2], sb[2], false, vec![sa[0], sa[1], sb[2]])
    }

    /// Batched `a [B, m, k] @ b [B, n, k]^T`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape("bmm_nt", format!("{sa:?} @ {sb:?}^T")));
        }
        self.mm(a, b, sa[0], sa[1], sa[2], sb[1], true, vec![sa[0], sa[1], sb[1]])
    }

    #[allow(clippy::too_many_arguments)]
    fn mm(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                let ai = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
                let bi = if trans_b {
                    MatRef::new(&bv[i * n * k..(i + 1) * n * k], n, k).t()
                } else {
                    MatRef::new(&bv[i * k * n..(i + 1) * k * n], k, n)
                };
                gemm(ai, bi, &mut out[i * m * n..(i + 1) * m * n], 0.0);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            out_shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), ng))
    }

    /// Adds `bias [n]` along the trailing axis of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x), ng)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f32> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }, ng))
    }

    // ---- normalisation ----------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).to_vec();
        if inner == 1 {
            out.chunks_mut(len).for_each(kernels::softmax_row);
        } else {
            let mut buf = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b = out[base + j * inner];
                    }
                    kernels::softmax_row(&mut buf);
                    for (j, b) in buf.iter().enumerate() {
                        out[base + j * inner] = *b;
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Normalises the trailing axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        if n == 0 || shape.is_empty() {
            return Err(Error::EmptyAxis("layer_norm"));
        }
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {shape:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / n;
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (r, row) in xv.chunks(n).enumerate() {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let rstd = 1.0 / kernels::sqrt(var + eps);
            let o = &mut out[r * n..(r + 1) * n];
            for j in 0..n {
                o[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            ng,
        ))
    }

    /// Row-wise L2 normalisation over the trailing axis.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / n.max(1));
        for row in out.chunks_mut(n) {
            let norm = kernels::sqrt(row.iter().map(|v| v * v).sum::<f32>()).max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let ng = self.ng(x);
        self.push(shape, out, Op::L2Normalize { x, norms }, ng)
    }

    // ---- indexing and layout -------------------------------------------

    /// Rows `ids` of a 2-D table, shape `[ids.len(), cols]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table {shape:?}")));
        }
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows ids"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "gather_rows",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("concat_rows", format!("{sa:?} ++ {sb:?}")));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![sa[0] + sb[0], sa[1]], out, Op::ConcatRows(a, b), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Reshape(x), ng))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`; used to split and merge attention heads.
    pub fn swap_axes12(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        if numel(&dims) != self.value(x).len() {
            return Err(Error::shape(
                "swap_axes12",
                format!("{:?} as {dims:?}", self.shape(x)),
            ));
        }
        let out = swap12(self.value(x), dims);
        let ng = self.ng(x);
        Ok(self.push(
            vec![dims[0], dims[2], dims[1], dims[3]],
            out,
            Op::SwapAxes12 { x, dims },
            ng,
        ))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f32 = v.iter().sum::<f32>() / v.len() as f32;
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Mean(x), ng)
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?}, {} targets", targets.len()),
            ));
        }
        let c = shape[1];
        let lv = self.value(logits);
        let mut total = 0.0f32;
        for (row, &t) in lv.chunks(c).zip(targets) {
            if t >= c {
                return Err(Error::OutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    size: c,
                });
            }
            total += kernels::log_sum_exp(row) - row[t];
        }
        let loss = total / targets.len() as f32;
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    // ---- backward -------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(node, &g, &mut grads);
        }
        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..batch {
                        let gi = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        // dA = dC @ B_eff^T
                        let bt = if *trans_b {
                            MatRef::new(&bv[i * n * k..(i + 1) * n * k], n, k)
                        } else {
                            MatRef::new(&bv[i * k * n..(i + 1) * k * n], k, n).t()
                        };
                        gemm(gi, bt, &mut ga[i * m * k..(i + 1) * m * k], 1.0);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..batch {
                        let gi = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let ai = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
                        if *trans_b {
                            // dB [n, k] = dC^T @ A
                            gemm(gi.t(), ai, &mut gb[i * n * k..(i + 1) * n * k], 1.0);
                        } else {
                            // dB [k, n] = A^T @ dC
                            gemm(ai.t(), gi, &mut gb[i * k * n..(i + 1) * k * n], 1.0);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        add_into(s, g);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(s) = self.slot(grads, *x) {
                    add_into(s, g);
                }
                let n = self.value(*bias).len();
                if let Some(s) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for ((s, gv), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += gv * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((s, gv), x) in s.iter_mut().zip(g).zip(av) {
                        *s += gv * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = self.slot(grads, *x) {
                    for (s, gv) in s.iter_mut().zip(g) {
                        *s += gv * c;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, gv), v) in s.iter_mut().zip(g).zip(xv) {
                        *s += gv * kernels::gelu_grad(*v);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, gv), v) in s.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, gv), m) in s.iter_mut().zip(g).zip(mask) {
                        *s += gv * m;
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                if let Some(s) = self.slot(grads, *x) {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0f32;
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += g[idx] * y[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                s[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let n = gv.len();
                let xhat = |r: usize, j: usize| (xv[r * n + j] - mean[r]) * rstd[r];
                if let Some(s) = self.slot(grads, *gamma) {
                    for (r, gr) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            s[j] += gr[j] * xhat(r, j);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for gr in g.chunks(n) {
                        add_into(s, gr);
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0f32; n];
                    for (r, gr) in g.chunks(n).enumerate() {
                        let mut m1 = 0.0f32;
                        let mut m2 = 0.0f32;
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat(r, j);
                        }
                        m1 /= n as f32;
                        m2 /= n as f32;
                        let sr = &mut s[r * n..(r + 1) * n];
                        for j in 0..n {
                            sr[j] += rstd[r] * (dxhat[j] - m1 - xhat(r, j) * m2);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let n = y.len() / norms.len().max(1);
                if let Some(s) = self.slot(grads, *x) {
                    for (r, norm) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let d = kernels::dot(yr, gr);
                        let sr = &mut s[r * n..(r + 1) * n];
                        for j in 0..n {
                            sr[j] += (gr[j] - yr[j] * d) / norm;
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let cols = node.shape[1];
                if let Some(s) = self.slot(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut s[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, &g[..split]);
                }
                if let Some(s) = self.slot(grads, *b) {
                    add_into(s, &g[split..]);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let c = lv.len() / targets.len();
                let scale = g[0] / targets.len() as f32;
                if let Some(s) = self.slot(grads, *logits) {
                    let mut p = vec![0.0f32; c];
                    for (r, &t) in targets.iter().enumerate() {
                        p.copy_from_slice(&lv[r * c..(r + 1) * c]);
                        kernels::softmax_row(&mut p);
                        p[t] -= 1.0;
                        let sr = &mut s[r * c..(r + 1) * c];
                        for j in 0..c {
                            sr[j] += p[j] * scale;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let d = g[0] / s.len() as f32;
                    s.iter_mut().for_each(|v| *v += d);
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    add_into(s, g);
                }
            }
            Op::SwapAxes12 { x, dims } => {
                if let Some(s) = self.slot(grads, *x) {
                    let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                    add_into(s, &back);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn swap12(src: &[f32], [a, b, c, d]: [usize; 4]) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let t = ((i * c + k) * b + j) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}
