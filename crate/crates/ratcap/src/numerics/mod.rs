//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major, immutable after construction except for gradient
//! accumulation. Every operation that participates in training records a
//! backward closure; graphs are rebuilt per step and confined to one thread.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

pub mod attention;
pub mod gradcheck;

/// Additive pre-softmax constant for masked attention logits. Large enough
/// that exp underflows to exactly 0.0 after max-subtraction.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("model width {d} is not divisible by head count {heads}")]
    HeadCount { d: usize, heads: usize },
    #[error("attention row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("loss has no unmasked positions")]
    EmptyLoss,
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Option<Op>,
}

struct Op {
    parents: Vec<Tensor>,
    /// Given (output flow, output data), push flow into parent buffers.
    backward: Box<dyn Fn(&[f64], &[f64], &mut GradFlows)>,
}

/// Per-backward-call transient gradient buffers, keyed by node identity.
/// Flow-through gradients live here; persistent `.grad` is only updated once
/// per backward call so repeated calls accumulate correctly.
pub struct GradFlows(HashMap<usize, Vec<f64>>);

impl GradFlows {
    fn key(t: &Tensor) -> usize {
        Rc::as_ptr(&t.0) as usize
    }

    fn add(&mut self, t: &Tensor, contrib: &[f64]) {
        if !t.0.borrow().requires_grad {
            return;
        }
        let buf = self
            .0
            .entry(Self::key(t))
            .or_insert_with(|| vec![0.0; contrib.len()]);
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += c;
        }
    }

    fn add_at(&mut self, t: &Tensor, numel: usize, mut write: impl FnMut(&mut [f64])) {
        if !t.0.borrow().requires_grad {
            return;
        }
        let buf = self
            .0
            .entry(Self::key(t))
            .or_insert_with(|| vec![0.0; numel]);
        write(buf);
    }
}

/// Cheap-to-clone handle to a node in the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Node>>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.0.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            n.shape, n.requires_grad
        )
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(RefCell::new(Node {
            data,
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
            op: None,
        })))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; numel_of(shape)], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(vec![v; numel_of(shape)], shape)
    }

    /// Mark a leaf tensor as trainable. Only valid on leaves.
    pub fn requires_grad(self) -> Tensor {
        {
            let mut n = self.0.borrow_mut();
            assert!(n.op.is_none(), "requires_grad must be set on a leaf");
            n.requires_grad = true;
        }
        self
    }

    fn output(data: Vec<f64>, shape: Vec<usize>, op: Option<Op>) -> Tensor {
        let requires_grad = op.is_some();
        Tensor(Rc::new(RefCell::new(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        })))
    }

    /// Record `op` only when some parent participates in gradients; plain
    /// inference then carries no graph at all.
    fn maybe_op(
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[f64], &mut GradFlows) + 'static,
    ) -> Option<Op> {
        if parents.iter().any(|p| p.0.borrow().requires_grad) {
            Some(Op {
                parents,
                backward: Box::new(backward),
            })
        } else {
            None
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.borrow(), |n| n.data.as_slice())
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.0.borrow();
        assert_eq!(n.data.len(), 1, "item() on non-scalar shape {:?}", n.shape);
        n.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub fn is_requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Overwrite leaf data in place (optimizer updates, finite differences).
    pub fn set_data(&self, data: &[f64]) {
        let mut n = self.0.borrow_mut();
        assert_eq!(n.data.len(), data.len(), "set_data length mismatch");
        n.data.copy_from_slice(data);
    }

    fn rows_cols(&self) -> (usize, usize) {
        let n = self.0.borrow();
        assert_eq!(n.shape.len(), 2, "expected 2-d tensor, got {:?}", n.shape);
        (n.shape[0], n.shape[1])
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, NumericsError> {
        let (m, ka) = self.rows_cols();
        let (kb, n) = rhs.rows_cols();
        if ka != kb {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let data = {
            let a = self.0.borrow();
            let b = rhs.0.borrow();
            matmul_raw(&a.data, &b.data, m, ka, n)
        };
        let (lhs_h, rhs_h) = (self.clone(), rhs.clone());
        let op = Tensor::maybe_op(
            vec![self.clone(), rhs.clone()],
            move |g, _out, flows| {
                // dA = G · Bᵀ
                {
                    let b = rhs_h.0.borrow();
                    let bt = transpose_raw(&b.data, ka, n);
                    let da = matmul_raw(g, &bt, m, n, ka);
                    flows.add(&lhs_h, &da);
                }
                // dB = Aᵀ · G
                {
                    let a = lhs_h.0.borrow();
                    let at = transpose_raw(&a.data, m, ka);
                    let db = matmul_raw(&at, g, ka, m, n);
                    flows.add(&rhs_h, &db);
                }
            },
        );
        Ok(Tensor::output(data, vec![m, n], op))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.rows_cols();
        let data = transpose_raw(&self.0.borrow().data, r, c);
        let src = self.clone();
        let op = Tensor::maybe_op(vec![self.clone()], move |g, _out, flows| {
            let gt = transpose_raw(g, c, r);
            flows.add(&src, &gt);
        });
        Tensor::output(data, vec![c, r], op)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "add: shape mismatch {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (l, r) = (self.clone(), rhs.clone());
        let op = Tensor::maybe_op(vec![self.clone(), rhs.clone()], move |g, _out, flows| {
            flows.add(&l, g);
            flows.add(&r, g);
        });
        Tensor::output(data, self.shape(), op)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.add(&rhs.scale(-1.0))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "mul: shape mismatch {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (l, r) = (self.clone(), rhs.clone());
        let op = Tensor::maybe_op(vec![self.clone(), rhs.clone()], move |g, _out, flows| {
            {
                let rb = r.0.borrow();
                let dl: Vec<f64> = g.iter().zip(rb.data.iter()).map(|(g, b)| g * b).collect();
                drop(rb);
                flows.add(&l, &dl);
            }
            {
                let lb = l.0.borrow();
                let dr: Vec<f64> = g.iter().zip(lb.data.iter()).map(|(g, a)| g * a).collect();
                drop(lb);
                flows.add(&r, &dr);
            }
        });
        Tensor::output(data, self.shape(), op)
    }

    /// Multiply every element by a 1-element tensor; gradients flow to both.
    pub fn mul_scalar(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.numel(), 1, "mul_scalar expects a scalar tensor");
        let sv = s.item();
        let data: Vec<f64> = self.data().iter().map(|a| a * sv).collect();
        let (x, sc) = (self.clone(), s.clone());
        let op = Tensor::maybe_op(vec![self.clone(), s.clone()], move |g, _out, flows| {
            {
                let dl: Vec<f64> = g.iter().map(|g| g * sv).collect();
                flows.add(&x, &dl);
            }
            {
                let xb = x.0.borrow();
                let ds: f64 = g.iter().zip(xb.data.iter()).map(|(g, a)| g * a).sum();
                drop(xb);
                flows.add(&sc, &[ds]);
            }
        });
        Tensor::output(data, self.shape(), op)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        let src = self.clone();
        let op = Tensor::maybe_op(vec![self.clone()], move |g, _out, flows| {
            let d: Vec<f64> = g.iter().map(|g| g * c).collect();
            flows.add(&src, &d);
        });
        Tensor::output(data, self.shape(), op)
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a + c).collect();
        let src = self.clone();
        let op = Tensor::maybe_op(vec![self.clone()], move |g, _out, flows| {
            flows.add(&src, g);
        });
        Tensor::output(data, self.shape(), op)
    }

    /// Add a [n]-vector to every row of a [r×n] matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let (r, c) = self.rows_cols();
        assert_eq!(
            bias.numel(),
            c,
            "add_bias: bias {:?} does not match row width {}",
            bias.shape(),
            c
        );
        let data = {
            let x = self.0.borrow();
            let b = bias.0.borrow();
            let mut out = x.data.clone();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] += b.data[j];
                }
            }
            out
        };
        let (xh, bh) = (self.clone(), bias.clone());
        let op = Tensor::maybe_op(vec![self.clone(), bias.clone()], move |g, _out, flows| {
            flows.add(&xh, g);
            flows.add_at(&bh, c, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[j] += g[i * c + j];
                    }
                }
            });
        });
        Tensor::output(data, vec![r, c], op)
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.max(0.0)).collect();
        let src = self.clone();
        let op = Tensor::maybe_op(vec![self.clone()], move |g, _out, flows| {
            let x = src.0.borrow();
            let d: Vec<f64> = g
                .iter()
                .zip(x.data.iter())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            drop(x);
            flows.add(&src, &d);
        });
        Tensor::output(data, self.shape(), op)
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect();
        let src = self.clone();
        let op = Tensor::maybe_op(vec![self.clone()], move |g, out, flows| {
            let d: Vec<f64> = g
                .iter()
                .zip(out.iter())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect();
            flows.add(&src, &d);
        });
        Tensor::output(data, self.shape(), op)
    }

    /// Softmax along the last axis, stabilized by max-subtraction.
    pub fn softmax_last(&self) -> Tensor {
        let shape = self.shape();
        let width = *shape.last().expect("softmax on empty shape");
        let data = {
            let x = self.0.borrow();
            let mut out = vec![0.0; x.data.len()];
            for (row_out, row_in) in out.chunks_mut(width).zip(x.data.chunks(width)) {
                softmax_row(row_in, row_out);
            }
            out
        };
        let src = self.clone();
        let op = Tensor::maybe_op(vec![self.clone()], move |g, out, flows| {
            let mut d = vec![0.0; g.len()];
            for i in (0..g.len()).step_by(width) {
                let (gr, sr) = (&g[i..i + width], &out[i..i + width]);
                let dot: f64 = gr.iter().zip(sr).map(|(g, s)| g * s).sum();
                for j in 0..width {
                    d[i + j] = sr[j] * (gr[j] - dot);
                }
            }
            flows.add(&src, &d);
        });
        Tensor::output(data, shape, op)
    }

    /// Per-position normalization over the last axis with learned gain/bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        let shape = self.shape();
        let width = *shape.last().expect("layer_norm on empty shape");
        assert_eq!(gain.numel(), width, "layer_norm gain width mismatch");
        assert_eq!(bias.numel(), width, "layer_norm bias width mismatch");
        let data = {
            let x = self.0.borrow();
            let gn = gain.0.borrow();
            let bs = bias.0.borrow();
            let mut out = vec![0.0; x.data.len()];
            for (row_out, row_in) in out.chunks_mut(width).zip(x.data.chunks(width)) {
                let mean = row_in.iter().sum::<f64>() / width as f64;
                let var =
                    row_in.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..width {
                    row_out[j] = (row_in[j] - mean) * inv * gn.data[j] + bs.data[j];
                }
            }
            out
        };
        let (xh, gh, bh) = (self.clone(), gain.clone(), bias.clone());
        let op = Tensor::maybe_op(
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g, _out, flows| {
                let x = xh.0.borrow();
                let gn = gh.0.borrow();
                let rows = x.data.len() / width;
                let mut dx = vec![0.0; x.data.len()];
                let mut dgain = vec![0.0; width];
                let mut dbias = vec![0.0; width];
                for r in 0..rows {
                    let xi = &x.data[r * width..(r + 1) * width];
                    let gi = &g[r * width..(r + 1) * width];
                    let mean = xi.iter().sum::<f64>() / width as f64;
                    let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / width as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xi.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        gi.iter().zip(gn.data.iter()).map(|(g, w)| g * w).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                    let n = width as f64;
                    for j in 0..width {
                        dgain[j] += gi[j] * xhat[j];
                        dbias[j] += gi[j];
                        dx[r * width + j] =
                            inv / n * (n * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                drop(x);
                drop(gn);
                flows.add(&xh, &dx);
                flows.add(&gh, &dgain);
                flows.add(&bh, &dbias);
            },
        );
        Tensor::output(data, shape, op)
    }

    // ── Shape surgery ────────────────────────────────────────────────

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let (r, c) = self.rows_cols();
        assert!(start + len <= c, "slice_cols out of range");
        let data = {
            let x = self.0.borrow();
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&x.data[i * c + start..i * c + start + len]);
            }
            out
        };
        let src = self.clone();
        let op = Tensor::maybe_op(vec![self.clone()], move |g, _out, flows| {
            flows.add_at(&src, r * c, |buf| {
                for i in 0..r {
                    for j in 0..len {
                        buf[i * c + start + j] += g[i * len + j];
                    }
                }
            });
        });
        Tensor::output(data, vec![r, len], op)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let (r, c) = self.rows_cols();
        assert!(start + len <= r, "slice_rows out of range");
        let data = self.0.borrow().data[start * c..(start + len) * c].to_vec();
        let src = self.clone();
        let op = Tensor::maybe_op(vec![self.clone()], move |g, _out, flows| {
            flows.add_at(&src, r * c, |buf| {
                for (b, g) in buf[start * c..(start + len) * c].iter_mut().zip(g) {
                    *b += g;
                }
            });
        });
        Tensor::output(data, vec![len, c], op)
    }

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = parts[0].rows_cols().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = p.rows_cols();
            assert_eq!(pc, c, "concat_rows: column mismatch");
            rows += r;
            data.extend_from_slice(&p.0.borrow().data);
        }
        let handles: Vec<Tensor> = parts.to_vec();
        let op = Tensor::maybe_op(parts.to_vec(), move |g, _out, flows| {
            let mut offset = 0;
            for p in &handles {
                let n = p.numel();
                flows.add(p, &g[offset..offset + n]);
                offset += n;
            }
        });
        Tensor::output(data, vec![rows, c], op)
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = parts[0].rows_cols().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pr, pc) = p.rows_cols();
                assert_eq!(pr, r, "concat_cols: row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.0.borrow();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pd.data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let handles: Vec<Tensor> = parts.to_vec();
        let ws = widths.clone();
        let op = Tensor::maybe_op(parts.to_vec(), move |g, _out, flows| {
            let mut offset = 0;
            for (p, &w) in handles.iter().zip(&ws) {
                let mut dp = vec![0.0; r * w];
                for i in 0..r {
                    dp[i * w..(i + 1) * w]
                        .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                }
                flows.add(p, &dp);
                offset += w;
            }
        });
        Tensor::output(data, vec![r, total], op)
    }

    // ── Reductions and lookups ───────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        let src = self.clone();
        let op = Tensor::maybe_op(vec![self.clone()], move |g, _out, flows| {
            flows.add(&src, &vec![g[0]; n]);
        });
        Tensor::output(vec![s], vec![1], op)
    }

    /// Gather rows of an embedding table; gradient scatters back into rows.
    pub fn embedding(table: &Tensor, ids: &[u32]) -> Tensor {
        let (v, d) = table.rows_cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        {
            let t = table.0.borrow();
            for &id in ids {
                let id = id as usize;
                assert!(id < v, "embedding id {} out of range {}", id, v);
                data.extend_from_slice(&t.data[id * d..(id + 1) * d]);
            }
        }
        let th = table.clone();
        let idv: Vec<u32> = ids.to_vec();
        let rows = ids.len();
        let op = Tensor::maybe_op(vec![table.clone()], move |g, _out, flows| {
            flows.add_at(&th, v * d, |buf| {
                for (i, &id) in idv.iter().enumerate() {
                    let base = id as usize * d;
                    for j in 0..d {
                        buf[base + j] += g[i * d + j];
                    }
                }
            });
        });
        Tensor::output(data, vec![rows, d], op)
    }

    /// Mean negative log-likelihood of `targets` under row-wise log-softmax,
    /// restricted to positions where `keep` is true.
    pub fn sequence_nll(
        logits: &Tensor,
        targets: &[u32],
        keep: &[bool],
    ) -> Result<Tensor, NumericsError> {
        let (t, v) = logits.rows_cols();
        assert_eq!(targets.len(), t, "sequence_nll: target length mismatch");
        assert_eq!(keep.len(), t, "sequence_nll: keep mask length mismatch");
        let count = keep.iter().filter(|k| **k).count();
        if count == 0 {
            return Err(NumericsError::EmptyLoss);
        }
        let loss = {
            let l = logits.0.borrow();
            let mut total = 0.0;
            for i in 0..t {
                if !keep[i] {
                    continue;
                }
                let row = &l.data[i * v..(i + 1) * v];
                let lse = log_sum_exp(row);
                total += lse - row[targets[i] as usize];
            }
            total / count as f64
        };
        let lh = logits.clone();
        let tv: Vec<u32> = targets.to_vec();
        let kv: Vec<bool> = keep.to_vec();
        let op = Tensor::maybe_op(vec![logits.clone()], move |g, _out, flows| {
            let l = lh.0.borrow();
            let mut d = vec![0.0; l.data.len()];
            let scale = g[0] / count as f64;
            for i in 0..t {
                if !kv[i] {
                    continue;
                }
                let row = &l.data[i * v..(i + 1) * v];
                let mut probs = vec![0.0; v];
                softmax_row(row, &mut probs);
                for j in 0..v {
                    let indicator = if j == tv[i] as usize { 1.0 } else { 0.0 };
                    d[i * v + j] = scale * (probs[j] - indicator);
                }
            }
            drop(l);
            flows.add(&lh, &d);
        });
        Ok(Tensor::output(vec![loss], vec![1], op))
    }

    /// Sum over positions of log-softmax probability of the given ids.
    pub fn sequence_log_prob(logits: &Tensor, ids: &[u32]) -> Tensor {
        let (t, v) = logits.rows_cols();
        assert_eq!(ids.len(), t, "sequence_log_prob: id length mismatch");
        let lp = {
            let l = logits.0.borrow();
            let mut total = 0.0;
            for i in 0..t {
                let row = &l.data[i * v..(i + 1) * v];
                total += row[ids[i] as usize] - log_sum_exp(row);
            }
            total
        };
        let lh = logits.clone();
        let idv: Vec<u32> = ids.to_vec();
        let op = Tensor::maybe_op(vec![logits.clone()], move |g, _out, flows| {
            let l = lh.0.borrow();
            let mut d = vec![0.0; l.data.len()];
            for i in 0..t {
                let row = &l.data[i * v..(i + 1) * v];
                let mut probs = vec![0.0; v];
                softmax_row(row, &mut probs);
                for j in 0..v {
                    let indicator = if j == idv[i] as usize { 1.0 } else { 0.0 };
                    d[i * v + j] = g[0] * (indicator - probs[j]);
                }
            }
            drop(l);
            flows.add(&lh, &d);
        });
        Tensor::output(vec![lp], vec![1], op)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar loss into every reachable
    /// requires_grad tensor. Repeated calls accumulate.
    pub fn backward(&self) -> Result<(), NumericsError> {
        if self.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape()));
        }
        let order = self.topo_order();
        let mut flows = GradFlows(HashMap::new());
        flows.0.insert(GradFlows::key(self), vec![1.0]);
        for t in order.iter().rev() {
            let node = t.0.borrow();
            let Some(flow) = flows.0.get(&GradFlows::key(t)) else {
                continue;
            };
            if let Some(op) = &node.op {
                let flow = flow.clone();
                (op.backward)(&flow, &node.data, &mut flows);
            }
        }
        for t in &order {
            let key = GradFlows::key(t);
            let mut node = t.0.borrow_mut();
            if !node.requires_grad {
                continue;
            }
            let flow = flows.0.remove(&key).unwrap_or_else(|| vec![0.0; node.data.len()]);
            match &mut node.grad {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(&flow) {
                        *a += b;
                    }
                }
                None => node.grad = Some(flow),
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            let key = GradFlows::key(&t);
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.borrow().op {
                for p in &op.parents {
                    if p.0.borrow().requires_grad {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Named trainable tensor.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Parameter {
        Parameter {
            name: name.into(),
            tensor: tensor.requires_grad(),
        }
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
