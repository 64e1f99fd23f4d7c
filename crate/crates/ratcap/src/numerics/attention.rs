//! Scaled dot-product multi-head attention over 2-d tensors.
//!
//! MSA and MCA are the same operation with different key/value sources. The
//! query projection is exposed separately so one set of queries can drive
//! two attention branches.

use super::{NumericsError, Tensor, MASK_NEG};

/// Boolean attention mask; `true` means the query row may attend the key.
#[derive(Clone, Debug)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Mask {
        assert_eq!(allowed.len(), rows * cols, "mask size mismatch");
        Mask {
            rows,
            cols,
            allowed,
        }
    }

    /// Lower-triangular mask: position t attends keys 0..=t.
    pub fn causal(n: usize) -> Mask {
        let mut allowed = vec![false; n * n];
        for t in 0..n {
            for k in 0..=t {
                allowed[t * n + k] = true;
            }
        }
        Mask::new(n, n, allowed)
    }

    /// Same key validity for every query row.
    pub fn key_padding(rows: usize, valid: &[bool]) -> Mask {
        let mut allowed = Vec::with_capacity(rows * valid.len());
        for _ in 0..rows {
            allowed.extend_from_slice(valid);
        }
        Mask::new(rows, valid.len(), allowed)
    }

    pub fn is_allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    fn validate(&self, tq: usize, tk: usize) -> Result<(), NumericsError> {
        if self.rows != tq || self.cols != tk {
            return Err(NumericsError::DimensionMismatch {
                op: "attention mask",
                lhs: vec![self.rows, self.cols],
                rhs: vec![tq, tk],
            });
        }
        for r in 0..self.rows {
            if !self.allowed[r * self.cols..(r + 1) * self.cols]
                .iter()
                .any(|a| *a)
            {
                return Err(NumericsError::FullyMaskedRow { row: r });
            }
        }
        Ok(())
    }

    fn additive(&self) -> Tensor {
        let data: Vec<f64> = self
            .allowed
            .iter()
            .map(|a| if *a { 0.0 } else { MASK_NEG })
            .collect();
        Tensor::from_vec(data, &[self.rows, self.cols])
    }
}

/// One projection matrix per role, all [d×d], bias-free.
#[derive(Clone)]
pub struct MhaWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// Full multi-head attention: queries from `query_src`, keys and values from
/// `key_value_src`. Self-attention when both arguments are the same tensor.
pub fn multi_head_attention(
    query_src: &Tensor,
    key_value_src: &Tensor,
    mask: Option<&Mask>,
    weights: &MhaWeights,
    heads: usize,
) -> Result<Tensor, NumericsError> {
    let q = query_src.matmul(&weights.wq)?;
    attention_with_query(
        &q,
        key_value_src,
        mask,
        &weights.wk,
        &weights.wv,
        &weights.wo,
        heads,
    )
}

/// Attention with an already-projected query matrix, so several branches can
/// share the same queries.
pub fn attention_with_query(
    q: &Tensor,
    key_value_src: &Tensor,
    mask: Option<&Mask>,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> Result<Tensor, NumericsError> {
    let q_shape = q.shape();
    let d = q_shape[1];
    let kv_shape = key_value_src.shape();
    if kv_shape.len() != 2 || kv_shape[1] != d {
        return Err(NumericsError::DimensionMismatch {
            op: "attention key/value source",
            lhs: q_shape,
            rhs: kv_shape,
        });
    }
    let k = key_value_src.matmul(wk)?;
    let v = key_value_src.matmul(wv)?;
    attention_with_kv(q, &k, &v, mask, wo, heads)
}

/// Innermost attention over already-projected queries, keys and values;
/// incremental decoding feeds its key/value caches straight in here.
pub fn attention_with_kv(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Mask>,
    wo: &Tensor,
    heads: usize,
) -> Result<Tensor, NumericsError> {
    let q_shape = q.shape();
    let (tq, d) = (q_shape[0], q_shape[1]);
    if d % heads != 0 {
        return Err(NumericsError::HeadCount { d, heads });
    }
    let tk = k.shape()[0];
    let additive = match mask {
        Some(m) => {
            m.validate(tq, tk)?;
            Some(m.additive())
        }
        None => None,
    };

    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let mut scores = qh.matmul(&kh.transpose())?.scale(scale);
        if let Some(m) = &additive {
            scores = scores.add(m);
        }
        let probs = scores.softmax_last();
        head_outputs.push(probs.matmul(&vh)?);
    }
    Tensor::concat_cols(&head_outputs).matmul(wo)
}
