//! Autoregressive decoding: incremental key/value caches, greedy argmax and
//! length-normalized beam search.

use crate::numerics::attention::attention_with_kv;
use crate::numerics::Tensor;
use crate::tokenizer::{TokenSequence, BOS, EOS};

use super::{CaptionModel, DecoderSelfAttention, MemoryEncoding, ModelError};

/// Per-layer cached projections for one partially decoded sequence.
///
/// Cloning shares the underlying tensors; advancing a clone builds new
/// concatenations without touching the original, so beam hypotheses can fork
/// cheaply.
#[derive(Clone)]
struct LayerCache {
    /// Keys/values of the causal branch, one row per consumed token.
    local_k: Option<Tensor>,
    local_v: Option<Tensor>,
    /// Projections of the concatenated memory encoding, computed once.
    mem_k: Option<Tensor>,
    mem_v: Option<Tensor>,
    /// Projections of the encoder output, computed once.
    vis_k: Tensor,
    vis_v: Tensor,
}

/// Incremental decoding state over a shared model.
pub struct DecoderState<'m> {
    model: &'m CaptionModel,
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    last_hidden: Option<Tensor>,
}

impl<'m> Clone for DecoderState<'m> {
    fn clone(&self) -> Self {
        DecoderState {
            model: self.model,
            tokens: self.tokens.clone(),
            layers: self.layers.clone(),
            last_hidden: self.last_hidden.clone(),
        }
    }
}

impl<'m> DecoderState<'m> {
    /// Set up caches for a BOS-only sequence.
    pub fn new(
        model: &'m CaptionModel,
        enc_out: &Tensor,
        memory: &MemoryEncoding,
    ) -> Result<DecoderState<'m>, ModelError> {
        let mut layers = Vec::with_capacity(model.decoder.len());
        for layer in &model.decoder {
            let (mem_k, mem_v) = match (&layer.self_attn, &memory.concatenated) {
                (DecoderSelfAttention::Gated(knn), Some(mem)) => (
                    Some(mem.matmul(&knn.memory.wk.tensor)?),
                    Some(mem.matmul(&knn.memory.wv.tensor)?),
                ),
                (DecoderSelfAttention::Sequential { memory: attn, .. }, Some(mem)) => (
                    Some(mem.matmul(&attn.wk.tensor)?),
                    Some(mem.matmul(&attn.wv.tensor)?),
                ),
                _ => (None, None),
            };
            layers.push(LayerCache {
                local_k: None,
                local_v: None,
                mem_k,
                mem_v,
                vis_k: enc_out.matmul(&layer.visual.wk.tensor)?,
                vis_v: enc_out.matmul(&layer.visual.wv.tensor)?,
            });
        }
        let mut state = DecoderState {
            model,
            tokens: Vec::new(),
            layers,
            last_hidden: None,
        };
        state.advance(BOS)?;
        Ok(state)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Consume one token: run it through every decoder layer, extending the
    /// causal caches, and keep the resulting hidden row.
    fn advance_hidden(&mut self, token: u32) -> Result<Tensor, ModelError> {
        let model = self.model;
        let heads = model.config.heads;
        let pos = self.tokens.len();
        if pos >= model.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len: pos + 1,
                max: model.config.max_len,
            });
        }
        self.tokens.push(token);

        let d = model.config.d;
        let emb = Tensor::embedding(&model.token_embedding.tensor, &[token])
            .scale((d as f64).sqrt());
        let pos_row = Tensor::from_vec(
            model.positional[pos * d..(pos + 1) * d].to_vec(),
            &[1, d],
        );
        let mut x = emb.add(&pos_row);

        for (layer, cache) in model.decoder.iter().zip(&mut self.layers) {
            let normed = layer.ln_self.apply(&x);
            match &layer.self_attn {
                DecoderSelfAttention::Gated(knn) => {
                    let q = normed.matmul(&knn.wq.tensor)?;
                    let k_row = normed.matmul(&knn.local.wk.tensor)?;
                    let v_row = normed.matmul(&knn.local.wv.tensor)?;
                    append_rows(&mut cache.local_k, k_row);
                    append_rows(&mut cache.local_v, v_row);
                    let local = attention_with_kv(
                        &q,
                        cache.local_k.as_ref().unwrap(),
                        cache.local_v.as_ref().unwrap(),
                        None,
                        &knn.local.wo.tensor,
                        heads,
                    )?;
                    let mixed = match (&cache.mem_k, &cache.mem_v) {
                        (Some(mk), Some(mv)) => {
                            let mem = attention_with_kv(
                                &q,
                                mk,
                                mv,
                                None,
                                &knn.memory.wo.tensor,
                                heads,
                            )?;
                            let alpha = knn.gate.tensor.sigmoid();
                            let complement = alpha.scale(-1.0).add_const(1.0);
                            local.mul_scalar(&alpha).add(&mem.mul_scalar(&complement))
                        }
                        _ => local,
                    };
                    x = x.add(&mixed);
                }
                DecoderSelfAttention::Sequential {
                    local,
                    ln_mem,
                    memory,
                } => {
                    let q = normed.matmul(&local.wq.tensor)?;
                    let k_row = normed.matmul(&local.wk.tensor)?;
                    let v_row = normed.matmul(&local.wv.tensor)?;
                    append_rows(&mut cache.local_k, k_row);
                    append_rows(&mut cache.local_v, v_row);
                    let attended = attention_with_kv(
                        &q,
                        cache.local_k.as_ref().unwrap(),
                        cache.local_v.as_ref().unwrap(),
                        None,
                        &local.wo.tensor,
                        heads,
                    )?;
                    x = x.add(&attended);
                    if let (Some(mk), Some(mv)) = (&cache.mem_k, &cache.mem_v) {
                        let normed = ln_mem.apply(&x);
                        let q = normed.matmul(&memory.wq.tensor)?;
                        let attended =
                            attention_with_kv(&q, mk, mv, None, &memory.wo.tensor, heads)?;
                        x = x.add(&attended);
                    }
                }
                DecoderSelfAttention::LocalOnly(local) => {
                    let q = normed.matmul(&local.wq.tensor)?;
                    let k_row = normed.matmul(&local.wk.tensor)?;
                    let v_row = normed.matmul(&local.wv.tensor)?;
                    append_rows(&mut cache.local_k, k_row);
                    append_rows(&mut cache.local_v, v_row);
                    let attended = attention_with_kv(
                        &q,
                        cache.local_k.as_ref().unwrap(),
                        cache.local_v.as_ref().unwrap(),
                        None,
                        &local.wo.tensor,
                        heads,
                    )?;
                    x = x.add(&attended);
                }
            }
            let normed = layer.ln_visual.apply(&x);
            let q = normed.matmul(&layer.visual.wq.tensor)?;
            let attended = attention_with_kv(
                &q,
                &cache.vis_k,
                &cache.vis_v,
                None,
                &layer.visual.wo.tensor,
                heads,
            )?;
            x = x.add(&attended);
            let normed = layer.ln_ffn.apply(&x);
            x = x.add(&layer.ffn.apply(&normed)?);
        }
        Ok(x)
    }

    pub fn advance(&mut self, token: u32) -> Result<(), ModelError> {
        self.last_hidden = Some(self.advance_hidden(token)?);
        Ok(())
    }

    /// Vocabulary logits for the next position.
    pub fn next_logits(&self) -> Result<Vec<f64>, ModelError> {
        let hidden = self
            .last_hidden
            .as_ref()
            .expect("state always holds at least BOS");
        let x = self.model.decoder_ln.apply(hidden);
        Ok(x.matmul(&self.model.output_proj.tensor)?.value())
    }

    /// Log-softmax of the next-token distribution.
    pub fn next_log_probs(&self) -> Result<Vec<f64>, ModelError> {
        let logits = self.next_logits()?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(logits.into_iter().map(|l| l - lse).collect())
    }
}

fn append_rows(cache: &mut Option<Tensor>, row: Tensor) {
    *cache = Some(match cache.take() {
        None => row,
        Some(existing) => Tensor::concat_rows(&[existing, row]),
    });
}

/// Deterministic argmax decode with incremental caches: retrieval and memory
/// encoding happen once, then tokens stream until EOS or max_len.
pub fn greedy_decode(
    model: &CaptionModel,
    enc_out: &Tensor,
    memory: &MemoryEncoding,
) -> Result<TokenSequence, ModelError> {
    let mut state = DecoderState::new(model, enc_out, memory)?;
    loop {
        if state.len() >= model.config.max_len {
            break;
        }
        let logits = state.next_logits()?;
        let next = argmax(&logits);
        state.advance(next)?;
        if next == EOS {
            break;
        }
    }
    Ok(TokenSequence {
        ids: state.tokens().to_vec(),
    })
}

fn argmax(values: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    /// Full sequence including BOS (and EOS when naturally finished).
    pub ids: Vec<u32>,
    /// Sum of token log-probabilities.
    pub log_prob: f64,
    /// Length-normalized ranking score.
    pub score: f64,
}

/// Anything beam search can drive: a probability over the next token plus a
/// way to consume one. The captioning state implements it; tests drive it
/// with rigged distributions.
pub trait BeamSearchable: Clone {
    fn next_log_probs(&self) -> Vec<f64>;
    fn advance(&mut self, token: u32);
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Hyp<S> {
    state: S,
    generated: Vec<u32>,
    log_prob: f64,
}

/// Length-normalized beam search. Finished hypotheses leave the active beam
/// and are kept; the result is `beam_size` sequences sorted by score, each
/// ending in EOS or at the length cap.
pub fn beam_search<S: BeamSearchable>(
    initial: S,
    beam_size: usize,
    max_len: usize,
    eos: u32,
) -> Vec<BeamHypothesis> {
    assert!(beam_size >= 1, "beam_size must be at least 1");
    let start_len = initial.len();
    let mut active = vec![Hyp {
        state: initial,
        generated: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hyp<S>> = Vec::new();

    while !active.is_empty() && finished.len() < beam_size {
        let width = beam_size - finished.len();
        // (cumulative logp, hyp index, token)
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (i, hyp) in active.iter().enumerate() {
            for (tok, lp) in hyp.state.next_log_probs().into_iter().enumerate() {
                candidates.push((hyp.log_prob + lp, i, tok as u32));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite log probs")
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        let mut next_active = Vec::with_capacity(width);
        for (lp, i, tok) in candidates.into_iter().take(width) {
            let mut state = active[i].state.clone();
            state.advance(tok);
            let mut generated = active[i].generated.clone();
            generated.push(tok);
            let hyp = Hyp {
                state,
                generated,
                log_prob: lp,
            };
            if tok == eos || start_len + hyp.generated.len() >= max_len {
                finished.push(hyp);
            } else {
                next_active.push(hyp);
            }
        }
        active = next_active;
    }
    finished.extend(active);

    let mut out: Vec<BeamHypothesis> = finished
        .into_iter()
        .map(|h| {
            let norm = h.generated.len().max(1) as f64;
            BeamHypothesis {
                ids: h.generated,
                log_prob: h.log_prob,
                score: h.log_prob / norm,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.ids.cmp(&b.ids))
    });
    out.truncate(beam_size);
    out
}

impl<'m> BeamSearchable for DecoderState<'m> {
    fn next_log_probs(&self) -> Vec<f64> {
        DecoderState::next_log_probs(self).expect("decoder state is valid")
    }

    fn advance(&mut self, token: u32) {
        DecoderState::advance(self, token).expect("length guarded by beam search");
    }

    fn len(&self) -> usize {
        DecoderState::len(self)
    }
}

/// Beam search over the captioning model; returns hypotheses with full id
/// sequences (BOS included) sorted by normalized score.
pub fn beam_search_decode(
    model: &CaptionModel,
    enc_out: &Tensor,
    memory: &MemoryEncoding,
    beam_size: usize,
) -> Result<Vec<BeamHypothesis>, ModelError> {
    let initial = DecoderState::new(model, enc_out, memory)?;
    let mut hyps = beam_search(initial, beam_size, model.config.max_len, EOS);
    for h in &mut hyps {
        let mut ids = vec![BOS];
        ids.extend_from_slice(&h.ids);
        h.ids = ids;
    }
    Ok(hyps)
}
