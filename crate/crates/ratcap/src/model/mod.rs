//! Encoder–decoder captioner with a kNN-augmented attention layer.
//!
//! The decoder mixes causal self-attention over generated tokens with
//! cross-attention over encoded retrieved captions. Both branches share one
//! query projection and are combined by a sigmoid gate per layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::attention::{attention_with_query, multi_head_attention, Mask, MhaWeights};
use crate::numerics::{NumericsError, Parameter, Tensor};
use crate::retrieval::FeatureGrid;
use crate::tokenizer::{TokenSequence, BOS};

pub mod checkpoint;
pub mod decode;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("decoder input must begin with BOS")]
    MissingBos,
    #[error("feature grid dim {got} does not match configured feature_dim {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("grid has {got} positions but only {max} visual positions are configured")]
    TooManyPositions { max: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Single source of architectural truth.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Layers in the external-memory encoder.
    pub mem_layers: usize,
    /// Retrieved captions fed to the decoder.
    pub k: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Feature channels of the incoming grids.
    pub feature_dim: usize,
    pub ffn_mult: usize,
    /// False trains the plain encoder-decoder baseline.
    pub use_memory: bool,
    /// False replaces the gated mix with sequential self- then
    /// memory-cross-attention.
    pub use_gate: bool,
    /// One gate scalar shared across decoder layers instead of one each.
    pub shared_gate: bool,
    /// 0 disables visual position embeddings; otherwise the table size.
    pub visual_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 384,
            enc_layers: 3,
            dec_layers: 3,
            heads: 6,
            mem_layers: 1,
            k: 10,
            max_len: 40,
            vocab_size: 4096,
            feature_dim: 768,
            ffn_mult: 4,
            use_memory: true,
            use_gate: true,
            shared_gate: false,
            visual_positions: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        for (name, v) in [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("mem_layers", self.mem_layers),
            ("k", self.k),
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.max_len < 2 {
            return Err(ModelError::Config("max_len must be >= 2".into()));
        }
        Ok(())
    }
}

// ── Parameter bundles ────────────────────────────────────────────────

pub struct LinearParams {
    pub w: Parameter,
    pub b: Parameter,
}

impl LinearParams {
    fn apply(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        Ok(x.matmul(&self.w.tensor)?.add_bias(&self.b.tensor))
    }
}

pub struct LayerNormParams {
    pub gain: Parameter,
    pub bias: Parameter,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl LayerNormParams {
    fn apply(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gain.tensor, &self.bias.tensor, LAYER_NORM_EPS)
    }
}

pub struct MhaParams {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
}

impl MhaParams {
    pub fn weights(&self) -> MhaWeights {
        MhaWeights {
            wq: self.wq.tensor.clone(),
            wk: self.wk.tensor.clone(),
            wv: self.wv.tensor.clone(),
            wo: self.wo.tensor.clone(),
        }
    }
}

pub struct FfnParams {
    pub lift: LinearParams,
    pub drop: LinearParams,
}

impl FfnParams {
    fn apply(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        self.drop.apply(&self.lift.apply(x)?.relu())
    }
}

/// Key/value/output projections of one attention branch.
pub struct BranchParams {
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
}

/// The kNN-augmented attention layer: one query projection, a causal local
/// branch, a memory branch, and a gate scalar mixing them.
pub struct KnnAttnParams {
    pub wq: Parameter,
    pub local: BranchParams,
    pub memory: BranchParams,
    pub gate: Parameter,
}

impl KnnAttnParams {
    pub fn alpha(&self) -> f64 {
        sigmoid(self.gate.tensor.item())
    }

    /// Both branch outputs for a normed input, sharing the query projection.
    pub fn branches(
        &self,
        x_normed: &Tensor,
        memory: &MemoryEncoding,
        heads: usize,
    ) -> Result<(Tensor, Option<Tensor>), NumericsError> {
        let t = x_normed.shape()[0];
        let q = x_normed.matmul(&self.wq.tensor)?;
        let local = attention_with_query(
            &q,
            x_normed,
            Some(&Mask::causal(t)),
            &self.local.wk.tensor,
            &self.local.wv.tensor,
            &self.local.wo.tensor,
            heads,
        )?;
        let mem = match &memory.concatenated {
            None => None,
            Some(m) => Some(attention_with_query(
                &q,
                m,
                None,
                &self.memory.wk.tensor,
                &self.memory.wv.tensor,
                &self.memory.wo.tensor,
                heads,
            )?),
        };
        Ok((local, mem))
    }

    /// Gated mix of the two branches. With no memory the local branch passes
    /// through alone (the gate forced to 1); the bool reports that fallback.
    fn apply(
        &self,
        x_normed: &Tensor,
        memory: &MemoryEncoding,
        heads: usize,
    ) -> Result<(Tensor, bool), NumericsError> {
        let (local, mem) = self.branches(x_normed, memory, heads)?;
        match mem {
            None => Ok((local, true)),
            Some(mem) => {
                let alpha = self.gate.tensor.sigmoid();
                let complement = alpha.scale(-1.0).add_const(1.0);
                Ok((
                    local.mul_scalar(&alpha).add(&mem.mul_scalar(&complement)),
                    false,
                ))
            }
        }
    }
}

pub enum DecoderSelfAttention {
    /// Parallel branches with shared queries and a learned gate.
    Gated(KnnAttnParams),
    /// Causal self-attention then memory cross-attention in sequence.
    Sequential {
        local: MhaParams,
        ln_mem: LayerNormParams,
        memory: MhaParams,
    },
    /// Plain causal self-attention; no external memory at all.
    LocalOnly(MhaParams),
}

pub struct EncoderLayer {
    pub ln_attn: LayerNormParams,
    pub attn: MhaParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FfnParams,
}

impl EncoderLayer {
    fn apply(&self, x: &Tensor, heads: usize) -> Result<Tensor, NumericsError> {
        let normed = self.ln_attn.apply(x);
        let x = x.add(&multi_head_attention(
            &normed,
            &normed,
            None,
            &self.attn.weights(),
            heads,
        )?);
        let y = self.ffn.apply(&self.ln_ffn.apply(&x))?;
        Ok(x.add(&y))
    }
}

pub struct DecoderLayer {
    pub ln_self: LayerNormParams,
    pub self_attn: DecoderSelfAttention,
    pub ln_visual: LayerNormParams,
    pub visual: MhaParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FfnParams,
}

/// Encoded retrieved captions: one tensor per caption plus the concatenated
/// key/value view the decoder attends over.
pub struct MemoryEncoding {
    pub per_caption: Vec<Tensor>,
    pub concatenated: Option<Tensor>,
    /// Start row of each caption within the concatenated view.
    pub boundaries: Vec<usize>,
}

impl MemoryEncoding {
    pub fn empty() -> MemoryEncoding {
        MemoryEncoding {
            per_caption: Vec::new(),
            concatenated: None,
            boundaries: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.per_caption.is_empty()
    }
}

pub struct DecoderOutput {
    pub logits: Tensor,
    /// True when the memory was empty and gated layers fell back to the
    /// local branch.
    pub memory_fallback: bool,
}

// ── The model ────────────────────────────────────────────────────────

pub struct CaptionModel {
    pub config: ModelConfig,
    pub input_proj: LinearParams,
    pub visual_pos: Option<Parameter>,
    /// Shared between decoder input and the memory encoder.
    pub token_embedding: Parameter,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_ln: LayerNormParams,
    pub memory_encoder: Vec<EncoderLayer>,
    pub memory_ln: LayerNormParams,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_ln: LayerNormParams,
    pub output_proj: Parameter,
    /// Constant sinusoidal table, max_len × d.
    positional: Vec<f64>,
}

struct ParamInit {
    rng: ChaCha20Rng,
}

impl ParamInit {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> Parameter {
        // Uniform scaled by 1/sqrt(fan_in).
        let bound = 1.0 / (rows as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Parameter::new(name, Tensor::from_vec(data, &[rows, cols]))
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize) -> LinearParams {
        LinearParams {
            w: self.matrix(format!("{name}.w"), rows, cols),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(&[cols])),
        }
    }

    fn layer_norm(&mut self, name: &str, width: usize) -> LayerNormParams {
        LayerNormParams {
            gain: Parameter::new(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    fn mha(&mut self, name: &str, d: usize) -> MhaParams {
        MhaParams {
            wq: self.matrix(format!("{name}.wq"), d, d),
            wk: self.matrix(format!("{name}.wk"), d, d),
            wv: self.matrix(format!("{name}.wv"), d, d),
            wo: self.matrix(format!("{name}.wo"), d, d),
        }
    }

    fn branch(&mut self, name: &str, d: usize) -> BranchParams {
        BranchParams {
            wk: self.matrix(format!("{name}.wk"), d, d),
            wv: self.matrix(format!("{name}.wv"), d, d),
            wo: self.matrix(format!("{name}.wo"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, mult: usize) -> FfnParams {
        FfnParams {
            lift: self.linear(&format!("{name}.lift"), d, d * mult),
            drop: self.linear(&format!("{name}.drop"), d * mult, d),
        }
    }

    fn encoder_layer(&mut self, name: &str, d: usize, mult: usize) -> EncoderLayer {
        EncoderLayer {
            ln_attn: self.layer_norm(&format!("{name}.ln_attn"), d),
            attn: self.mha(&format!("{name}.attn"), d),
            ln_ffn: self.layer_norm(&format!("{name}.ln_ffn"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, mult),
        }
    }
}

impl CaptionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<CaptionModel, ModelError> {
        config.validate()?;
        let d = config.d;
        let mut init = ParamInit {
            rng: ChaCha20Rng::seed_from_u64(seed),
        };

        let input_proj = init.linear("input_proj", config.feature_dim, d);
        let visual_pos = (config.visual_positions > 0).then(|| {
            init.matrix(
                "visual_positions".to_string(),
                config.visual_positions,
                d,
            )
        });
        let token_embedding = init.matrix("token_embedding".to_string(), config.vocab_size, d);

        let encoder: Vec<EncoderLayer> = (0..config.enc_layers)
            .map(|i| init.encoder_layer(&format!("encoder.layer{i}"), d, config.ffn_mult))
            .collect();
        let encoder_ln = init.layer_norm("encoder.final_ln", d);

        let memory_encoder: Vec<EncoderLayer> = if config.use_memory {
            (0..config.mem_layers)
                .map(|i| init.encoder_layer(&format!("memory.layer{i}"), d, config.ffn_mult))
                .collect()
        } else {
            Vec::new()
        };
        let memory_ln = init.layer_norm("memory.final_ln", d);

        let shared_gate = config
            .shared_gate
            .then(|| Parameter::new("decoder.gate.s", Tensor::zeros(&[1])));
        let mut decoder = Vec::with_capacity(config.dec_layers);
        for i in 0..config.dec_layers {
            let base = format!("decoder.layer{i}");
            let self_attn = if !config.use_memory {
                DecoderSelfAttention::LocalOnly(init.mha(&format!("{base}.self_attn"), d))
            } else if config.use_gate {
                // The gate scalar starts at zero, so the mix opens at 0.5.
                let gate = shared_gate.clone().unwrap_or_else(|| {
                    Parameter::new(format!("{base}.gate.s"), Tensor::zeros(&[1]))
                });
                DecoderSelfAttention::Gated(KnnAttnParams {
                    wq: init.matrix(format!("{base}.knn.wq"), d, d),
                    local: init.branch(&format!("{base}.knn.local"), d),
                    memory: init.branch(&format!("{base}.knn.memory"), d),
                    gate,
                })
            } else {
                DecoderSelfAttention::Sequential {
                    local: init.mha(&format!("{base}.self_attn"), d),
                    ln_mem: init.layer_norm(&format!("{base}.ln_mem"), d),
                    memory: init.mha(&format!("{base}.mem_attn"), d),
                }
            };
            decoder.push(DecoderLayer {
                ln_self: init.layer_norm(&format!("{base}.ln_self"), d),
                self_attn,
                ln_visual: init.layer_norm(&format!("{base}.ln_visual"), d),
                visual: init.mha(&format!("{base}.visual"), d),
                ln_ffn: init.layer_norm(&format!("{base}.ln_ffn"), d),
                ffn: init.ffn(&format!("{base}.ffn"), d, config.ffn_mult),
            });
        }
        let decoder_ln = init.layer_norm("decoder.final_ln", d);
        let output_proj = init.matrix("output_proj.w".to_string(), d, config.vocab_size);

        let positional = sinusoidal_table(config.max_len, d);
        Ok(CaptionModel {
            config,
            input_proj,
            visual_pos,
            token_embedding,
            encoder,
            encoder_ln,
            memory_encoder,
            memory_ln,
            decoder,
            decoder_ln,
            output_proj,
            positional,
        })
    }

    /// All trainable parameters in a stable order, shared tensors listed once.
    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out: Vec<Parameter> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut push = |p: &Parameter, out: &mut Vec<Parameter>| {
            let key = p.tensor.data().as_ptr() as usize;
            if seen.insert(key) {
                out.push(p.clone());
            }
        };
        let push_linear = |l: &LinearParams, out: &mut Vec<Parameter>| {
            out.push(l.w.clone());
            out.push(l.b.clone());
        };
        let push_ln = |l: &LayerNormParams, out: &mut Vec<Parameter>| {
            out.push(l.gain.clone());
            out.push(l.bias.clone());
        };
        let push_mha = |m: &MhaParams, out: &mut Vec<Parameter>| {
            out.push(m.wq.clone());
            out.push(m.wk.clone());
            out.push(m.wv.clone());
            out.push(m.wo.clone());
        };
        let push_ffn = |f: &FfnParams, out: &mut Vec<Parameter>| {
            out.push(f.lift.w.clone());
            out.push(f.lift.b.clone());
            out.push(f.drop.w.clone());
            out.push(f.drop.b.clone());
        };

        push_linear(&self.input_proj, &mut out);
        if let Some(vp) = &self.visual_pos {
            out.push(vp.clone());
        }
        out.push(self.token_embedding.clone());
        for layer in self.encoder.iter().chain(&self.memory_encoder) {
            push_ln(&layer.ln_attn, &mut out);
            push_mha(&layer.attn, &mut out);
            push_ln(&layer.ln_ffn, &mut out);
            push_ffn(&layer.ffn, &mut out);
        }
        push_ln(&self.encoder_ln, &mut out);
        if self.config.use_memory {
            push_ln(&self.memory_ln, &mut out);
        }
        for layer in &self.decoder {
            push_ln(&layer.ln_self, &mut out);
            match &layer.self_attn {
                DecoderSelfAttention::Gated(knn) => {
                    out.push(knn.wq.clone());
                    out.push(knn.local.wk.clone());
                    out.push(knn.local.wv.clone());
                    out.push(knn.local.wo.clone());
                    out.push(knn.memory.wk.clone());
                    out.push(knn.memory.wv.clone());
                    out.push(knn.memory.wo.clone());
                    out.push(knn.gate.clone());
                }
                DecoderSelfAttention::Sequential {
                    local,
                    ln_mem,
                    memory,
                } => {
                    push_mha(local, &mut out);
                    push_ln(ln_mem, &mut out);
                    push_mha(memory, &mut out);
                }
                DecoderSelfAttention::LocalOnly(local) => push_mha(local, &mut out),
            }
            push_ln(&layer.ln_visual, &mut out);
            push_mha(&layer.visual, &mut out);
            push_ln(&layer.ln_ffn, &mut out);
            push_ffn(&layer.ffn, &mut out);
        }
        push_ln(&self.decoder_ln, &mut out);
        out.push(self.output_proj.clone());

        // Deduplicate shared tensors (the shared-gate configuration).
        let mut deduped = Vec::with_capacity(out.len());
        for p in out {
            push(&p, &mut deduped);
        }
        deduped
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Current gate opening per decoder layer.
    pub fn gate_alphas(&self) -> Vec<f64> {
        self.decoder
            .iter()
            .filter_map(|l| match &l.self_attn {
                DecoderSelfAttention::Gated(knn) => Some(knn.alpha()),
                _ => None,
            })
            .collect()
    }

    // ── Forward passes ───────────────────────────────────────────────

    /// Project grid features and run the unmasked visual encoder.
    pub fn encode_image(&self, grid: &FeatureGrid) -> Result<Tensor, ModelError> {
        if grid.dim != self.config.feature_dim {
            return Err(ModelError::FeatureDim {
                expected: self.config.feature_dim,
                got: grid.dim,
            });
        }
        let mut x = self.input_proj.apply(&grid.to_tensor())?;
        if let Some(vp) = &self.visual_pos {
            if grid.positions > self.config.visual_positions {
                return Err(ModelError::TooManyPositions {
                    max: self.config.visual_positions,
                    got: grid.positions,
                });
            }
            x = x.add(&vp.tensor.slice_rows(0, grid.positions));
        }
        for layer in &self.encoder {
            x = layer.apply(&x, self.config.heads)?;
        }
        Ok(self.encoder_ln.apply(&x))
    }

    /// Encode each retrieved caption independently through the memory
    /// encoder; gradients flow into its parameters but retrieval itself is
    /// frozen selection.
    pub fn encode_memory(&self, captions: &[TokenSequence]) -> Result<MemoryEncoding, ModelError> {
        if !self.config.use_memory || captions.is_empty() {
            return Ok(MemoryEncoding::empty());
        }
        let mut per_caption = Vec::with_capacity(captions.len());
        for seq in captions {
            if seq.ids.len() > self.config.max_len {
                return Err(ModelError::SequenceTooLong {
                    len: seq.ids.len(),
                    max: self.config.max_len,
                });
            }
            let mut x = self.embed_tokens(&seq.ids);
            for layer in &self.memory_encoder {
                x = layer.apply(&x, self.config.heads)?;
            }
            per_caption.push(self.memory_ln.apply(&x));
        }
        let mut boundaries = Vec::with_capacity(per_caption.len());
        let mut offset = 0;
        for t in &per_caption {
            boundaries.push(offset);
            offset += t.shape()[0];
        }
        let concatenated = Some(Tensor::concat_rows(&per_caption));
        Ok(MemoryEncoding {
            per_caption,
            concatenated,
            boundaries,
        })
    }

    /// Token embedding, scaled and with sinusoidal positions added.
    /// Positions restart at zero for every sequence, including each
    /// retrieved caption.
    fn embed_tokens(&self, ids: &[u32]) -> Tensor {
        let d = self.config.d;
        let emb = Tensor::embedding(&self.token_embedding.tensor, ids).scale((d as f64).sqrt());
        let pos =
            Tensor::from_vec(self.positional[..ids.len() * d].to_vec(), &[ids.len(), d]);
        emb.add(&pos)
    }

    /// Full teacher-forcing decoder pass: logits for every position.
    pub fn decoder_forward(
        &self,
        tokens: &[u32],
        enc_out: &Tensor,
        memory: &MemoryEncoding,
    ) -> Result<DecoderOutput, ModelError> {
        if tokens.is_empty() || tokens[0] != BOS {
            return Err(ModelError::MissingBos);
        }
        if tokens.len() > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        let heads = self.config.heads;
        let t = tokens.len();
        let mut x = self.embed_tokens(tokens);
        let mut memory_fallback = false;
        for layer in &self.decoder {
            let normed = layer.ln_self.apply(&x);
            match &layer.self_attn {
                DecoderSelfAttention::Gated(knn) => {
                    let (mixed, fell_back) = knn.apply(&normed, memory, heads)?;
                    memory_fallback |= fell_back;
                    x = x.add(&mixed);
                }
                DecoderSelfAttention::Sequential {
                    local,
                    ln_mem,
                    memory: mem_attn,
                } => {
                    let attended = multi_head_attention(
                        &normed,
                        &normed,
                        Some(&Mask::causal(t)),
                        &local.weights(),
                        heads,
                    )?;
                    x = x.add(&attended);
                    match &memory.concatenated {
                        Some(mem) => {
                            let normed = ln_mem.apply(&x);
                            let attended = multi_head_attention(
                                &normed,
                                mem,
                                None,
                                &mem_attn.weights(),
                                heads,
                            )?;
                            x = x.add(&attended);
                        }
                        None => memory_fallback = true,
                    }
                }
                DecoderSelfAttention::LocalOnly(local) => {
                    let attended = multi_head_attention(
                        &normed,
                        &normed,
                        Some(&Mask::causal(t)),
                        &local.weights(),
                        heads,
                    )?;
                    x = x.add(&attended);
                }
            }
            let normed = layer.ln_visual.apply(&x);
            x = x.add(&multi_head_attention(
                &normed,
                enc_out,
                None,
                &layer.visual.weights(),
                heads,
            )?);
            let normed = layer.ln_ffn.apply(&x);
            x = x.add(&layer.ffn.apply(&normed)?);
        }
        let x = self.decoder_ln.apply(&x);
        let logits = x.matmul(&self.output_proj.tensor)?;
        Ok(DecoderOutput {
            logits,
            memory_fallback,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard sinusoidal positions: sin on even channels, cos on odd.
fn sinusoidal_table(max_len: usize, d: usize) -> Vec<f64> {
    let mut table = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            table[pos * d + 2 * i] = (pos as f64 * freq).sin();
            if 2 * i + 1 < d {
                table[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
            }
        }
    }
    table
}
