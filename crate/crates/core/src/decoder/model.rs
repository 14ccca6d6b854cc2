//! A small pre-norm causal transformer decoder conditioned on a visual prefix,
//! with hand-written backpropagation.
//!
//! The input sequence is `[visual tokens] ++ [start] ++ text`. Each attention
//! layer takes an optional additive bias (one `T x T` matrix, broadcast to all
//! heads) that is added after the `1/sqrt(d_head)` scaling and causal masking
//! and before softmax. Bias matrices are inputs, never parameters, and receive
//! no gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::DecoderConfig;
use super::loss::cross_entropy_sum_grad;
use super::positions::interpolate_positions;
use crate::bias::{bias_logits, make_layer_bias, BiasMatrix, BiasMode, BiasPlan, CausalMask};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, softmax_rows, Matrix};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Trainable tensors of one transformer block. Vectors are stored as 1×n.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Matrix,
    pub ln1_shift: Matrix,
    pub q_weight: Matrix,
    pub q_bias: Matrix,
    pub k_weight: Matrix,
    pub k_bias: Matrix,
    pub v_weight: Matrix,
    pub v_bias: Matrix,
    pub out_weight: Matrix,
    pub out_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_shift: Matrix,
    pub ffn_in_weight: Matrix,
    pub ffn_in_bias: Matrix,
    pub ffn_out_weight: Matrix,
    pub ffn_out_bias: Matrix,
}

impl LayerWeights {
    fn named(&self) -> [(&'static str, &Matrix); 16] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.shift", &self.ln1_shift),
            ("attn.q.weight", &self.q_weight),
            ("attn.q.bias", &self.q_bias),
            ("attn.k.weight", &self.k_weight),
            ("attn.k.bias", &self.k_bias),
            ("attn.v.weight", &self.v_weight),
            ("attn.v.bias", &self.v_bias),
            ("attn.out.weight", &self.out_weight),
            ("attn.out.bias", &self.out_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.shift", &self.ln2_shift),
            ("ffn.in.weight", &self.ffn_in_weight),
            ("ffn.in.bias", &self.ffn_in_bias),
            ("ffn.out.weight", &self.ffn_out_weight),
            ("ffn.out.bias", &self.ffn_out_bias),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 16] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.shift", &mut self.ln1_shift),
            ("attn.q.weight", &mut self.q_weight),
            ("attn.q.bias", &mut self.q_bias),
            ("attn.k.weight", &mut self.k_weight),
            ("attn.k.bias", &mut self.k_bias),
            ("attn.v.weight", &mut self.v_weight),
            ("attn.v.bias", &mut self.v_bias),
            ("attn.out.weight", &mut self.out_weight),
            ("attn.out.bias", &mut self.out_bias),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.shift", &mut self.ln2_shift),
            ("ffn.in.weight", &mut self.ffn_in_weight),
            ("ffn.in.bias", &mut self.ffn_in_bias),
            ("ffn.out.weight", &mut self.ffn_out_weight),
            ("ffn.out.bias", &mut self.ffn_out_bias),
        ]
    }
}

/// Every trainable tensor of the decoder. Also used for gradients and
/// optimiser moments, which share the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub patch_weight: Matrix,
    pub patch_bias: Matrix,
    pub start: Matrix,
    pub tok_embed: Matrix,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Matrix,
    pub lnf_shift: Matrix,
    pub head_weight: Matrix,
    pub head_bias: Matrix,
}

impl Weights {
    /// All tensors with stable dotted names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("patch_embed.weight".into(), &self.patch_weight),
            ("patch_embed.bias".into(), &self.patch_bias),
            ("start".into(), &self.start),
            ("tok_embed".into(), &self.tok_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, m)| (format!("layers.{i}.{n}"), m)));
        }
        out.extend([
            ("ln_f.gain".into(), &self.lnf_gain),
            ("ln_f.shift".into(), &self.lnf_shift),
            ("lm_head.weight".into(), &self.head_weight),
            ("lm_head.bias".into(), &self.head_bias),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_weight),
            ("patch_embed.bias".into(), &mut self.patch_bias),
            ("start".into(), &mut self.start),
            ("tok_embed".into(), &mut self.tok_embed),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .named_mut()
                    .into_iter()
                    .map(|(n, m)| (format!("layers.{i}.{n}"), m)),
            );
        }
        out.extend([
            ("ln_f.gain".into(), &mut self.lnf_gain),
            ("ln_f.shift".into(), &mut self.lnf_shift),
            ("lm_head.weight".into(), &mut self.head_weight),
            ("lm_head.bias".into(), &mut self.head_bias),
        ]);
        out
    }

    pub fn zeros_like(&self) -> Weights {
        let mut z = self.clone();
        for (_, m) in z.named_mut() {
            m.as_mut_slice().fill(0.0);
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// SHA-256 over every tensor's little-endian bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, m) in self.named() {
            hasher.update(name.as_bytes());
            for v in m.as_slice() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Visual-prefix embeddings, one row per visual token.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPrefix {
    embeddings: Matrix,
}

impl VisualPrefix {
    pub fn from_embeddings(embeddings: Matrix) -> Self {
        VisualPrefix { embeddings }
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }
}

/// Pre-bias logits `A`, biased logits `A'` and attention weights `P` of one head.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    pub logits: Matrix,
    pub biased: Matrix,
    pub probs: Matrix,
}

/// Per-layer, per-head attention intermediates of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub layers: Vec<Vec<HeadTrace>>,
}

/// One teacher-forced training sequence. `target` ends with the end token;
/// the decoder sees `[start] ++ target[..n-1]` and predicts all of `target`.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub patches: &'a Matrix,
    pub target: &'a [usize],
    pub plan: Option<&'a BiasPlan>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerationStatus {
    /// Stopped on the end token.
    Finished,
    /// Produced `max_new` tokens without the end token.
    MaxLength,
    /// `max_new` exceeded the context and was cut to fit.
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub status: GenerationStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    config: DecoderConfig,
    weights: Weights,
}

struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    concat: Matrix,
    ln2: LnCache,
    h2: Matrix,
    ffn_pre: Matrix,
    ffn_act: Matrix,
}

struct SequenceCache {
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    hf: Matrix,
}

impl DecoderModel {
    /// Seeded initialisation. The positional table is drawn at `native_pos`
    /// rows and interpolated up to `max_pos`.
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |rows: usize, cols: usize, std_scale: f64| {
            Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng) * std_scale)
        };
        let d = config.d_model;
        let ffn = d * config.ffn_mult;
        let residual_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();

        let patch_weight = draw(config.patch_dim, d, 1.0);
        let start = draw(1, d, 1.0);
        let tok_embed = draw(config.vocab_size, d, 1.0);
        let native = draw(config.native_pos, d, 1.0);
        let pos_embed = if config.max_pos == config.native_pos {
            native
        } else {
            interpolate_positions(&native, config.max_pos)?
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: Matrix::filled(1, d, 1.0),
                ln1_shift: Matrix::zeros(1, d),
                q_weight: draw(d, d, 1.0),
                q_bias: Matrix::zeros(1, d),
                k_weight: draw(d, d, 1.0),
                k_bias: Matrix::zeros(1, d),
                v_weight: draw(d, d, 1.0),
                v_bias: Matrix::zeros(1, d),
                out_weight: draw(d, d, residual_scale),
                out_bias: Matrix::zeros(1, d),
                ln2_gain: Matrix::filled(1, d, 1.0),
                ln2_shift: Matrix::zeros(1, d),
                ffn_in_weight: draw(d, ffn, 1.0),
                ffn_in_bias: Matrix::zeros(1, ffn),
                ffn_out_weight: draw(ffn, d, residual_scale),
                ffn_out_bias: Matrix::zeros(1, d),
            })
            .collect();
        let head_weight = draw(d, config.vocab_size, 1.0);
        let weights = Weights {
            patch_weight,
            patch_bias: Matrix::zeros(1, d),
            start,
            tok_embed,
            pos_embed,
            layers,
            lnf_gain: Matrix::filled(1, d, 1.0),
            lnf_shift: Matrix::zeros(1, d),
            head_weight,
            head_bias: Matrix::zeros(1, config.vocab_size),
        };
        Ok(DecoderModel { config, weights })
    }

    /// Reassembles a model from stored tensors, checking every shape.
    pub fn from_parts(config: DecoderConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        let expected = reference.weights.named();
        let got = weights.named();
        if expected.len() != got.len() {
            return Err(Error::shape(format!(
                "{} tensors, expected {}",
                got.len(),
                expected.len()
            )));
        }
        for ((name, e), (_, g)) in expected.iter().zip(&got) {
            if e.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "{name}: {:?} vs expected {:?}",
                    g.shape(),
                    e.shape()
                )));
            }
        }
        Ok(DecoderModel { config, weights })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Stretches the positional table to `new_max_pos` rows.
    pub fn extend_context(&mut self, new_max_pos: usize) -> Result<()> {
        self.weights.pos_embed = interpolate_positions(&self.weights.pos_embed, new_max_pos)?;
        self.config.max_pos = new_max_pos;
        Ok(())
    }

    /// Linear patch embedder: `visual_len x patch_dim` features to
    /// `visual_len x d_model` prefix embeddings.
    pub fn embed_patches(&self, patches: &Matrix) -> Result<VisualPrefix> {
        if patches.shape() != (self.config.visual_len, self.config.patch_dim) {
            return Err(Error::shape(format!(
                "patches are {}x{}, expected {}x{}",
                patches.rows(),
                patches.cols(),
                self.config.visual_len,
                self.config.patch_dim
            )));
        }
        Ok(VisualPrefix {
            embeddings: linear(patches, &self.weights.patch_weight, &self.weights.patch_bias)?,
        })
    }

    /// Next-token logits for the start position and every text position
    /// (`text.len() + 1` rows). `plan = None` disables the bias hook.
    pub fn forward(&self, prefix: &VisualPrefix, text: &[usize], plan: Option<&BiasPlan>) -> Result<Matrix> {
        let x = self.embed_sequence(prefix, text)?;
        let biases = self.layer_biases(x.rows(), plan)?;
        self.run(x, &biases, false, false).map(|(logits, _, _)| logits)
    }

    /// [`Self::forward`] that also returns every head's `A`, `A'` and `P`.
    pub fn forward_traced(
        &self,
        prefix: &VisualPrefix,
        text: &[usize],
        plan: Option<&BiasPlan>,
    ) -> Result<(Matrix, ForwardTrace)> {
        let x = self.embed_sequence(prefix, text)?;
        let biases = self.layer_biases(x.rows(), plan)?;
        let (logits, _, trace) = self.run(x, &biases, false, true)?;
        Ok((logits, trace.expect("trace requested")))
    }

    /// One pre-norm transformer block (attention then FFN, both residual)
    /// for 1-based `layer`.
    pub fn attention_block(
        &self,
        x: &Matrix,
        layer: usize,
        causal: &CausalMask,
        bias: Option<&BiasMatrix>,
    ) -> Result<Matrix> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(Error::invalid(format!(
                "layer {layer} outside 1..={}",
                self.config.n_layers
            )));
        }
        if x.cols() != self.config.d_model || causal.rows() != x.rows() || causal.cols() != x.rows() {
            return Err(Error::shape(format!(
                "block input {}x{} with causal mask {}x{}",
                x.rows(),
                x.cols(),
                causal.rows(),
                causal.cols()
            )));
        }
        self.block_forward(layer - 1, x, causal, bias, false, false)
            .map(|(out, _, _)| out)
    }

    /// Mean teacher-forced cross-entropy over all target tokens of the batch.
    pub fn batch_loss(&self, batch: &[TrainItem<'_>]) -> Result<f64> {
        let (mut sum, mut count) = (0.0, 0usize);
        for item in batch {
            if item.target.is_empty() {
                continue;
            }
            let prefix = self.embed_patches(item.patches)?;
            let input = &item.target[..item.target.len() - 1];
            let logits = self.forward(&prefix, input, item.plan)?;
            let (s, c, _) = cross_entropy_sum_grad(&logits, item.target, None)?;
            sum += s;
            count += c;
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }

    /// Batch loss and its gradient with respect to every trainable tensor.
    pub fn loss_and_grad(&self, batch: &[TrainItem<'_>]) -> Result<(f64, Weights)> {
        let total: usize = batch.iter().map(|b| b.target.len()).sum();
        let mut grads = self.weights.zeros_like();
        if total == 0 {
            return Ok((0.0, grads));
        }
        let norm = 1.0 / total as f64;
        let mut loss = 0.0;
        for item in batch.iter().filter(|b| !b.target.is_empty()) {
            let prefix = self.embed_patches(item.patches)?;
            let input = &item.target[..item.target.len() - 1];
            let x = self.embed_sequence(&prefix, input)?;
            let biases = self.layer_biases(x.rows(), item.plan)?;
            let (logits, cache, _) = self.run(x, &biases, true, false)?;
            let (sum, _, mut dlogits) = cross_entropy_sum_grad(&logits, item.target, None)?;
            loss += sum * norm;
            for v in dlogits.as_mut_slice() {
                *v *= norm;
            }
            self.backward(
                item.patches,
                input,
                &cache.expect("cache requested"),
                &dlogits,
                &mut grads,
            )?;
        }
        Ok((loss, grads))
    }

    /// Greedy decoding from the start token until `eos` or `max_new` tokens.
    pub fn generate(
        &self,
        prefix: &VisualPrefix,
        plan: Option<&BiasPlan>,
        max_new: usize,
        eos: usize,
    ) -> Result<Generation> {
        let room = self.config.max_pos.saturating_sub(self.config.visual_len + 1);
        let (limit, truncated) = if max_new > room { (room, true) } else { (max_new, false) };
        let mut tokens = Vec::with_capacity(limit);
        while tokens.len() < limit {
            let logits = self.forward(prefix, &tokens, plan)?;
            let next = argmax(logits.row(logits.rows() - 1));
            tokens.push(next);
            if next == eos {
                return Ok(Generation {
                    tokens,
                    status: GenerationStatus::Finished,
                });
            }
        }
        let status = if truncated {
            GenerationStatus::Truncated
        } else {
            GenerationStatus::MaxLength
        };
        Ok(Generation { tokens, status })
    }

    /// Greedy decoding of several prefixes; identical to decoding each alone.
    pub fn generate_batch(
        &self,
        prefixes: &[(VisualPrefix, Option<BiasPlan>)],
        max_new: usize,
        eos: usize,
    ) -> Result<Vec<Generation>> {
        prefixes
            .iter()
            .map(|(prefix, plan)| self.generate(prefix, plan.as_ref(), max_new, eos))
            .collect()
    }

    fn embed_sequence(&self, prefix: &VisualPrefix, text: &[usize]) -> Result<Matrix> {
        let cfg = &self.config;
        if prefix.embeddings.shape() != (cfg.visual_len, cfg.d_model) {
            return Err(Error::shape(format!(
                "visual prefix is {}x{}, expected {}x{}",
                prefix.embeddings.rows(),
                prefix.embeddings.cols(),
                cfg.visual_len,
                cfg.d_model
            )));
        }
        let len = cfg.visual_len + 1 + text.len();
        if len > cfg.max_pos {
            return Err(Error::ContextOverflow {
                needed: len,
                max_pos: cfg.max_pos,
            });
        }
        if let Some(&bad) = text.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "token {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let w = &self.weights;
        let mut x = Matrix::zeros(len, cfg.d_model);
        for r in 0..len {
            let src = if r < cfg.visual_len {
                prefix.embeddings.row(r)
            } else if r == cfg.visual_len {
                w.start.row(0)
            } else {
                w.tok_embed.row(text[r - cfg.visual_len - 1])
            };
            for ((o, a), p) in x.row_mut(r).iter_mut().zip(src).zip(w.pos_embed.row(r)) {
                *o = a + p;
            }
        }
        Ok(x)
    }

    fn layer_biases(&self, len: usize, plan: Option<&BiasPlan>) -> Result<(CausalMask, Vec<Option<BiasMatrix>>)> {
        let causal = CausalMask::causal(len, len)?;
        let Some(plan) = plan else {
            return Ok((causal, vec![None; self.config.n_layers]));
        };
        if plan.visual_len() != self.config.visual_len {
            return Err(Error::shape(format!(
                "bias plan covers {} visual tokens, model has {}",
                plan.visual_len(),
                self.config.visual_len
            )));
        }
        if plan.mode() != BiasMode::NoMask && plan.n_layers() != self.config.n_layers {
            return Err(Error::shape(format!(
                "bias plan has {} layers, model has {}",
                plan.n_layers(),
                self.config.n_layers
            )));
        }
        let biases = (1..=self.config.n_layers)
            .map(|l| make_layer_bias(plan, l, &causal).map(Some))
            .collect::<Result<_>>()?;
        Ok((causal, biases))
    }

    fn run(
        &self,
        mut x: Matrix,
        (causal, biases): &(CausalMask, Vec<Option<BiasMatrix>>),
        want_cache: bool,
        want_trace: bool,
    ) -> Result<(Matrix, Option<SequenceCache>, Option<ForwardTrace>)> {
        let mut blocks = Vec::new();
        let mut trace = want_trace.then(ForwardTrace::default);
        for (li, bias) in biases.iter().enumerate() {
            let (out, cache, heads) = self.block_forward(li, &x, causal, bias.as_ref(), want_cache, want_trace)?;
            if let Some(c) = cache {
                blocks.push(c);
            }
            if let (Some(t), Some(h)) = (trace.as_mut(), heads) {
                t.layers.push(h);
            }
            x = out;
        }
        let v = self.config.visual_len;
        let text_rows = x.row_block(v, x.rows() - v);
        let (hf, lnf) = layer_norm(&text_rows, &self.weights.lnf_gain, &self.weights.lnf_shift);
        let logits = linear(&hf, &self.weights.head_weight, &self.weights.head_bias)?;
        let cache = want_cache.then_some(SequenceCache { blocks, lnf, hf });
        Ok((logits, cache, trace))
    }

    #[allow(clippy::type_complexity)]
    fn block_forward(
        &self,
        li: usize,
        x: &Matrix,
        causal: &CausalMask,
        bias: Option<&BiasMatrix>,
        want_cache: bool,
        want_trace: bool,
    ) -> Result<(Matrix, Option<BlockCache>, Option<Vec<HeadTrace>>)> {
        let w = &self.weights.layers[li];
        let t = x.rows();
        if let Some(b) = bias {
            if b.rows() != t || b.cols() != t {
                return Err(Error::shape(format!(
                    "bias {}x{} for {t} positions",
                    b.rows(),
                    b.cols()
                )));
            }
        }
        let (n_heads, dh) = (self.config.n_heads, self.config.d_head());
        let scale = 1.0 / (dh as f64).sqrt();

        let (h1, ln1) = layer_norm(x, &w.ln1_gain, &w.ln1_shift);
        let q = linear(&h1, &w.q_weight, &w.q_bias)?;
        let k = linear(&h1, &w.k_weight, &w.k_bias)?;
        let v = linear(&h1, &w.v_weight, &w.v_bias)?;

        let mut concat = Matrix::zeros(t, self.config.d_model);
        let mut probs_all = Vec::with_capacity(if want_cache { n_heads } else { 0 });
        let mut heads = Vec::new();
        for h in 0..n_heads {
            let (qh, kh, vh) = (
                q.col_block(h * dh, dh),
                k.col_block(h * dh, dh),
                v.col_block(h * dh, dh),
            );
            let mut logits = matmul_nt(&qh, &kh)?;
            for r in 0..t {
                let row = logits.row_mut(r);
                for (s, val) in row.iter_mut().enumerate() {
                    *val = if causal.is_visible(r, s) {
                        *val * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
            }
            let probs = match bias {
                Some(b) => {
                    let biased = bias_logits(&logits, b)?;
                    let p = softmax_rows(&biased)?;
                    if want_trace {
                        heads.push(HeadTrace {
                            logits,
                            biased,
                            probs: p.clone(),
                        });
                    }
                    p
                }
                None => {
                    let p = softmax_rows(&logits)?;
                    if want_trace {
                        heads.push(HeadTrace {
                            biased: logits.clone(),
                            logits,
                            probs: p.clone(),
                        });
                    }
                    p
                }
            };
            concat.set_col_block(h * dh, &matmul(&probs, &vh)?);
            if want_cache {
                probs_all.push(probs);
            }
        }
        let attn = linear(&concat, &w.out_weight, &w.out_bias)?;
        let x1 = x.add(&attn)?;

        let (h2, ln2) = layer_norm(&x1, &w.ln2_gain, &w.ln2_shift);
        let ffn_pre = linear(&h2, &w.ffn_in_weight, &w.ffn_in_bias)?;
        let ffn_act = ffn_pre.map(gelu);
        let ffn_out = linear(&ffn_act, &w.ffn_out_weight, &w.ffn_out_bias)?;
        let out = x1.add(&ffn_out)?;

        let cache = want_cache.then_some(BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs: probs_all,
            concat,
            ln2,
            h2,
            ffn_pre,
            ffn_act,
        });
        Ok((out, cache, want_trace.then_some(heads)))
    }

    fn backward(
        &self,
        patches: &Matrix,
        text: &[usize],
        cache: &SequenceCache,
        dlogits: &Matrix,
        grads: &mut Weights,
    ) -> Result<()> {
        let cfg = &self.config;
        let w = &self.weights;
        let v = cfg.visual_len;
        let t = v + 1 + text.len();

        grads.head_weight.add_assign(&matmul_tn(&cache.hf, dlogits)?)?;
        add_row(&mut grads.head_bias, &dlogits.col_sums());
        let dhf = matmul_nt(dlogits, &w.head_weight)?;
        let dtext = layer_norm_backward(&dhf, &cache.lnf, &w.lnf_gain, &mut grads.lnf_gain, &mut grads.lnf_shift);
        let mut dx = Matrix::zeros(t, cfg.d_model);
        for r in 0..dtext.rows() {
            dx.row_mut(v + r).copy_from_slice(dtext.row(r));
        }

        for li in (0..cfg.n_layers).rev() {
            dx = self.block_backward(li, &cache.blocks[li], &dx, &mut grads.layers[li])?;
        }

        for r in 0..t {
            add_slice(grads.pos_embed.row_mut(r), dx.row(r));
        }
        add_slice(grads.start.row_mut(0), dx.row(v));
        for (i, &tok) in text.iter().enumerate() {
            add_slice(grads.tok_embed.row_mut(tok), dx.row(v + 1 + i));
        }
        let dprefix = dx.row_block(0, v);
        grads.patch_weight.add_assign(&matmul_tn(patches, &dprefix)?)?;
        add_row(&mut grads.patch_bias, &dprefix.col_sums());
        Ok(())
    }

    fn block_backward(&self, li: usize, c: &BlockCache, dout: &Matrix, g: &mut LayerWeights) -> Result<Matrix> {
        let w = &self.weights.layers[li];
        let (n_heads, dh) = (self.config.n_heads, self.config.d_head());
        let scale = 1.0 / (dh as f64).sqrt();

        // Feed-forward branch.
        g.ffn_out_weight.add_assign(&matmul_tn(&c.ffn_act, dout)?)?;
        add_row(&mut g.ffn_out_bias, &dout.col_sums());
        let mut dpre = matmul_nt(dout, &w.ffn_out_weight)?;
        for (d, &pre) in dpre.as_mut_slice().iter_mut().zip(c.ffn_pre.as_slice()) {
            *d *= gelu_grad(pre);
        }
        g.ffn_in_weight.add_assign(&matmul_tn(&c.h2, &dpre)?)?;
        add_row(&mut g.ffn_in_bias, &dpre.col_sums());
        let dh2 = matmul_nt(&dpre, &w.ffn_in_weight)?;
        let mut dx1 = layer_norm_backward(&dh2, &c.ln2, &w.ln2_gain, &mut g.ln2_gain, &mut g.ln2_shift);
        dx1.add_assign(dout)?;

        // Attention branch.
        g.out_weight.add_assign(&matmul_tn(&c.concat, &dx1)?)?;
        add_row(&mut g.out_bias, &dx1.col_sums());
        let dconcat = matmul_nt(&dx1, &w.out_weight)?;
        let t = dx1.rows();
        let (mut dq, mut dk, mut dv) = (
            Matrix::zeros(t, self.config.d_model),
            Matrix::zeros(t, self.config.d_model),
            Matrix::zeros(t, self.config.d_model),
        );
        for h in 0..n_heads {
            let p = &c.probs[h];
            let (qh, kh, vh) = (
                c.q.col_block(h * dh, dh),
                c.k.col_block(h * dh, dh),
                c.v.col_block(h * dh, dh),
            );
            let doh = dconcat.col_block(h * dh, dh);
            let dp = matmul_nt(&doh, &vh)?;
            dv.set_col_block(h * dh, &matmul_tn(p, &doh)?);
            let mut ds = Matrix::zeros(t, t);
            for r in 0..t {
                let (pr, dpr) = (p.row(r), dp.row(r));
                let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for ((o, &pv), &dpv) in ds.row_mut(r).iter_mut().zip(pr).zip(dpr) {
                    *o = pv * (dpv - inner) * scale;
                }
            }
            dq.set_col_block(h * dh, &matmul(&ds, &kh)?);
            dk.set_col_block(h * dh, &matmul_tn(&ds, &qh)?);
        }
        g.q_weight.add_assign(&matmul_tn(&c.h1, &dq)?)?;
        g.k_weight.add_assign(&matmul_tn(&c.h1, &dk)?)?;
        g.v_weight.add_assign(&matmul_tn(&c.h1, &dv)?)?;
        add_row(&mut g.q_bias, &dq.col_sums());
        add_row(&mut g.k_bias, &dk.col_sums());
        add_row(&mut g.v_bias, &dv.col_sums());
        let mut dh1 = matmul_nt(&dq, &w.q_weight)?;
        dh1.add_assign(&matmul_nt(&dk, &w.k_weight)?)?;
        dh1.add_assign(&matmul_nt(&dv, &w.v_weight)?)?;
        let mut dx = layer_norm_backward(&dh1, &c.ln1, &w.ln1_gain, &mut g.ln1_gain, &mut g.ln1_shift);
        dx.add_assign(&dx1)?;
        Ok(dx)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn linear(x: &Matrix, weight: &Matrix, bias: &Matrix) -> Result<Matrix> {
    let mut out = matmul(x, weight)?;
    out.add_row_broadcast(bias.row(0));
    Ok(out)
}

fn add_row(target: &mut Matrix, values: &[f64]) {
    add_slice(target.row_mut(0), values);
}

fn add_slice(target: &mut [f64], values: &[f64]) {
    for (a, b) in target.iter_mut().zip(values) {
        *a += b;
    }
}

fn layer_norm(x: &Matrix, gain: &Matrix, shift: &Matrix) -> (Matrix, LnCache) {
    let d = x.cols();
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(inv);
        for (i, &v) in row.iter().enumerate() {
            let n = (v - mean) * inv;
            xhat[(r, i)] = n;
            out[(r, i)] = n * gain[(0, i)] + shift[(0, i)];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Matrix, cache: &LnCache, gain: &Matrix, dgain: &mut Matrix, dshift: &mut Matrix) -> Matrix {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    for r in 0..dy.rows() {
        let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            dgain[(0, i)] += dyr[i] * xh[i];
            dshift[(0, i)] += dyr[i];
            let g = dyr[i] * gain[(0, i)];
            mean_dxhat += g;
            mean_dxhat_xhat += g * xh[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let inv = cache.rstd[r];
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * (dyr[i] * gain[(0, i)] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_mask_stack, BinaryMask, SmoothingSchedule};
    use crate::numerics::finite_diff_grad;
    use rand::Rng;

    fn tiny_config() -> DecoderConfig {
        DecoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 16,
            visual_len: 16,
            max_pos: 32,
            native_pos: 24,
            ffn_mult: 4,
            patch_dim: 4,
        }
    }

    fn random_patches(seed: u64, cfg: &DecoderConfig) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(cfg.visual_len, cfg.patch_dim, |_, _| rng.random_range(-1.0..1.0))
    }

    fn plans(cfg: &DecoderConfig) -> Vec<BiasPlan> {
        let fused = BinaryMask::from_fn(cfg.grid_side(), |r, c| (1..3).contains(&r) && c > 0);
        let stack = build_mask_stack(&fused, &SmoothingSchedule::new(cfg.n_layers, 3, 2).unwrap(), true).unwrap();
        BiasMode::ALL
            .iter()
            .map(|&m| BiasPlan::for_mode(m, &fused, &stack, 1.0).unwrap())
            .collect()
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = finite_diff_grad(|v| gelu(v[0]), &[x], 1e-6).unwrap()[0];
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn parameter_count_is_independent_of_mode() {
        let cfg = tiny_config();
        let model = DecoderModel::new(cfg.clone(), 1).unwrap();
        let d = cfg.d_model;
        let per_layer = 4 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let expected = cfg.patch_dim * d
            + d
            + d
            + cfg.vocab_size * d
            + cfg.max_pos * d
            + cfg.n_layers * per_layer
            + 2 * d
            + d * cfg.vocab_size
            + cfg.vocab_size;
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn empty_text_gives_single_row() {
        let cfg = tiny_config();
        let model = DecoderModel::new(cfg.clone(), 2).unwrap();
        let prefix = model.embed_patches(&random_patches(3, &cfg)).unwrap();
        let logits = model.forward(&prefix, &[], None).unwrap();
        assert_eq!(logits.shape(), (1, cfg.vocab_size));
    }

    #[test]
    fn nomask_is_bit_identical_to_disabled_hook() {
        let cfg = tiny_config();
        let model = DecoderModel::new(cfg.clone(), 4).unwrap();
        let prefix = model.embed_patches(&random_patches(5, &cfg)).unwrap();
        let plan = BiasPlan::no_mask(cfg.visual_len);
        let a = model.forward(&prefix, &[3, 4, 5], None).unwrap();
        let b = model.forward(&prefix, &[3, 4, 5], Some(&plan)).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let run = || {
            let model = DecoderModel::new(cfg.clone(), 6).unwrap();
            let prefix = model.embed_patches(&random_patches(7, &cfg)).unwrap();
            model.forward(&prefix, &[1, 2], Some(&plans(&cfg)[1])).unwrap()
        };
        assert_eq!(run().as_slice(), run().as_slice());
    }

    #[test]
    fn earlier_logits_ignore_future_tokens() {
        let cfg = tiny_config();
        let model = DecoderModel::new(cfg.clone(), 8).unwrap();
        let prefix = model.embed_patches(&random_patches(9, &cfg)).unwrap();
        for plan in plans(&cfg) {
            let a = model.forward(&prefix, &[1, 2, 3, 4], Some(&plan)).unwrap();
            let b = model.forward(&prefix, &[1, 2, 9, 11], Some(&plan)).unwrap();
            assert_eq!(a.row_block(0, 3).as_slice(), b.row_block(0, 3).as_slice());
            assert_ne!(a.row(4), b.row(4));
        }
    }

    #[test]
    fn context_overflow_is_reported() {
        let cfg = tiny_config();
        let model = DecoderModel::new(cfg.clone(), 10).unwrap();
        let prefix = model.embed_patches(&random_patches(11, &cfg)).unwrap();
        let text = vec![1; cfg.max_pos - cfg.visual_len];
        let err = model.forward(&prefix, &text, None).unwrap_err();
        assert!(matches!(
            err,
            Error::ContextOverflow {
                needed: 33,
                max_pos: 32
            }
        ));
    }

    #[test]
    fn single_position_attention_is_value_projection() {
        let cfg = tiny_config();
        let model = DecoderModel::new(cfg.clone(), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Matrix::from_fn(1, cfg.d_model, |_, _| rng.random_range(-1.0..1.0));
        let causal = CausalMask::causal(1, 1).unwrap();
        let w = &model.weights().layers[0];
        let (h1, _) = layer_norm(&x, &w.ln1_gain, &w.ln1_shift);
        let v = linear(&h1, &w.v_weight, &w.v_bias).unwrap();
        let attn = linear(&v, &w.out_weight, &w.out_bias).unwrap();
        let x1 = x.add(&attn).unwrap();
        let (h2, _) = layer_norm(&x1, &w.ln2_gain, &w.ln2_shift);
        let f = linear(&h2, &w.ffn_in_weight, &w.ffn_in_bias).unwrap().map(gelu);
        let expect = x1
            .add(&linear(&f, &w.ffn_out_weight, &w.ffn_out_bias).unwrap())
            .unwrap();
        let got = model.attention_block(&x, 1, &causal, None).unwrap();
        assert!(got.max_abs_diff(&expect) <= 1e-15);
    }

    #[test]
    fn zero_bias_block_equals_unbiased_block() {
        let cfg = tiny_config();
        let model = DecoderModel::new(cfg.clone(), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Matrix::from_fn(5, cfg.d_model, |_, _| rng.random_range(-1.0..1.0));
        let causal = CausalMask::causal(5, 5).unwrap();
        let a = model.attention_block(&x, 2, &causal, None).unwrap();
        let b = model
            .attention_block(&x, 2, &causal, Some(&BiasMatrix::zeros(5, 5)))
            .unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn gradients_match_finite_differences_on_a_few_coordinates() {
        let cfg = tiny_config();
        let model = DecoderModel::new(cfg.clone(), 16).unwrap();
        let patches = random_patches(17, &cfg);
        let target = [3usize, 7, 0];
        for plan in plans(&cfg) {
            let batch = [TrainItem {
                patches: &patches,
                target: &target,
                plan: Some(&plan),
            }];
            let (_, grads) = model.loss_and_grad(&batch).unwrap();
            for (ti, (name, g)) in grads.named().into_iter().enumerate() {
                for idx in [0, g.len() / 2, g.len() - 1] {
                    let fd = finite_diff_grad(
                        |x| {
                            let mut m = model.clone();
                            m.weights_mut().named_mut()[ti].1.as_mut_slice()[idx] = x[0];
                            m.batch_loss(&batch).unwrap()
                        },
                        &[model.weights().named()[ti].1.as_slice()[idx]],
                        1e-5,
                    )
                    .unwrap()[0];
                    let a = g.as_slice()[idx];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        rel <= 1e-4,
                        "{} {name}[{idx}]: analytic {a} vs numeric {fd}",
                        plan.mode()
                    );
                }
            }
        }
    }

    #[test]
    fn greedy_is_invariant_to_head_bias_shift() {
        let cfg = tiny_config();
        let mut model = DecoderModel::new(cfg.clone(), 18).unwrap();
        let prefix = model.embed_patches(&random_patches(19, &cfg)).unwrap();
        let a = model.generate(&prefix, None, 6, 0).unwrap();
        for v in model.weights_mut().head_bias.as_mut_slice() {
            *v += 3.0;
        }
        let b = model.generate(&prefix, None, 6, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_edge_cases() {
        let cfg = tiny_config();
        let mut model = DecoderModel::new(cfg.clone(), 20).unwrap();
        let prefix = model.embed_patches(&random_patches(21, &cfg)).unwrap();
        let empty = model.generate(&prefix, None, 0, 0).unwrap();
        assert!(empty.tokens.is_empty());

        let long = model.generate(&prefix, None, 100, usize::MAX).unwrap();
        assert_eq!(long.status, GenerationStatus::Truncated);
        assert_eq!(long.tokens.len(), cfg.max_pos - cfg.visual_len - 1);

        model.weights_mut().head_bias[(0, 5)] = 1e6;
        let forced = model.generate(&prefix, None, 10, 5).unwrap();
        assert_eq!(forced.tokens, vec![5]);
        assert_eq!(forced.status, GenerationStatus::Finished);
    }

    #[test]
    fn extend_context_interpolates_table() {
        let cfg = tiny_config();
        let mut model = DecoderModel::new(cfg.clone(), 22).unwrap();
        let before = model.weights().pos_embed.clone();
        model.extend_context(63).unwrap();
        assert_eq!(model.config().max_pos, 63);
        assert_eq!(model.weights().pos_embed.row(0), before.row(0));
        assert_eq!(model.weights().pos_embed.row(62), before.row(31));
    }
}
