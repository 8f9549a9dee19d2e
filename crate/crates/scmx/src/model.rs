//! A small decoder-only transformer whose feed-forward sublayers are MoE
//! layers.
//!
//! Block structure per layer: RMS pre-norm, causal multi-head
//! self-attention with rotary position encoding, RMS pre-norm, MoE
//! feed-forward (gated SwiGLU experts), residual connections throughout,
//! then a final RMS norm and vocabulary projection. Weights are immutable
//! after construction and freely shared across threads; all per-pass state
//! lives in a [`GenerationContext`].

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::math::LogitVector;
use crate::routing::{
    compute_gates, moe_layer_forward, select_experts, ExpertSelection, GateVector,
    RoutingStrategy,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const ROPE_BASE: f32 = 10_000.0;
const NORM_EPS: f32 = 1e-5;

/// Architecture hyperparameters of a toy MoE decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub n_shared_experts: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
    /// When set, odd-indexed layers use a plain dense feed-forward block
    /// instead of an MoE layer (ablation knob).
    #[serde(default)]
    pub interleave_dense: bool,
}

impl ModelConfig {
    /// Small configuration sized for laptop-scale tests.
    pub fn desk_default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            n_experts: 8,
            n_shared_experts: 0,
            d_ff: 128,
            vocab_size: 260,
            max_seq_len: 512,
            rng_seed: 42,
            interleave_dense: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_experts", self.n_experts),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::InvalidParameter(
                "head dimension must be even for rotary encoding".into(),
            ));
        }
        if self.n_shared_experts >= self.n_experts {
            return Err(Error::InvalidParameter(format!(
                "n_shared_experts {} must be below n_experts {}",
                self.n_shared_experts, self.n_experts
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Whether layer `l` carries an MoE feed-forward block.
    pub fn is_moe_layer(&self, l: usize) -> bool {
        !self.interleave_dense || l % 2 == 0
    }
}

/// Gated feed-forward block: `w_down(silu(w_gate h) * (w_up h))`.
#[derive(Debug, Clone)]
pub(crate) struct ExpertFfn {
    pub(crate) w_gate: Matrix,
    pub(crate) w_up: Matrix,
    pub(crate) w_down: Matrix,
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl ExpertFfn {
    pub(crate) fn forward(&self, h: &[f32]) -> Result<Vec<f32>> {
        let gate = self.w_gate.matvec(h)?;
        let up = self.w_up.matvec(h)?;
        let hidden: Vec<f32> = gate
            .iter()
            .zip(up.iter())
            .map(|(&g, &u)| silu(g) * u)
            .collect();
        self.w_down.matvec(&hidden)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum FfnBlock {
    Moe {
        router: Matrix,
        experts: Vec<ExpertFfn>,
    },
    Dense(ExpertFfn),
}

#[derive(Debug, Clone)]
pub(crate) struct LayerWeights {
    pub(crate) attn_norm: Vec<f32>,
    pub(crate) wq: Matrix,
    pub(crate) wk: Matrix,
    pub(crate) wv: Matrix,
    pub(crate) wo: Matrix,
    pub(crate) ffn_norm: Vec<f32>,
    pub(crate) ffn: FfnBlock,
}

/// The model: immutable weights plus configuration.
#[derive(Debug, Clone)]
pub struct MoeModel {
    pub(crate) cfg: ModelConfig,
    pub(crate) embed: Matrix,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) final_norm: Vec<f32>,
    pub(crate) lm_head: Matrix,
}

/// Routing diagnostics for one MoE layer at one position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub gates: GateVector,
    pub selection: ExpertSelection,
}

/// Everything the model produces for a single position.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Next-token logits over the vocabulary.
    pub logits: LogitVector,
    /// Per-MoE-layer routing diagnostics, in layer order.
    pub layer_records: Vec<LayerRecord>,
    /// Hidden state after the final norm (the head input).
    pub hidden_final: Vec<f32>,
    /// Post-block hidden state per layer; retained only on request.
    pub hidden_by_layer: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Mutable per-pass state: token history, KV cache, routing strategy, and
/// the rng feeding `RandomOne`. Owned by exactly one worker at a time.
#[derive(Debug, Clone)]
pub struct GenerationContext {
    pub(crate) strategy: RoutingStrategy,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) tokens: Vec<u32>,
    pub(crate) cache: Vec<LayerCache>,
}

impl GenerationContext {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn strategy(&self) -> &RoutingStrategy {
        &self.strategy
    }
}

fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + NORM_EPS).sqrt();
    x.iter().zip(gain.iter()).map(|(&v, &g)| v * inv * g).collect()
}

/// Rotates adjacent pairs within each head by a position-dependent angle.
fn apply_rope(x: &mut [f32], pos: usize, n_heads: usize, head_dim: usize) {
    for h in 0..n_heads {
        let base = h * head_dim;
        for pair in 0..head_dim / 2 {
            let freq = ROPE_BASE.powf(-2.0 * pair as f32 / head_dim as f32);
            let angle = pos as f32 * freq;
            let (sin, cos) = angle.sin_cos();
            let i = base + 2 * pair;
            let (a, b) = (x[i], x[i + 1]);
            x[i] = a * cos - b * sin;
            x[i + 1] = a * sin + b * cos;
        }
    }
}

/// In-place softmax over attention scores; f64 accumulation, left to right.
fn softmax_scores(scores: &mut [f32]) {
    let mut m = f32::NEG_INFINITY;
    for &s in scores.iter() {
        if s > m {
            m = s;
        }
    }
    let mut sum = 0.0f64;
    for s in scores.iter_mut() {
        let e = ((*s - m) as f64).exp();
        *s = e as f32;
        sum += e;
    }
    let inv = (1.0 / sum) as f32;
    for s in scores.iter_mut() {
        *s *= inv;
    }
}

impl MoeModel {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Builds a model by fetching each tensor from `fetch` in the canonical
    /// enumeration order. `fetch` receives the tensor name and shape and
    /// must return exactly `shape.product()` values.
    pub fn from_parts<F>(cfg: ModelConfig, mut fetch: F) -> Result<Self>
    where
        F: FnMut(&str, &[usize]) -> Result<Vec<f32>>,
    {
        cfg.validate()?;

        fn mat<F>(fetch: &mut F, name: &str, rows: usize, cols: usize) -> Result<Matrix>
        where
            F: FnMut(&str, &[usize]) -> Result<Vec<f32>>,
        {
            Matrix::new(rows, cols, fetch(name, &[rows, cols])?)
        }

        fn gain<F>(fetch: &mut F, name: &str, len: usize) -> Result<Vec<f32>>
        where
            F: FnMut(&str, &[usize]) -> Result<Vec<f32>>,
        {
            let v = fetch(name, &[len])?;
            if v.len() != len {
                return Err(Error::DimensionMismatch {
                    context: format!("tensor {name}: expected {len} values, got {}", v.len()),
                });
            }
            Ok(v)
        }

        fn expert<F>(fetch: &mut F, prefix: &str, d: usize, d_ff: usize) -> Result<ExpertFfn>
        where
            F: FnMut(&str, &[usize]) -> Result<Vec<f32>>,
        {
            Ok(ExpertFfn {
                w_gate: mat(fetch, &format!("{prefix}.w_gate"), d_ff, d)?,
                w_up: mat(fetch, &format!("{prefix}.w_up"), d_ff, d)?,
                w_down: mat(fetch, &format!("{prefix}.w_down"), d, d_ff)?,
            })
        }

        let d = cfg.d_model;
        let embed = mat(&mut fetch, "embed.weight", cfg.vocab_size, d)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            let attn_norm = gain(&mut fetch, &format!("{p}.attn_norm"), d)?;
            let wq = mat(&mut fetch, &format!("{p}.attn.wq"), d, d)?;
            let wk = mat(&mut fetch, &format!("{p}.attn.wk"), d, d)?;
            let wv = mat(&mut fetch, &format!("{p}.attn.wv"), d, d)?;
            let wo = mat(&mut fetch, &format!("{p}.attn.wo"), d, d)?;
            let ffn_norm = gain(&mut fetch, &format!("{p}.ffn_norm"), d)?;
            let ffn = if cfg.is_moe_layer(l) {
                let router = mat(&mut fetch, &format!("{p}.moe.router"), cfg.n_experts, d)?;
                let mut experts = Vec::with_capacity(cfg.n_experts);
                for e in 0..cfg.n_experts {
                    experts.push(expert(
                        &mut fetch,
                        &format!("{p}.moe.experts.{e}"),
                        d,
                        cfg.d_ff,
                    )?);
                }
                FfnBlock::Moe { router, experts }
            } else {
                FfnBlock::Dense(expert(&mut fetch, &format!("{p}.dense"), d, cfg.d_ff)?)
            };
            layers.push(LayerWeights {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                ffn,
            });
        }
        let final_norm = gain(&mut fetch, "final_norm", d)?;
        let lm_head = mat(&mut fetch, "lm_head.weight", cfg.vocab_size, d)?;
        Ok(Self {
            cfg,
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// A randomly initialized model: every tensor is drawn from a seeded
    /// normal with standard deviation `1/sqrt(fan_in)` (fan-in is the input
    /// dimension for matrices, 1 for norm gains). Deterministic per
    /// `(config, seed)`.
    pub fn random(cfg: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        Self::from_parts(cfg, |_name, shape| {
            let numel: usize = shape.iter().product();
            let fan_in = if shape.len() >= 2 {
                shape[shape.len() - 1]
            } else {
                1
            };
            let normal = Normal::new(0.0f32, 1.0 / (fan_in as f32).sqrt())
                .expect("finite std");
            Ok((0..numel).map(|_| normal.sample(&mut rng)).collect())
        })
    }

    /// Visits every tensor in the canonical enumeration order.
    pub fn visit_tensors<F>(&self, mut visit: F)
    where
        F: FnMut(&str, &[usize], &[f32]),
    {
        let d = self.cfg.d_model;
        let visit_mat = |visit: &mut F, name: &str, m: &Matrix| {
            visit(name, &[m.rows(), m.cols()], m.data());
        };
        visit_mat(&mut visit, "embed.weight", &self.embed);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            visit(&format!("{p}.attn_norm"), &[d], &layer.attn_norm);
            visit_mat(&mut visit, &format!("{p}.attn.wq"), &layer.wq);
            visit_mat(&mut visit, &format!("{p}.attn.wk"), &layer.wk);
            visit_mat(&mut visit, &format!("{p}.attn.wv"), &layer.wv);
            visit_mat(&mut visit, &format!("{p}.attn.wo"), &layer.wo);
            visit(&format!("{p}.ffn_norm"), &[d], &layer.ffn_norm);
            match &layer.ffn {
                FfnBlock::Moe { router, experts } => {
                    visit_mat(&mut visit, &format!("{p}.moe.router"), router);
                    for (e, ex) in experts.iter().enumerate() {
                        let q = format!("{p}.moe.experts.{e}");
                        visit_mat(&mut visit, &format!("{q}.w_gate"), &ex.w_gate);
                        visit_mat(&mut visit, &format!("{q}.w_up"), &ex.w_up);
                        visit_mat(&mut visit, &format!("{q}.w_down"), &ex.w_down);
                    }
                }
                FfnBlock::Dense(ex) => {
                    let q = format!("{p}.dense");
                    visit_mat(&mut visit, &format!("{q}.w_gate"), &ex.w_gate);
                    visit_mat(&mut visit, &format!("{q}.w_up"), &ex.w_up);
                    visit_mat(&mut visit, &format!("{q}.w_down"), &ex.w_down);
                }
            }
        }
        visit("final_norm", &[d], &self.final_norm);
        visit_mat(&mut visit, "lm_head.weight", &self.lm_head);
    }

    /// Fresh generation state under the given routing strategy. The
    /// strategy's shared-expert count defaults to the model's configured
    /// count unless explicitly overridden.
    pub fn new_context(&self, strategy: &RoutingStrategy, seed: u64) -> Result<GenerationContext> {
        let resolved = strategy.resolved(self.cfg.n_shared_experts);
        resolved.validate(self.cfg.n_experts, self.cfg.n_shared_experts)?;
        Ok(GenerationContext {
            strategy: resolved,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tokens: Vec::new(),
            cache: vec![LayerCache::default(); self.cfg.n_layers],
        })
    }

    /// Extends the context with `new_tokens` and returns one [`StepOutput`]
    /// per new position. Deterministic given weights, tokens, strategy, and
    /// seed.
    pub fn forward(
        &self,
        ctx: &mut GenerationContext,
        new_tokens: &[u32],
        retain_hidden: bool,
    ) -> Result<Vec<StepOutput>> {
        let requested = ctx.tokens.len() + new_tokens.len();
        if requested > self.cfg.max_seq_len {
            return Err(Error::ContextOverflow {
                requested,
                max: self.cfg.max_seq_len,
            });
        }
        for &t in new_tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        let mut outputs = Vec::with_capacity(new_tokens.len());
        for &token in new_tokens {
            outputs.push(self.forward_one(ctx, token, retain_hidden)?);
        }
        Ok(outputs)
    }

    fn forward_one(
        &self,
        ctx: &mut GenerationContext,
        token: u32,
        retain_hidden: bool,
    ) -> Result<StepOutput> {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let head_dim = cfg.head_dim();
        let pos = ctx.tokens.len();

        let mut h: Vec<f32> = self.embed.row(token as usize).to_vec();
        let mut layer_records = Vec::new();
        let mut hidden_by_layer = retain_hidden.then(|| Vec::with_capacity(cfg.n_layers));

        for (l, layer) in self.layers.iter().enumerate() {
            // Attention block.
            let normed = rms_norm(&h, &layer.attn_norm);
            let mut q = layer.wq.matvec(&normed)?;
            let mut k = layer.wk.matvec(&normed)?;
            let v = layer.wv.matvec(&normed)?;
            apply_rope(&mut q, pos, n_heads, head_dim);
            apply_rope(&mut k, pos, n_heads, head_dim);
            let cache = &mut ctx.cache[l];
            cache.keys.extend_from_slice(&k);
            cache.values.extend_from_slice(&v);
            let t = pos + 1;
            let scale = 1.0 / (head_dim as f32).sqrt();
            let mut attn = vec![0.0f32; d];
            for hd in 0..n_heads {
                let off = hd * head_dim;
                let q_h = &q[off..off + head_dim];
                let mut scores = vec![0.0f32; t];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k_j = &cache.keys[j * d + off..j * d + off + head_dim];
                    *s = dot(q_h, k_j) * scale;
                }
                softmax_scores(&mut scores);
                let out_h = &mut attn[off..off + head_dim];
                for (j, &w) in scores.iter().enumerate() {
                    let v_j = &cache.values[j * d + off..j * d + off + head_dim];
                    for (o, &vv) in out_h.iter_mut().zip(v_j.iter()) {
                        *o += w * vv;
                    }
                }
            }
            let attn_out = layer.wo.matvec(&attn)?;
            for (hv, &a) in h.iter_mut().zip(attn_out.iter()) {
                *hv += a;
            }

            // Feed-forward block.
            let normed = rms_norm(&h, &layer.ffn_norm);
            let ffn_out = match &layer.ffn {
                FfnBlock::Moe { router, experts } => {
                    let gates = compute_gates(router, &normed)?;
                    let selection = select_experts(&gates, &ctx.strategy, &mut ctx.rng)?;
                    let out = moe_layer_forward(&normed, &selection, |i, x| {
                        experts
                            .get(i)
                            .ok_or_else(|| {
                                Error::InvalidParameter(format!("expert {i} out of range"))
                            })?
                            .forward(x)
                    })?;
                    layer_records.push(LayerRecord {
                        layer: l,
                        gates,
                        selection,
                    });
                    out
                }
                FfnBlock::Dense(ex) => ex.forward(&normed)?,
            };
            for (hv, &f) in h.iter_mut().zip(ffn_out.iter()) {
                *hv += f;
            }

            if let Some(hb) = hidden_by_layer.as_mut() {
                hb.push(h.clone());
            }
        }

        ctx.tokens.push(token);
        let hidden_final = rms_norm(&h, &self.final_norm);
        let logits = LogitVector::from_f32(&self.lm_head.matvec(&hidden_final)?)?;
        Ok(StepOutput {
            logits,
            layer_records,
            hidden_final,
            hidden_by_layer,
        })
    }

    /// Early-exit head reuse: applies the final norm and vocabulary
    /// projection to an intermediate hidden state.
    pub fn early_exit_logits(&self, hidden_at_layer: &[f32]) -> Result<LogitVector> {
        if hidden_at_layer.len() != self.cfg.d_model {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "early exit expects hidden of width {}, got {}",
                    self.cfg.d_model,
                    hidden_at_layer.len()
                ),
            });
        }
        let normed = rms_norm(hidden_at_layer, &self.final_norm);
        LogitVector::from_f32(&self.lm_head.matvec(&normed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> ModelConfig {
        ModelConfig::desk_default()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            n_experts: 4,
            d_ff: 32,
            vocab_size: 260,
            max_seq_len: 64,
            rng_seed: 3,
            ..desk()
        }
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = desk();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = desk();
        cfg.n_shared_experts = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = desk();
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
        assert!(desk().validate().is_ok());
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let model = MoeModel::random(tiny()).unwrap();
        let strat = RoutingStrategy::top_k(2);
        let tokens = [256u32, 72, 105, 33];
        let mut a = model.new_context(&strat, 5).unwrap();
        let mut b = model.new_context(&strat, 5).unwrap();
        let out_a = model.forward(&mut a, &tokens, false).unwrap();
        let out_b = model.forward(&mut b, &tokens, false).unwrap();
        assert_eq!(out_a.len(), tokens.len());
        for (x, y) in out_a.iter().zip(out_b.iter()) {
            assert_eq!(x.logits.values(), y.logits.values());
            assert_eq!(x.logits.len(), 260);
            assert_eq!(x.layer_records.len(), 2);
        }
        for v in out_a[0].logits.values() {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn layer0_gates_do_not_depend_on_strategy() {
        let model = MoeModel::random(tiny()).unwrap();
        let tokens = [256u32, 1, 2, 3];
        let mut a = model.new_context(&RoutingStrategy::top_k(2), 1).unwrap();
        let mut b = model.new_context(&RoutingStrategy::rank_k(4), 1).unwrap();
        let out_a = model.forward(&mut a, &tokens, false).unwrap();
        let out_b = model.forward(&mut b, &tokens, false).unwrap();
        for (x, y) in out_a.iter().zip(out_b.iter()) {
            assert_eq!(x.layer_records[0].gates, y.layer_records[0].gates);
        }
    }

    #[test]
    fn context_overflow_and_bad_tokens_error() {
        let model = MoeModel::random(tiny()).unwrap();
        let mut ctx = model.new_context(&RoutingStrategy::top_k(2), 0).unwrap();
        let too_long = vec![0u32; 65];
        assert!(matches!(
            model.forward(&mut ctx, &too_long, false).unwrap_err(),
            Error::ContextOverflow { .. }
        ));
        assert!(matches!(
            model.forward(&mut ctx, &[260], false).unwrap_err(),
            Error::TokenOutOfRange { .. }
        ));
    }

    #[test]
    fn early_exit_at_last_layer_equals_final_logits() {
        let model = MoeModel::random(tiny()).unwrap();
        let mut ctx = model.new_context(&RoutingStrategy::top_k(2), 0).unwrap();
        let out = model.forward(&mut ctx, &[256, 40, 41], true).unwrap();
        let last = out.last().unwrap();
        let hb = last.hidden_by_layer.as_ref().unwrap();
        let exit = model.early_exit_logits(&hb[hb.len() - 1]).unwrap();
        assert_eq!(exit.values(), last.logits.values());
        assert_eq!(exit.len(), model.config().vocab_size);
    }

    #[test]
    fn distinct_premature_layers_diverge() {
        use crate::math::{jensen_shannon, softmax};
        let model = MoeModel::random(tiny()).unwrap();
        let mut ctx = model.new_context(&RoutingStrategy::top_k(2), 0).unwrap();
        let out = model.forward(&mut ctx, &[256, 9, 8, 7], true).unwrap();
        let hb = out.last().unwrap().hidden_by_layer.as_ref().unwrap();
        let p0 = softmax(&model.early_exit_logits(&hb[0]).unwrap()).unwrap();
        let p1 = softmax(&model.early_exit_logits(&hb[1]).unwrap()).unwrap();
        assert!(jensen_shannon(&p0, &p1).unwrap() > 0.0);
    }

    #[test]
    fn early_exit_rejects_bad_width() {
        let model = MoeModel::random(tiny()).unwrap();
        assert!(model.early_exit_logits(&[0.0; 3]).is_err());
    }

    #[test]
    fn single_expert_model_routes_everything_to_it() {
        let cfg = ModelConfig {
            n_experts: 1,
            ..tiny()
        };
        let model = MoeModel::random(cfg).unwrap();
        let mut ctx = model.new_context(&RoutingStrategy::top_k(1), 0).unwrap();
        let out = model.forward(&mut ctx, &[256, 5], false).unwrap();
        for step in &out {
            for rec in &step.layer_records {
                assert_eq!(rec.selection.routed, vec![(0, 1.0)]);
            }
        }
    }

    #[test]
    fn interleaved_dense_layers_skip_routing_records() {
        let cfg = ModelConfig {
            interleave_dense: true,
            ..tiny()
        };
        let model = MoeModel::random(cfg).unwrap();
        let mut ctx = model.new_context(&RoutingStrategy::top_k(2), 0).unwrap();
        let out = model.forward(&mut ctx, &[256, 5], false).unwrap();
        // Layers 0 and 1 with interleaving: only layer 0 is MoE.
        assert_eq!(out[0].layer_records.len(), 1);
        assert_eq!(out[0].layer_records[0].layer, 0);
    }

    #[test]
    fn random_models_differ_across_seeds() {
        let a = MoeModel::random(tiny()).unwrap();
        let b = MoeModel::random(ModelConfig {
            rng_seed: 4,
            ..tiny()
        })
        .unwrap();
        assert_ne!(a.embed.data(), b.embed.data());
    }

    #[test]
    fn visit_and_from_parts_agree_on_enumeration() {
        let model = MoeModel::random(tiny()).unwrap();
        let mut names = Vec::new();
        model.visit_tensors(|name, shape, data| {
            assert_eq!(shape.iter().product::<usize>(), data.len());
            names.push(name.to_string());
        });
        let mut seen = Vec::new();
        let _ = MoeModel::from_parts(tiny(), |name, shape| {
            seen.push(name.to_string());
            Ok(vec![0.0; shape.iter().product()])
        })
        .unwrap();
        assert_eq!(names, seen);
    }
}
