//! Generation algorithms.
//!
//! The centerpiece is self-contrast decoding ([`scmoe_generate`]): two
//! passes of the same model run under a strong and a weak routing
//! strategy, and the next token is scored as
//! `(1 + beta) * z_strong - beta * z_weak` over a plausibility-masked
//! vocabulary. Contrastive decoding reuses the same machinery with an
//! amateur checkpoint supplying the weak logits. Greedy and temperature
//! sampling run under any routing strategy; DoLa and contrastive search
//! round out the baselines, and [`self_consistency`] layers majority
//! voting over any sampling generator.

mod consistency;
mod dola;
mod scmoe;
mod search;

pub use consistency::{extract_numeric_answer, self_consistency, VoteOutcome};
pub use dola::{dola_bucket, dola_generate, select_premature_layer};
pub use scmoe::{contrastive_decoding_generate, scmoe_generate};
pub use search::{contrastive_search_generate, contrastive_search_score};

use crate::error::{Error, Result};
use crate::io::decode;
use crate::math::{self, LogitVector, ProbVector, MASKED};
use crate::model::MoeModel;
use crate::routing::RoutingStrategy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Seed mix for the weak pass's routing rng, so the two passes of a
/// self-contrast run draw independent streams from one user seed.
pub(crate) const WEAK_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
/// Seed mix for the token-sampling rng.
pub(crate) const SAMPLE_SEED_MIX: u64 = 0xD1B5_4A32_D192_ED03;

/// Which algorithm decodes and with what hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DecoderSpec {
    Greedy {
        routing: RoutingStrategy,
    },
    Sample {
        routing: RoutingStrategy,
        temperature: f64,
    },
    Scmoe {
        strong: RoutingStrategy,
        weak: RoutingStrategy,
        beta: f64,
        alpha: f64,
        /// Greedy argmax over the contrast scores when false; a draw from
        /// their softmax restricted to the valid set when true.
        sample: bool,
        /// Optional extra temperature in sample mode; the default applies
        /// none.
        temperature: Option<f64>,
    },
    ContrastiveDecoding {
        strong_routing: RoutingStrategy,
        amateur_routing: RoutingStrategy,
        beta: f64,
        alpha: f64,
    },
    Dola {
        routing: RoutingStrategy,
        premature_layers: Vec<usize>,
        alpha: f64,
    },
    ContrastiveSearch {
        routing: RoutingStrategy,
        top_k: usize,
        penalty: f64,
    },
}

/// One decode request: the decoder plus run-level controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub decoder: DecoderSpec,
    pub max_new_tokens: usize,
    pub stop_token: Option<u32>,
    pub seed: u64,
    /// Retain full per-step logits and valid sets in the result.
    #[serde(default)]
    pub trace_logits: bool,
}

impl DecodeConfig {
    pub fn new(decoder: DecoderSpec, max_new_tokens: usize, seed: u64) -> Self {
        Self {
            decoder,
            max_new_tokens,
            stop_token: None,
            seed,
            trace_logits: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidParameter(
                "max_new_tokens must be positive".into(),
            ));
        }
        match &self.decoder {
            DecoderSpec::Greedy { .. } => {}
            DecoderSpec::Sample { temperature, .. } => {
                check_temperature(*temperature)?;
            }
            DecoderSpec::Scmoe {
                beta,
                alpha,
                temperature,
                ..
            } => {
                check_beta(*beta)?;
                check_alpha(*alpha)?;
                if let Some(t) = temperature {
                    check_temperature(*t)?;
                }
            }
            DecoderSpec::ContrastiveDecoding { beta, alpha, .. } => {
                check_beta(*beta)?;
                check_alpha(*alpha)?;
            }
            DecoderSpec::Dola {
                premature_layers,
                alpha,
                ..
            } => {
                check_alpha(*alpha)?;
                if premature_layers.is_empty() {
                    return Err(Error::InvalidParameter(
                        "premature layer set must be non-empty".into(),
                    ));
                }
            }
            DecoderSpec::ContrastiveSearch { top_k, penalty, .. } => {
                if *top_k == 0 {
                    return Err(Error::InvalidParameter("top_k must be positive".into()));
                }
                if !(0.0..=1.0).contains(penalty) {
                    return Err(Error::InvalidParameter(format!(
                        "contrastive search penalty must lie in [0,1], got {penalty}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0,1], got {alpha}"
        )));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "beta must be a non-negative real, got {beta}"
        )));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be a positive real, got {t}"
        )));
    }
    Ok(())
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiag {
    pub token: u32,
    pub strong_logit_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weak_logit_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_valid_len: Option<usize>,
    pub step_ns: u64,
}

/// Full per-step logit capture, retained only when
/// [`DecodeConfig::trace_logits`] is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub strong: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weak: Option<Vec<f64>>,
    pub valid: Vec<usize>,
}

/// Emitted tokens plus diagnostics for one decode run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResult {
    pub tokens: Vec<u32>,
    pub text: String,
    pub steps: Vec<StepDiag>,
    pub total_ns: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceStep>>,
}

/// The plausibility mask: indices whose strong logit is within `ln(alpha)`
/// of the maximum. Always contains every argmax index.
pub fn plausibility_mask(z: &LogitVector, alpha: f64) -> Result<Vec<usize>> {
    check_alpha(alpha)?;
    let threshold = alpha.ln() + z.max_unmasked()?;
    Ok(z.unmasked()
        .filter(|&(_, v)| v >= threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Contrast scores `(1 + beta) * z_strong - beta * z_weak` on the valid
/// set derived from `z_strong`; everything else is masked out.
pub fn contrast_logits(
    z_strong: &LogitVector,
    z_weak: &LogitVector,
    beta: f64,
    alpha: f64,
) -> Result<LogitVector> {
    let valid = plausibility_mask(z_strong, alpha)?;
    contrast_on_valid(z_strong, z_weak, beta, &valid)
}

/// Contrast against a precomputed valid set; shared with the decode loop
/// so the mask is built once per step.
pub(crate) fn contrast_on_valid(
    z_strong: &LogitVector,
    z_weak: &LogitVector,
    beta: f64,
    valid: &[usize],
) -> Result<LogitVector> {
    check_beta(beta)?;
    if z_strong.len() != z_weak.len() {
        return Err(Error::LengthMismatch {
            expected: z_strong.len(),
            found: z_weak.len(),
        });
    }
    let mut out = vec![MASKED; z_strong.len()];
    for &i in valid {
        if z_weak.is_masked(i) {
            return Err(Error::InvalidParameter(format!(
                "weak logits are masked at valid index {i}"
            )));
        }
        out[i] = (1.0 + beta) * z_strong.get(i) - beta * z_weak.get(i);
    }
    LogitVector::new(out)
}

/// Draws an index from a distribution by walking the cumulative sum.
pub(crate) fn sample_index<R: Rng>(p: &ProbVector, rng: &mut R) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut cumulative = 0.0f64;
    let mut last_nonzero = 0usize;
    for (i, &v) in p.values().iter().enumerate() {
        if v > 0.0 {
            last_nonzero = i;
            cumulative += v;
            if cumulative > u {
                return i;
            }
        }
    }
    // Rounding can leave the cumulative sum a hair under 1.
    last_nonzero
}

pub(crate) fn sampling_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ SAMPLE_SEED_MIX)
}

/// Single-pass decoding under one routing strategy. `temperature` of
/// `None` decodes greedily (argmax, lowest index on ties); `Some(t)`
/// samples from `softmax(z / t)` with the seeded rng.
pub fn baseline_generate(
    model: &MoeModel,
    prompt: &[u32],
    routing: &RoutingStrategy,
    temperature: Option<f64>,
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    if let Some(t) = temperature {
        check_temperature(t)?;
    }
    if prompt.is_empty() {
        return Err(Error::InvalidParameter("prompt must be non-empty".into()));
    }
    let started = Instant::now();
    let mut ctx = model.new_context(routing, cfg.seed)?;
    let mut rng = sampling_rng(cfg.seed);
    let mut z = model
        .forward(&mut ctx, prompt, false)?
        .pop()
        .expect("non-empty prompt")
        .logits;

    let mut tokens = Vec::with_capacity(cfg.max_new_tokens);
    let mut steps = Vec::with_capacity(cfg.max_new_tokens);
    let mut trace = cfg.trace_logits.then(Vec::new);
    for step in 0..cfg.max_new_tokens {
        let step_started = Instant::now();
        let token = match temperature {
            None => z.argmax()? as u32,
            Some(t) => sample_index(&math::softmax_with_temperature(&z, t)?, &mut rng) as u32,
        };
        tokens.push(token);
        steps.push(StepDiag {
            token,
            strong_logit_max: z.max_unmasked()?,
            weak_logit_max: None,
            v_valid_len: None,
            step_ns: step_started.elapsed().as_nanos() as u64,
        });
        if let Some(tr) = trace.as_mut() {
            tr.push(TraceStep {
                strong: z.values().to_vec(),
                weak: None,
                valid: Vec::new(),
            });
        }
        if cfg.stop_token == Some(token) || step + 1 == cfg.max_new_tokens {
            break;
        }
        z = model
            .forward(&mut ctx, &[token], false)?
            .pop()
            .expect("one token in")
            .logits;
    }

    Ok(GenerationResult {
        text: decode(&tokens),
        tokens,
        steps,
        total_ns: started.elapsed().as_nanos() as u64,
        trace,
    })
}

/// Dispatches a [`DecodeConfig`] to its generator. `amateur` is consulted
/// only by contrastive decoding.
pub fn generate(
    model: &MoeModel,
    amateur: Option<&MoeModel>,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    match &cfg.decoder {
        DecoderSpec::Greedy { routing } => baseline_generate(model, prompt, routing, None, cfg),
        DecoderSpec::Sample {
            routing,
            temperature,
        } => baseline_generate(model, prompt, routing, Some(*temperature), cfg),
        DecoderSpec::Scmoe { .. } => scmoe_generate(model, prompt, cfg),
        DecoderSpec::ContrastiveDecoding { .. } => {
            let amateur = amateur.ok_or_else(|| {
                Error::InvalidParameter("contrastive decoding requires an amateur model".into())
            })?;
            contrastive_decoding_generate(model, amateur, prompt, cfg)
        }
        DecoderSpec::Dola { .. } => dola_generate(model, prompt, cfg),
        DecoderSpec::ContrastiveSearch { .. } => contrastive_search_generate(model, prompt, cfg),
    }
}
