//! Self-contrast decoding and its two-model sibling, contrastive decoding.
//!
//! Both maintain two full generation contexts. For SCMoE they share one
//! model and differ only in routing strategy; the hidden trajectories
//! diverge after the first MoE layer because each pass routes on its own
//! hiddens. The passes are synchronized exclusively through the emitted
//! token: whatever the contrast picks extends both histories. The two
//! per-step forwards are independent and run on separate workers in
//! parallel builds.

use super::{
    contrast_on_valid, plausibility_mask, sample_index, sampling_rng, DecodeConfig, DecoderSpec,
    GenerationResult, StepDiag, TraceStep, WEAK_SEED_MIX,
};
use crate::error::{Error, Result};
use crate::io::decode;
use crate::math::{self, LogitVector};
use crate::model::{GenerationContext, MoeModel};
use crate::par;
use crate::routing::RoutingStrategy;
use std::time::Instant;

struct DualPass<'m> {
    strong_model: &'m MoeModel,
    weak_model: &'m MoeModel,
    strong: GenerationContext,
    weak: GenerationContext,
}

impl DualPass<'_> {
    /// Feeds `tokens` to both passes and returns the last position's
    /// logits from each.
    fn advance(&mut self, tokens: &[u32]) -> Result<(LogitVector, LogitVector)> {
        let (strong_model, weak_model) = (self.strong_model, self.weak_model);
        let (strong_ctx, weak_ctx) = (&mut self.strong, &mut self.weak);
        let (rs, rw) = par::join2(
            move || strong_model.forward(strong_ctx, tokens, false),
            move || weak_model.forward(weak_ctx, tokens, false),
        );
        let zs = rs?.pop().expect("non-empty token batch").logits;
        let zw = rw?.pop().expect("non-empty token batch").logits;
        Ok((zs, zw))
    }
}

#[allow(clippy::too_many_arguments)]
fn dual_contrast_generate(
    strong_model: &MoeModel,
    weak_model: &MoeModel,
    strong_routing: &RoutingStrategy,
    weak_routing: &RoutingStrategy,
    prompt: &[u32],
    beta: f64,
    alpha: f64,
    sample: bool,
    temperature: Option<f64>,
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    if prompt.is_empty() {
        return Err(Error::InvalidParameter("prompt must be non-empty".into()));
    }
    let started = Instant::now();
    let mut passes = DualPass {
        strong_model,
        weak_model,
        strong: strong_model.new_context(strong_routing, cfg.seed)?,
        weak: weak_model.new_context(weak_routing, cfg.seed ^ WEAK_SEED_MIX)?,
    };
    let mut rng = sampling_rng(cfg.seed);
    let (mut z_strong, mut z_weak) = passes.advance(prompt)?;

    let mut tokens = Vec::with_capacity(cfg.max_new_tokens);
    let mut steps = Vec::with_capacity(cfg.max_new_tokens);
    let mut trace = cfg.trace_logits.then(Vec::new);
    for step in 0..cfg.max_new_tokens {
        let step_started = Instant::now();
        let valid = plausibility_mask(&z_strong, alpha)?;
        let z_sc = contrast_on_valid(&z_strong, &z_weak, beta, &valid)?;
        let token = if sample {
            let p = match temperature {
                None => math::softmax(&z_sc)?,
                Some(t) => math::softmax_with_temperature(&z_sc, t)?,
            };
            sample_index(&p, &mut rng) as u32
        } else {
            z_sc.argmax()? as u32
        };
        tokens.push(token);
        steps.push(StepDiag {
            token,
            strong_logit_max: z_strong.max_unmasked()?,
            weak_logit_max: Some(z_weak.max_unmasked()?),
            v_valid_len: Some(valid.len()),
            step_ns: step_started.elapsed().as_nanos() as u64,
        });
        if let Some(tr) = trace.as_mut() {
            tr.push(TraceStep {
                strong: z_strong.values().to_vec(),
                weak: Some(z_weak.values().to_vec()),
                valid,
            });
        }
        if cfg.stop_token == Some(token) || step + 1 == cfg.max_new_tokens {
            break;
        }
        (z_strong, z_weak) = passes.advance(&[token])?;
    }

    Ok(GenerationResult {
        text: decode(&tokens),
        tokens,
        steps,
        total_ns: started.elapsed().as_nanos() as u64,
        trace,
    })
}

/// Self-contrast decoding: one model, two routing strategies.
pub fn scmoe_generate(
    model: &MoeModel,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    let DecoderSpec::Scmoe {
        strong,
        weak,
        beta,
        alpha,
        sample,
        temperature,
    } = &cfg.decoder
    else {
        return Err(Error::InvalidParameter(
            "scmoe_generate requires an Scmoe decoder spec".into(),
        ));
    };
    dual_contrast_generate(
        model,
        model,
        strong,
        weak,
        prompt,
        *beta,
        *alpha,
        *sample,
        *temperature,
        cfg,
    )
}

/// Contrastive decoding: the weak logits come from a separate amateur
/// checkpoint, each model under its own routing.
pub fn contrastive_decoding_generate(
    strong_model: &MoeModel,
    amateur_model: &MoeModel,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    let DecoderSpec::ContrastiveDecoding {
        strong_routing,
        amateur_routing,
        beta,
        alpha,
    } = &cfg.decoder
    else {
        return Err(Error::InvalidParameter(
            "contrastive_decoding_generate requires a ContrastiveDecoding decoder spec".into(),
        ));
    };
    let base_vocab = strong_model.config().vocab_size;
    let amateur_vocab = amateur_model.config().vocab_size;
    if base_vocab != amateur_vocab {
        return Err(Error::VocabMismatch {
            base: base_vocab,
            amateur: amateur_vocab,
        });
    }
    dual_contrast_generate(
        strong_model,
        amateur_model,
        strong_routing,
        amateur_routing,
        prompt,
        *beta,
        *alpha,
        false,
        None,
        cfg,
    )
}
