//! Contrastive search: a look-ahead decoder that trades model confidence
//! against a degeneration penalty.
//!
//! Each of the top-k candidates is pushed through a one-step look-ahead
//! forward; its final hidden state is compared against every previous
//! context hidden, and the candidate score is
//! `(1 - penalty) * p(candidate) - penalty * max_cosine`.

use super::{DecodeConfig, DecoderSpec, GenerationResult, StepDiag};
use crate::error::{Error, Result};
use crate::io::decode;
use crate::math::{ranked_indices, softmax};
use crate::model::MoeModel;
use std::time::Instant;

/// The candidate score; public so the arithmetic can be checked directly.
pub fn contrastive_search_score(prob: f64, max_cosine: f64, penalty: f64) -> f64 {
    (1.0 - penalty) * prob - penalty * max_cosine
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom < 1e-30 {
        0.0
    } else {
        dot / denom
    }
}

pub fn contrastive_search_generate(
    model: &MoeModel,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    let DecoderSpec::ContrastiveSearch {
        routing,
        top_k,
        penalty,
    } = &cfg.decoder
    else {
        return Err(Error::InvalidParameter(
            "contrastive_search_generate requires a ContrastiveSearch decoder spec".into(),
        ));
    };
    if prompt.is_empty() {
        return Err(Error::InvalidParameter("prompt must be non-empty".into()));
    }
    let vocab = model.config().vocab_size;
    if *top_k > vocab {
        return Err(Error::InvalidParameter(format!(
            "top_k {top_k} exceeds vocab size {vocab}"
        )));
    }

    let started = Instant::now();
    let mut ctx = model.new_context(routing, cfg.seed)?;
    let prefill = model.forward(&mut ctx, prompt, false)?;
    let mut hiddens: Vec<Vec<f32>> = prefill.iter().map(|o| o.hidden_final.clone()).collect();
    let mut z = prefill.last().expect("non-empty prompt").logits.clone();

    let mut tokens = Vec::with_capacity(cfg.max_new_tokens);
    let mut steps = Vec::with_capacity(cfg.max_new_tokens);
    for step in 0..cfg.max_new_tokens {
        let step_started = Instant::now();
        let p = softmax(&z)?;
        let ranked = ranked_indices(p.values())?;
        let candidates = &ranked[..*top_k];

        let mut best: Option<(u32, f64)> = None;
        for &cand in candidates {
            let mut look = ctx.clone();
            let out = model.forward(&mut look, &[cand as u32], false)?;
            let h_cand = &out[0].hidden_final;
            let mut max_cos = f64::NEG_INFINITY;
            for h_prev in &hiddens {
                max_cos = max_cos.max(cosine(h_cand, h_prev));
            }
            let score = contrastive_search_score(p.get(cand), max_cos, *penalty);
            match best {
                Some((_, bs)) if bs >= score => {}
                _ => best = Some((cand as u32, score)),
            }
        }
        let token = best.expect("top_k >= 1").0;

        tokens.push(token);
        steps.push(StepDiag {
            token,
            strong_logit_max: z.max_unmasked()?,
            weak_logit_max: None,
            v_valid_len: None,
            step_ns: step_started.elapsed().as_nanos() as u64,
        });
        if cfg.stop_token == Some(token) || step + 1 == cfg.max_new_tokens {
            break;
        }
        let out = model
            .forward(&mut ctx, &[token], false)?
            .pop()
            .expect("one token in");
        hiddens.push(out.hidden_final.clone());
        z = out.logits;
    }

    Ok(GenerationResult {
        text: decode(&tokens),
        tokens,
        steps,
        total_ns: started.elapsed().as_nanos() as u64,
        trace: None,
    })
}
