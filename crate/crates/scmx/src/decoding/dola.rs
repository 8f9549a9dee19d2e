//! Layer-contrast decoding: final-layer logits against a dynamically
//! chosen premature layer's early-exit logits.
//!
//! Per step, the candidate premature layer maximizing Jensen-Shannon
//! divergence to the final distribution is selected, and tokens in the
//! final-layer valid set are rescored by `log p_final - log p_premature`.

use super::{plausibility_mask, DecodeConfig, DecoderSpec, GenerationResult, StepDiag, TraceStep};
use crate::error::{Error, Result};
use crate::io::decode;
use crate::math::{jensen_shannon, softmax, ProbVector};
use crate::model::MoeModel;
use std::time::Instant;

/// Candidate premature layer with the largest JSD against the final
/// distribution; ties keep the earliest candidate.
pub fn select_premature_layer(
    p_final: &ProbVector,
    candidates: &[(usize, ProbVector)],
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter(
            "premature layer set must be non-empty".into(),
        ));
    }
    let mut best: Option<(usize, f64)> = None;
    for (layer, p) in candidates {
        let d = jensen_shannon(p_final, p)?;
        match best {
            Some((_, bd)) if bd >= d => {}
            _ => best = Some((*layer, d)),
        }
    }
    Ok(best.expect("non-empty candidates").0)
}

/// The two stock candidate buckets: even-numbered layers from the lower
/// or upper half of the stack.
pub fn dola_bucket(n_layers: usize, upper: bool) -> Vec<usize> {
    let (start, end) = if upper {
        (n_layers / 2, n_layers)
    } else {
        (0, n_layers / 2)
    };
    (start..end).filter(|l| l % 2 == 0).collect()
}

pub fn dola_generate(
    model: &MoeModel,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    let DecoderSpec::Dola {
        routing,
        premature_layers,
        alpha,
    } = &cfg.decoder
    else {
        return Err(Error::InvalidParameter(
            "dola_generate requires a Dola decoder spec".into(),
        ));
    };
    if prompt.is_empty() {
        return Err(Error::InvalidParameter("prompt must be non-empty".into()));
    }
    let n_layers = model.config().n_layers;
    for &l in premature_layers {
        if l >= n_layers {
            return Err(Error::LayerOutOfRange { layer: l, n_layers });
        }
    }
    if premature_layers.len() > 1 && premature_layers.contains(&(n_layers - 1)) {
        return Err(Error::InvalidParameter(
            "premature layer set may contain the final layer only when it is the sole member"
                .into(),
        ));
    }

    let started = Instant::now();
    let mut ctx = model.new_context(routing, cfg.seed)?;
    let mut step_out = model
        .forward(&mut ctx, prompt, true)?
        .pop()
        .expect("non-empty prompt");

    let mut tokens = Vec::with_capacity(cfg.max_new_tokens);
    let mut steps = Vec::with_capacity(cfg.max_new_tokens);
    let mut trace = cfg.trace_logits.then(Vec::new);
    for step in 0..cfg.max_new_tokens {
        let step_started = Instant::now();
        let z_final = &step_out.logits;
        let p_final = softmax(z_final)?;
        let valid = plausibility_mask(z_final, *alpha)?;
        let hiddens = step_out
            .hidden_by_layer
            .as_ref()
            .expect("retained by forward");

        let mut candidates = Vec::with_capacity(premature_layers.len());
        for &l in premature_layers {
            let p = softmax(&model.early_exit_logits(&hiddens[l])?)?;
            candidates.push((l, p));
        }
        let chosen_layer = select_premature_layer(&p_final, &candidates)?;
        let p_premature = &candidates
            .iter()
            .find(|(l, _)| *l == chosen_layer)
            .expect("chosen from candidates")
            .1;

        // Rescore the valid set; lowest index wins ties.
        let mut best: Option<(usize, f64)> = None;
        for &i in &valid {
            let score = p_final.get(i).ln() - p_premature.get(i).ln();
            match best {
                Some((_, bs)) if bs >= score => {}
                _ => best = Some((i, score)),
            }
        }
        let token = best.expect("valid set contains the argmax").0 as u32;

        tokens.push(token);
        steps.push(StepDiag {
            token,
            strong_logit_max: z_final.max_unmasked()?,
            weak_logit_max: None,
            v_valid_len: Some(valid.len()),
            step_ns: step_started.elapsed().as_nanos() as u64,
        });
        if let Some(tr) = trace.as_mut() {
            tr.push(TraceStep {
                strong: z_final.values().to_vec(),
                weak: None,
                valid,
            });
        }
        if cfg.stop_token == Some(token) || step + 1 == cfg.max_new_tokens {
            break;
        }
        step_out = model
            .forward(&mut ctx, &[token], true)?
            .pop()
            .expect("one token in");
    }

    Ok(GenerationResult {
        text: decode(&tokens),
        tokens,
        steps,
        total_ns: started.elapsed().as_nanos() as u64,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::routing::RoutingStrategy;

    fn model() -> MoeModel {
        MoeModel::random(ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            n_experts: 4,
            d_ff: 32,
            max_seq_len: 64,
            rng_seed: 31,
            ..ModelConfig::desk_default()
        })
        .unwrap()
    }

    fn cfg(layers: Vec<usize>, alpha: f64) -> DecodeConfig {
        let mut c = DecodeConfig::new(
            DecoderSpec::Dola {
                routing: RoutingStrategy::top_k(2),
                premature_layers: layers,
                alpha,
            },
            12,
            5,
        );
        c.trace_logits = true;
        c
    }

    #[test]
    fn bucket_presets_split_even_layers() {
        assert_eq!(dola_bucket(4, false), vec![0]);
        assert_eq!(dola_bucket(4, true), vec![2]);
        assert_eq!(dola_bucket(32, false), (0..16).filter(|l| l % 2 == 0).collect::<Vec<_>>());
        assert_eq!(dola_bucket(32, true), (16..32).filter(|l| l % 2 == 0).collect::<Vec<_>>());
    }

    #[test]
    fn final_layer_only_set_scores_zero_and_picks_lowest_valid() {
        let m = model();
        let prompt = crate::io::encode("3*3");
        let out = dola_generate(&m, &prompt, &cfg(vec![3], 0.5)).unwrap();
        for (step, tr) in out.trace.as_ref().unwrap().iter().enumerate() {
            // Scores are identically zero, so the tie rule must pick the
            // lowest-index valid token.
            let lowest = *tr.valid.iter().min().unwrap() as u32;
            assert_eq!(out.tokens[step], lowest);
        }
    }

    #[test]
    fn selection_prefers_nonzero_divergence() {
        let p_final = ProbVector::new(vec![0.7, 0.2, 0.1]).unwrap();
        let same = p_final.clone();
        let different = ProbVector::new(vec![0.1, 0.2, 0.7]).unwrap();
        // A candidate identical to the final distribution has JSD 0 and
        // must lose to any differing layer.
        let chosen =
            select_premature_layer(&p_final, &[(3, same), (1, different)]).unwrap();
        assert_eq!(chosen, 1);
    }

    #[test]
    fn emitted_tokens_stay_in_final_layer_valid_set() {
        let m = model();
        let prompt = crate::io::encode("zz");
        let out = dola_generate(&m, &prompt, &cfg(vec![0, 2], 0.1)).unwrap();
        for (step, tr) in out.trace.as_ref().unwrap().iter().enumerate() {
            assert!(tr.valid.contains(&(out.tokens[step] as usize)));
        }
    }

    #[test]
    fn layer_set_validation() {
        let m = model();
        let prompt = crate::io::encode("a");
        assert!(dola_generate(&m, &prompt, &cfg(vec![9], 0.1)).is_err());
        assert!(dola_generate(&m, &prompt, &cfg(vec![], 0.1)).is_err());
        // Final layer mixed into a larger set is rejected.
        assert!(dola_generate(&m, &prompt, &cfg(vec![0, 3], 0.1)).is_err());
    }
}
