//! Majority voting over repeated sampling runs, plus the final-number
//! answer extractor used for arithmetic word problems.

use crate::error::{Error, Result};
use crate::par;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Outcome of a majority vote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    /// The modal answer; ties break toward the answer whose first
    /// occurrence has the lowest sample index.
    pub answer: String,
    /// `(answer, count)` in first-occurrence order.
    pub counts: Vec<(String, usize)>,
    pub n_samples: usize,
    /// Samples that produced an extractable answer.
    pub n_valid: usize,
}

/// Runs `n` sampling generations with seeds `base_seed + 0 .. base_seed +
/// n - 1`, extracts an answer from each, and returns the majority vote.
/// Samples are independent and fan out to parallel workers; votes merge in
/// sample order, so the outcome does not depend on worker count.
pub fn self_consistency<G, E>(
    n: usize,
    base_seed: u64,
    generate_sample: G,
    extract: E,
) -> Result<VoteOutcome>
where
    G: Fn(u64) -> Result<String> + Sync + Send,
    E: Fn(&str) -> Option<String> + Sync + Send,
{
    if n == 0 {
        return Err(Error::InvalidParameter("vote needs n >= 1 samples".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let texts = par::map_in_order(&seeds, |&seed| generate_sample(seed));

    let mut counts: Vec<(String, usize)> = Vec::new();
    let mut n_valid = 0usize;
    for text in texts {
        let text = text?;
        let Some(answer) = extract(&text) else {
            continue;
        };
        n_valid += 1;
        match counts.iter_mut().find(|(a, _)| *a == answer) {
            Some((_, c)) => *c += 1,
            None => counts.push((answer, 1)),
        }
    }
    if counts.is_empty() {
        return Err(Error::NoVotableAnswers);
    }
    // Max count; earlier first occurrence wins ties because the scan keeps
    // strictly-greater replacements only.
    let mut winner = 0usize;
    for (i, (_, c)) in counts.iter().enumerate() {
        if *c > counts[winner].1 {
            winner = i;
        }
    }
    Ok(VoteOutcome {
        answer: counts[winner].0.clone(),
        counts,
        n_samples: n,
        n_valid,
    })
}

fn number_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d[\d,]*(?:\.\d+)?").expect("valid pattern"))
}

/// The last decimal number in `text`, with comma separators stripped and
/// any trailing period dropped. `None` when no number is present.
pub fn extract_numeric_answer(text: &str) -> Option<String> {
    let m = number_pattern().find_iter(text).last()?;
    let cleaned: String = m.as_str().chars().filter(|&c| c != ',').collect();
    Some(cleaned.trim_end_matches('.').to_string())
}
