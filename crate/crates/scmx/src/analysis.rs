//! Diagnostic studies: per-position KL-divergence heatmaps over routing
//! strategies, token-class aggregation, unchosen-expert utilization, and
//! a latency harness.
//!
//! Heatmaps and reports store raw nats; any display scaling is a rendering
//! concern. Corpus-level aggregation fans out per example and merges
//! partial sums in input order, so results are identical for any worker
//! count.

use crate::decoding::{generate, DecodeConfig, DecoderSpec};
use crate::error::{Error, Result};
use crate::io::{encode_continuation, token_display, CorpusEntry, BOS};
use crate::math::{kl_divergence, softmax, ProbVector};
use crate::model::MoeModel;
use crate::par;
use crate::routing::RoutingStrategy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Write;
use std::sync::OnceLock;

/// Direction of the divergence between the two routing regimes. The
/// default puts the strong pass first: `KL(p_strong || p_weak)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KlDirection {
    #[default]
    StrongToWeak,
    WeakToStrong,
}

/// Per-position divergences between a strong routing strategy and a list
/// of weak ones, over a teacher-forced reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KldHeatmap {
    /// Display label per reference token.
    pub positions: Vec<String>,
    /// Strategy label per compared variant.
    pub k_values: Vec<String>,
    /// `matrix[position][variant]`, non-negative nats.
    pub matrix: Vec<Vec<f64>>,
}

/// Teacher-forces `prompt ++ reference` once per strategy and compares
/// next-token distributions at every reference position.
pub fn kld_heatmap(
    model: &MoeModel,
    prompt: &[u32],
    reference: &[u32],
    strong: &RoutingStrategy,
    weak_list: &[RoutingStrategy],
    direction: KlDirection,
    seed: u64,
) -> Result<KldHeatmap> {
    if reference.is_empty() {
        return Err(Error::InvalidParameter("reference must be non-empty".into()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidParameter("prompt must be non-empty".into()));
    }

    let full: Vec<u32> = prompt.iter().chain(reference.iter()).copied().collect();
    let teacher_force = |strategy: &RoutingStrategy| -> Result<Vec<ProbVector>> {
        let mut ctx = model.new_context(strategy, seed)?;
        let outputs = model.forward(&mut ctx, &full, false)?;
        // The distribution predicting reference token t sits at position
        // prompt_len - 1 + t.
        outputs[prompt.len() - 1..prompt.len() - 1 + reference.len()]
            .iter()
            .map(|o| softmax(&o.logits))
            .collect()
    };

    let mut strategies: Vec<RoutingStrategy> = vec![*strong];
    strategies.extend_from_slice(weak_list);
    let mut runs = par::map_in_order(&strategies, |s| teacher_force(s));
    let strong_probs = runs.remove(0)?;
    let weak_probs: Vec<Vec<ProbVector>> = runs.into_iter().collect::<Result<_>>()?;

    let mut matrix = Vec::with_capacity(reference.len());
    for t in 0..reference.len() {
        let mut row = Vec::with_capacity(weak_list.len());
        for weak in &weak_probs {
            let d = match direction {
                KlDirection::StrongToWeak => kl_divergence(&strong_probs[t], &weak[t])?,
                KlDirection::WeakToStrong => kl_divergence(&weak[t], &strong_probs[t])?,
            };
            row.push(d);
        }
        matrix.push(row);
    }

    Ok(KldHeatmap {
        positions: reference.iter().map(|&t| token_display(t)).collect(),
        k_values: weak_list.iter().map(|s| s.to_string()).collect(),
        matrix,
    })
}

/// The regex marking arithmetic expressions inside reference answers:
/// digit runs (with comma or point separators) chained by `+ - * / =`,
/// plus bare `=`-terminated forms.
pub const EXPRESSION_PATTERN: &str =
    r"[0-9][0-9,.]*(?:[+\-*/=][0-9][0-9,.]*)+=?|[0-9][0-9,.]*=";

fn expression_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(EXPRESSION_PATTERN).expect("valid pattern"))
}

/// A stopword list, one lowercase word per line.
#[derive(Debug, Clone)]
pub struct StopwordSet {
    words: HashSet<String>,
}

impl StopwordSet {
    /// The vendored English list shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_text(include_str!("../data/stopwords.txt"))
    }

    pub fn from_text(text: &str) -> Self {
        let words = text
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        Self { words }
    }

    pub fn from_path<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        Ok(Self::from_text(&std::fs::read_to_string(path)?))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Case-insensitive membership after stripping surrounding
    /// whitespace and punctuation from the token.
    pub fn contains_token(&self, token: &str) -> bool {
        let normalized = token
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        !normalized.is_empty() && self.words.contains(&normalized)
    }
}

/// A token's byte range within the reference string it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Spans for the byte-level tokenizer: one per reference byte.
pub fn byte_token_spans(reference: &str) -> Vec<TokenSpan> {
    reference
        .bytes()
        .enumerate()
        .map(|(i, b)| TokenSpan {
            text: char::from(b).to_string(),
            start: i,
            end: i + 1,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TokenClasses {
    pub expression: bool,
    pub stopword: bool,
}

/// Classifies each token span: Expression membership means overlapping a
/// maximal substring of `reference` matching [`EXPRESSION_PATTERN`];
/// Stopword membership is a normalized lookup of the token text.
pub fn classify_tokens(
    reference: &str,
    spans: &[TokenSpan],
    stopwords: &StopwordSet,
) -> Vec<TokenClasses> {
    let ranges: Vec<(usize, usize)> = expression_regex()
        .find_iter(reference)
        .map(|m| (m.start(), m.end()))
        .collect();
    spans
        .iter()
        .map(|span| TokenClasses {
            expression: ranges
                .iter()
                .any(|&(s, e)| span.start < e && span.end > s),
            stopword: stopwords.contains_token(&span.text),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenClass {
    All,
    Expression,
    Stopword,
}

impl TokenClass {
    pub const ALL: [TokenClass; 3] = [TokenClass::All, TokenClass::Expression, TokenClass::Stopword];

    pub fn as_str(&self) -> &'static str {
        match self {
            TokenClass::All => "All",
            TokenClass::Expression => "Expression",
            TokenClass::Stopword => "Stopword",
        }
    }
}

/// Mean per-token divergence for one token class, per weak strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: TokenClass,
    pub count: usize,
    /// One entry per strategy; `None` when the class is empty.
    pub mean_kld: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenClassReport {
    pub strategies: Vec<String>,
    pub classes: Vec<ClassStats>,
}

struct EntryStats {
    sums: [Vec<f64>; 3],
    counts: [usize; 3],
}

/// Corpus-level mean KLD per token class per weak strategy.
pub fn kld_aggregate(
    model: &MoeModel,
    corpus: &[CorpusEntry],
    strong: &RoutingStrategy,
    weak_list: &[RoutingStrategy],
    stopwords: &StopwordSet,
    direction: KlDirection,
    seed: u64,
) -> Result<TokenClassReport> {
    let n_weak = weak_list.len();
    let per_entry = par::map_in_order(corpus, |entry| -> Result<EntryStats> {
        let prompt = crate::io::encode(&entry.prompt);
        let reference = encode_continuation(&entry.reference);
        let heatmap = kld_heatmap(model, &prompt, &reference, strong, weak_list, direction, seed)?;
        let spans = byte_token_spans(&entry.reference);
        let classes = classify_tokens(&entry.reference, &spans, stopwords);
        let mut stats = EntryStats {
            sums: [vec![0.0; n_weak], vec![0.0; n_weak], vec![0.0; n_weak]],
            counts: [0; 3],
        };
        for (t, cls) in classes.iter().enumerate() {
            let member = [true, cls.expression, cls.stopword];
            for (ci, &is_member) in member.iter().enumerate() {
                if !is_member {
                    continue;
                }
                stats.counts[ci] += 1;
                for k in 0..n_weak {
                    stats.sums[ci][k] += heatmap.matrix[t][k];
                }
            }
        }
        Ok(stats)
    });

    let mut sums = [vec![0.0f64; n_weak], vec![0.0; n_weak], vec![0.0; n_weak]];
    let mut counts = [0usize; 3];
    for stats in per_entry {
        let stats = stats?;
        for ci in 0..3 {
            counts[ci] += stats.counts[ci];
            for k in 0..n_weak {
                sums[ci][k] += stats.sums[ci][k];
            }
        }
    }

    let classes = TokenClass::ALL
        .iter()
        .enumerate()
        .map(|(ci, &class)| ClassStats {
            class,
            count: counts[ci],
            mean_kld: (0..n_weak)
                .map(|k| (counts[ci] > 0).then(|| sums[ci][k] / counts[ci] as f64))
                .collect(),
        })
        .collect();

    Ok(TokenClassReport {
        strategies: weak_list.iter().map(|s| s.to_string()).collect(),
        classes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerUtilization {
    pub layer: usize,
    pub slots: usize,
    pub hits: usize,
    pub ratio: f64,
}

/// Fraction of (layer, position) slots where the weak pass's single routed
/// expert is not in the strong pass's activated set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub total_slots: usize,
    pub unchosen_hits: usize,
    pub ratio: f64,
    pub per_layer: Vec<LayerUtilization>,
}

/// Teacher-forces `prompt ++ reference` through two independent passes and
/// counts where the weak expert falls outside the strong selection. The
/// weak strategy must activate exactly one routed expert per slot.
pub fn expert_utilization(
    model: &MoeModel,
    prompt: &[u32],
    reference: &[u32],
    strong: &RoutingStrategy,
    weak: &RoutingStrategy,
    seed: u64,
) -> Result<UtilizationReport> {
    let full: Vec<u32> = prompt.iter().chain(reference.iter()).copied().collect();
    if full.is_empty() {
        return Err(Error::InvalidParameter("empty token sequence".into()));
    }
    let run = |strategy: &RoutingStrategy, seed: u64| -> Result<Vec<Vec<(usize, crate::routing::ExpertSelection)>>> {
        let mut ctx = model.new_context(strategy, seed)?;
        let outputs = model.forward(&mut ctx, &full, false)?;
        Ok(outputs
            .into_iter()
            .map(|o| {
                o.layer_records
                    .into_iter()
                    .map(|r| (r.layer, r.selection))
                    .collect()
            })
            .collect())
    };
    let (strong_sel, weak_sel) = par::join2(
        || run(strong, seed),
        || run(weak, seed ^ crate::decoding::WEAK_SEED_MIX),
    );
    let strong_sel = strong_sel?;
    let weak_sel = weak_sel?;

    let mut per_layer: Vec<LayerUtilization> = Vec::new();
    let mut total_slots = 0usize;
    let mut unchosen_hits = 0usize;
    for (strong_pos, weak_pos) in strong_sel.iter().zip(weak_sel.iter()) {
        for ((layer, strong_selection), (_, weak_selection)) in
            strong_pos.iter().zip(weak_pos.iter())
        {
            if weak_selection.routed.len() != 1 {
                return Err(Error::MultiExpertWeak);
            }
            let weak_expert = weak_selection.routed[0].0;
            let hit = !strong_selection.contains(weak_expert);
            total_slots += 1;
            unchosen_hits += hit as usize;
            match per_layer.iter_mut().find(|l| l.layer == *layer) {
                Some(l) => {
                    l.slots += 1;
                    l.hits += hit as usize;
                }
                None => per_layer.push(LayerUtilization {
                    layer: *layer,
                    slots: 1,
                    hits: hit as usize,
                    ratio: 0.0,
                }),
            }
        }
    }
    for l in per_layer.iter_mut() {
        l.ratio = l.hits as f64 / l.slots as f64;
    }
    Ok(UtilizationReport {
        total_slots,
        unchosen_hits,
        ratio: if total_slots == 0 {
            0.0
        } else {
            unchosen_hits as f64 / total_slots as f64
        },
        per_layer,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyRow {
    pub method: String,
    pub mean_ns_per_token: f64,
    pub ratio_vs_greedy: f64,
}

/// Times each decoding method over a fixed synthetic prompt, forcing
/// exactly `gen_len` emissions (stop tokens ignored). One warm-up run per
/// method is discarded; `repetitions` timed runs are averaged. Ratios are
/// against the greedy entry, which is prepended when absent.
pub fn latency_bench(
    model: &MoeModel,
    amateur: Option<&MoeModel>,
    methods: &[(String, DecodeConfig)],
    prompt_len: usize,
    gen_len: usize,
    repetitions: usize,
) -> Result<Vec<LatencyRow>> {
    if prompt_len == 0 || gen_len == 0 || repetitions == 0 {
        return Err(Error::InvalidParameter(
            "prompt_len, gen_len, and repetitions must be positive".into(),
        ));
    }
    let needed = prompt_len + gen_len;
    let max = model.config().max_seq_len;
    if needed > max {
        return Err(Error::ContextOverflow {
            requested: needed,
            max,
        });
    }

    // Deterministic synthetic prompt: BOS plus seeded bytes.
    let mut rng = ChaCha8Rng::seed_from_u64(0x17EC);
    let mut prompt = vec![BOS];
    prompt.extend((1..prompt_len).map(|_| rng.gen_range(0u32..256)));

    let mut methods: Vec<(String, DecodeConfig)> = methods.to_vec();
    let has_greedy = methods
        .iter()
        .any(|(_, c)| matches!(c.decoder, DecoderSpec::Greedy { .. }));
    if !has_greedy {
        methods.insert(
            0,
            (
                "greedy".to_string(),
                DecodeConfig::new(
                    DecoderSpec::Greedy {
                        routing: RoutingStrategy::top_k(2),
                    },
                    gen_len,
                    0,
                ),
            ),
        );
    }

    let mut means = Vec::with_capacity(methods.len());
    for (_, cfg) in &methods {
        let forced = DecodeConfig {
            max_new_tokens: gen_len,
            stop_token: None,
            trace_logits: false,
            ..cfg.clone()
        };
        // Warm-up, then timed repetitions.
        generate(model, amateur, &prompt, &forced)?;
        let mut total = 0u64;
        for _ in 0..repetitions {
            let out = generate(model, amateur, &prompt, &forced)?;
            debug_assert_eq!(out.tokens.len(), gen_len);
            total += out.total_ns;
        }
        means.push(total as f64 / repetitions as f64 / gen_len as f64);
    }

    let baseline = methods
        .iter()
        .position(|(_, c)| matches!(c.decoder, DecoderSpec::Greedy { .. }))
        .map(|i| means[i])
        .expect("greedy present by construction");

    Ok(methods
        .iter()
        .zip(means.iter())
        .map(|((name, _), &mean)| LatencyRow {
            method: name.clone(),
            mean_ns_per_token: mean,
            ratio_vs_greedy: mean / baseline,
        })
        .collect())
}

/// CSV with columns `position,token,k,kld_nats`.
pub fn write_heatmap_csv<W: Write>(w: W, heatmap: &KldHeatmap) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["position", "token", "k", "kld_nats"])
        .map_err(csv_err)?;
    for (pos, row) in heatmap.matrix.iter().enumerate() {
        for (k, value) in row.iter().enumerate() {
            csv.write_record([
                pos.to_string(),
                heatmap.positions[pos].clone(),
                heatmap.k_values[k].clone(),
                format!("{value}"),
            ])
            .map_err(csv_err)?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// CSV with columns `class,strategy,mean_kld,count`, preceded by a comment
/// line quoting the expression pattern in force.
pub fn write_class_report_csv<W: Write>(mut w: W, report: &TokenClassReport) -> Result<()> {
    writeln!(w, "# expression_pattern={EXPRESSION_PATTERN}")?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["class", "strategy", "mean_kld", "count"])
        .map_err(csv_err)?;
    for stats in &report.classes {
        for (k, strategy) in report.strategies.iter().enumerate() {
            csv.write_record([
                stats.class.as_str().to_string(),
                strategy.clone(),
                stats.mean_kld[k].map(|m| format!("{m}")).unwrap_or_default(),
                stats.count.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// CSV with columns `method,mean_ns_per_token,ratio_vs_greedy`.
pub fn write_latency_csv<W: Write>(w: W, rows: &[LatencyRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["method", "mean_ns_per_token", "ratio_vs_greedy"])
        .map_err(csv_err)?;
    for row in rows {
        csv.write_record([
            row.method.clone(),
            format!("{:.0}", row.mean_ns_per_token),
            format!("{:.4}", row.ratio_vs_greedy),
        ])
        .map_err(csv_err)?;
    }
    csv.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidParameter(format!("csv: {e}"))
}
