//! Expert routing: gate computation, selection strategies, and the
//! weighted expert combination of an MoE layer.
//!
//! A router scores all experts with a softmax gate vector `w`. A
//! [`RoutingStrategy`] then picks the active subset and renormalizes the
//! surviving gates to `ŵ`:
//!
//! * `TopK(k)` keeps the k largest gates, each weighted `w_i / Σ_top w_j`.
//! * `RankK(k)` keeps only the k-th largest gate with weight exactly 1.
//! * `RandomOne` draws a single expert uniformly from the seeded rng.
//! * `DynamicThreshold(t)` walks gates in descending order until the
//!   cumulative mass strictly exceeds `t`.
//!
//! With `shared_experts = s`, the first `s` experts are always active and
//! the strategy applies to the remaining routed experts only.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math::{self, ProbVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Smallest renormalization denominator accepted before the gates are
/// declared numerically broken.
const MIN_RENORM_DENOM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RoutingKind {
    /// Activate the `k` highest-gated experts (ensemble routing when `k`
    /// differs from the training default).
    TopK(usize),
    /// Activate only the expert whose gate ranks `k`-th, weight 1.
    RankK(usize),
    /// Activate one expert drawn uniformly at random per call.
    RandomOne,
    /// Activate experts in descending gate order until the cumulative gate
    /// mass strictly exceeds the threshold.
    DynamicThreshold(f64),
}

/// How always-active shared experts are weighted relative to the routed
/// set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SharedGateMode {
    /// Shared experts keep their raw softmax gate values; routed weights
    /// renormalize among themselves. Keeps rank-k weights at exactly 1.
    #[default]
    Raw,
    /// Shared and routed gates renormalize together to sum to 1.
    Renorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingStrategy {
    pub kind: RoutingKind,
    /// Count of leading always-active experts. `None` inherits the model's
    /// configured shared-expert count; `Some(0)` disables shared experts
    /// for this pass even on a shared-expert model.
    pub shared_experts: Option<usize>,
    #[serde(default)]
    pub shared_gate: SharedGateMode,
}

impl RoutingStrategy {
    pub fn new(kind: RoutingKind) -> Self {
        Self {
            kind,
            shared_experts: None,
            shared_gate: SharedGateMode::Raw,
        }
    }

    pub fn top_k(k: usize) -> Self {
        Self::new(RoutingKind::TopK(k))
    }

    pub fn rank_k(k: usize) -> Self {
        Self::new(RoutingKind::RankK(k))
    }

    pub fn random_one() -> Self {
        Self::new(RoutingKind::RandomOne)
    }

    pub fn dynamic(threshold: f64) -> Self {
        Self::new(RoutingKind::DynamicThreshold(threshold))
    }

    pub fn with_shared(mut self, shared: usize) -> Self {
        self.shared_experts = Some(shared);
        self
    }

    pub fn with_shared_gate(mut self, mode: SharedGateMode) -> Self {
        self.shared_gate = mode;
        self
    }

    /// Shared-expert count once the model default is known.
    pub fn shared_count(&self, model_default: usize) -> usize {
        self.shared_experts.unwrap_or(model_default)
    }

    /// Returns a copy with `shared_experts` pinned to a concrete count.
    pub fn resolved(&self, model_default: usize) -> Self {
        Self {
            shared_experts: Some(self.shared_count(model_default)),
            ..*self
        }
    }

    /// Checks the strategy against a model with `n_experts` total experts,
    /// of which `model_shared` lead as the architectural shared set.
    pub fn validate(&self, n_experts: usize, model_shared: usize) -> Result<()> {
        let shared = self.shared_count(model_shared);
        if shared >= n_experts {
            return Err(Error::InvalidParameter(format!(
                "shared expert count {shared} must be below total expert count {n_experts}"
            )));
        }
        let routed = n_experts - shared;
        match self.kind {
            RoutingKind::TopK(k) | RoutingKind::RankK(k) => {
                if k == 0 || k > routed {
                    return Err(Error::InvalidParameter(format!(
                        "k = {k} out of range for {routed} routed experts"
                    )));
                }
            }
            RoutingKind::RandomOne => {}
            RoutingKind::DynamicThreshold(t) => {
                if !(t > 0.0 && t < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "dynamic threshold must lie in (0,1), got {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for RoutingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            RoutingKind::TopK(k) => write!(f, "top:{k}")?,
            RoutingKind::RankK(k) => write!(f, "rank:{k}")?,
            RoutingKind::RandomOne => write!(f, "random1")?,
            RoutingKind::DynamicThreshold(t) => write!(f, "dyn:{t}")?,
        }
        if let Some(s) = self.shared_experts {
            write!(f, "+shared:{s}")?;
        }
        Ok(())
    }
}

impl FromStr for RoutingStrategy {
    type Err = Error;

    /// Parses the compact form: `top:2`, `rank:3`, `random1`, `dyn:0.4`,
    /// optionally suffixed `+shared:2`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |s: &str| Error::InvalidParameter(format!("unknown routing strategy `{s}`"));
        let (head, shared) = match s.split_once("+shared:") {
            Some((head, tail)) => {
                let n: usize = tail.parse().map_err(|_| bad(s))?;
                (head, Some(n))
            }
            None => (s, None),
        };
        let kind = if head == "random1" {
            RoutingKind::RandomOne
        } else if let Some(k) = head.strip_prefix("top:") {
            RoutingKind::TopK(k.parse().map_err(|_| bad(s))?)
        } else if let Some(k) = head.strip_prefix("rank:") {
            RoutingKind::RankK(k.parse().map_err(|_| bad(s))?)
        } else if let Some(t) = head.strip_prefix("dyn:") {
            RoutingKind::DynamicThreshold(t.parse().map_err(|_| bad(s))?)
        } else {
            return Err(bad(s));
        };
        Ok(RoutingStrategy {
            kind,
            shared_experts: shared,
            shared_gate: SharedGateMode::Raw,
        })
    }
}

/// Softmax gate values over all experts of a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVector(ProbVector);

impl GateVector {
    pub fn new(p: ProbVector) -> Self {
        Self(p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0.get(i)
    }
}

/// The activated experts of one layer for one token, with renormalized
/// weights. Routed weights sum to 1 under [`SharedGateMode::Raw`]; entries
/// keep selection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSelection {
    /// Always-active experts and their gate weights (empty without shared
    /// experts).
    pub shared: Vec<(usize, f64)>,
    /// Strategy-selected routed experts and their renormalized weights.
    pub routed: Vec<(usize, f64)>,
}

impl ExpertSelection {
    /// All activated expert indices, shared first.
    pub fn indices(&self) -> Vec<usize> {
        self.shared
            .iter()
            .chain(self.routed.iter())
            .map(|&(i, _)| i)
            .collect()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.shared.iter().any(|&(i, _)| i == index)
            || self.routed.iter().any(|&(i, _)| i == index)
    }

    /// `(index, weight)` over every activated expert, shared first.
    pub fn weights(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.shared.iter().chain(self.routed.iter()).copied()
    }

    pub fn len(&self) -> usize {
        self.shared.len() + self.routed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gate values for one token: softmax of the router's linear map.
pub fn compute_gates(router_matrix: &Matrix, h: &[f32]) -> Result<GateVector> {
    let scores = router_matrix.matvec(h)?;
    let logits = math::LogitVector::from_f32(&scores)?;
    Ok(GateVector(math::softmax(&logits)?))
}

fn renormalize(entries: &mut [(usize, f64)]) -> Result<()> {
    let mut denom = 0.0f64;
    for &(_, w) in entries.iter() {
        denom += w;
    }
    if denom < MIN_RENORM_DENOM {
        return Err(Error::DegenerateGates { denom });
    }
    for (_, w) in entries.iter_mut() {
        *w /= denom;
    }
    Ok(())
}

/// Applies a routing strategy to a gate vector, producing the activated
/// expert set with renormalized weights. `rng` is consulted only by
/// `RandomOne`.
pub fn select_experts<R: Rng>(
    gates: &GateVector,
    strategy: &RoutingStrategy,
    rng: &mut R,
) -> Result<ExpertSelection> {
    let n = gates.len();
    let shared_n = strategy.shared_count(0);
    strategy.validate(n, shared_n)?;
    let routed_n = n - shared_n;
    let routed_gates: Vec<f64> = (shared_n..n).map(|i| gates.get(i)).collect();

    let mut routed: Vec<(usize, f64)> = match strategy.kind {
        RoutingKind::TopK(k) => {
            let ranked = math::ranked_indices(&routed_gates)?;
            let mut sel: Vec<(usize, f64)> = ranked[..k]
                .iter()
                .map(|&i| (shared_n + i, routed_gates[i]))
                .collect();
            renormalize(&mut sel)?;
            sel
        }
        RoutingKind::RankK(k) => {
            let ranked = math::ranked_indices(&routed_gates)?;
            vec![(shared_n + ranked[k - 1], 1.0)]
        }
        RoutingKind::RandomOne => {
            let i = rng.gen_range(0..routed_n);
            vec![(shared_n + i, 1.0)]
        }
        RoutingKind::DynamicThreshold(t) => {
            let ranked = math::ranked_indices(&routed_gates)?;
            let mut sel = Vec::new();
            let mut cumulative = 0.0f64;
            for &i in &ranked {
                sel.push((shared_n + i, routed_gates[i]));
                cumulative += routed_gates[i];
                if cumulative > t {
                    break;
                }
            }
            renormalize(&mut sel)?;
            sel
        }
    };

    let mut shared: Vec<(usize, f64)> = (0..shared_n).map(|i| (i, gates.get(i))).collect();
    if strategy.shared_gate == SharedGateMode::Renorm && shared_n > 0 {
        let mut all: Vec<(usize, f64)> = shared
            .iter()
            .copied()
            .chain(routed.iter().map(|&(i, _)| (i, gates.get(i))))
            .collect();
        renormalize(&mut all)?;
        shared = all[..shared_n].to_vec();
        routed = all[shared_n..].to_vec();
    }

    Ok(ExpertSelection { shared, routed })
}

/// Weighted sum of activated expert outputs: `Σ ŵ_i · E_i(h)`.
///
/// The expert map is a closure so callers can plug in anything from real
/// feed-forward blocks to test stubs.
pub fn moe_layer_forward<E>(
    h: &[f32],
    selection: &ExpertSelection,
    mut expert_eval: E,
) -> Result<Vec<f32>>
where
    E: FnMut(usize, &[f32]) -> Result<Vec<f32>>,
{
    let mut out = vec![0.0f32; h.len()];
    for (index, weight) in selection.weights() {
        let y = expert_eval(index, h)?;
        if y.len() != h.len() {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "expert {index} returned length {}, expected {}",
                    y.len(),
                    h.len()
                ),
            });
        }
        let w = weight as f32;
        for (o, v) in out.iter_mut().zip(y.iter()) {
            *o += w * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gates(v: &[f64]) -> GateVector {
        GateVector(ProbVector::new(v.to_vec()).unwrap())
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn compute_gates_identity_router() {
        let router = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = compute_gates(&router, &[0.0, 0.0]).unwrap();
        assert!((g.get(0) - 0.5).abs() < 1e-12);
        assert!((g.get(1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn compute_gates_ln2_scores() {
        // router . h = [ln 2, 0] -> gates [2/3, 1/3].
        let router = Matrix::new(2, 1, vec![2.0f32.ln(), 0.0]).unwrap();
        let g = compute_gates(&router, &[1.0]).unwrap();
        assert!((g.get(0) - 2.0 / 3.0).abs() < 1e-6);
        assert!((g.get(1) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn compute_gates_rejects_dim_mismatch() {
        let router = Matrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(compute_gates(&router, &[0.0]).is_err());
    }

    #[test]
    fn top2_renormalizes_per_gate_ratio() {
        let sel = select_experts(&gates(&[0.5, 0.3, 0.2]), &RoutingStrategy::top_k(2), &mut rng())
            .unwrap();
        assert_eq!(sel.routed.len(), 2);
        assert_eq!(sel.routed[0].0, 0);
        assert_eq!(sel.routed[1].0, 1);
        assert!((sel.routed[0].1 - 0.625).abs() < 1e-12);
        assert!((sel.routed[1].1 - 0.375).abs() < 1e-12);
    }

    #[test]
    fn rank_k_selects_kth_with_unit_weight() {
        let sel = select_experts(&gates(&[0.5, 0.3, 0.2]), &RoutingStrategy::rank_k(2), &mut rng())
            .unwrap();
        assert_eq!(sel.routed, vec![(1, 1.0)]);
    }

    #[test]
    fn dynamic_threshold_walks_until_exceeded() {
        let sel = select_experts(&gates(&[0.5, 0.3, 0.2]), &RoutingStrategy::dynamic(0.6), &mut rng())
            .unwrap();
        let idx: Vec<usize> = sel.routed.iter().map(|&(i, _)| i).collect();
        assert_eq!(idx, vec![0, 1]);
        assert!((sel.routed[0].1 - 0.625).abs() < 1e-12);
        assert!((sel.routed[1].1 - 0.375).abs() < 1e-12);
    }

    #[test]
    fn dynamic_threshold_limits() {
        // Tiny threshold: exactly the top-1 expert.
        let sel = select_experts(&gates(&[0.5, 0.3, 0.2]), &RoutingStrategy::dynamic(1e-9), &mut rng())
            .unwrap();
        assert_eq!(sel.routed.len(), 1);
        assert_eq!(sel.routed[0].0, 0);
        // Threshold within min-gate of 1: every expert survives.
        let sel = select_experts(
            &gates(&[0.5, 0.3, 0.2]),
            &RoutingStrategy::dynamic(1.0 - 0.1),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(sel.routed.len(), 3);
    }

    #[test]
    fn rank1_matches_top1() {
        let mut r = rng();
        for _ in 0..50 {
            let mut v: Vec<f64> = (0..8).map(|_| r.gen_range(0.01..1.0)).collect();
            let sum: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= sum);
            let g = gates(&v);
            let a = select_experts(&g, &RoutingStrategy::rank_k(1), &mut rng()).unwrap();
            let b = select_experts(&g, &RoutingStrategy::top_k(1), &mut rng()).unwrap();
            assert_eq!(a.routed[0].0, b.routed[0].0);
        }
    }

    #[test]
    fn top_k_is_gate_mass_optimal_by_brute_force() {
        let mut r = rng();
        for _ in 0..20 {
            let mut v: Vec<f64> = (0..6).map(|_| r.gen_range(0.01..1.0)).collect();
            let sum: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= sum);
            let g = gates(&v);
            for k in 1..=4usize {
                let sel = select_experts(&g, &RoutingStrategy::top_k(k), &mut rng()).unwrap();
                let picked: f64 = sel.routed.iter().map(|&(i, _)| v[i]).sum();
                // Enumerate every k-subset mass.
                let mut best = 0.0f64;
                for bits in 0u32..(1 << 6) {
                    if bits.count_ones() as usize != k {
                        continue;
                    }
                    let mass: f64 = (0..6).filter(|&i| bits & (1 << i) != 0).map(|i| v[i]).sum();
                    best = best.max(mass);
                }
                assert!(picked >= best - 1e-12);
            }
        }
    }

    #[test]
    fn random_one_is_reproducible_and_near_uniform() {
        let g = gates(&[0.125; 8]);
        let strat = RoutingStrategy::random_one();
        let mut a = ChaCha8Rng::seed_from_u64(99);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let x = select_experts(&g, &strat, &mut a).unwrap();
            let y = select_experts(&g, &strat, &mut b).unwrap();
            assert_eq!(x.routed, y.routed);
        }
        let mut counts = [0usize; 8];
        let mut r = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10_000 {
            let sel = select_experts(&g, &strat, &mut r).unwrap();
            counts[sel.routed[0].0] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.125).abs() <= 0.02, "frequency {freq} off uniform");
        }
    }

    #[test]
    fn shared_experts_ride_along_with_raw_gates() {
        // Experts 0..2 shared; rank-1 routing applies to experts 2..5.
        let g = gates(&[0.3, 0.2, 0.1, 0.25, 0.15]);
        let strat = RoutingStrategy::rank_k(1).with_shared(2);
        let sel = select_experts(&g, &strat, &mut rng()).unwrap();
        assert_eq!(sel.shared, vec![(0, 0.3), (1, 0.2)]);
        assert_eq!(sel.routed, vec![(3, 1.0)]);
    }

    #[test]
    fn shared_renorm_mode_sums_to_one_overall() {
        let g = gates(&[0.3, 0.2, 0.1, 0.25, 0.15]);
        let strat = RoutingStrategy::top_k(2)
            .with_shared(2)
            .with_shared_gate(SharedGateMode::Renorm);
        let sel = select_experts(&g, &strat, &mut rng()).unwrap();
        let total: f64 = sel.weights().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let g = gates(&[0.5, 0.5]);
        assert!(select_experts(&g, &RoutingStrategy::top_k(3), &mut rng()).is_err());
        assert!(select_experts(&g, &RoutingStrategy::rank_k(0), &mut rng()).is_err());
        assert!(select_experts(&g, &RoutingStrategy::dynamic(1.5), &mut rng()).is_err());
    }

    #[test]
    fn degenerate_renorm_is_surfaced() {
        let mut entries = vec![(0usize, 1e-13f64), (1, 1e-14)];
        assert!(matches!(
            renormalize(&mut entries).unwrap_err(),
            Error::DegenerateGates { .. }
        ));
    }

    #[test]
    fn strategy_string_round_trip() {
        for s in ["top:2", "rank:3", "random1", "dyn:0.4", "top:6+shared:2"] {
            let parsed: RoutingStrategy = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!("topk:2".parse::<RoutingStrategy>().is_err());
        assert!("top:x".parse::<RoutingStrategy>().is_err());
        assert!("".parse::<RoutingStrategy>().is_err());
    }

    #[test]
    fn moe_forward_weighted_sum() {
        let sel = ExpertSelection {
            shared: vec![],
            routed: vec![(0, 0.625), (1, 0.375)],
        };
        // Experts with constant outputs [1,0] and [0,1].
        let out = moe_layer_forward(&[9.0, 9.0], &sel, |i, _h| {
            Ok(if i == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
        })
        .unwrap();
        assert!((out[0] - 0.625).abs() < 1e-6);
        assert!((out[1] - 0.375).abs() < 1e-6);
    }

    #[test]
    fn moe_forward_identity_expert() {
        let sel = ExpertSelection {
            shared: vec![],
            routed: vec![(2, 1.0)],
        };
        let h = [1.0f32, -2.0, 3.0];
        let out = moe_layer_forward(&h, &sel, |_, x| Ok(x.to_vec())).unwrap();
        assert_eq!(out, h.to_vec());
    }

    #[test]
    fn moe_forward_split_equals_single() {
        // Half weight on two identical experts equals one expert at weight 1.
        let h = [0.5f32, 0.25];
        let eval = |_: usize, x: &[f32]| Ok(x.iter().map(|v| v * 2.0).collect());
        let split = ExpertSelection {
            shared: vec![],
            routed: vec![(0, 0.5), (1, 0.5)],
        };
        let single = ExpertSelection {
            shared: vec![],
            routed: vec![(0, 1.0)],
        };
        let a = moe_layer_forward(&h, &split, eval).unwrap();
        let b = moe_layer_forward(&h, &single, eval).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn moe_forward_is_linear_in_expert_scale() {
        let sel = ExpertSelection {
            shared: vec![],
            routed: vec![(0, 0.7), (1, 0.3)],
        };
        let h = [1.0f32, 2.0];
        let base = moe_layer_forward(&h, &sel, |i, x| {
            Ok(x.iter().map(|v| v + i as f32).collect())
        })
        .unwrap();
        let scaled = moe_layer_forward(&h, &sel, |i, x| {
            Ok(x.iter().map(|v| 3.0 * (v + i as f32)).collect())
        })
        .unwrap();
        for (b, s) in base.iter().zip(scaled.iter()) {
            assert!((s - 3.0 * b).abs() < 1e-5);
        }
    }

    #[test]
    fn moe_forward_propagates_out_of_range() {
        let sel = ExpertSelection {
            shared: vec![],
            routed: vec![(5, 1.0)],
        };
        let experts = [1.0f32];
        let res = moe_layer_forward(&[1.0], &sel, |i, _| {
            experts
                .get(i)
                .map(|_| vec![0.0])
                .ok_or(Error::InvalidParameter(format!("expert {i} out of range")))
        });
        assert!(res.is_err());
    }
}
