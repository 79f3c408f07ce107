//! Mini-batch index composition by chained quantile selection, and the
//! heuristic baseline schedules.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scheduler::{log_prob, PolicyHeads, QuantileAction};
use crate::simgrid::{nearest_rank, value_index_cmp};

/// Ordered local indices of one mini-batch and the quantiles consumed to build it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    /// `(anchor, q)` for every chaining step, in order.
    pub quantiles_used: Vec<(usize, f64)>,
    pub log_density: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SamplingPolicySpec {
    Falcon,
    Fixed(f64),
    ProgressiveHardening,
    ProgressiveSoftening,
    Uniform,
}

impl SamplingPolicySpec {
    pub fn is_learned(self) -> bool {
        matches!(self, SamplingPolicySpec::Falcon)
    }
}

impl fmt::Display for SamplingPolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingPolicySpec::Falcon => f.write_str("falcon"),
            SamplingPolicySpec::Fixed(q) => write!(f, "fixed:{q:?}"),
            SamplingPolicySpec::ProgressiveHardening => f.write_str("hardening"),
            SamplingPolicySpec::ProgressiveSoftening => f.write_str("softening"),
            SamplingPolicySpec::Uniform => f.write_str("uniform"),
        }
    }
}

impl FromStr for SamplingPolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "falcon" => SamplingPolicySpec::Falcon,
            "hardening" => SamplingPolicySpec::ProgressiveHardening,
            "softening" => SamplingPolicySpec::ProgressiveSoftening,
            "uniform" => SamplingPolicySpec::Uniform,
            _ => {
                let q = s
                    .strip_prefix("fixed:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "unknown policy '{s}' (expected falcon, fixed:<q>, hardening, softening or uniform)"
                        ))
                    })?;
                if !(0.0..=1.0).contains(&q) {
                    return Err(Error::Config(format!("fixed quantile {q} outside [0, 1]")));
                }
                SamplingPolicySpec::Fixed(q)
            }
        })
    }
}

impl From<SamplingPolicySpec> for String {
    fn from(s: SamplingPolicySpec) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for SamplingPolicySpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Index in `unselected` whose value in `row` is the nearest-rank
/// `q`-quantile of `{row[j] : j ∈ unselected}`. Equal values resolve to the
/// lowest index.
pub fn quantile_select(row: &[f64], unselected: &[usize], q: f64) -> Result<usize> {
    if unselected.is_empty() {
        return Err(Error::Contract("quantile selection over an empty candidate set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Contract(format!("quantile level {q} outside [0, 1]")));
    }
    let mut cand: Vec<(f64, usize)> = unselected.iter().map(|&j| (row[j], j)).collect();
    let rank = nearest_rank(q, cand.len());
    let (_, picked, _) = cand.select_nth_unstable_by(rank, value_index_cmp);
    Ok(picked.1)
}

/// Composes one mini-batch from `unselected` (removing what it takes).
///
/// The first index is drawn uniformly; every following index is the
/// `q_i`-quantile pick from row `i` of `s`, where `i` is the most recently
/// selected index. Each chaining anchor's quantile is marked consumed in
/// `action`, and with `heads` present its Beta log-density is accumulated.
pub fn compose_batch<R: Rng + ?Sized>(
    s: &Matrix,
    unselected: &mut Vec<usize>,
    batch_size: usize,
    action: &mut QuantileAction,
    heads: Option<&PolicyHeads>,
    rng: &mut R,
) -> Result<BatchPlan> {
    if batch_size < 1 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    if unselected.is_empty() {
        return Err(Error::Contract("no unselected candidates left".into()));
    }
    let pos = rng.gen_range(0..unselected.len());
    let mut current = unselected.remove(pos);
    let mut plan = BatchPlan {
        indices: vec![current],
        quantiles_used: Vec::with_capacity(batch_size.saturating_sub(1)),
        log_density: 0.0,
    };
    while plan.indices.len() < batch_size && !unselected.is_empty() {
        let q = action.q[current];
        let next = quantile_select(s.row(current), unselected, q)?;
        action.consumed[current] = true;
        plan.quantiles_used.push((current, q));
        if let Some(h) = heads {
            plan.log_density += log_prob(h.alpha[current], h.beta[current], q)?;
        }
        let at = unselected.binary_search(&next).expect("picked index is unselected");
        unselected.remove(at);
        plan.indices.push(next);
        current = next;
    }
    action.log_density += plan.log_density;
    Ok(plan)
}

/// Number of batches drawn from a space of `len` items.
pub fn batches_per_space(len: usize, batch_size: usize, drop_tail: bool) -> usize {
    if drop_tail {
        len / batch_size
    } else {
        len.div_ceil(batch_size)
    }
}

/// Plain shuffled batching over local indices `0..len`.
pub fn uniform_batches<R: Rng + ?Sized>(len: usize, batch_size: usize, drop_tail: bool, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let count = batches_per_space(len, batch_size, drop_tail);
    order.chunks(batch_size).take(count).map(<[usize]>::to_vec).collect()
}

/// Constant-quantile action for a heuristic schedule at `epoch`; `None` for
/// uniform batching, which bypasses chaining altogether.
pub fn baseline_action(spec: SamplingPolicySpec, epoch: usize, total_epochs: usize, n: usize) -> Result<Option<QuantileAction>> {
    if epoch >= total_epochs {
        return Err(Error::Contract(format!("epoch {epoch} outside a {total_epochs}-epoch run")));
    }
    let span = (total_epochs.max(2) - 1) as f64;
    let q = match spec {
        SamplingPolicySpec::Fixed(q) => q,
        SamplingPolicySpec::ProgressiveHardening => (epoch as f64 / span).min(1.0),
        SamplingPolicySpec::ProgressiveSoftening => (total_epochs.saturating_sub(1 + epoch) as f64 / span).max(0.0),
        SamplingPolicySpec::Uniform => return Ok(None),
        SamplingPolicySpec::Falcon => {
            return Err(Error::Contract("the learned policy has no fixed baseline action".into()))
        }
    };
    Ok(Some(QuantileAction::constant(n, q)))
}
