//! The negative-mining scheduler: a residual MLP applied row-wise to the
//! normalized quantile summary, producing one Beta(α, β) head per anchor, and
//! its score-function (REINFORCE) update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::beta;
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, softplus, Matrix};
use crate::optim::{Optimizer, OptimizerConfig, ParamSet};
use crate::simgrid::{invert_permutation, sort_rows, SimilaritySummary};

/// Floor added after softplus so both Beta parameters stay positive.
pub const PARAM_FLOOR: f64 = 1e-3;
pub const MAX_RESIDUAL_BLOCKS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Quantile count `m` (input width).
    pub m: usize,
    pub hidden: usize,
    pub residual_blocks: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Append the mean summary row to every input row.
    pub global_context: bool,
    /// EMA decay of a reward baseline; 0 disables it.
    pub baseline_decay: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            m: 100,
            hidden: 256,
            residual_blocks: 2,
            lr: 1e-4,
            weight_decay: 0.01,
            global_context: false,
            baseline_decay: 0.0,
        }
    }
}

impl SchedulerConfig {
    pub fn input_dim(&self) -> usize {
        if self.global_context {
            2 * self.m
        } else {
            self.m
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.hidden == 0 {
            return Err(Error::Config("scheduler.m must be >= 2 and scheduler.hidden > 0".into()));
        }
        if self.residual_blocks > MAX_RESIDUAL_BLOCKS {
            return Err(Error::Config(format!(
                "scheduler.residual_blocks is limited to {MAX_RESIDUAL_BLOCKS}"
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config("scheduler.lr and scheduler.weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("scheduler.baseline_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub w_a: Matrix,
    pub b_a: Matrix,
    pub w_b: Matrix,
    pub b_b: Matrix,
}

/// `x₀ = tanh(s W_in + b_in)`, `x ← x + tanh(x W_a + b_a) W_b + b_b` per block,
/// `raw = x W_head + b_head`, `(α, β) = softplus(raw) + ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerPolicy {
    pub in_w: Matrix,
    pub in_b: Matrix,
    pub blocks: Vec<ResidualBlock>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

const BLOCK_NAMES: [[&str; 4]; MAX_RESIDUAL_BLOCKS] = [
    ["res0_w_a", "res0_b_a", "res0_w_b", "res0_b_b"],
    ["res1_w_a", "res1_b_a", "res1_w_b", "res1_b_b"],
    ["res2_w_a", "res2_b_a", "res2_w_b", "res2_b_b"],
    ["res3_w_a", "res3_b_a", "res3_w_b", "res3_b_b"],
    ["res4_w_a", "res4_b_a", "res4_w_b", "res4_b_b"],
    ["res5_w_a", "res5_b_a", "res5_w_b", "res5_b_b"],
    ["res6_w_a", "res6_b_a", "res6_w_b", "res6_b_b"],
    ["res7_w_a", "res7_b_a", "res7_w_b", "res7_b_b"],
];

impl ParamSet for SchedulerPolicy {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![("in_w", &self.in_w), ("in_b", &self.in_b)];
        for (b, names) in self.blocks.iter().zip(BLOCK_NAMES.iter()) {
            out.extend([
                (names[0], &b.w_a),
                (names[1], &b.b_a),
                (names[2], &b.w_b),
                (names[3], &b.b_b),
            ]);
        }
        out.extend([("head_w", &self.head_w), ("head_b", &self.head_b)]);
        out
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = vec![("in_w", &mut self.in_w), ("in_b", &mut self.in_b)];
        for (b, names) in self.blocks.iter_mut().zip(BLOCK_NAMES.iter()) {
            out.extend([
                (names[0], &mut b.w_a),
                (names[1], &mut b.b_a),
                (names[2], &mut b.w_b),
                (names[3], &mut b.b_b),
            ]);
        }
        out.extend([("head_w", &mut self.head_w), ("head_b", &mut self.head_b)]);
        out
    }
}

/// Forward activations of a set of rows, kept for backprop.
pub struct PolicyTrace {
    input: Matrix,
    /// `xs[0]` is the projected input, `xs[k+1]` the output of block `k`.
    xs: Vec<Matrix>,
    /// Inner activations `tanh(x W_a + b_a)` per block.
    inner: Vec<Matrix>,
    pub raw: Matrix,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl SchedulerPolicy {
    /// Gaussian hidden layers, zero head: every row starts at
    /// `α = β = softplus(0) + ε`.
    pub fn init<R: Rng + ?Sized>(cfg: &SchedulerConfig, rng: &mut R) -> Self {
        let d = cfg.input_dim();
        let h = cfg.hidden;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        SchedulerPolicy {
            in_w: Matrix::randn(d, h, fan(d), rng),
            in_b: Matrix::zeros(1, h),
            blocks: (0..cfg.residual_blocks)
                .map(|_| ResidualBlock {
                    w_a: Matrix::randn(h, h, fan(h), rng),
                    b_a: Matrix::zeros(1, h),
                    w_b: Matrix::randn(h, h, 0.5 * fan(h), rng),
                    b_b: Matrix::zeros(1, h),
                })
                .collect(),
            head_w: Matrix::zeros(h, 2),
            head_b: Matrix::zeros(1, 2),
        }
    }

    pub fn forward_rows(&self, input: &Matrix) -> Result<PolicyTrace> {
        if input.cols() != self.in_w.rows() {
            return Err(Error::Contract(format!(
                "scheduler input width {} does not match policy width {}",
                input.cols(),
                self.in_w.rows()
            )));
        }
        let mut x = input.matmul(&self.in_w);
        x.add_row_vector(self.in_b.as_slice());
        let x = x.map(f64::tanh);
        let mut xs = vec![x];
        let mut inner = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let cur = xs.last().expect("non-empty");
            let mut a = cur.matmul(&b.w_a);
            a.add_row_vector(b.b_a.as_slice());
            let a = a.map(f64::tanh);
            let mut next = a.matmul(&b.w_b);
            next.add_row_vector(b.b_b.as_slice());
            next.add_assign(cur);
            inner.push(a);
            xs.push(next);
        }
        let mut raw = xs.last().expect("non-empty").matmul(&self.head_w);
        raw.add_row_vector(self.head_b.as_slice());
        if !raw.is_finite() {
            return Err(Error::numerical("scheduler", "non-finite head activations"));
        }
        let alpha = (0..raw.rows()).map(|r| softplus(raw.get(r, 0)) + PARAM_FLOOR).collect();
        let beta = (0..raw.rows()).map(|r| softplus(raw.get(r, 1)) + PARAM_FLOOR).collect();
        Ok(PolicyTrace {
            input: input.clone(),
            xs,
            inner,
            raw,
            alpha,
            beta,
        })
    }

    /// Backprop per-row upstream gradients on (α, β). Returns parameter
    /// gradients and the gradient w.r.t. the input rows.
    pub fn backward_rows(&self, t: &PolicyTrace, d_alpha: &[f64], d_beta: &[f64]) -> (SchedulerPolicy, Matrix) {
        let n = t.raw.rows();
        let mut g = self.zeros_like();
        let mut d_raw = Matrix::zeros(n, 2);
        for r in 0..n {
            d_raw.set(r, 0, d_alpha[r] * sigmoid(t.raw.get(r, 0)));
            d_raw.set(r, 1, d_beta[r] * sigmoid(t.raw.get(r, 1)));
        }
        let top = t.xs.last().expect("non-empty");
        g.head_w = top.t_matmul(&d_raw);
        g.head_b = Matrix::from_vec(1, 2, d_raw.col_sums());
        let mut dx = d_raw.matmul_t(&self.head_w);
        for (k, b) in self.blocks.iter().enumerate().rev() {
            let a = &t.inner[k];
            let x_in = &t.xs[k];
            let gb = &mut g.blocks[k];
            gb.w_b = a.t_matmul(&dx);
            gb.b_b = Matrix::from_vec(1, dx.cols(), dx.col_sums());
            let mut da = dx.matmul_t(&b.w_b);
            for (d, av) in da.as_mut_slice().iter_mut().zip(a.as_slice()) {
                *d *= 1.0 - av * av;
            }
            gb.w_a = x_in.t_matmul(&da);
            gb.b_a = Matrix::from_vec(1, da.cols(), da.col_sums());
            dx.add_assign(&da.matmul_t(&b.w_a));
        }
        let x0 = &t.xs[0];
        for (d, xv) in dx.as_mut_slice().iter_mut().zip(x0.as_slice()) {
            *d *= 1.0 - xv * xv;
        }
        g.in_w = t.input.t_matmul(&dx);
        g.in_b = Matrix::from_vec(1, dx.cols(), dx.col_sums());
        let d_input = dx.matmul_t(&self.in_w);
        (g, d_input)
    }
}

/// Row inputs for the policy: each summary row, optionally followed by the
/// mean row.
pub fn policy_input(summary: &Matrix, global_context: bool) -> Matrix {
    if !global_context {
        return summary.clone();
    }
    let n = summary.rows();
    let m = summary.cols();
    let mean: Vec<f64> = summary.col_sums().into_iter().map(|s| s / n as f64).collect();
    let mut out = Matrix::zeros(n, 2 * m);
    for r in 0..n {
        out.row_mut(r)[..m].copy_from_slice(summary.row(r));
        out.row_mut(r)[m..].copy_from_slice(&mean);
    }
    out
}

/// Per-anchor Beta parameters, in the original (unsorted) anchor order.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyHeads {
    pub input: Matrix,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// A sampled quantile per anchor, plus which ones batch composition used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileAction {
    pub q: Vec<f64>,
    pub consumed: Vec<bool>,
    pub log_density: f64,
}

impl QuantileAction {
    pub fn constant(n: usize, q: f64) -> Self {
        QuantileAction {
            q: vec![q; n],
            consumed: vec![false; n],
            log_density: 0.0,
        }
    }
}

pub fn log_prob(alpha: f64, beta: f64, q: f64) -> Result<f64> {
    beta::log_prob(alpha, beta, q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    pub config: SchedulerConfig,
    pub policy: SchedulerPolicy,
    pub optimizer: Optimizer,
    pub baseline: f64,
    pub updates: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// Zero advantage: the step is a no-op (no decay, no moment update).
    ZeroSignal,
    /// Non-finite reward: skipped.
    Anomalous,
}

impl Scheduler {
    pub fn new<R: Rng + ?Sized>(config: SchedulerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let policy = SchedulerPolicy::init(&config, rng);
        let optimizer = Optimizer::new(OptimizerConfig::adamw(config.weight_decay));
        Ok(Scheduler {
            config,
            policy,
            optimizer,
            baseline: 0.0,
            updates: 0,
        })
    }

    /// Sorts the summary rows, runs the row-wise MLP and restores the
    /// original anchor order.
    pub fn forward(&self, summary: &SimilaritySummary) -> Result<PolicyHeads> {
        if summary.m != self.config.m {
            return Err(Error::Contract(format!(
                "summary has m = {} but the scheduler expects {}",
                summary.m, self.config.m
            )));
        }
        let (sorted, perm) = sort_rows(summary);
        let input = policy_input(&sorted.summary, self.config.global_context);
        let trace = self.policy.forward_rows(&input)?;
        let inv = invert_permutation(&perm);
        Ok(PolicyHeads {
            input: input.select_rows(&inv),
            alpha: inv.iter().map(|&r| trace.alpha[r]).collect(),
            beta: inv.iter().map(|&r| trace.beta[r]).collect(),
        })
    }

    pub fn sample_action<R: Rng + ?Sized>(heads: &PolicyHeads, rng: &mut R) -> QuantileAction {
        let q = heads
            .alpha
            .iter()
            .zip(&heads.beta)
            .map(|(&a, &b)| beta::sample(a, b, rng))
            .collect::<Vec<_>>();
        let n = q.len();
        QuantileAction {
            q,
            consumed: vec![false; n],
            log_density: 0.0,
        }
    }

    /// `∇_φ Σ_{consumed i} ln BetaPDF(q_i; α_i(φ), β_i(φ))`.
    pub fn log_density_gradient(&self, heads: &PolicyHeads, action: &QuantileAction) -> Result<SchedulerPolicy> {
        let rows: Vec<usize> = (0..action.q.len()).filter(|&i| action.consumed[i]).collect();
        if rows.is_empty() {
            return Ok(self.policy.zeros_like());
        }
        let input = heads.input.select_rows(&rows);
        let trace = self.policy.forward_rows(&input)?;
        let mut d_alpha = Vec::with_capacity(rows.len());
        let mut d_beta = Vec::with_capacity(rows.len());
        for (k, &i) in rows.iter().enumerate() {
            let (ga, gb) = beta::log_prob_grad(trace.alpha[k], trace.beta[k], action.q[i]);
            d_alpha.push(ga);
            d_beta.push(gb);
        }
        Ok(self.policy.backward_rows(&trace, &d_alpha, &d_beta).0)
    }

    /// One ascent step `φ ← φ + γ · Δ · ∇_φ log π(q | Ŝ)` through AdamW.
    pub fn reinforce_update(&mut self, heads: &PolicyHeads, action: &QuantileAction, delta: f64) -> Result<UpdateOutcome> {
        if !delta.is_finite() {
            log::warn!("scheduler update skipped: non-finite reward {delta}");
            return Ok(UpdateOutcome::Anomalous);
        }
        let advantage = if self.config.baseline_decay > 0.0 {
            let adv = delta - self.baseline;
            let d = self.config.baseline_decay;
            self.baseline = d * self.baseline + (1.0 - d) * delta;
            adv
        } else {
            delta
        };
        if advantage == 0.0 {
            return Ok(UpdateOutcome::ZeroSignal);
        }
        let mut grad = self.log_density_gradient(heads, action)?;
        // Descent on −Δ·log π is ascent on Δ·log π.
        for (_, b) in grad.blocks_mut() {
            b.scale(-advantage);
        }
        self.optimizer.step(&mut self.policy, &grad, self.config.lr)?;
        self.updates += 1;
        Ok(UpdateOutcome::Applied)
    }
}
