//! Soft top-r edge selection by entropic optimal transport.
//!
//! Every edge carries one unit of mass that is split between two
//! destinations: a "variant" row anchored at the smallest score and an
//! "invariant" row anchored at the largest. The invariant row must receive
//! `r·m` units in total. The Sinkhorn iterations run on the tape so the
//! resulting attention is differentiable with respect to the scores.
//!
//! Internally the plan is kept edge-major (`[m, 2]`); [`TransportPlan`]
//! exposes the conventional `2 × m` layout.

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{Axis, Tape, Tensor, Var};

/// Upper bound on `D/τ` before exponentiation. `exp(-690)` still leaves a
/// column sum above [`MIN_DENOMINATOR`].
pub const MAX_SCALED_COST: f64 = 690.0;
pub const MIN_DENOMINATOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// One transport problem per graph.
    Micro,
    /// One transport problem over the whole batch.
    Macro,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopRConfig {
    pub r: f64,
    pub tau: f64,
    pub sigma: f64,
    pub n_iters: usize,
    pub mode: Mode,
}

impl Default for TopRConfig {
    fn default() -> Self {
        Self { r: 0.5, tau: 1.0, sigma: 1.0, n_iters: 10, mode: Mode::Micro }
    }
}

impl TopRConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::InvalidRatio(self.r));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.n_iters == 0 {
            return Err(Error::InvalidConfig("n_iters must be at least 1".into()));
        }
        Ok(())
    }

    /// `r = 1` selects everything and skips transport.
    pub fn is_degenerate(&self) -> bool {
        self.r >= 1.0
    }
}

/// `2 × m` plan; row 0 is the variant destination, row 1 the invariant one.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub values: Tensor,
}

impl TransportPlan {
    pub fn num_items(&self) -> usize {
        self.values.cols()
    }

    pub fn row_sums(&self) -> [f64; 2] {
        [self.values.row(0).iter().sum(), self.values.row(1).iter().sum()]
    }
}

/// Per-iteration diagnostics of one transport problem.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    /// `‖T_k 1 − R‖₂` after iteration `k`.
    pub residuals: Vec<f64>,
    /// `‖T_k − T_{k−1}‖_F`.
    pub deltas: Vec<f64>,
}

/// Which segment each edge belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    ids: Vec<usize>,
    count: usize,
}

impl Segments {
    pub fn single(m: usize) -> Self {
        Self { ids: vec![0; m], count: 1 }
    }

    pub fn new(ids: Vec<usize>, count: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&s| s >= count) {
            return Err(Error::IndexOutOfRange { index: bad, limit: count });
        }
        Ok(Self { ids, count })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &s in &self.ids {
            sizes[s] += 1;
        }
        sizes
    }
}

/// The additive Gumbel terms `−σ·log(−log u)`, `u ~ U(0,1)` open.
pub fn gumbel_noise<R: Rng>(m: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; m];
    }
    (0..m)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -sigma * (-u.ln()).ln()
        })
        .collect()
}

pub fn gumbel_perturb<R: Rng>(scores: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return scores.to_vec();
    }
    scores.iter().zip(gumbel_noise(scores.len(), sigma, rng)).map(|(s, g)| s + g).collect()
}

/// `2 × m` cost: row 0 is `s̃ − min(s)`, row 1 is `max(s) − s̃`, with the
/// anchors taken over the unperturbed scores.
pub fn build_cost(scores: &[f64], perturbed: &[f64]) -> Result<Tensor> {
    if scores.is_empty() {
        return Err(Error::EmptySegment(0));
    }
    if scores.len() != perturbed.len() {
        return Err(Error::ShapeMismatch {
            op: "build_cost",
            detail: format!("{} scores, {} perturbed", scores.len(), perturbed.len()),
        });
    }
    let mut tape = Tape::new();
    let s = tape.constant(column(scores));
    let p = tape.constant(column(perturbed));
    let d = cost_on_tape(&mut tape, s, Some(p), &Segments::single(scores.len()))?;
    Ok(tape.value(d).transposed())
}

/// `R = [(1−r)m, r·m]`, `C = 1`.
pub fn build_marginals(m: usize, r: f64) -> Result<([f64; 2], Vec<f64>)> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidRatio(r));
    }
    if m == 0 {
        return Err(Error::EmptySegment(0));
    }
    let mf = m as f64;
    Ok(([(1.0 - r) * mf, r * mf], vec![1.0; m]))
}

/// `T₀ = exp(−min(D/τ, MAX_SCALED_COST))` for a `2 × m` cost.
pub fn sinkhorn_init(cost: &Tensor, tau: f64) -> Result<TransportPlan> {
    let mut tape = Tape::new();
    let d = tape.constant(cost.transposed());
    let t0 = init_on_tape(&mut tape, d, tau)?;
    Ok(TransportPlan { values: tape.value(t0).transposed() })
}

/// Alternate row and column normalisations `n_iters` times, ending on a
/// column step. Forward only; same arithmetic as the taped iteration.
pub fn sinkhorn_iterate(
    plan: &TransportPlan,
    row_target: [f64; 2],
    col_target: &[f64],
    n_iters: usize,
) -> Result<(TransportPlan, ConvergenceTrace)> {
    let m = plan.num_items();
    if plan.values.rows() != 2 || col_target.len() != m {
        return Err(Error::ShapeMismatch {
            op: "sinkhorn_iterate",
            detail: format!("plan {:?}, {} column targets", plan.values.shape(), col_target.len()),
        });
    }
    if plan.values.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::ZeroMarginal);
    }
    if row_target.iter().chain(col_target).any(|&v| !(v > 0.0)) {
        return Err(Error::ZeroMarginal);
    }
    let (mut t0, mut t1) = (plan.values.row(0).to_vec(), plan.values.row(1).to_vec());
    let mut trace = ConvergenceTrace::default();
    for _ in 0..n_iters {
        let (b0, b1) = (t0.clone(), t1.clone());
        let sums = [t0.iter().sum::<f64>(), t1.iter().sum::<f64>()];
        if sums.iter().any(|&v| !(v >= MIN_DENOMINATOR)) {
            return Err(Error::ZeroMarginal);
        }
        let ratio = [sums[0] / row_target[0], sums[1] / row_target[1]];
        t0.iter_mut().for_each(|x| *x /= ratio[0]);
        t1.iter_mut().for_each(|x| *x /= ratio[1]);
        let mut delta = 0.0;
        for j in 0..m {
            let col = t0[j] + t1[j];
            if !(col >= MIN_DENOMINATOR) {
                return Err(Error::ZeroMarginal);
            }
            let ratio = col / col_target[j];
            t0[j] /= ratio;
            t1[j] /= ratio;
            delta += (t0[j] - b0[j]).powi(2) + (t1[j] - b1[j]).powi(2);
        }
        let r0 = t0.iter().sum::<f64>() - row_target[0];
        let r1 = t1.iter().sum::<f64>() - row_target[1];
        trace.residuals.push((r0 * r0 + r1 * r1).sqrt());
        trace.deltas.push(delta.sqrt());
    }
    t0.extend(t1);
    Ok((TransportPlan { values: Tensor::matrix(2, m, t0)? }, trace))
}

/// Invariant-row mass of each item.
pub fn edge_attention(plan: &TransportPlan) -> Vec<f64> {
    plan.values.row(1).to_vec()
}

/// Per-node max over incident edge attention; isolated nodes get 0.
pub fn node_attention(graph: &Graph, alpha_e: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let a = tape.constant(column(alpha_e));
    let v = node_attention_on_tape(&mut tape, graph, a)?;
    Ok(tape.value(v).data().to_vec())
}

pub(crate) fn column(values: &[f64]) -> Tensor {
    Tensor::matrix(values.len(), 1, values.to_vec()).expect("column shape")
}

fn cost_on_tape(tape: &mut Tape, scores: Var, perturbed: Option<Var>, seg: &Segments) -> Result<Var> {
    let ids = seg.ids();
    let hi = tape.segment_max(scores, ids, seg.count())?;
    let neg = tape.neg(scores)?;
    let neg_lo = tape.segment_max(neg, ids, seg.count())?;
    let lo = tape.neg(neg_lo)?;
    let hi_e = tape.gather_rows(hi, ids)?;
    let lo_e = tape.gather_rows(lo, ids)?;
    let s = perturbed.unwrap_or(scores);
    let to_variant = tape.sub(s, lo_e)?;
    let to_invariant = tape.sub(hi_e, s)?;
    tape.concat(&[to_variant, to_invariant], Axis::Cols)
}

fn init_on_tape(tape: &mut Tape, cost: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    let taus = tape.constant(Tensor::full(tape.value(cost).shape(), tau));
    let scaled = tape.div(cost, taus)?;
    let clamped = tape.clamp(scaled, -MAX_SCALED_COST, MAX_SCALED_COST)?;
    let neg = tape.neg(clamped)?;
    tape.exp(neg)
}

fn check_denominators(t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&v| !(v >= MIN_DENOMINATOR)) {
        Err(Error::ZeroMarginal)
    } else {
        Ok(())
    }
}

/// Sinkhorn on an edge-major `[m, 2]` plan, one problem per segment.
/// `row_targets` is `[S, 2]`, `col_targets` has one entry per edge.
fn iterate_on_tape(
    tape: &mut Tape,
    plan: Var,
    row_targets: &Tensor,
    col_targets: &[f64],
    seg: &Segments,
    n_iters: usize,
) -> Result<(Var, Vec<ConvergenceTrace>)> {
    if row_targets.data().iter().any(|&v| !(v > 0.0)) || col_targets.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::ZeroMarginal);
    }
    let ids = seg.ids();
    let s = seg.count();
    let rows_c = tape.constant(row_targets.clone());
    let cols_c = tape.constant(column(col_targets));
    let mut t = plan;
    let mut traces = vec![ConvergenceTrace::default(); s];
    for _ in 0..n_iters {
        let before = tape.value(t).clone();

        let row_sums = tape.segment_sum(t, ids, s)?;
        check_denominators(tape.value(row_sums))?;
        let ratio = tape.div(row_sums, rows_c)?;
        let per_edge = tape.gather_rows(ratio, ids)?;
        t = tape.div(t, per_edge)?;

        let col_sums = tape.sum(t, Some(Axis::Cols))?;
        check_denominators(tape.value(col_sums))?;
        let ratio = tape.div(col_sums, cols_c)?;
        let spread = tape.broadcast_col(ratio, 2)?;
        t = tape.div(t, spread)?;

        record_trace(&mut traces, tape.value(t), &before, row_targets, ids);
    }
    Ok((t, traces))
}

fn record_trace(traces: &mut [ConvergenceTrace], now: &Tensor, before: &Tensor, targets: &Tensor, ids: &[usize]) {
    let s = traces.len();
    let mut sums = vec![[0.0f64; 2]; s];
    let mut delta = vec![0.0f64; s];
    for (e, &g) in ids.iter().enumerate() {
        for k in 0..2 {
            let v = now.at(e, k);
            sums[g][k] += v;
            let d = v - before.at(e, k);
            delta[g] += d * d;
        }
    }
    for (g, trace) in traces.iter_mut().enumerate() {
        let r0 = sums[g][0] - targets.at(g, 0);
        let r1 = sums[g][1] - targets.at(g, 1);
        trace.residuals.push((r0 * r0 + r1 * r1).sqrt());
        trace.deltas.push(delta[g].sqrt());
    }
}

pub(crate) fn node_attention_on_tape(tape: &mut Tape, graph: &Graph, alpha_e: Var) -> Result<Var> {
    let m = tape.value(alpha_e).rows();
    if m != graph.num_edges() {
        return Err(Error::ShapeMismatch {
            op: "node_attention",
            detail: format!("{m} attentions for {} edges", graph.num_edges()),
        });
    }
    let per_arc = tape.gather_rows(alpha_e, &graph.arc_edge())?;
    tape.segment_max(per_arc, &graph.arc_src(), graph.num_nodes())
}

/// Output of [`soft_top_r`].
#[derive(Debug)]
pub struct SoftTopR {
    /// `[m, 1]` edge attention on the tape.
    pub alpha: Var,
    /// One trace per segment; empty for `r = 1`.
    pub traces: Vec<ConvergenceTrace>,
}

/// Gumbel → cost → marginals → init → iterate → invariant row, per segment.
/// `scores` is an `[m, 1]` column on `tape`.
pub fn soft_top_r<R: Rng>(
    tape: &mut Tape,
    scores: Var,
    segments: &Segments,
    cfg: &TopRConfig,
    rng: &mut R,
) -> Result<SoftTopR> {
    cfg.validate()?;
    let m = tape.value(scores).rows();
    if segments.ids().len() != m {
        return Err(Error::ShapeMismatch {
            op: "soft_top_r",
            detail: format!("{m} scores, {} segment ids", segments.ids().len()),
        });
    }
    let sizes = segments.sizes();
    if let Some(empty) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::SegmentTooSmall(empty));
    }
    if cfg.is_degenerate() {
        let ones = tape.constant(Tensor::full(&[m, 1], 1.0));
        return Ok(SoftTopR { alpha: ones, traces: Vec::new() });
    }

    let perturbed = if cfg.sigma > 0.0 {
        let noise = tape.constant(column(&gumbel_noise(m, cfg.sigma, rng)));
        Some(tape.add(scores, noise)?)
    } else {
        None
    };
    let cost = cost_on_tape(tape, scores, perturbed, segments)?;
    let mut row_targets = Vec::with_capacity(2 * sizes.len());
    for &n in &sizes {
        let (r, _) = build_marginals(n, cfg.r)?;
        row_targets.extend_from_slice(&r);
    }
    let row_targets = Tensor::matrix(sizes.len(), 2, row_targets)?;
    let t0 = init_on_tape(tape, cost, cfg.tau)?;
    let (t, traces) = iterate_on_tape(tape, t0, &row_targets, &vec![1.0; m], segments, cfg.n_iters)?;
    let pick = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0])?);
    let alpha = tape.matmul(t, pick)?;
    Ok(SoftTopR { alpha, traces })
}

/// Forward-only [`soft_top_r`] on plain values.
pub fn soft_top_r_values<R: Rng>(
    scores: &[f64],
    segments: &Segments,
    cfg: &TopRConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<ConvergenceTrace>)> {
    let mut tape = Tape::new();
    let s = tape.constant(column(scores));
    let out = soft_top_r(&mut tape, s, segments, cfg, rng)?;
    Ok((tape.value(out.alpha).data().to_vec(), out.traces))
}

/// Geometric-rate fit of a residual sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RhoFit {
    pub rho: f64,
    pub r2: f64,
    pub contracting: bool,
}

/// Least-squares slope of `log(residual_k)` against `k`, exponentiated.
pub fn estimate_rho(residuals: &[f64]) -> Result<RhoFit> {
    if residuals.len() < 4 {
        return Err(Error::DegenerateTrace(format!("need at least 4 residuals, got {}", residuals.len())));
    }
    if let Some(bad) = residuals.iter().find(|&&r| !(r > 1e-14)) {
        return Err(Error::DegenerateTrace(format!("residual {bad:e} at or below 1e-14")));
    }
    let n = residuals.len() as f64;
    let ys: Vec<f64> = residuals.iter().map(|r| r.ln()).collect();
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (k, y) in ys.iter().enumerate() {
        let dx = k as f64 - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let r2 = if syy <= f64::EPSILON * ys.iter().map(|y| y * y).sum::<f64>() {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    let rho = slope.exp();
    Ok(RhoFit { rho, r2, contracting: rho < 1.0 })
}
