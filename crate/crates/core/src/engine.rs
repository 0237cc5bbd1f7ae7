//! Iterations, device sampling and the experiment loop.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mixing::{is_row_stochastic, sample_mixing, MixingPair, MixingStrategy};
use crate::numerics::{axpy, dist_sq, norm, DenseMatrix};
use crate::objectives::{Objective, Reference};
use crate::rng::{self, sample_without_replacement, StreamTag};
use crate::topology::{DirectedGraph, NodeSet};

/// Per-node iterates of a decentralized method; row `i` belongs to node `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgoState {
    pub x: DenseMatrix,
    pub y: DenseMatrix,
    pub z: DenseMatrix,
    /// `∇f_i(z_i)` per row, refreshed whenever `z_i` moves.
    pub grad_z: DenseMatrix,
    pub t: usize,
    pub cum_comm: u64,
    pub cum_grads: u64,
}

impl AlgoState {
    /// `Z⁰ = X⁰`, `Y⁰ = ∇F(X⁰)`. The `M` gradients are counted.
    pub fn new(obj: &dyn Objective, x0: DenseMatrix) -> Result<Self> {
        check_shape("AlgoState::new", obj, &x0)?;
        let grad = gradients(obj, &x0);
        Ok(AlgoState {
            y: grad.clone(),
            z: x0.clone(),
            grad_z: grad,
            x: x0,
            t: 0,
            cum_comm: 0,
            cum_grads: obj.nodes() as u64,
        })
    }

    /// Arbitrary `(X, Y, Z)`; `∇F(Z)` is evaluated and counted.
    pub fn from_parts(obj: &dyn Objective, x: DenseMatrix, y: DenseMatrix, z: DenseMatrix) -> Result<Self> {
        for m in [&x, &y, &z] {
            check_shape("AlgoState::from_parts", obj, m)?;
        }
        let grad_z = gradients(obj, &z);
        Ok(AlgoState {
            x,
            y,
            z,
            grad_z,
            t: 0,
            cum_comm: 0,
            cum_grads: obj.nodes() as u64,
        })
    }

    pub fn mean_x(&self) -> Vec<f64> {
        column_mean(&self.x)
    }

    /// `(1/M) Σ ‖x_i - x̄‖²`.
    pub fn consensus(&self) -> f64 {
        consensus_distance(&self.x)
    }

    /// `‖1ᵀY - 1ᵀ∇F(Z)‖ / (1 + ‖1ᵀ∇F(Z)‖)` with `∇F(Z)` evaluated afresh.
    pub fn mass_residual(&self, obj: &dyn Objective) -> f64 {
        let gz = gradients(obj, &self.z);
        let target = gz.col_sums();
        let sums = self.y.col_sums();
        let gap: Vec<f64> = sums.iter().zip(&target).map(|(a, b)| a - b).collect();
        norm(&gap) / (1.0 + norm(&target))
    }
}

fn check_shape(op: &'static str, obj: &dyn Objective, m: &DenseMatrix) -> Result<()> {
    if m.rows() != obj.nodes() || m.cols() != obj.dim() {
        return Err(Error::dim(
            op,
            format!(
                "state is {}x{}, objective has {} nodes of dimension {}",
                m.rows(),
                m.cols(),
                obj.nodes(),
                obj.dim()
            ),
        ));
    }
    Ok(())
}

/// `∇F(X)`: row `i` is `∇f_i(x_i)`.
pub fn gradients(obj: &dyn Objective, x: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        obj.gradient_into(i, x.row(i), out.row_mut(i));
    }
    out
}

fn column_mean(m: &DenseMatrix) -> Vec<f64> {
    let n = m.rows() as f64;
    m.col_sums().into_iter().map(|s| s / n).collect()
}

pub fn consensus_distance(x: &DenseMatrix) -> f64 {
    let mean = column_mean(x);
    (0..x.rows()).map(|i| dist_sq(x.row(i), &mean)).sum::<f64>() / x.rows() as f64
}

/// `(1/M) Σ_i (f(x_i) - f*)`.
pub fn suboptimality(obj: &dyn Objective, x: &DenseMatrix, reference: &Reference) -> f64 {
    (0..x.rows())
        .map(|i| obj.excess_value(x.row(i), reference))
        .sum::<f64>()
        / x.rows() as f64
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("stepsize must be positive, got {eta}")));
    }
    Ok(())
}

fn check_pair(pair: &MixingPair, nodes: usize) -> Result<()> {
    if pair.size() != nodes {
        return Err(Error::Mixing(format!(
            "pair is {0}x{0}, state has {nodes} nodes",
            pair.size()
        )));
    }
    pair.check_stochastic()
}

/// How the active set `V_t` is drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingPlan {
    UniformWithoutReplacement { s: usize },
    Bernoulli { p: Vec<f64> },
}

impl SamplingPlan {
    pub fn check(&self, nodes: usize) -> Result<()> {
        match self {
            SamplingPlan::UniformWithoutReplacement { s } if *s == 0 || *s > nodes => Err(
                Error::InvalidArgument(format!("sample size {s} outside [1, {nodes}]")),
            ),
            SamplingPlan::Bernoulli { p } if p.len() != nodes => Err(Error::InvalidArgument(
                format!("{} probabilities for {nodes} nodes", p.len()),
            )),
            SamplingPlan::Bernoulli { p } if p.iter().any(|&v| !(v > 0.0 && v <= 1.0)) => Err(
                Error::InvalidArgument("probabilities must lie in (0, 1]".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn full(nodes: usize) -> Self {
        SamplingPlan::UniformWithoutReplacement { s: nodes }
    }
}

pub fn sample_devices<R: Rng + ?Sized>(plan: &SamplingPlan, nodes: usize, rng: &mut R) -> Result<NodeSet> {
    plan.check(nodes)?;
    match plan {
        SamplingPlan::UniformWithoutReplacement { s } => {
            let all: Vec<usize> = (0..nodes).collect();
            NodeSet::from_indices(nodes, sample_without_replacement(&all, *s, rng))
        }
        SamplingPlan::Bernoulli { p } => {
            let picked: Vec<usize> = (0..nodes).filter(|&i| rng.random::<f64>() < p[i]).collect();
            NodeSet::from_indices(nodes, picked)
        }
    }
}

/// One round of the sampled gradient-tracking method:
///
/// ```text
/// Ŷ = Y + D(∇F(X) - ∇F(Z))
/// X̂ = X - η D Ŷ
/// Z⁺ = D X + (I - D) Z
/// Y⁺ = B Ŷ
/// X⁺ = A X̂
/// ```
///
/// with `D = diag(1_{i ∈ active})`. Only active nodes evaluate a gradient.
pub fn ppds_step(
    state: &mut AlgoState,
    pair: &MixingPair,
    active: &NodeSet,
    eta: f64,
    obj: &dyn Objective,
) -> Result<()> {
    let m = state.x.rows();
    check_pair(pair, m)?;
    check_eta(eta)?;
    if active.universe() != m {
        return Err(Error::dim("ppds_step", "active set size differs from node count"));
    }
    let mut y_hat = state.y.clone();
    let mut x_hat = state.x.clone();
    let mut g = vec![0.0; state.x.cols()];
    for &i in active.members() {
        obj.gradient_into(i, state.x.row(i), &mut g);
        let yi = y_hat.row_mut(i);
        for ((y, gi), gz) in yi.iter_mut().zip(&g).zip(state.grad_z.row(i)) {
            *y = *y + gi - gz;
        }
        axpy(-eta, y_hat.row(i), x_hat.row_mut(i));
        state.z.row_mut(i).copy_from_slice(state.x.row(i));
        state.grad_z.row_mut(i).copy_from_slice(&g);
    }
    pair.push.matmul_into(&y_hat, &mut state.y)?;
    pair.pull.matmul_into(&x_hat, &mut state.x)?;
    state.t += 1;
    state.cum_grads += active.len() as u64;
    state.cum_comm += pair.link_count();
    Ok(())
}

/// Combine-then-adapt Push-Pull: `X⁺ = AX - ηY`, `Y⁺ = BY + ∇F(X⁺) - ∇F(X)`.
/// `grad_z` caches `∇F(X)` and `Z` follows `X`.
pub fn push_pull_step(state: &mut AlgoState, pair: &MixingPair, eta: f64, obj: &dyn Objective) -> Result<()> {
    let m = state.x.rows();
    check_pair(pair, m)?;
    check_eta(eta)?;
    let mut x_next = pair.pull.matmul(&state.x)?;
    axpy(-eta, state.y.as_slice(), x_next.as_mut_slice());
    let g_next = gradients(obj, &x_next);
    let mut y_next = pair.push.matmul(&state.y)?;
    for ((y, gn), g) in y_next
        .as_mut_slice()
        .iter_mut()
        .zip(g_next.as_slice())
        .zip(state.grad_z.as_slice())
    {
        *y = *y + gn - g;
    }
    finish_tracking_step(state, x_next, y_next, g_next, pair.link_count());
    Ok(())
}

/// Adapt-then-combine Push-Pull: `X⁺ = A(X - ηW)`, `W⁺ = BW + ∇F(X⁺) - ∇F(X)`,
/// with `W` stored in `y`.
pub fn push_pull_atc_step(state: &mut AlgoState, pair: &MixingPair, eta: f64, obj: &dyn Objective) -> Result<()> {
    let m = state.x.rows();
    check_pair(pair, m)?;
    check_eta(eta)?;
    let mut adapted = state.x.clone();
    axpy(-eta, state.y.as_slice(), adapted.as_mut_slice());
    let x_next = pair.pull.matmul(&adapted)?;
    let g_next = gradients(obj, &x_next);
    let mut y_next = pair.push.matmul(&state.y)?;
    for ((y, gn), g) in y_next
        .as_mut_slice()
        .iter_mut()
        .zip(g_next.as_slice())
        .zip(state.grad_z.as_slice())
    {
        *y = *y + gn - g;
    }
    finish_tracking_step(state, x_next, y_next, g_next, pair.link_count());
    Ok(())
}

fn finish_tracking_step(state: &mut AlgoState, x: DenseMatrix, y: DenseMatrix, g: DenseMatrix, links: u64) {
    state.cum_grads += x.rows() as u64;
    state.z = x.clone();
    state.x = x;
    state.y = y;
    state.grad_z = g;
    state.t += 1;
    state.cum_comm += links;
}

/// Decentralized gradient descent with sampling: `X⁺ = A(X - η D ∇F(X))`.
/// Only `x`, `t`, `cum_comm` and `cum_grads` are used.
pub fn dgd_step(
    state: &mut AlgoState,
    pull: &DenseMatrix,
    active: &NodeSet,
    eta: f64,
    obj: &dyn Objective,
) -> Result<()> {
    let m = state.x.rows();
    if pull.rows() != m || !is_row_stochastic(pull) {
        return Err(Error::Mixing("DGD needs a row-stochastic pull matrix".into()));
    }
    check_eta(eta)?;
    let mut x_hat = state.x.clone();
    let mut g = vec![0.0; state.x.cols()];
    for &i in active.members() {
        obj.gradient_into(i, state.x.row(i), &mut g);
        axpy(-eta, &g, x_hat.row_mut(i));
    }
    pull.matmul_into(&x_hat, &mut state.x)?;
    state.t += 1;
    state.cum_grads += active.len() as u64;
    state.cum_comm += MixingPair::symmetric(pull.clone()).pull_link_count();
    Ok(())
}

/// Single-iterate SAGA with a table of stored gradients `∇f_i(φ_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SagaState {
    pub x: Vec<f64>,
    pub table: DenseMatrix,
    /// `(1/M) Σ_i table_i`, updated incrementally.
    pub average: Vec<f64>,
    pub t: usize,
    pub cum_grads: u64,
}

impl SagaState {
    /// Table rows are `∇f_i(φ_i)` for the given points; `M` gradients counted.
    pub fn new(obj: &dyn Objective, x: Vec<f64>, phi: &DenseMatrix) -> Result<Self> {
        check_shape("SagaState::new", obj, phi)?;
        if x.len() != obj.dim() {
            return Err(Error::dim("SagaState::new", "iterate dimension mismatch"));
        }
        let table = gradients(obj, phi);
        let average = column_mean(&table);
        Ok(SagaState {
            x,
            table,
            average,
            t: 0,
            cum_grads: obj.nodes() as u64,
        })
    }
}

/// `g = ∇f_i(x) - ∇f_i(φ_i) + (1/M) Σ ∇f_j(φ_j)`, `x⁺ = x - η g`, `φ_i = x`.
pub fn saga_step(state: &mut SagaState, i: usize, eta: f64, obj: &dyn Objective) -> Result<()> {
    let m = state.table.rows();
    if i >= m {
        return Err(Error::InvalidArgument(format!("index {i} out of range for {m} nodes")));
    }
    check_eta(eta)?;
    let mut g = vec![0.0; state.x.len()];
    obj.gradient_into(i, &state.x, &mut g);
    let inv_m = 1.0 / m as f64;
    for k in 0..g.len() {
        let diff = g[k] - state.table[(i, k)];
        state.x[k] -= eta * (diff + state.average[k]);
        state.average[k] += diff * inv_m;
    }
    state.table.row_mut(i).copy_from_slice(&g);
    state.t += 1;
    state.cum_grads += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Ppds,
    PushPull,
    Dgd,
    Saga,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ppds => "ppds",
            Algorithm::PushPull => "push_pull",
            Algorithm::Dgd => "dgd",
            Algorithm::Saga => "saga",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ppds" => Some(Algorithm::Ppds),
            "push_pull" => Some(Algorithm::PushPull),
            "dgd" => Some(Algorithm::Dgd),
            "saga" => Some(Algorithm::Saga),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub t: usize,
    pub cum_comm: u64,
    pub cum_grads: u64,
    pub consensus: f64,
    pub subopt: f64,
}

pub const CSV_HEADER: &str = "iter,comm_cost,grad_count,consensus,subopt";

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    let mut buf = String::with_capacity(64 * (records.len() + 1));
    buf.push_str(CSV_HEADER);
    buf.push('\n');
    for r in records {
        buf.push_str(&format!(
            "{},{},{},{:e},{:e}\n",
            r.t, r.cum_comm, r.cum_grads, r.consensus, r.subopt
        ));
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

/// First record with `subopt <= threshold`.
pub fn first_below(records: &[MetricsRecord], threshold: f64) -> Option<&MetricsRecord> {
    records.iter().find(|r| r.subopt <= threshold)
}

/// Everything a single run needs. The objective, reference and graph are
/// borrowed so sweeps can share them across threads.
#[derive(Clone)]
pub struct Experiment<'a> {
    pub objective: &'a dyn Objective,
    pub reference: &'a Reference,
    pub graph: &'a DirectedGraph,
    pub algorithm: Algorithm,
    pub sampling: SamplingPlan,
    pub mixing: MixingStrategy,
    pub eta: f64,
    pub iterations: usize,
    pub record_every: usize,
    pub seed: u64,
    /// Stop at the first record whose suboptimality is at or below this.
    pub stop_below: Option<f64>,
}

impl Experiment<'_> {
    pub fn validate(&self) -> Result<()> {
        let m = self.objective.nodes();
        if self.graph.node_count() != m {
            return Err(Error::config(
                "graph.M",
                format!("is {} but the objective has {m} nodes", self.graph.node_count()),
            ));
        }
        self.sampling
            .check(m)
            .map_err(|e| Error::config("sampling", format!("is invalid: {e}")))?;
        self.mixing
            .check(m)
            .map_err(|e| Error::config("mixing", format!("is invalid: {e}")))?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", format!("must be positive, got {}", self.eta)));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// Runs the experiment and returns its metric series.
pub fn run(exp: &Experiment) -> Result<Vec<MetricsRecord>> {
    run_observed(exp, |_| Ok(()))
}

/// Like [`run`], calling `observe` on the state at every recorded iteration.
/// SAGA runs present a state whose rows all equal the SAGA iterate.
pub fn run_observed<F>(exp: &Experiment, mut observe: F) -> Result<Vec<MetricsRecord>>
where
    F: FnMut(&AlgoState) -> Result<()>,
{
    exp.validate()?;
    let obj = exp.objective;
    let (m, d) = (obj.nodes(), obj.dim());
    let mut init = rng::tagged_stream(exp.seed, StreamTag::Init);
    let mut sampling = rng::tagged_stream(exp.seed, StreamTag::Sampling);
    let mut mixing = rng::tagged_stream(exp.seed, StreamTag::Mixing);
    let x0: Vec<f64> = (0..m * d).map(|_| init.sample(rand_distr::StandardNormal)).collect();
    let x0 = DenseMatrix::from_vec(m, d, x0)?;

    let mut records = Vec::new();
    let mut push = |state: &AlgoState, records: &mut Vec<MetricsRecord>| -> Result<bool> {
        let rec = MetricsRecord {
            t: state.t,
            cum_comm: state.cum_comm,
            cum_grads: state.cum_grads,
            consensus: state.consensus(),
            subopt: suboptimality(obj, &state.x, exp.reference),
        };
        observe(state)?;
        records.push(rec);
        let halt = !rec.subopt.is_finite()
            || !rec.consensus.is_finite()
            || exp.stop_below.is_some_and(|s| rec.subopt <= s);
        Ok(halt)
    };

    if exp.algorithm == Algorithm::Saga {
        // SAGA keeps a single iterate that starts at node 0's initial row
        let x = x0.row(0).to_vec();
        let phi = DenseMatrix::from_rows(&vec![x.clone(); m])?;
        let mut saga = SagaState::new(obj, x, &phi)?;
        let mut view = saga_view(&saga, m);
        if push(&view, &mut records)? {
            return Ok(records);
        }
        for _ in 0..exp.iterations {
            let i = sampling.random_range(0..m);
            saga_step(&mut saga, i, exp.eta, obj)?;
            if saga.t % exp.record_every == 0 {
                view = saga_view(&saga, m);
                if push(&view, &mut records)? {
                    break;
                }
            }
        }
        return Ok(records);
    }

    let mut state = AlgoState::new(obj, x0)?;
    let full = NodeSet::full(m);
    if push(&state, &mut records)? {
        return Ok(records);
    }
    for _ in 0..exp.iterations {
        match exp.algorithm {
            Algorithm::Ppds => {
                let active = sample_devices(&exp.sampling, m, &mut sampling)?;
                let pair = sample_mixing(&exp.mixing, exp.graph, &active, &mut mixing)?;
                ppds_step(&mut state, &pair, &active, exp.eta, obj)?;
            }
            Algorithm::PushPull => {
                let pair = sample_mixing(&exp.mixing, exp.graph, &full, &mut mixing)?;
                push_pull_step(&mut state, &pair, exp.eta, obj)?;
            }
            Algorithm::Dgd => {
                let active = sample_devices(&exp.sampling, m, &mut sampling)?;
                let pair = sample_mixing(&exp.mixing, exp.graph, &active, &mut mixing)?;
                dgd_step(&mut state, &pair.pull, &active, exp.eta, obj)?;
            }
            Algorithm::Saga => unreachable!(),
        }
        if state.t % exp.record_every == 0 && push(&state, &mut records)? {
            break;
        }
    }
    Ok(records)
}

fn saga_view(saga: &SagaState, m: usize) -> AlgoState {
    let x = DenseMatrix::from_rows(&vec![saga.x.clone(); m]).expect("rows have equal length");
    AlgoState {
        y: DenseMatrix::zeros(m, saga.x.len()),
        z: x.clone(),
        grad_z: saga.table.clone(),
        x,
        t: saga.t,
        cum_comm: 0,
        cum_grads: saga.cum_grads,
    }
}

/// Coarse stepsize grid `10^-k`, `k = 2..=5`.
pub const COARSE_GRID: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

/// Lower is better; non-finite scores lose.
pub type Score = dyn Fn(&[MetricsRecord]) -> f64 + Sync;

/// Final recorded suboptimality.
pub fn final_subopt(records: &[MetricsRecord]) -> f64 {
    records.last().map_or(f64::INFINITY, |r| sanitize(r.subopt))
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Picks the best `η₁` from [`COARSE_GRID`], then the best of
/// `η₁ · 2^k, k = -2..=2`. Returns the winning stepsize and its series.
pub fn tune_stepsize(exp: &Experiment, score: &Score) -> Result<(f64, Vec<MetricsRecord>)> {
    let best_of = |etas: Vec<f64>| -> Result<(f64, Vec<MetricsRecord>)> {
        let results: Vec<Result<(f64, Vec<MetricsRecord>)>> = etas
            .into_par_iter()
            .map(|eta| {
                let mut e = exp.clone();
                e.eta = eta;
                run(&e).map(|r| (eta, r))
            })
            .collect();
        let mut best: Option<(f64, f64, Vec<MetricsRecord>)> = None;
        for r in results {
            let (eta, recs) = r?;
            let s = sanitize(score(&recs));
            if best.as_ref().map_or(true, |(bs, _, _)| s < *bs) {
                best = Some((s, eta, recs));
            }
        }
        let (_, eta, recs) = best.expect("grid is non-empty");
        Ok((eta, recs))
    };
    let (coarse, _) = best_of(COARSE_GRID.to_vec())?;
    best_of((-2..=2).map(|k| coarse * 2f64.powi(k)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::{broadcast_matrices, mean_matrix, metropolis};
    use crate::objectives::{generate_ridge, RidgeEnsemble, RidgeNode};
    use crate::topology::build_rgg;
    use std::collections::BTreeMap;

    fn single_node() -> RidgeEnsemble {
        let node = RidgeNode::new(DenseMatrix::identity(2), vec![1.0, -1.0], 0.5).unwrap();
        RidgeEnsemble::new(vec![node]).unwrap()
    }

    #[test]
    fn sampling_plans() {
        let mut s = rng::stream(1);
        let all = sample_devices(&SamplingPlan::full(7), 7, &mut s).unwrap();
        assert_eq!(all.members(), &[0, 1, 2, 3, 4, 5, 6]);
        let one = sample_devices(&SamplingPlan::UniformWithoutReplacement { s: 1 }, 1, &mut s).unwrap();
        assert_eq!(one.members(), &[0]);
        assert!(sample_devices(&SamplingPlan::UniformWithoutReplacement { s: 8 }, 7, &mut s).is_err());
        assert!(sample_devices(&SamplingPlan::Bernoulli { p: vec![0.0, 1.0] }, 2, &mut s).is_err());
        let always = sample_devices(&SamplingPlan::Bernoulli { p: vec![1.0; 3] }, 3, &mut s).unwrap();
        assert_eq!(always.len(), 3);
    }

    #[test]
    fn inclusion_frequency_is_s_over_m() {
        let (m, s, draws) = (100usize, 20usize, 1_000_000usize);
        let plan = SamplingPlan::UniformWithoutReplacement { s };
        let mut counts = vec![0u64; m];
        let mut r = rng::stream(2024);
        for _ in 0..draws {
            let set = sample_devices(&plan, m, &mut r).unwrap();
            assert_eq!(set.len(), s);
            for &i in set.members() {
                counts[i] += 1;
            }
        }
        let p = s as f64 / m as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "frequency {freq}");
        }
    }

    #[test]
    fn single_node_is_gradient_descent() {
        let e = single_node();
        let x0 = DenseMatrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let one = MixingPair::symmetric(DenseMatrix::identity(1));
        let eta = 0.1;
        let mut gd = x0.row(0).to_vec();
        let mut ppds = AlgoState::new(&e, x0.clone()).unwrap();
        let mut pp = AlgoState::new(&e, x0.clone()).unwrap();
        let mut dgd = AlgoState::new(&e, x0.clone()).unwrap();
        let mut saga = SagaState::new(&e, x0.row(0).to_vec(), &x0).unwrap();
        let all = NodeSet::full(1);
        for _ in 0..20 {
            let g = e.local_gradient(0, &gd).unwrap();
            axpy(-eta, &g, &mut gd);
            ppds_step(&mut ppds, &one, &all, eta, &e).unwrap();
            push_pull_step(&mut pp, &one, eta, &e).unwrap();
            dgd_step(&mut dgd, &one.pull, &all, eta, &e).unwrap();
            saga_step(&mut saga, 0, eta, &e).unwrap();
            for (k, want) in gd.iter().enumerate() {
                for got in [ppds.x[(0, k)], pp.x[(0, k)], dgd.x[(0, k)], saga.x[k]] {
                    assert!((got - want).abs() < 1e-14, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn empty_active_set_is_pure_gossip() {
        let e = generate_ridge(3, 2, 4, 1.0, 0.1, 3).unwrap();
        let x0 = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]]).unwrap();
        let pair = metropolis(&DirectedGraph::path(3), &NodeSet::full(3)).unwrap();
        let none = NodeSet::empty(3);
        let mut s = AlgoState::new(&e, x0.clone()).unwrap();
        let before = s.clone();
        ppds_step(&mut s, &pair, &none, 0.1, &e).unwrap();
        assert_eq!(s.x, pair.pull.matmul(&before.x).unwrap());
        assert_eq!(s.y, pair.push.matmul(&before.y).unwrap());
        assert_eq!(s.z, before.z);
        assert_eq!(s.cum_grads, before.cum_grads);

        let mut d = AlgoState::new(&e, x0).unwrap();
        dgd_step(&mut d, &pair.pull, &none, 0.1, &e).unwrap();
        assert_eq!(d.x, pair.pull.matmul(&before.x).unwrap());
    }

    #[test]
    fn push_pull_tracks_gradient_mass() {
        let e = generate_ridge(6, 3, 5, 1.0, 0.1, 8).unwrap();
        let g = build_rgg(6, 0.7, 1).unwrap();
        let mut s = rng::stream(4);
        let x0: Vec<f64> = (0..18).map(|_| s.sample(rand_distr::StandardNormal)).collect();
        let mut st = AlgoState::new(&e, DenseMatrix::from_vec(6, 3, x0).unwrap()).unwrap();
        let strategy = MixingStrategy::Broadcast { targets_per_active: 1 };
        for _ in 0..50 {
            let pair = sample_mixing(&strategy, &g, &NodeSet::full(6), &mut s).unwrap();
            push_pull_step(&mut st, &pair, 1e-3, &e).unwrap();
            let gx = gradients(&e, &st.x).col_sums();
            for (a, b) in st.y.col_sums().iter().zip(&gx) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn saga_with_equal_table_uses_full_gradient() {
        let e = generate_ridge(4, 3, 6, 1.0, 0.1, 2).unwrap();
        let x = vec![0.5, -0.5, 1.0];
        let phi = DenseMatrix::from_rows(&vec![x.clone(); 4]).unwrap();
        let mut st = SagaState::new(&e, x.clone(), &phi).unwrap();
        saga_step(&mut st, 2, 0.01, &e).unwrap();
        let full = e.global_gradient(&x).unwrap();
        for k in 0..3 {
            assert!((st.x[k] - (x[k] - 0.01 * full[k])).abs() < 1e-12);
        }
        assert!(saga_step(&mut st, 4, 0.01, &e).is_err());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let e = generate_ridge(2, 2, 3, 1.0, 0.1, 2).unwrap();
        let mut st = AlgoState::new(&e, DenseMatrix::zeros(2, 2)).unwrap();
        let bad = MixingPair::symmetric(DenseMatrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap());
        assert!(ppds_step(&mut st, &bad, &NodeSet::full(2), 0.1, &e).is_err());
        assert!(push_pull_step(&mut st, &bad, 0.1, &e).is_err());
        let ok = mean_matrix(2);
        assert!(ppds_step(&mut st, &ok, &NodeSet::full(2), 0.0, &e).is_err());
        assert!(AlgoState::new(&e, DenseMatrix::zeros(3, 2)).is_err());
    }

    /// 3-node path, 5 rounds, scripted active sets:
    ///
    /// | round | active | A/B support (off-diagonal)     | links | grads |
    /// |-------|--------|--------------------------------|-------|-------|
    /// | 1     | {0}    | broadcast 0 -> 1               | 1     | 1     |
    /// | 2     | {1}    | broadcast 1 -> 0, 1 -> 2       | 2     | 1     |
    /// | 3     | {}     | identity                       | 0     | 0     |
    /// | 4     | all    | Metropolis 0-1, 1-2 both ways  | 4     | 3     |
    /// | 5     | {0, 2} | Metropolis on {0, 2}: identity | 0     | 2     |
    ///
    /// Totals: comm 7, grads 3 (initial) + 7 = 10.
    #[test]
    fn hand_counted_costs() {
        let e = generate_ridge(3, 2, 4, 1.0, 0.1, 6).unwrap();
        let g = DirectedGraph::path(3);
        let mut st = AlgoState::new(&e, DenseMatrix::filled(3, 2, 0.5)).unwrap();
        let set = |v: &[usize]| NodeSet::from_indices(3, v.iter().copied()).unwrap();

        let a1 = set(&[0]);
        let p1 = broadcast_matrices(&g, &a1, &BTreeMap::from([(0, vec![0, 1])])).unwrap();
        ppds_step(&mut st, &p1, &a1, 0.01, &e).unwrap();
        let a2 = set(&[1]);
        let p2 = broadcast_matrices(&g, &a2, &BTreeMap::from([(1, vec![0, 1, 2])])).unwrap();
        ppds_step(&mut st, &p2, &a2, 0.01, &e).unwrap();
        let a3 = set(&[]);
        ppds_step(&mut st, &MixingPair::symmetric(DenseMatrix::identity(3)), &a3, 0.01, &e).unwrap();
        let a4 = NodeSet::full(3);
        ppds_step(&mut st, &metropolis(&g, &a4).unwrap(), &a4, 0.01, &e).unwrap();
        let a5 = set(&[0, 2]);
        ppds_step(&mut st, &metropolis(&g, &a5).unwrap(), &a5, 0.01, &e).unwrap();

        assert_eq!(st.t, 5);
        assert_eq!(st.cum_comm, 7);
        assert_eq!(st.cum_grads, 10);
    }

    fn small_experiment<'a>(
        obj: &'a RidgeEnsemble,
        reference: &'a Reference,
        graph: &'a DirectedGraph,
        algorithm: Algorithm,
    ) -> Experiment<'a> {
        Experiment {
            objective: obj,
            reference,
            graph,
            algorithm,
            sampling: SamplingPlan::UniformWithoutReplacement { s: 3 },
            mixing: MixingStrategy::MetropolisOnActive { neighbors_per_active: 1 },
            eta: 1e-3,
            iterations: 200,
            record_every: 10,
            seed: 5,
            stop_below: None,
        }
    }

    #[test]
    fn run_records_and_is_deterministic() {
        let obj = generate_ridge(8, 3, 10, 1.0, 0.1, 1).unwrap();
        let reference = obj.reference().unwrap();
        let graph = build_rgg(8, 0.6, 1).unwrap();
        for algorithm in [Algorithm::Ppds, Algorithm::PushPull, Algorithm::Dgd, Algorithm::Saga] {
            let mut exp = small_experiment(&obj, &reference, &graph, algorithm);
            let a = run(&exp).unwrap();
            assert_eq!(a.len(), 21);
            assert_eq!(a, run(&exp).unwrap());
            assert!(a.windows(2).all(|w| w[0].cum_grads <= w[1].cum_grads && w[0].cum_comm <= w[1].cum_comm));
            assert!(a.iter().all(|r| r.consensus >= 0.0));
            assert!(a.last().unwrap().subopt < a[0].subopt);
            exp.iterations = 0;
            let zero = run(&exp).unwrap();
            assert_eq!(zero.len(), 1);
            assert_eq!(zero[0].t, 0);
        }
    }

    #[test]
    fn run_rejects_bad_configuration() {
        let obj = generate_ridge(4, 2, 3, 1.0, 0.1, 1).unwrap();
        let reference = obj.reference().unwrap();
        let graph = build_rgg(4, 0.9, 1).unwrap();
        let mut exp = small_experiment(&obj, &reference, &graph, Algorithm::Ppds);
        exp.sampling = SamplingPlan::UniformWithoutReplacement { s: 5 };
        assert!(matches!(run(&exp), Err(Error::Config { .. })));
        exp.sampling = SamplingPlan::UniformWithoutReplacement { s: 2 };
        exp.eta = 0.0;
        assert!(matches!(run(&exp), Err(Error::Config { .. })));
    }

    #[test]
    fn csv_layout() {
        let recs = [MetricsRecord { t: 0, cum_comm: 0, cum_grads: 3, consensus: 0.25, subopt: 1.5e-3 }];
        let mut out = Vec::new();
        write_metrics_csv(&recs, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "iter,comm_cost,grad_count,consensus,subopt\n0,0,3,2.5e-1,1.5e-3\n"
        );
    }

    #[test]
    fn tuning_prefers_convergent_stepsizes() {
        let obj = generate_ridge(6, 3, 10, 1.0, 0.1, 3).unwrap();
        let reference = obj.reference().unwrap();
        let graph = build_rgg(6, 0.7, 2).unwrap();
        let exp = small_experiment(&obj, &reference, &graph, Algorithm::Ppds);
        let (eta, recs) = tune_stepsize(&exp, &final_subopt).unwrap();
        assert!(eta > 0.0 && eta < 1e-1);
        assert!(recs.last().unwrap().subopt.is_finite());
        let mut worse = exp.clone();
        worse.eta = 1e-5;
        assert!(final_subopt(&recs) <= final_subopt(&run(&worse).unwrap()));
    }
}
