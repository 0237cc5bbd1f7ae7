//! Closed-form rate theory and its numerical checks.

use crate::engine::{gradients, sample_devices, MetricsRecord, SamplingPlan};
use crate::error::{Error, Result};
use crate::mixing::{is_doubly_stochastic, sample_mixing, MixingPair, MixingStrategy};
use crate::numerics::{dist_sq, spectral_radius_symmetric, DenseMatrix, DenseVector};
use crate::objectives::{Objective, Reference};
use crate::rng::{self, StreamTag};
use crate::topology::{DirectedGraph, NodeSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateParams {
    pub mu: f64,
    pub l: f64,
    pub m: usize,
    pub s: usize,
    pub lambda: f64,
    pub eta: f64,
}

impl RateParams {
    pub fn check(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu <= self.l) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < mu <= L, got mu = {}, L = {}",
                self.mu, self.l
            )));
        }
        if self.s == 0 || self.s > self.m {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= S <= M, got S = {}, M = {}",
                self.s, self.m
            )));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= lambda < 1, got {}",
                self.lambda
            )));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!("need eta > 0, got {}", self.eta)));
        }
        Ok(())
    }

    fn ratio(&self) -> f64 {
        self.m as f64 / self.s as f64
    }
}

/// `min((1-λ)²/(14L)·√(M/S), (1-λ)²/(2304L)·(M/S)^{3/2}, 1/(576L)·√(M/S))`.
/// `eta` is ignored.
pub fn stepsize_bound(p: &RateParams) -> f64 {
    let r = p.ratio();
    let gap2 = (1.0 - p.lambda).powi(2);
    let a = gap2 / (14.0 * p.l) * r.sqrt();
    let b = gap2 / (2304.0 * p.l) * r.powf(1.5);
    let c = r.sqrt() / (576.0 * p.l);
    a.min(b).min(c)
}

fn contraction_term(p: &RateParams) -> f64 {
    1.0 - p.eta * p.mu * p.s as f64 / (2.0 * p.m as f64)
}

/// `ρ = max(1 - ηµS/(2M), 1 - S/(4M))`.
pub fn convergence_rate(p: &RateParams) -> f64 {
    contraction_term(p).max(1.0 - p.s as f64 / (4.0 * p.m as f64))
}

/// `ρ` together with whether `η` respects [`stepsize_bound`]; the rate is
/// only guaranteed when it does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateReport {
    pub rho: f64,
    pub stepsize_bound: f64,
    pub within_bound: bool,
}

pub fn rate_report(p: &RateParams) -> RateReport {
    let bound = stepsize_bound(p);
    RateReport {
        rho: convergence_rate(p),
        stepsize_bound: bound,
        within_bound: p.eta <= bound,
    }
}

/// Order-level iteration count `((L/µ)√(M/S)/(1-λ)² + M/S)·ln(1/ε)`, with no
/// hidden constants.
pub fn iteration_complexity(p: &RateParams, epsilon: f64) -> f64 {
    let r = p.ratio();
    ((p.l / p.mu) * r.sqrt() / (1.0 - p.lambda).powi(2) + r) * (1.0 / epsilon).ln()
}

/// Linear recurrence `u⁺ ≤ Q u + q e` on
/// `u = (‖x̄ - x*‖², 𝒳, 𝒴, H)` with Lyapunov weights `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceSystem {
    pub q_matrix: DenseMatrix,
    pub q: DenseVector,
    pub v: DenseVector,
    pub rho: f64,
}

pub fn build_recurrence_system(p: &RateParams) -> RecurrenceSystem {
    let (eta, l, lam) = (p.eta, p.l, p.lambda);
    let m = p.m as f64;
    let s = p.s as f64;
    let gap = 1.0 - lam;
    let e2 = eta * eta;
    let l2 = l * l;
    let rows = [
        [
            contraction_term(p),
            eta * l * s / (m * m) + 10.0 * e2 * l2 * s * s / m.powi(3),
            2.0 * e2 * s * s / m.powi(3),
            4.0 * e2 * s * s / m.powi(3),
        ],
        [
            0.0,
            (1.0 + lam) / 2.0 + 20.0 * e2 * l2 * s / (m * gap),
            4.0 * e2 * s / (m * gap),
            8.0 * e2 * s / (m * gap),
        ],
        [0.0, 8.0 * l2 * s / (m * gap), (1.0 + lam) / 2.0, 4.0 * s / (m * gap)],
        [0.0, 2.0 * l2 * s / m, 0.0, 1.0 - s / m],
    ];
    let q = vec![
        -eta * s / m + 20.0 * e2 * l * s * s / (m * m),
        40.0 * e2 * l * s / gap,
        16.0 * l * s / gap,
        4.0 * l * s,
    ];
    let v = vec![
        1.0,
        s.sqrt() * gap / m.powf(1.5),
        eta * gap / (96.0 * m * l),
        eta / (12.0 * m * l),
    ];
    RecurrenceSystem {
        q_matrix: DenseMatrix::from_rows(&rows).expect("4x4 literal"),
        q: DenseVector(q),
        v: DenseVector(v),
        rho: convergence_rate(p),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    /// `vᵀQ_j ≤ ρ v_j` for every column `j`.
    pub vq_le_rho_v: bool,
    /// `vᵀq ≤ 0`.
    pub vq_nonpositive: bool,
    /// `ρ v_j - (vᵀQ)_j` for `j = 1..4`, then `-vᵀq`.
    pub margins: [f64; 5],
}

impl Certificate {
    pub fn holds(&self) -> bool {
        self.vq_le_rho_v && self.vq_nonpositive
    }
}

pub fn lyapunov_check(p: &RateParams) -> Certificate {
    let sys = build_recurrence_system(p);
    let mut margins = [0.0; 5];
    for (j, margin) in margins.iter_mut().take(4).enumerate() {
        let vq: f64 = (0..4).map(|i| sys.v[i] * sys.q_matrix[(i, j)]).sum();
        *margin = sys.rho * sys.v[j] - vq;
    }
    let vq: f64 = (0..4).map(|i| sys.v[i] * sys.q[i]).sum();
    margins[4] = -vq;
    Certificate {
        vq_le_rho_v: margins[..4].iter().all(|&m| m >= 0.0),
        vq_nonpositive: margins[4] >= 0.0,
        margins,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaEstimate {
    pub lambda: f64,
    /// Batch-means standard error; zero for deterministic strategies.
    pub stderr: f64,
    pub samples: usize,
}

/// `Aᵀ(I - J)A = AᵀA - ccᵀ/M` with `c` the column sums of `A`.
fn deflated_gram(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let c = a.col_sums();
    let mut g = a.gram();
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] -= c[i] * c[j] / n as f64;
        }
    }
    g
}

fn pair_lambda(sum_a: &DenseMatrix, sum_b: &DenseMatrix, count: usize) -> Result<f64> {
    let k = 1.0 / count as f64;
    let ra = spectral_radius_symmetric(&sum_a.scale(k))?.value;
    let rb = spectral_radius_symmetric(&sum_b.scale(k))?.value;
    Ok(ra.max(rb))
}

fn check_doubly(pair: &MixingPair) -> Result<()> {
    if !is_doubly_stochastic(&pair.pull) || !is_doubly_stochastic(&pair.push) {
        return Err(Error::Mixing(
            "contraction factor needs doubly stochastic pairs".into(),
        ));
    }
    Ok(())
}

/// Monte-Carlo estimate of `max(ρ(E[Aᵀ(I-J)A]), ρ(E[Bᵀ(I-J)B]))`.
///
/// Matrices are averaged first and one spectral radius is taken per
/// average. The active set is drawn before the pair on every sample. The
/// standard error comes from batch means over `min(10, n_samples)` batches.
pub fn estimate_lambda(
    strategy: &MixingStrategy,
    plan: &SamplingPlan,
    graph: &DirectedGraph,
    n_samples: usize,
    seed: u64,
) -> Result<LambdaEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let m = graph.node_count();
    strategy.check(m)?;
    plan.check(m)?;
    let fixed = match strategy {
        MixingStrategy::Fixed(p) => Some(p.clone()),
        // Jᵀ(I - J)J = 0 exactly; no need to let rounding say otherwise
        MixingStrategy::Mean => {
            return Ok(LambdaEstimate {
                lambda: 0.0,
                stderr: 0.0,
                samples: n_samples,
            })
        }
        _ => None,
    };
    if let Some(pair) = fixed {
        check_doubly(&pair)?;
        let lambda = pair_lambda(&deflated_gram(&pair.pull), &deflated_gram(&pair.push), 1)?;
        return Ok(LambdaEstimate {
            lambda,
            stderr: 0.0,
            samples: n_samples,
        });
    }

    let mut sampling = rng::tagged_stream(seed, StreamTag::Sampling);
    let mut mixing = rng::tagged_stream(seed, StreamTag::Mixing);
    let batches = n_samples.min(10);
    let mut total_a = DenseMatrix::zeros(m, m);
    let mut total_b = DenseMatrix::zeros(m, m);
    let mut batch_values = Vec::with_capacity(batches);
    let mut drawn = 0;
    for b in 0..batches {
        let end = (b + 1) * n_samples / batches;
        let mut sum_a = DenseMatrix::zeros(m, m);
        let mut sum_b = DenseMatrix::zeros(m, m);
        let count = end - drawn;
        while drawn < end {
            let active = if strategy.uses_active_set() {
                sample_devices(plan, m, &mut sampling)?
            } else {
                NodeSet::empty(m)
            };
            let pair = sample_mixing(strategy, graph, &active, &mut mixing)?;
            check_doubly(&pair)?;
            sum_a = sum_a.add(&deflated_gram(&pair.pull))?;
            sum_b = sum_b.add(&deflated_gram(&pair.push))?;
            drawn += 1;
        }
        batch_values.push(pair_lambda(&sum_a, &sum_b, count)?);
        total_a = total_a.add(&sum_a)?;
        total_b = total_b.add(&sum_b)?;
    }
    let lambda = pair_lambda(&total_a, &total_b, n_samples)?;
    let stderr = if batches > 1 {
        let k = batches as f64;
        let mean = batch_values.iter().sum::<f64>() / k;
        let var = batch_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    } else {
        f64::NAN
    };
    Ok(LambdaEstimate {
        lambda,
        stderr,
        samples: n_samples,
    })
}

/// `G = Y + ∇F(X) - ∇F(Z)`.
pub fn tracker_combination(obj: &dyn Objective, x: &DenseMatrix, y: &DenseMatrix, z: &DenseMatrix) -> Result<DenseMatrix> {
    y.add(&gradients(obj, x))?.sub(&gradients(obj, z))
}

/// Both sides of one inequality `lhs ≤ rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSides {
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundSides {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }

    /// Slack divided by the larger side; zero when both sides vanish.
    pub fn relative_slack(&self) -> f64 {
        let scale = self.lhs.abs().max(self.rhs.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.slack() / scale
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma4Report {
    pub a: BoundSides,
    pub b: BoundSides,
    pub c: BoundSides,
}

impl Lemma4Report {
    pub fn min_relative_slack(&self) -> f64 {
        self.a
            .relative_slack()
            .min(self.b.relative_slack())
            .min(self.c.relative_slack())
    }
}

/// Evaluates, at one realization, with `𝒳 = ‖X - 1x̄ᵀ‖²`,
/// `𝒴 = ‖Y - 1ȳᵀ‖²`, `H = ‖∇F(Z) - ∇F(1x*ᵀ)‖²` and `e = f(x̄) - f*`:
///
/// ```text
/// a) ‖∇F(X) - ∇F(1x*ᵀ)‖² ≤ 2L²𝒳 + 4MLe
/// b) ‖∇F(X) - ∇F(Z)‖²    ≤ 4L²𝒳 + 8MLe + 2H
/// c) ‖G‖²                ≤ 10L²𝒳 + 20MLe + 4H + 2𝒴
/// ```
///
/// `Y` is recovered from `G` as `G - ∇F(X) + ∇F(Z)`. Inequality (c) needs
/// `1ᵀY = 1ᵀ∇F(Z)`.
pub fn lemma4_pointwise_check(
    x: &DenseMatrix,
    z: &DenseMatrix,
    g: &DenseMatrix,
    obj: &dyn Objective,
    reference: &Reference,
    l: f64,
) -> Result<Lemma4Report> {
    let (m, d) = (obj.nodes(), obj.dim());
    for mat in [x, z, g] {
        if mat.rows() != m || mat.cols() != d {
            return Err(Error::dim("lemma4_pointwise_check", "state shape differs from objective"));
        }
    }
    let gx = gradients(obj, x);
    let gz = gradients(obj, z);
    let star = DenseMatrix::from_rows(&vec![reference.x_star.0.clone(); m])?;
    let gstar = gradients(obj, &star);
    let y = g.sub(&gx)?.add(&gz)?;

    let spread = |mat: &DenseMatrix| {
        let mean: Vec<f64> = mat.col_sums().iter().map(|s| s / m as f64).collect();
        (0..m).map(|i| dist_sq(mat.row(i), &mean)).sum::<f64>()
    };
    let xbar: Vec<f64> = x.col_sums().iter().map(|s| s / m as f64).collect();
    let cx = spread(x);
    let cy = spread(&y);
    let e = obj.excess_value(&xbar, reference);
    let h = gz.sub(&gstar)?.norm_sq();
    let (ml, l2) = (m as f64 * l, l * l);

    Ok(Lemma4Report {
        a: BoundSides {
            lhs: gx.sub(&gstar)?.norm_sq(),
            rhs: 2.0 * l2 * cx + 4.0 * ml * e,
        },
        b: BoundSides {
            lhs: gx.sub(&gz)?.norm_sq(),
            rhs: 4.0 * l2 * cx + 8.0 * ml * e + 2.0 * h,
        },
        c: BoundSides {
            lhs: g.norm_sq(),
            rhs: 10.0 * l2 * cx + 20.0 * ml * e + 4.0 * h + 2.0 * cy,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateFit {
    /// Least-squares fit of `log₁₀(subopt)` against `t`.
    Fit { slope: f64, r2: f64 },
    /// The tail holds a zero or negative suboptimality, so no logarithm.
    ConvergedBelowFloor,
}

/// Fits the last `tail_fraction` of the series.
pub fn empirical_rate(series: &[MetricsRecord], tail_fraction: f64) -> Result<RateFit> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tail fraction must lie in (0, 1], got {tail_fraction}"
        )));
    }
    let take = ((series.len() as f64 * tail_fraction).ceil() as usize).min(series.len());
    let tail = &series[series.len() - take..];
    if tail.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 tail records, got {}",
            tail.len()
        )));
    }
    if tail.iter().any(|r| !(r.subopt > 0.0)) {
        return Ok(RateFit::ConvergedBelowFloor);
    }
    let n = tail.len() as f64;
    let ts: Vec<f64> = tail.iter().map(|r| r.t as f64).collect();
    let ys: Vec<f64> = tail.iter().map(|r| r.subopt.log10()).collect();
    let tm = ts.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let stt: f64 = ts.iter().map(|t| (t - tm).powi(2)).sum();
    let sty: f64 = ts.iter().zip(&ys).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let syy: f64 = ys.iter().map(|y| (y - ym).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::InvalidArgument("tail records share one iteration".into()));
    }
    let slope = sty / stt;
    let r2 = if syy == 0.0 { 1.0 } else { (sty * sty) / (stt * syy) };
    Ok(RateFit::Fit { slope, r2 })
}
