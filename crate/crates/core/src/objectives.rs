//! Local objectives `f_i` and the global average `f = (1/M) Σ f_i`.
//!
//! Two families are provided. Ridge regression uses
//! `f_i(x) = ‖A_i x - b_i‖² + λ_i ‖x‖²`; multinomial logistic regression uses
//! the summed cross-entropy of a linear softmax model plus `λ_i ‖x‖²`.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{
    self, axpy, dot, norm_sq, smallest_eigenvalue_spd, spectral_radius_symmetric, DenseMatrix,
    DenseVector,
};
use crate::rng;

/// Smoothness of every `f_i` and strong convexity of `f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessConstants {
    pub l: f64,
    pub mu: f64,
    pub mu_method: MuMethod,
}

/// How `mu` was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MuMethod {
    /// Smallest eigenvalue of the global Hessian by inverse power iteration.
    InversePowerIteration,
    /// Lower bound `(2/M) Σ λ_i` from the regularizers alone.
    RegularizerBound,
}

/// Minimizer and optimal value of the global objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub x_star: DenseVector,
    pub f_star: f64,
}

pub trait Objective: Send + Sync {
    fn nodes(&self) -> usize;

    /// Parameter dimension.
    fn dim(&self) -> usize;

    /// `f_i(x)` without shape checks.
    fn value_at(&self, node: usize, x: &[f64]) -> f64;

    /// Writes `∇f_i(x)` into `out` without shape checks.
    fn gradient_into(&self, node: usize, x: &[f64], out: &mut [f64]);

    fn constants(&self) -> Result<SmoothnessConstants>;

    /// `f(x) - f*`. Implementations may override with a better conditioned
    /// formula.
    fn excess_value(&self, x: &[f64], reference: &Reference) -> f64 {
        self.global_value_at(x) - reference.f_star
    }

    fn global_value_at(&self, x: &[f64]) -> f64 {
        let total: f64 = (0..self.nodes()).map(|i| self.value_at(i, x)).sum();
        total / self.nodes() as f64
    }

    fn local_value(&self, node: usize, x: &[f64]) -> Result<f64> {
        self.check_args("local_value", node, x)?;
        Ok(self.value_at(node, x))
    }

    fn local_gradient(&self, node: usize, x: &[f64]) -> Result<DenseVector> {
        self.check_args("local_gradient", node, x)?;
        let mut g = DenseVector::zeros(self.dim());
        self.gradient_into(node, x, &mut g);
        Ok(g)
    }

    fn global_value(&self, x: &[f64]) -> Result<f64> {
        self.check_args("global_value", 0, x)?;
        Ok(self.global_value_at(x))
    }

    fn global_gradient(&self, x: &[f64]) -> Result<DenseVector> {
        self.check_args("global_gradient", 0, x)?;
        let d = self.dim();
        let mut total = vec![0.0; d];
        let mut g = vec![0.0; d];
        for i in 0..self.nodes() {
            self.gradient_into(i, x, &mut g);
            axpy(1.0, &g, &mut total);
        }
        let m = self.nodes() as f64;
        total.iter_mut().for_each(|v| *v /= m);
        Ok(DenseVector(total))
    }

    #[doc(hidden)]
    fn check_args(&self, op: &'static str, node: usize, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dim(
                op,
                format!("point has dimension {}, objective expects {}", x.len(), self.dim()),
            ));
        }
        if node >= self.nodes() {
            return Err(Error::dim(
                op,
                format!("node {node} out of range for {} nodes", self.nodes()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeNode {
    pub features: DenseMatrix,
    pub labels: Vec<f64>,
    pub reg: f64,
    gram: DenseMatrix,
    features_t_labels: Vec<f64>,
}

impl RidgeNode {
    pub fn new(features: DenseMatrix, labels: Vec<f64>, reg: f64) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::dim(
                "ridge_node",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        if !(reg > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "regularizer must be positive, got {reg}"
            )));
        }
        let gram = features.gram();
        let features_t_labels = features.transpose().matvec(&labels)?.into_inner();
        Ok(RidgeNode {
            features,
            labels,
            reg,
            gram,
            features_t_labels,
        })
    }

    pub fn gram(&self) -> &DenseMatrix {
        &self.gram
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeEnsemble {
    nodes: Vec<RidgeNode>,
    dim: usize,
    /// Hessian of the global objective, `(2/M)(Σ A_iᵀA_i + Σ λ_i I)`.
    hessian: DenseMatrix,
}

impl RidgeEnsemble {
    pub fn new(nodes: Vec<RidgeNode>) -> Result<Self> {
        let first = nodes
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one node".into()))?;
        let dim = first.features.cols();
        let rows = first.features.rows();
        for (i, n) in nodes.iter().enumerate() {
            if n.features.cols() != dim || n.features.rows() != rows {
                return Err(Error::dim(
                    "ridge_ensemble",
                    format!(
                        "node {i} has {}x{} features, node 0 has {rows}x{dim}",
                        n.features.rows(),
                        n.features.cols()
                    ),
                ));
            }
        }
        let m = nodes.len() as f64;
        let mut hessian = DenseMatrix::zeros(dim, dim);
        let mut reg_total = 0.0;
        for n in &nodes {
            hessian = hessian.add(&n.gram)?;
            reg_total += n.reg;
        }
        for k in 0..dim {
            hessian[(k, k)] += reg_total;
        }
        let hessian = hessian.scale(2.0 / m);
        Ok(RidgeEnsemble {
            nodes,
            dim,
            hessian,
        })
    }

    pub fn node(&self, i: usize) -> &RidgeNode {
        &self.nodes[i]
    }

    pub fn n_local(&self) -> usize {
        self.nodes[0].features.rows()
    }

    pub fn hessian(&self) -> &DenseMatrix {
        &self.hessian
    }

    /// Solves `(Σ A_iᵀA_i + Σ λ_i I) x = Σ A_iᵀ b_i`.
    pub fn exact_solution(&self) -> Result<DenseVector> {
        let d = self.dim;
        let mut rhs = vec![0.0; d];
        for n in &self.nodes {
            axpy(1.0, &n.features_t_labels, &mut rhs);
        }
        // Σ A_iᵀA_i + Σ λ_i I == (M/2) * hessian
        let system = self.hessian.scale(self.nodes.len() as f64 / 2.0);
        numerics::solve_spd(&system, &rhs)
    }

    pub fn reference(&self) -> Result<Reference> {
        let x_star = self.exact_solution()?;
        let f_star = self.global_value_at(&x_star);
        Ok(Reference { x_star, f_star })
    }
}

impl Objective for RidgeEnsemble {
    fn nodes(&self) -> usize {
        self.nodes.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn value_at(&self, node: usize, x: &[f64]) -> f64 {
        let n = &self.nodes[node];
        let mut loss = 0.0;
        for (r, &b) in n.labels.iter().enumerate() {
            let resid = b - dot(n.features.row(r), x);
            loss += resid * resid;
        }
        loss + n.reg * norm_sq(x)
    }

    fn gradient_into(&self, node: usize, x: &[f64], out: &mut [f64]) {
        // 2 AᵀA x - 2 Aᵀb + 2 λ x
        let n = &self.nodes[node];
        for (k, o) in out.iter_mut().enumerate() {
            *o = 2.0 * (dot(n.gram.row(k), x) - n.features_t_labels[k] + n.reg * x[k]);
        }
    }

    fn constants(&self) -> Result<SmoothnessConstants> {
        let mut l: f64 = 0.0;
        for n in &self.nodes {
            let rho = spectral_radius_symmetric(&n.gram)?;
            l = l.max(2.0 * rho.value + 2.0 * n.reg);
        }
        let bound = 2.0 * self.nodes.iter().map(|n| n.reg).sum::<f64>() / self.nodes.len() as f64;
        let est = smallest_eigenvalue_spd(&self.hessian)?;
        let (mu, mu_method) = if est.converged && est.value >= bound {
            (est.value, MuMethod::InversePowerIteration)
        } else {
            (bound, MuMethod::RegularizerBound)
        };
        Ok(SmoothnessConstants {
            l,
            mu: mu.min(l),
            mu_method,
        })
    }

    /// `f(x) - f(x*) = ½ (x - x*)ᵀ ∇²f (x - x*)`, exact for a quadratic and
    /// free of the cancellation in `f(x) - f*`.
    fn excess_value(&self, x: &[f64], reference: &Reference) -> f64 {
        let diff: Vec<f64> = x.iter().zip(reference.x_star.iter()).map(|(a, b)| a - b).collect();
        let hd = self.hessian.matvec(&diff).expect("dimensions fixed at construction");
        0.5 * dot(&diff, &hd)
    }
}

/// Draws a heterogeneous ridge ensemble.
///
/// A global ground truth `w*` is standard normal; node `i` uses
/// `w_i = w* + heterogeneity * δ_i`. Features are standard normal and
/// `b = a·w_i + noise * ε`. Every node uses `λ_i = 1 / n_local`.
pub fn generate_ridge(
    nodes: usize,
    dim: usize,
    n_local: usize,
    heterogeneity: f64,
    noise: f64,
    seed: u64,
) -> Result<RidgeEnsemble> {
    if nodes == 0 || dim == 0 || n_local == 0 {
        return Err(Error::InvalidArgument(
            "nodes, dim and n_local must all be at least 1".into(),
        ));
    }
    let mut s = rng::stream(seed);
    let truth: Vec<f64> = (0..dim).map(|_| s.sample(StandardNormal)).collect();
    let reg = 1.0 / n_local as f64;
    let mut out = Vec::with_capacity(nodes);
    for _ in 0..nodes {
        let local: Vec<f64> = truth
            .iter()
            .map(|w| w + heterogeneity * s.sample::<f64, _>(StandardNormal))
            .collect();
        let features: Vec<f64> = (0..n_local * dim).map(|_| s.sample(StandardNormal)).collect();
        let features = DenseMatrix::from_vec(n_local, dim, features)?;
        let labels: Vec<f64> = (0..n_local)
            .map(|r| dot(features.row(r), &local) + noise * s.sample::<f64, _>(StandardNormal))
            .collect();
        out.push(RidgeNode::new(features, labels, reg)?);
    }
    RidgeEnsemble::new(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticNode {
    pub features: DenseMatrix,
    /// Class index per row; the one-hot label is `e_label`.
    pub labels: Vec<usize>,
    pub reg: f64,
    gram: DenseMatrix,
}

impl LogisticNode {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, classes: usize, reg: f64) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::dim(
                "logistic_node",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if !(reg > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "regularizer must be positive, got {reg}"
            )));
        }
        let gram = features.gram();
        Ok(LogisticNode {
            features,
            labels,
            reg,
            gram,
        })
    }
}

/// Multinomial logistic regression. The parameter is the `d × C` weight
/// matrix flattened row-major, so `x[k * C + c]` weighs feature `k` for
/// class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticEnsemble {
    nodes: Vec<LogisticNode>,
    features: usize,
    classes: usize,
}

impl LogisticEnsemble {
    pub fn new(nodes: Vec<LogisticNode>, classes: usize) -> Result<Self> {
        let first = nodes
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one node".into()))?;
        if classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let features = first.features.cols();
        let rows = first.features.rows();
        if nodes
            .iter()
            .any(|n| n.features.cols() != features || n.features.rows() != rows)
        {
            return Err(Error::dim("logistic_ensemble", "inconsistent node shapes"));
        }
        Ok(LogisticEnsemble {
            nodes,
            features,
            classes,
        })
    }

    pub fn node(&self, i: usize) -> &LogisticNode {
        &self.nodes[i]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features
    }

    pub fn n_local(&self) -> usize {
        self.nodes[0].features.rows()
    }

    fn logits(&self, row: &[f64], x: &[f64], out: &mut [f64]) {
        let c = self.classes;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &a) in row.iter().enumerate() {
            axpy(a, &x[k * c..(k + 1) * c], out);
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Objective for LogisticEnsemble {
    fn nodes(&self) -> usize {
        self.nodes.len()
    }

    fn dim(&self) -> usize {
        self.features * self.classes
    }

    fn value_at(&self, node: usize, x: &[f64]) -> f64 {
        let n = &self.nodes[node];
        let mut z = vec![0.0; self.classes];
        let mut loss = 0.0;
        for (r, &y) in n.labels.iter().enumerate() {
            self.logits(n.features.row(r), x, &mut z);
            loss += log_sum_exp(&z) - z[y];
        }
        loss + n.reg * norm_sq(x)
    }

    fn gradient_into(&self, node: usize, x: &[f64], out: &mut [f64]) {
        let n = &self.nodes[node];
        let c = self.classes;
        let mut z = vec![0.0; c];
        for (o, xi) in out.iter_mut().zip(x) {
            *o = 2.0 * n.reg * xi;
        }
        for (r, &y) in n.labels.iter().enumerate() {
            let row = n.features.row(r);
            self.logits(row, x, &mut z);
            let lse = log_sum_exp(&z);
            // z becomes p - e_y
            for (cls, v) in z.iter_mut().enumerate() {
                *v = (*v - lse).exp() - if cls == y { 1.0 } else { 0.0 };
            }
            for (k, &a) in row.iter().enumerate() {
                axpy(a, &z, &mut out[k * c..(k + 1) * c]);
            }
        }
    }

    /// `L_i = ½ ρ(A_iᵀA_i) + 2λ_i` (the softmax Hessian is bounded by ½ I);
    /// `mu` is the regularizer bound.
    fn constants(&self) -> Result<SmoothnessConstants> {
        let mut l: f64 = 0.0;
        for n in &self.nodes {
            let rho = spectral_radius_symmetric(&n.gram)?;
            l = l.max(0.5 * rho.value + 2.0 * n.reg);
        }
        let mu = 2.0 * self.nodes.iter().map(|n| n.reg).sum::<f64>() / self.nodes.len() as f64;
        Ok(SmoothnessConstants {
            l,
            mu: mu.min(l),
            mu_method: MuMethod::RegularizerBound,
        })
    }
}

/// Draws a heterogeneous multinomial logistic ensemble.
///
/// A global weight matrix `W*` is standard normal, node `i` uses
/// `W_i = W* + heterogeneity * Δ_i`, features are standard normal and the
/// label of a row `a` is `argmax_c (aᵀW_i + noise * ε)_c`.
pub fn generate_logistic(
    nodes: usize,
    dim: usize,
    n_local: usize,
    classes: usize,
    heterogeneity: f64,
    noise: f64,
    seed: u64,
) -> Result<LogisticEnsemble> {
    if nodes == 0 || dim == 0 || n_local == 0 {
        return Err(Error::InvalidArgument(
            "nodes, dim and n_local must all be at least 1".into(),
        ));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let mut s = rng::stream(seed);
    let truth: Vec<f64> = (0..dim * classes).map(|_| s.sample(StandardNormal)).collect();
    let reg = 1.0 / n_local as f64;
    let mut out = Vec::with_capacity(nodes);
    for _ in 0..nodes {
        let local: Vec<f64> = truth
            .iter()
            .map(|w| w + heterogeneity * s.sample::<f64, _>(StandardNormal))
            .collect();
        let features: Vec<f64> = (0..n_local * dim).map(|_| s.sample(StandardNormal)).collect();
        let features = DenseMatrix::from_vec(n_local, dim, features)?;
        let mut labels = Vec::with_capacity(n_local);
        for r in 0..n_local {
            let row = features.row(r);
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..classes {
                let score: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(k, a)| a * local[k * classes + c])
                    .sum::<f64>()
                    + noise * s.sample::<f64, _>(StandardNormal);
                if score > best.1 {
                    best = (c, score);
                }
            }
            labels.push(best.0);
        }
        out.push(LogisticNode::new(features, labels, classes, reg)?);
    }
    LogisticEnsemble::new(out, classes)
}

/// Approximate minimizer by accelerated gradient descent with adaptive
/// restart, stopping when `‖∇f‖ ≤ grad_tol`. Used as the suboptimality
/// reference for objectives without a closed-form solution.
pub fn solve_reference(obj: &dyn Objective, grad_tol: f64, max_iters: usize) -> Result<Reference> {
    let c = obj.constants()?;
    let step = 1.0 / c.l;
    let d = obj.dim();
    let mut x = vec![0.0; d];
    let mut y = x.clone();
    let mut momentum = 1.0f64;
    for _ in 0..max_iters {
        let g = obj.global_gradient(&y)?;
        if numerics::norm(&g) <= grad_tol {
            x.copy_from_slice(&y);
            break;
        }
        let x_next: Vec<f64> = y.iter().zip(g.iter()).map(|(yi, gi)| yi - step * gi).collect();
        // gradient restart: drop momentum once it points uphill
        let uphill: f64 = g.iter().zip(x_next.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
        let next_momentum = if uphill > 0.0 {
            1.0
        } else {
            0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt())
        };
        let beta = if uphill > 0.0 { 0.0 } else { (momentum - 1.0) / next_momentum };
        for k in 0..d {
            y[k] = x_next[k] + beta * (x_next[k] - x[k]);
        }
        x = x_next;
        momentum = next_momentum;
    }
    let f_star = obj.global_value_at(&x);
    Ok(Reference {
        x_star: DenseVector(x),
        f_star,
    })
}

/// A generated or loaded dataset of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum Ensemble {
    Ridge(RidgeEnsemble),
    Logistic(LogisticEnsemble),
}

impl Ensemble {
    pub fn as_objective(&self) -> &dyn Objective {
        match self {
            Ensemble::Ridge(r) => r,
            Ensemble::Logistic(l) => l,
        }
    }

    /// Exact solution for ridge; accelerated-gradient reference otherwise.
    pub fn reference(&self) -> Result<Reference> {
        match self {
            Ensemble::Ridge(r) => r.reference(),
            Ensemble::Logistic(l) => solve_reference(l, 1e-10, 200_000),
        }
    }

    pub fn n_local(&self) -> usize {
        match self {
            Ensemble::Ridge(r) => r.n_local(),
            Ensemble::Logistic(l) => l.n_local(),
        }
    }

    /// Writes the dataset file.
    ///
    /// ```text
    /// ppds-dataset 1
    /// family ridge|logistic
    /// nodes <M>
    /// features <d>
    /// n_local <n>
    /// classes <C>            (0 for ridge)
    /// node <i> lambda <λ_i>  (then n lines: d features followed by the label)
    /// ```
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let (family, nodes, features, n_local, classes) = match self {
            Ensemble::Ridge(r) => ("ridge", r.nodes(), r.dim(), r.n_local(), 0),
            Ensemble::Logistic(l) => (
                "logistic",
                l.nodes(),
                l.feature_dim(),
                l.n_local(),
                l.classes(),
            ),
        };
        let mut buf = String::new();
        use std::fmt::Write as _;
        let _ = writeln!(buf, "ppds-dataset 1");
        let _ = writeln!(buf, "family {family}");
        let _ = writeln!(buf, "nodes {nodes}");
        let _ = writeln!(buf, "features {features}");
        let _ = writeln!(buf, "n_local {n_local}");
        let _ = writeln!(buf, "classes {classes}");
        for i in 0..nodes {
            let (feats, reg) = match self {
                Ensemble::Ridge(r) => (&r.node(i).features, r.node(i).reg),
                Ensemble::Logistic(l) => (&l.node(i).features, l.node(i).reg),
            };
            let _ = writeln!(buf, "node {i} lambda {reg:e}");
            for r in 0..n_local {
                for v in feats.row(r) {
                    let _ = write!(buf, "{v:e} ");
                }
                match self {
                    Ensemble::Ridge(e) => {
                        let _ = writeln!(buf, "{:e}", e.node(i).labels[r]);
                    }
                    Ensemble::Logistic(e) => {
                        let _ = writeln!(buf, "{}", e.node(i).labels[r]);
                    }
                }
            }
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Ensemble> {
        let mut lines = input
            .lines()
            .enumerate()
            .map(|(no, l)| l.map(|l| (no + 1, l)))
            .filter(|l| l.as_ref().map_or(true, |(_, s)| !s.trim().is_empty()));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some(l) => Ok(l?),
                None => Err(Error::Parse {
                    line: 0,
                    message: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let parse_err = |line: usize, message: String| Error::Parse { line, message };

        let (no, magic) = next("header")?;
        if magic.trim() != "ppds-dataset 1" {
            return Err(parse_err(no, format!("bad header {magic:?}")));
        }
        let mut header = |key: &str| -> Result<String> {
            let (no, line) = next(key)?;
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(k), Some(v), None) if k == key => Ok(v.to_string()),
                _ => Err(parse_err(no, format!("expected \"{key} <value>\", found {line:?}"))),
            }
        };
        let family = header("family")?;
        let count = |s: String, key: &str| {
            s.parse::<usize>()
                .map_err(|e| parse_err(0, format!("{key}: {e}")))
        };
        let nodes = count(header("nodes")?, "nodes")?;
        let features = count(header("features")?, "features")?;
        let n_local = count(header("n_local")?, "n_local")?;
        let classes = count(header("classes")?, "classes")?;

        let mut ridge = Vec::new();
        let mut logistic = Vec::new();
        for i in 0..nodes {
            let (no, line) = next("node header")?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let reg = match parts.as_slice() {
                ["node", idx, "lambda", reg] if idx.parse::<usize>() == Ok(i) => reg
                    .parse::<f64>()
                    .map_err(|e| parse_err(no, format!("lambda: {e}")))?,
                _ => return Err(parse_err(no, format!("expected \"node {i} lambda <λ>\""))),
            };
            let mut data = Vec::with_capacity(n_local * features);
            let mut real_labels = Vec::new();
            let mut class_labels = Vec::new();
            for _ in 0..n_local {
                let (no, line) = next("data row")?;
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != features + 1 {
                    return Err(parse_err(
                        no,
                        format!("expected {} fields, found {}", features + 1, fields.len()),
                    ));
                }
                for f in &fields[..features] {
                    data.push(f.parse::<f64>().map_err(|e| parse_err(no, e.to_string()))?);
                }
                let label = fields[features];
                if family == "ridge" {
                    real_labels.push(label.parse::<f64>().map_err(|e| parse_err(no, e.to_string()))?);
                } else {
                    class_labels.push(label.parse::<usize>().map_err(|e| parse_err(no, e.to_string()))?);
                }
            }
            let feats = DenseMatrix::from_vec(n_local, features, data)?;
            match family.as_str() {
                "ridge" => ridge.push(RidgeNode::new(feats, real_labels, reg)?),
                "logistic" => logistic.push(LogisticNode::new(feats, class_labels, classes, reg)?),
                other => return Err(parse_err(2, format!("unknown family {other:?}"))),
            }
        }
        match family.as_str() {
            "ridge" => Ok(Ensemble::Ridge(RidgeEnsemble::new(ridge)?)),
            "logistic" => Ok(Ensemble::Logistic(LogisticEnsemble::new(logistic, classes)?)),
            other => Err(parse_err(2, format!("unknown family {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_data_ridge(nodes: usize, dim: usize, reg: f64) -> RidgeEnsemble {
        let ns = (0..nodes)
            .map(|_| RidgeNode::new(DenseMatrix::zeros(1, dim), vec![0.0], reg).unwrap())
            .collect();
        RidgeEnsemble::new(ns).unwrap()
    }

    /// Central finite differences of `f_i`.
    fn fd_gradient(obj: &dyn Objective, node: usize, x: &[f64], h: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|k| {
                xp[k] = x[k] + h;
                let up = obj.value_at(node, &xp);
                xp[k] = x[k] - h;
                let down = obj.value_at(node, &xp);
                xp[k] = x[k];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        numerics::norm(&diff) / numerics::norm(b).max(1.0)
    }

    #[test]
    fn zero_data_gradient_is_twice_x() {
        let e = zero_data_ridge(1, 3, 1.0);
        let g = e.local_gradient(0, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(g.0, vec![2.0, -4.0, 1.0]);
        assert!(e.local_gradient(0, &[1.0]).is_err());
        assert!(e.local_gradient(1, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn zero_data_constants() {
        let c = zero_data_ridge(4, 3, 1.0).constants().unwrap();
        assert!((c.l - 2.0).abs() < 1e-12);
        assert!((c.mu - 2.0).abs() < 1e-10);
    }

    #[test]
    fn single_node_identity_solution() {
        let b = vec![2.0, -1.0, 4.0];
        let node = RidgeNode::new(DenseMatrix::identity(3), b.clone(), 1.0).unwrap();
        let e = RidgeEnsemble::new(vec![node]).unwrap();
        let x = e.exact_solution().unwrap();
        for (xi, bi) in x.iter().zip(&b) {
            assert!((xi - bi / 2.0).abs() < 1e-14);
        }
        // M = 1: global equals local
        assert_eq!(e.global_value(&x).unwrap(), e.local_value(0, &x).unwrap());
    }

    #[test]
    fn homogeneous_noiseless_ensemble() {
        // one shared noiseless model: the least-squares fit of node 0 alone
        // reproduces every other node's labels
        let e = generate_ridge(5, 4, 30, 0.0, 0.0, 11).unwrap();
        let n0 = e.node(0);
        let w = numerics::solve_spd(n0.gram(), &n0.features.transpose().matvec(&n0.labels).unwrap()).unwrap();
        for i in 1..5 {
            let n = e.node(i);
            let pred = n.features.matvec(&w).unwrap();
            for (p, b) in pred.iter().zip(&n.labels) {
                assert!((p - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_ridge(4, 3, 5, 1.0, 0.1, 99).unwrap();
        let b = generate_ridge(4, 3, 5, 1.0, 0.1, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_ridge(4, 3, 5, 1.0, 0.1, 100).unwrap();
        assert_ne!(a, c);
        let e = generate_ridge(100, 10, 100, 1.0, 0.1, 0).unwrap();
        assert_eq!((e.nodes(), e.dim(), e.n_local()), (100, 10, 100));
        assert!((e.node(0).reg - 0.01).abs() < 1e-15);
    }

    #[test]
    fn exact_solution_is_stationary() {
        let e = generate_ridge(8, 6, 20, 1.0, 0.1, 5).unwrap();
        let x = e.exact_solution().unwrap();
        let g = e.global_gradient(&x).unwrap();
        assert!(g.norm() <= 1e-8 * (1.0 + x.norm()), "{}", g.norm());
    }

    #[test]
    fn global_gradient_scales_with_data() {
        // scaling features and labels by s scales the data term by s²
        let e = generate_ridge(3, 2, 4, 1.0, 0.1, 8).unwrap();
        let s = 3.0;
        let scaled = RidgeEnsemble::new(
            (0..3)
                .map(|i| {
                    let n = e.node(i);
                    RidgeNode::new(
                        n.features.scale(s),
                        n.labels.iter().map(|b| b * s).collect(),
                        n.reg * s * s,
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let x = [0.3, -0.7];
        let g = e.global_gradient(&x).unwrap();
        let gs = scaled.global_gradient(&x).unwrap();
        for (a, b) in g.iter().zip(gs.iter()) {
            assert!((a * s * s - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn constants_match_directional_second_differences() {
        let e = generate_ridge(6, 5, 25, 1.0, 0.1, 21).unwrap();
        let c = e.constants().unwrap();
        assert!(c.mu <= c.l);
        assert_eq!(c.mu_method, MuMethod::InversePowerIteration);
        // max over nodes of the Rayleigh quotient of ∇²f_i along its top
        // direction, found by power iteration on Hessian-vector products
        // computed from gradient differences
        let h = 1e-4;
        let mut best: f64 = 0.0;
        for i in 0..e.nodes() {
            let mut v = vec![1.0, 0.3, -0.2, 0.5, 0.9];
            for _ in 0..200 {
                let nv = numerics::norm(&v);
                v.iter_mut().for_each(|x| *x /= nv);
                let plus: Vec<f64> = v.iter().map(|x| h * x).collect();
                let minus: Vec<f64> = v.iter().map(|x| -h * x).collect();
                let gp = e.local_gradient(i, &plus).unwrap();
                let gm = e.local_gradient(i, &minus).unwrap();
                v = gp.iter().zip(gm.iter()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            }
            best = best.max(numerics::norm(&v));
        }
        assert!((best - c.l).abs() <= 0.05 * c.l, "fd {best} vs {}", c.l);
    }

    #[test]
    fn logistic_uniform_point_gradient() {
        // at x = 0 all class probabilities are 1/C
        let e = generate_logistic(2, 3, 6, 4, 1.0, 0.5, 2).unwrap();
        let x = vec![0.0; e.dim()];
        let g = e.local_gradient(1, &x).unwrap();
        let fd = fd_gradient(&e, 1, &x, 1e-6);
        assert!(rel_err(&g, &fd) < 1e-5);
        let n = e.node(1);
        let mut expected = vec![0.0; e.dim()];
        for (r, &y) in n.labels.iter().enumerate() {
            for (k, a) in n.features.row(r).iter().enumerate() {
                for c in 0..4 {
                    expected[k * 4 + c] += a * (0.25 - if c == y { 1.0 } else { 0.0 });
                }
            }
        }
        assert!(rel_err(&g, &expected) < 1e-14);
    }

    #[test]
    fn logistic_reference_is_stationary() {
        let e = generate_logistic(4, 3, 10, 3, 1.0, 0.5, 4).unwrap();
        let r = solve_reference(&e, 1e-9, 100_000).unwrap();
        assert!(e.global_gradient(&r.x_star).unwrap().norm() <= 1e-9);
    }

    #[test]
    fn dataset_round_trip() {
        for ens in [
            Ensemble::Ridge(generate_ridge(3, 2, 4, 1.0, 0.1, 1).unwrap()),
            Ensemble::Logistic(generate_logistic(3, 2, 4, 3, 1.0, 0.1, 1).unwrap()),
        ] {
            let mut buf = Vec::new();
            ens.write(&mut buf).unwrap();
            let back = Ensemble::read(&buf[..]).unwrap();
            assert_eq!(back, ens);
        }
        assert!(Ensemble::read(&b"ppds-dataset 2\n"[..]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn ridge_gradient_matches_finite_differences(x in prop::collection::vec(-3.0f64..3.0, 4), node in 0usize..3) {
            let e = generate_ridge(3, 4, 15, 1.0, 0.1, 17).unwrap();
            let g = e.local_gradient(node, &x).unwrap();
            prop_assert!(rel_err(&g, &fd_gradient(&e, node, &x, 1e-6)) < 1e-5);
        }

        #[test]
        fn logistic_gradient_matches_finite_differences(x in prop::collection::vec(-2.0f64..2.0, 9), node in 0usize..3) {
            let e = generate_logistic(3, 3, 12, 3, 1.0, 0.3, 17).unwrap();
            let g = e.local_gradient(node, &x).unwrap();
            prop_assert!(rel_err(&g, &fd_gradient(&e, node, &x, 1e-6)) < 1e-5);
        }

        #[test]
        fn local_objectives_are_convex(
            x in prop::collection::vec(-3.0f64..3.0, 6),
            y in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let r = generate_ridge(2, 6, 8, 1.0, 0.1, 3).unwrap();
            let l = generate_logistic(2, 3, 8, 2, 1.0, 0.3, 3).unwrap();
            for obj in [&r as &dyn Objective, &l] {
                for i in 0..2 {
                    let g = obj.local_gradient(i, &x).unwrap();
                    let step: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let lhs = obj.value_at(i, &y);
                    let rhs = obj.value_at(i, &x) + dot(&g, &step);
                    prop_assert!(lhs >= rhs - 1e-9 * (1.0 + lhs.abs()));
                }
            }
        }

        #[test]
        fn exact_solution_is_a_global_minimizer(p in prop::collection::vec(-1.0f64..1.0, 5), scale in 1e-6f64..1.0) {
            let e = generate_ridge(4, 5, 12, 1.0, 0.1, 31).unwrap();
            let r = e.reference().unwrap();
            let moved: Vec<f64> = r.x_star.iter().zip(&p).map(|(a, b)| a + scale * b).collect();
            prop_assert!(e.global_value_at(&moved) >= r.f_star - 1e-12 * r.f_star.abs());
            prop_assert!(e.excess_value(&moved, &r) >= 0.0);
        }
    }
}
