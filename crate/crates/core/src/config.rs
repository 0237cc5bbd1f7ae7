//! Experiment configuration: a flat `key = value` file with dotted keys.
//!
//! ```text
//! # comments run to the end of the line
//! algorithm = ppds
//! graph.M = 100
//! sampling.S = 20
//! mixing.variant = broadcast
//! eta = auto
//! ```
//!
//! Every key has a default, so an empty file is a valid configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::engine::{Algorithm, Experiment, SamplingPlan};
use crate::error::{Error, Result};
use crate::mixing::{metropolis, MixingStrategy};
use crate::objectives::{generate_logistic, generate_ridge, Ensemble, Reference, SmoothnessConstants};
use crate::rng::{derive_seed, StreamTag};
use crate::theory::{estimate_lambda, stepsize_bound, RateParams};
use crate::topology::{build_rgg, DirectedGraph, NodeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Ridge,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingVariant {
    Uniform,
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingVariant {
    Broadcast,
    MetropolisOnActive,
    Mean,
    IndependentGossip,
    FixedMetropolis,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Eta {
    Value(f64),
    /// Theoretical stepsize bound with `λ` estimated for the mixing strategy.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub iterations: usize,
    pub record_every: usize,
    pub nodes: usize,
    pub radius: f64,
    pub family: Family,
    pub dim: usize,
    pub n_local: usize,
    pub classes: usize,
    pub heterogeneity: f64,
    pub noise: f64,
    pub sampling: SamplingVariant,
    pub sample_size: usize,
    pub probability: f64,
    pub mixing: MixingVariant,
    pub targets: usize,
    pub neighbors: usize,
    pub comm_nodes: usize,
    pub eta: Eta,
    pub output: PathBuf,
    pub stop_below: Option<f64>,
    pub lambda_samples: usize,
}

impl Default for ExperimentConfig {
    /// The synthetic setup: 100 nodes on a radius-0.2 geometric graph,
    /// 10-dimensional ridge with 100 samples per node, 20 sampled nodes per
    /// round, each broadcasting to one neighbour.
    fn default() -> Self {
        ExperimentConfig {
            algorithm: Algorithm::Ppds,
            seed: 0,
            iterations: 5000,
            record_every: 10,
            nodes: 100,
            radius: 0.2,
            family: Family::Ridge,
            dim: 10,
            n_local: 100,
            classes: 3,
            heterogeneity: 1.0,
            noise: 0.1,
            sampling: SamplingVariant::Uniform,
            sample_size: 20,
            probability: 0.2,
            mixing: MixingVariant::Broadcast,
            targets: 1,
            neighbors: 1,
            comm_nodes: 20,
            eta: Eta::Value(1e-3),
            output: PathBuf::from("metrics.csv"),
            stop_below: None,
            lambda_samples: 1000,
        }
    }
}

/// Every recognised key, in serialization order.
pub const KEYS: [&str; 23] = [
    "algorithm",
    "seed",
    "iterations",
    "record_every",
    "graph.M",
    "graph.radius",
    "objective.family",
    "objective.d",
    "objective.n_local",
    "objective.classes",
    "objective.heterogeneity",
    "objective.noise",
    "sampling.variant",
    "sampling.S",
    "sampling.p",
    "mixing.variant",
    "mixing.targets",
    "mixing.neighbors",
    "mixing.comm_nodes",
    "eta",
    "output",
    "stop_below",
    "lambda.samples",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(key, format!("expects {what}, got {value:?}")))
}

impl ExperimentConfig {
    /// Parses a configuration file body on top of the defaults and validates.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: no + 1,
                message: format!("expected key = value, found {line:?}"),
            })?;
            let key = key.trim();
            if seen.contains(&key.to_string()) {
                return Err(Error::config(key, "is set twice"));
            }
            seen.push(key.to_string());
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its textual value. Does not validate cross-field
    /// invariants; call [`validate`](Self::validate) afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = |what| parse_num::<usize>(key, value, what);
        let real = || parse_num::<f64>(key, value, "a number");
        match key {
            "algorithm" => {
                self.algorithm = Algorithm::parse(value).ok_or_else(|| {
                    Error::config(key, format!("must be one of ppds, push_pull, dgd, saga, got {value:?}"))
                })?
            }
            "seed" => self.seed = parse_num::<u64>(key, value, "an integer")?,
            "iterations" => self.iterations = int("an integer")?,
            "record_every" => self.record_every = int("an integer")?,
            "graph.M" => self.nodes = int("an integer")?,
            "graph.radius" => self.radius = real()?,
            "objective.family" => {
                self.family = match value {
                    "ridge" => Family::Ridge,
                    "logistic" => Family::Logistic,
                    _ => return Err(Error::config(key, format!("must be ridge or logistic, got {value:?}"))),
                }
            }
            "objective.d" => self.dim = int("an integer")?,
            "objective.n_local" => self.n_local = int("an integer")?,
            "objective.classes" => self.classes = int("an integer")?,
            "objective.heterogeneity" => self.heterogeneity = real()?,
            "objective.noise" => self.noise = real()?,
            "sampling.variant" => {
                self.sampling = match value {
                    "uniform" => SamplingVariant::Uniform,
                    "bernoulli" => SamplingVariant::Bernoulli,
                    _ => return Err(Error::config(key, format!("must be uniform or bernoulli, got {value:?}"))),
                }
            }
            "sampling.S" => self.sample_size = int("an integer")?,
            "sampling.p" => self.probability = real()?,
            "mixing.variant" => {
                self.mixing = match value {
                    "broadcast" => MixingVariant::Broadcast,
                    "metropolis_on_active" => MixingVariant::MetropolisOnActive,
                    "mean" => MixingVariant::Mean,
                    "independent_gossip" => MixingVariant::IndependentGossip,
                    "fixed_metropolis" => MixingVariant::FixedMetropolis,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!(
                                "must be one of broadcast, metropolis_on_active, mean, \
                                 independent_gossip, fixed_metropolis, got {value:?}"
                            ),
                        ))
                    }
                }
            }
            "mixing.targets" => self.targets = int("an integer")?,
            "mixing.neighbors" => self.neighbors = int("an integer")?,
            "mixing.comm_nodes" => self.comm_nodes = int("an integer")?,
            "eta" => {
                self.eta = if value == "auto" {
                    Eta::Auto
                } else {
                    Eta::Value(parse_num(key, value, "a number or auto")?)
                }
            }
            "output" => self.output = PathBuf::from(value),
            "stop_below" => {
                self.stop_below = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value, "a number or none")?)
                }
            }
            "lambda.samples" => self.lambda_samples = int("an integer")?,
            _ => return Err(Error::config(key, "is not a known key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.nodes;
        if m == 0 {
            return Err(Error::config("graph.M", "must be at least 1"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::config("graph.radius", "must be positive"));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every", "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("objective.d", "must be at least 1"));
        }
        if self.n_local == 0 {
            return Err(Error::config("objective.n_local", "must be at least 1"));
        }
        if self.family == Family::Logistic && self.classes < 2 {
            return Err(Error::config("objective.classes", "must be at least 2"));
        }
        if !(self.heterogeneity >= 0.0 && self.heterogeneity.is_finite()) {
            return Err(Error::config("objective.heterogeneity", "must be non-negative"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("objective.noise", "must be non-negative"));
        }
        if self.sample_size == 0 {
            return Err(Error::config("sampling.S", "must be at least 1"));
        }
        if self.sample_size > m {
            return Err(Error::config(
                "sampling.S",
                format!("exceeds graph.M ({} > {m})", self.sample_size),
            ));
        }
        if !(self.probability > 0.0 && self.probability <= 1.0) {
            return Err(Error::config("sampling.p", "must lie in (0, 1]"));
        }
        // parameters of other mixing variants are ignored
        let uses_neighbors = matches!(
            self.mixing,
            MixingVariant::MetropolisOnActive | MixingVariant::IndependentGossip
        );
        if self.mixing == MixingVariant::Broadcast && self.targets > m - 1 {
            return Err(Error::config("mixing.targets", format!("exceeds graph.M - 1 ({} > {})", self.targets, m - 1)));
        }
        if uses_neighbors && self.neighbors > m - 1 {
            return Err(Error::config("mixing.neighbors", format!("exceeds graph.M - 1 ({} > {})", self.neighbors, m - 1)));
        }
        if self.mixing == MixingVariant::IndependentGossip && self.comm_nodes > m {
            return Err(Error::config("mixing.comm_nodes", format!("exceeds graph.M ({} > {m})", self.comm_nodes)));
        }
        if let Eta::Value(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::config("eta", format!("must be positive, got {eta}")));
            }
        }
        if self.eta == Eta::Auto && !self.mixing_strategy_is_doubly_stochastic() {
            return Err(Error::config(
                "eta",
                "auto needs a doubly stochastic mixing.variant (not broadcast)",
            ));
        }
        if let Some(s) = self.stop_below {
            if !(s >= 0.0) {
                return Err(Error::config("stop_below", "must be non-negative"));
            }
        }
        if self.lambda_samples == 0 {
            return Err(Error::config("lambda.samples", "must be at least 1"));
        }
        if self.output.as_os_str().is_empty() {
            return Err(Error::config("output", "must not be empty"));
        }
        Ok(())
    }

    fn mixing_strategy_is_doubly_stochastic(&self) -> bool {
        self.mixing != MixingVariant::Broadcast
    }

    /// Text form that [`parse_str`](Self::parse_str) maps back to `self`.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "algorithm" => self.algorithm.name().into(),
            "seed" => self.seed.to_string(),
            "iterations" => self.iterations.to_string(),
            "record_every" => self.record_every.to_string(),
            "graph.M" => self.nodes.to_string(),
            "graph.radius" => self.radius.to_string(),
            "objective.family" => match self.family {
                Family::Ridge => "ridge".into(),
                Family::Logistic => "logistic".into(),
            },
            "objective.d" => self.dim.to_string(),
            "objective.n_local" => self.n_local.to_string(),
            "objective.classes" => self.classes.to_string(),
            "objective.heterogeneity" => self.heterogeneity.to_string(),
            "objective.noise" => self.noise.to_string(),
            "sampling.variant" => match self.sampling {
                SamplingVariant::Uniform => "uniform".into(),
                SamplingVariant::Bernoulli => "bernoulli".into(),
            },
            "sampling.S" => self.sample_size.to_string(),
            "sampling.p" => self.probability.to_string(),
            "mixing.variant" => match self.mixing {
                MixingVariant::Broadcast => "broadcast",
                MixingVariant::MetropolisOnActive => "metropolis_on_active",
                MixingVariant::Mean => "mean",
                MixingVariant::IndependentGossip => "independent_gossip",
                MixingVariant::FixedMetropolis => "fixed_metropolis",
            }
            .into(),
            "mixing.targets" => self.targets.to_string(),
            "mixing.neighbors" => self.neighbors.to_string(),
            "mixing.comm_nodes" => self.comm_nodes.to_string(),
            "eta" => match self.eta {
                Eta::Auto => "auto".into(),
                Eta::Value(v) => v.to_string(),
            },
            "output" => self.output.display().to_string(),
            "stop_below" => self.stop_below.map_or("none".into(), |v| v.to_string()),
            "lambda.samples" => self.lambda_samples.to_string(),
            _ => unreachable!("KEYS and value_of disagree on {key}"),
        }
    }

    pub fn sampling_plan(&self) -> SamplingPlan {
        match self.sampling {
            SamplingVariant::Uniform => SamplingPlan::UniformWithoutReplacement { s: self.sample_size },
            SamplingVariant::Bernoulli => SamplingPlan::Bernoulli {
                p: vec![self.probability; self.nodes],
            },
        }
    }

    pub fn mixing_strategy(&self, graph: &DirectedGraph) -> Result<MixingStrategy> {
        Ok(match self.mixing {
            MixingVariant::Broadcast => MixingStrategy::Broadcast { targets_per_active: self.targets },
            MixingVariant::MetropolisOnActive => MixingStrategy::MetropolisOnActive {
                neighbors_per_active: self.neighbors,
            },
            MixingVariant::Mean => MixingStrategy::Mean,
            MixingVariant::IndependentGossip => MixingStrategy::IndependentGossip {
                comm_nodes: self.comm_nodes,
                neighbors_per: self.neighbors,
            },
            MixingVariant::FixedMetropolis => {
                MixingStrategy::Fixed(metropolis(graph, &NodeSet::full(graph.node_count()))?)
            }
        })
    }

    /// `S` for uniform sampling, `round(pM)` clamped to `[1, M]` for Bernoulli.
    pub fn effective_sample_size(&self) -> usize {
        match self.sampling {
            SamplingVariant::Uniform => self.sample_size,
            SamplingVariant::Bernoulli => ((self.probability * self.nodes as f64).round() as usize).clamp(1, self.nodes),
        }
    }

    pub fn graph_seed(&self) -> u64 {
        derive_seed(self.seed, StreamTag::Graph)
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, StreamTag::Data)
    }
}

/// Graph, data and derived quantities for one configuration.
pub struct Prepared {
    pub graph: DirectedGraph,
    pub ensemble: Ensemble,
    pub reference: Reference,
    pub constants: SmoothnessConstants,
    pub strategy: MixingStrategy,
    pub plan: SamplingPlan,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let graph = build_rgg(cfg.nodes, cfg.radius, cfg.graph_seed())?;
        let ensemble = match cfg.family {
            Family::Ridge => Ensemble::Ridge(generate_ridge(
                cfg.nodes,
                cfg.dim,
                cfg.n_local,
                cfg.heterogeneity,
                cfg.noise,
                cfg.data_seed(),
            )?),
            Family::Logistic => Ensemble::Logistic(generate_logistic(
                cfg.nodes,
                cfg.dim,
                cfg.n_local,
                cfg.classes,
                cfg.heterogeneity,
                cfg.noise,
                cfg.data_seed(),
            )?),
        };
        let reference = ensemble.reference()?;
        let constants = ensemble.as_objective().constants()?;
        let strategy = cfg.mixing_strategy(&graph)?;
        let plan = cfg.sampling_plan();
        Ok(Prepared {
            graph,
            ensemble,
            reference,
            constants,
            strategy,
            plan,
        })
    }

    /// Explicit stepsize, or the theoretical bound with `λ` estimated from
    /// `lambda.samples` draws and `S` the configured sample size.
    pub fn resolve_eta(&self, cfg: &ExperimentConfig) -> Result<f64> {
        match cfg.eta {
            Eta::Value(v) => Ok(v),
            Eta::Auto => {
                let est = estimate_lambda(&self.strategy, &self.plan, &self.graph, cfg.lambda_samples, cfg.seed)?;
                if est.lambda >= 1.0 {
                    return Err(Error::config("eta", format!("auto needs lambda < 1, estimated {}", est.lambda)));
                }
                let s = cfg.effective_sample_size();
                Ok(stepsize_bound(&RateParams {
                    mu: self.constants.mu,
                    l: self.constants.l,
                    m: cfg.nodes,
                    s,
                    lambda: est.lambda,
                    eta: 1.0,
                }))
            }
        }
    }

    pub fn experiment<'a>(&'a self, cfg: &ExperimentConfig, eta: f64) -> Experiment<'a> {
        Experiment {
            objective: self.ensemble.as_objective(),
            reference: &self.reference,
            graph: &self.graph,
            algorithm: cfg.algorithm,
            sampling: self.plan.clone(),
            mixing: self.strategy.clone(),
            eta,
            iterations: cfg.iterations,
            record_every: cfg.record_every,
            seed: cfg.seed,
            stop_below: cfg.stop_below,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!((cfg.nodes, cfg.dim, cfg.n_local, cfg.radius, cfg.sample_size), (100, 10, 100, 0.2, 20));
        assert_eq!(cfg.mixing, MixingVariant::Broadcast);
        assert_eq!(cfg.targets, 1);
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = ExperimentConfig::parse_str("# header\n\n  graph.M = 30 # trailing\nsampling.S=5\n").unwrap();
        assert_eq!((cfg.nodes, cfg.sample_size), (30, 5));
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::parse_str("sampling.S = 150").unwrap_err();
        assert!(err.to_string().starts_with("sampling.S exceeds graph.M"), "{err}");
        assert!(err.is_config_error());
        let err = ExperimentConfig::parse_str("graph.MM = 3").unwrap_err();
        assert!(err.to_string().contains("graph.MM"));
        let err = ExperimentConfig::parse_str("objective.d = ten").unwrap_err();
        assert!(err.to_string().starts_with("objective.d"));
        let err = ExperimentConfig::parse_str("eta = -1").unwrap_err();
        assert!(err.to_string().starts_with("eta"));
        let err = ExperimentConfig::parse_str("eta = auto").unwrap_err();
        assert!(err.to_string().starts_with("eta"));
        assert!(ExperimentConfig::parse_str("eta = auto\nmixing.variant = mean").is_ok());
        let err = ExperimentConfig::parse_str("mixing.targets = 100").unwrap_err();
        assert!(err.to_string().starts_with("mixing.targets"));
        assert!(ExperimentConfig::parse_str("seed = 1\nseed = 2").is_err());
        assert!(matches!(ExperimentConfig::parse_str("no equals sign"), Err(Error::Parse { line: 1, .. })));
        assert!(ExperimentConfig::parse_str("mixing.variant = ring").is_err());
    }

    #[test]
    fn auto_eta_matches_theory() {
        let cfg = ExperimentConfig::parse_str(
            "graph.M = 12\ngraph.radius = 0.6\nobjective.n_local = 10\nsampling.S = 3\n\
             mixing.variant = metropolis_on_active\neta = auto\nlambda.samples = 50",
        )
        .unwrap();
        let prep = Prepared::new(&cfg).unwrap();
        let eta = prep.resolve_eta(&cfg).unwrap();
        let lam = estimate_lambda(&prep.strategy, &prep.plan, &prep.graph, 50, cfg.seed).unwrap().lambda;
        let expected = stepsize_bound(&RateParams {
            mu: prep.constants.mu,
            l: prep.constants.l,
            m: 12,
            s: 3,
            lambda: lam,
            eta: 1.0,
        });
        assert_eq!(eta, expected);
    }

    fn configs() -> impl Strategy<Value = ExperimentConfig> {
        (
            (0usize..4, any::<u64>(), 0usize..10_000, 1usize..100),
            (2usize..200, 0.01f64..1.5, any::<bool>(), 1usize..50, 1usize..200, 2usize..10),
            (0.0f64..5.0, 0.0f64..2.0, any::<bool>(), 0.01f64..1.0),
            (0usize..5, any::<bool>(), 1e-9f64..1.0, prop::option::of(0.0f64..1e-3), 1usize..5000),
            "[a-z]{1,8}\\.csv",
        )
            .prop_flat_map(|(a, graph, obj, rest, out)| {
                let m = graph.0;
                (Just((a, graph, obj, rest, out)), 1..=m, 0..m, 0..m, 0..=m)
            })
            .prop_map(|((a, g, o, r, out), s, targets, neighbors, comm)| {
                let mixing = [
                    MixingVariant::Broadcast,
                    MixingVariant::MetropolisOnActive,
                    MixingVariant::Mean,
                    MixingVariant::IndependentGossip,
                    MixingVariant::FixedMetropolis,
                ][r.0];
                let auto = r.1 && mixing != MixingVariant::Broadcast;
                ExperimentConfig {
                    algorithm: [Algorithm::Ppds, Algorithm::PushPull, Algorithm::Dgd, Algorithm::Saga][a.0],
                    seed: a.1,
                    iterations: a.2,
                    record_every: a.3,
                    nodes: g.0,
                    radius: g.1,
                    family: if g.2 { Family::Ridge } else { Family::Logistic },
                    dim: g.3,
                    n_local: g.4,
                    classes: g.5,
                    heterogeneity: o.0,
                    noise: o.1,
                    sampling: if o.2 { SamplingVariant::Uniform } else { SamplingVariant::Bernoulli },
                    sample_size: s,
                    probability: o.3,
                    mixing,
                    targets,
                    neighbors,
                    comm_nodes: comm,
                    eta: if auto { Eta::Auto } else { Eta::Value(r.2) },
                    output: PathBuf::from(out),
                    stop_below: r.3,
                    lambda_samples: r.4,
                }
            })
    }

    proptest! {
        #[test]
        fn serialization_round_trips(cfg in configs()) {
            cfg.validate().unwrap();
            let text = cfg.to_config_string();
            prop_assert_eq!(ExperimentConfig::parse_str(&text).unwrap(), cfg);
        }
    }
}
