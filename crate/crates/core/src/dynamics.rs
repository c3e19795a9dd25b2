//! Hill and SIS right-hand sides, forward-Euler integration, and
//! multi-environment grid construction with in/out-domain splits.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::util::{linspace, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsKind {
    Hill,
    Sis,
}

impl DynamicsKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DynamicsKind::Hill => "hill",
            DynamicsKind::Sis => "sis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hill" => Ok(DynamicsKind::Hill),
            "sis" => Ok(DynamicsKind::Sis),
            other => Err(Error::Config(format!("unknown dynamics kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestIn,
    TestOut,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestIn => "test_in",
            Split::TestOut => "test_out",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test_in" => Ok(Split::TestIn),
            "test_out" => Ok(Split::TestOut),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One (dynamics kind, coefficient vector) pair with its split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub id: String,
    pub kind: DynamicsKind,
    pub coeffs: BTreeMap<String, f64>,
    pub split: Split,
    pub x0_seed: u64,
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in &self.coeffs {
            if !v.is_finite() || *v <= 0.0 {
                return Err(Error::Config(format!(
                    "coefficient {name} = {v} must be finite and > 0 in {}",
                    self.id
                )));
            }
        }
        match self.kind {
            DynamicsKind::Hill => {
                let a = self.coeff("a")?;
                let h = self.coeff("h")?;
                if !(a > 0.0 && a <= 1.0) {
                    return Err(Error::Config(format!("hill requires 0 < a <= 1, got {a}")));
                }
                if h <= 0.0 {
                    return Err(Error::Config(format!("hill requires h > 0, got {h}")));
                }
            }
            DynamicsKind::Sis => {
                for name in ["beta", "gamma"] {
                    let v = self.coeff(name)?;
                    if !(v > 0.0 && v <= 1.0) {
                        return Err(Error::Config(format!(
                            "sis requires {name} in (0, 1], got {v}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn coeff(&self, name: &str) -> Result<f64> {
        self.coeffs
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("environment {} missing coefficient {name}", self.id)))
    }

    /// Coefficient values in sorted-name order (the conditioning vector).
    pub fn coeff_vector(&self) -> Vec<f64> {
        self.coeffs.values().copied().collect()
    }
}

/// State time series for one environment; raw (non-standardized) scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub env_id: String,
    pub dt: f64,
    /// Row-major T x n (d = 1).
    pub states: Vec<f64>,
    pub steps: usize,
    pub nodes: usize,
    pub mean: f64,
    pub std: f64,
    /// Total mass moved by the SIS [0,1] clamp over the whole integration.
    pub clamped_mass: f64,
}

impl Trajectory {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.states[t * self.nodes..(t + 1) * self.nodes]
    }
}

/// Hill regulatory dynamics: dx_i/dt = -B x_i^a + sum_j A_ij x_j^h / (1 + x_j^h).
pub fn hill_rhs(x: &[f64], g: &Graph, a: f64, h: f64, b: f64) -> Result<Vec<f64>> {
    let n = g.n;
    if x.len() != n {
        return Err(Error::Shape(format!("state length {} != n {}", x.len(), n)));
    }
    for (i, v) in x.iter().enumerate() {
        if *v < 0.0 {
            return Err(Error::Domain(format!(
                "hill state must be nonnegative, node {i} = {v}"
            )));
        }
    }
    let sat: Vec<f64> = x.iter().map(|v| v.powf(h) / (1.0 + v.powf(h))).collect();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut coupling = 0.0;
        for j in 0..n {
            coupling += g.adjacency[i * n + j] * sat[j];
        }
        out[i] = -b * x[i].powf(a) + coupling;
    }
    Ok(out)
}

/// SIS epidemic dynamics: dx_i/dt = -gamma x_i + beta (1 - x_i) sum_j A_ij x_j.
pub fn sis_rhs(x: &[f64], g: &Graph, beta: f64, gamma: f64) -> Result<Vec<f64>> {
    let n = g.n;
    if x.len() != n {
        return Err(Error::Shape(format!("state length {} != n {}", x.len(), n)));
    }
    for (i, v) in x.iter().enumerate() {
        if *v < -1e-9 || *v > 1.0 + 1e-9 {
            return Err(Error::Domain(format!(
                "sis state must lie in [0,1], node {i} = {v}"
            )));
        }
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut pressure = 0.0;
        for j in 0..n {
            pressure += g.adjacency[i * n + j] * x[j];
        }
        out[i] = -gamma * x[i] + beta * (1.0 - x[i]) * pressure;
    }
    Ok(out)
}

/// State-space constraint enforced after each Euler step.
#[derive(Debug, Clone, Copy)]
pub enum StateDomain {
    Unbounded,
    /// Clamp to [0,1] and account the clamped mass (SIS).
    UnitInterval,
}

/// Forward Euler: states[t+1] = states[t] + dt * rhs(states[t]).
/// Returns the full T x n trajectory including the initial state.
pub fn euler_integrate<F>(
    mut rhs: F,
    x0: &[f64],
    dt: f64,
    steps: usize,
    domain: StateDomain,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dt <= 0.0 {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let n = x0.len();
    let mut states = Vec::with_capacity(steps * n);
    let mut x = x0.to_vec();
    let mut clamped = 0.0;
    states.extend_from_slice(&x);
    for step in 1..steps {
        let d = rhs(&x)?;
        for i in 0..n {
            x[i] += dt * d[i];
            if !x[i].is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite state at integration step {step}, node {i}"
                )));
            }
            if let StateDomain::UnitInterval = domain {
                let c = x[i].clamp(0.0, 1.0);
                clamped += (x[i] - c).abs();
                x[i] = c;
            }
        }
        states.extend_from_slice(&x);
    }
    Ok((states, clamped))
}

/// Per-coefficient grid description: explicit values inside the training
/// range and (optionally) values in the out-of-domain range.
#[derive(Debug, Clone)]
pub struct CoeffGrid {
    pub name: String,
    pub train_values: Vec<f64>,
    pub ood_values: Vec<f64>,
}

impl CoeffGrid {
    pub fn fixed(name: &str, value: f64) -> Self {
        CoeffGrid {
            name: name.into(),
            train_values: vec![value],
            ood_values: vec![],
        }
    }

    pub fn ranges(
        name: &str,
        train: (f64, f64),
        train_count: usize,
        ood: Option<(f64, f64)>,
        ood_count: usize,
    ) -> Result<Self> {
        if train_count == 0 {
            return Err(Error::Config(format!("coefficient {name}: empty train grid")));
        }
        if let Some((lo, hi)) = ood {
            // ranges must be disjoint
            if lo <= train.1 && train.0 <= hi {
                return Err(Error::Config(format!(
                    "coefficient {name}: train range [{}, {}] overlaps OOD range [{lo}, {hi}]",
                    train.0, train.1
                )));
            }
        }
        Ok(CoeffGrid {
            name: name.into(),
            train_values: linspace(train.0, train.1, train_count),
            ood_values: match ood {
                Some((lo, hi)) => linspace(lo, hi, ood_count),
                None => vec![],
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub name: String,
    pub graph: Graph,
    pub kind: DynamicsKind,
    pub coeffs: Vec<CoeffGrid>,
    pub steps: usize,
    pub dt: f64,
    /// Uniform initial-condition range per node.
    pub x0_range: (f64, f64),
    /// Hill damping coefficient B (global).
    pub hill_damping: f64,
    /// Leading fraction of each trajectory used for training/standardization.
    pub train_time_frac: f64,
    pub split_fractions: (f64, f64, f64),
}

impl DatasetSpec {
    pub fn default_x0_range(kind: DynamicsKind) -> (f64, f64) {
        match kind {
            DynamicsKind::Sis => (0.01, 0.1),
            DynamicsKind::Hill => (0.5, 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coeffs.is_empty() {
            return Err(Error::Config("dataset spec has no coefficient grid".into()));
        }
        if self.steps < 2 {
            return Err(Error::Config("steps must be >= 2".into()));
        }
        if !(self.train_time_frac > 0.0 && self.train_time_frac <= 1.0) {
            return Err(Error::Config("train_time_frac must lie in (0, 1]".into()));
        }
        let (a, b, c) = self.split_fractions;
        if a <= 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
            )));
        }
        Ok(())
    }
}

/// Enumerate the coefficient grid (cartesian product) and assign splits:
/// any combination touching an OOD value goes to test_out, the rest are
/// partitioned train/val/test_in by a deterministic seeded shuffle.
pub fn build_environment_grid(spec: &DatasetSpec, seed: u64) -> Result<Vec<Environment>> {
    spec.validate()?;
    // (value, is_ood) lists per coefficient
    let mut axes: Vec<Vec<(f64, bool)>> = Vec::new();
    for c in &spec.coeffs {
        let mut axis: Vec<(f64, bool)> = c.train_values.iter().map(|&v| (v, false)).collect();
        axis.extend(c.ood_values.iter().map(|&v| (v, true)));
        if axis.is_empty() {
            return Err(Error::Config(format!("coefficient {} has no values", c.name)));
        }
        axes.push(axis);
    }
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut envs = Vec::with_capacity(total);
    let mut in_range_indices = Vec::new();
    for flat in 0..total {
        let mut rem = flat;
        let mut coeffs = BTreeMap::new();
        let mut ood = false;
        for (c, axis) in spec.coeffs.iter().zip(&axes) {
            let idx = rem % axis.len();
            rem /= axis.len();
            let (v, is_ood) = axis[idx];
            ood |= is_ood;
            coeffs.insert(c.name.clone(), v);
        }
        let id = format!("e{flat:04}");
        let x0_seed = {
            use rand::RngCore;
            seeded_rng(seed, &format!("x0/{id}")).next_u64()
        };
        if !ood {
            in_range_indices.push(envs.len());
        }
        let env = Environment {
            id,
            kind: spec.kind,
            coeffs,
            split: if ood { Split::TestOut } else { Split::Train },
            x0_seed,
        };
        env.validate()?;
        envs.push(env);
    }

    // deterministic shuffle of in-range environments, then partition
    let mut order = in_range_indices.clone();
    let mut rng = seeded_rng(seed, "split-shuffle");
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n = order.len();
    let (_, f_val, f_test) = spec.split_fractions;
    let n_val = (f_val * n as f64).round() as usize;
    let n_test = (f_test * n as f64).round() as usize;
    if n_val + n_test >= n && n > 0 {
        return Err(Error::Config("split fractions leave no train environments".into()));
    }
    for (rank, &idx) in order.iter().enumerate() {
        envs[idx].split = if rank < n_val {
            Split::Val
        } else if rank < n_val + n_test {
            Split::TestIn
        } else {
            Split::Train
        };
    }

    for (split, frac) in [(Split::Train, 1.0), (Split::Val, f_val), (Split::TestIn, f_test)] {
        if frac > 0.0 && n > 0 && !envs.iter().any(|e| e.split == split) {
            return Err(Error::Config(format!(
                "split {} is empty after assignment",
                split.as_str()
            )));
        }
    }
    Ok(envs)
}

/// Integrate one environment from its seeded initial condition.
pub fn simulate_environment(spec: &DatasetSpec, env: &Environment) -> Result<Trajectory> {
    let n = spec.graph.n;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(env.x0_seed);
    let (lo, hi) = spec.x0_range;
    let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    let (states, clamped) = match env.kind {
        DynamicsKind::Sis => {
            let beta = env.coeff("beta")?;
            let gamma = env.coeff("gamma")?;
            euler_integrate(
                |x| sis_rhs(x, &spec.graph, beta, gamma),
                &x0,
                spec.dt,
                spec.steps,
                StateDomain::UnitInterval,
            )?
        }
        DynamicsKind::Hill => {
            let a = env.coeff("a")?;
            let h = env.coeff("h")?;
            let b = spec.hill_damping;
            euler_integrate(
                |x| hill_rhs(x, &spec.graph, a, h, b),
                &x0,
                spec.dt,
                spec.steps,
                StateDomain::Unbounded,
            )?
        }
    };
    let train_steps = ((spec.steps as f64) * spec.train_time_frac).floor() as usize;
    let train_part = &states[..train_steps.max(1) * n];
    let mean = train_part.iter().sum::<f64>() / train_part.len() as f64;
    let var =
        train_part.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / train_part.len() as f64;
    let std = var.sqrt().max(1e-12);
    Ok(Trajectory {
        env_id: env.id.clone(),
        dt: spec.dt,
        states,
        steps: spec.steps,
        nodes: n,
        mean,
        std,
        clamped_mass: clamped,
    })
}

use rand::SeedableRng as _;
