//! Maximum likelihood by EM over the latent strata, with multi-start.

use crate::error::{Error, Result};
use crate::model::{
    bernoulli_mass, cell_probabilities_unchecked, log_likelihood_with, CompleteCounts, Model, ObservedCounts, ParameterSet,
    Stratum,
};
use crate::rng::{open_unit, sample_dirichlet, RngStream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Settings for [`run_em`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Stop once the log-likelihood increases by less than this.
    pub tolerance: f64,
    pub max_iter: usize,
    /// Random starts in addition to the barycenter start.
    pub n_starts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iter: 20_000, n_starts: 20, seed: 0 }
    }
}

impl EmConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    pub params: ParameterSet,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood at the start and after every iteration.
    pub trace: Vec<f64>,
    /// Index of the winning start (0 is the barycenter).
    pub start: usize,
    pub config: EmConfig,
    pub warnings: Vec<String>,
}

/// Expected complete-data counts given the current parameters.
///
/// Every observed cell's count is split over its compatible strata in
/// proportion to `pi_{ur} delta_{zu}^y (1 - delta_{zu})^{1-y}`; a cell whose
/// weights are all zero is split evenly and reported in the warnings.
pub fn e_step(counts: &ObservedCounts, params: &ParameterSet) -> Result<(CompleteCounts, Vec<String>)> {
    if counts.n_trials() != params.n_trials() {
        return Err(Error::Precondition("trial dimension mismatch".into()));
    }
    let mut out = CompleteCounts::zeros(counts.n_trials());
    let mut warnings = Vec::new();
    for r in 0..counts.n_trials() {
        for z in 0..2 {
            for s in 0..2 {
                let strata = params.model.compatible(z, s);
                for y in 0..2 {
                    let n = counts.get(r, z, s, y);
                    if n == 0.0 {
                        continue;
                    }
                    if let [u] = strata {
                        out.add(r, z, *u, y, n);
                        continue;
                    }
                    let w: Vec<f64> = strata.iter().map(|&u| params.pi(u, r) * bernoulli_mass(params.delta(z, u), y)).collect();
                    let total: f64 = w.iter().sum();
                    if total > 0.0 {
                        for (&u, wu) in strata.iter().zip(&w) {
                            out.add(r, z, u, y, n * wu / total);
                        }
                    } else {
                        warnings.push(format!("zero responsibilities in cell z={z} s={s} y={y} trial {}; split evenly", r + 1));
                        for &u in strata {
                            out.add(r, z, u, y, n / strata.len() as f64);
                        }
                    }
                }
            }
        }
    }
    Ok((out, warnings))
}

/// Closed-form complete-data maximizer. Parameters whose denominator is zero
/// keep their value from `previous`; they are listed in the second element.
pub fn m_step(expected: &CompleteCounts, previous: &ParameterSet) -> (ParameterSet, Vec<String>) {
    let model = previous.model;
    let n = expected.n_trials();
    let mut next = previous.clone();
    let mut frozen = Vec::new();
    let total = expected.total();
    for r in 0..n {
        let nr = expected.trial_total(r);
        if total > 0.0 {
            next.p[r] = nr / total;
        }
        if nr > 0.0 {
            next.alpha[r] = expected.arm_total(1, r) / nr;
            for &u in model.strata() {
                next.pi[r][u.index()] = expected.stratum_total(u, r) / nr;
            }
        } else {
            frozen.push(format!("alpha_{0} and pi_{0}", r + 1));
        }
    }
    for z in 0..2 {
        for &u in model.strata() {
            let (n1, n0) = (expected.outcome_total(z, u, 1), expected.outcome_total(z, u, 0));
            if n1 + n0 > 0.0 {
                next.delta[z][u.index()] = n1 / (n1 + n0);
            } else {
                frozen.push(format!("delta_{z},{u}"));
            }
        }
    }
    (next, frozen)
}

fn log_likelihood(counts: &ObservedCounts, params: &ParameterSet) -> f64 {
    log_likelihood_with(counts, &cell_probabilities_unchecked(params))
}

/// EM from a given starting point.
pub fn run_em_from(counts: &ObservedCounts, start: ParameterSet, tolerance: f64, max_iter: usize) -> Result<EmResult> {
    start.validate()?;
    let mut params = start;
    let mut ll = log_likelihood(counts, &params);
    let mut trace = vec![ll];
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let (expected, w) = e_step(counts, &params)?;
        let (next, frozen) = m_step(&expected, &params);
        iterations += 1;
        for msg in w.into_iter().chain(frozen.into_iter().map(|f| format!("{f} kept at previous value"))) {
            if !warnings.contains(&msg) {
                warnings.push(msg);
            }
        }
        let next_ll = log_likelihood(counts, &next);
        params = next;
        trace.push(next_ll);
        let gain = next_ll - ll;
        ll = next_ll;
        if gain.abs() < tolerance || (ll.is_infinite() && ll == trace[trace.len() - 2]) {
            converged = true;
            break;
        }
    }
    params.validate_and_normalize()?;
    Ok(EmResult {
        params,
        log_likelihood: ll,
        iterations,
        converged,
        trace,
        start: 0,
        config: EmConfig { tolerance, max_iter, n_starts: 0, seed: 0 },
        warnings,
    })
}

/// Starting point drawn uniformly over the parameter space.
pub fn random_start(model: Model, n_trials: usize, rng: &mut RngStream) -> ParameterSet {
    let ones = vec![1.0; n_trials];
    let p = sample_dirichlet(&ones, rng).expect("positive Dirichlet parameters");
    let alpha = (0..n_trials).map(|_| open_unit(rng)).collect();
    let k = model.n_strata();
    let pi = (0..n_trials).map(|_| sample_dirichlet(&vec![1.0; k], rng).expect("positive Dirichlet parameters")).collect();
    let mut delta = [[0.0; 4]; 2];
    for row in delta.iter_mut() {
        for &u in model.strata() {
            row[u.index()] = open_unit(rng);
        }
    }
    ParameterSet::new(model, p, alpha, pi, delta).expect("draws lie on the simplices")
}

/// Best of a barycenter start and `n_starts` uniform random starts; ties go
/// to the lower start index.
pub fn run_em(counts: &ObservedCounts, model: Model, config: &EmConfig) -> Result<EmResult> {
    counts.validate()?;
    let n = counts.n_trials();
    let mut warnings = Vec::new();
    let needed = if model.is_monotone() { 2 } else { 3 };
    if n < needed {
        warnings.push(format!("{model} model with {n} trial(s) is not identified (needs at least {needed}); estimates may be arbitrary"));
    }
    let root = RngStream::new(config.seed);
    let runs: Vec<Result<EmResult>> = (0..=config.n_starts)
        .into_par_iter()
        .map(|k| {
            let start = if k == 0 {
                ParameterSet::barycenter(model, n)
            } else {
                random_start(model, n, &mut root.split(k as u64))
            };
            run_em_from(counts, start, config.tolerance, config.max_iter).map(|mut res| {
                res.start = k;
                res
            })
        })
        .collect();
    let mut best: Option<EmResult> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.log_likelihood > b.log_likelihood) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one start");
    best.config = *config;
    warnings.append(&mut best.warnings);
    if !best.converged {
        warnings.push(format!("no convergence within {} iterations", config.max_iter));
    }
    best.warnings = warnings;
    Ok(best)
}

/// Maps stratum rows of a parameter set to the model's strata for display.
pub fn delta_vector(params: &ParameterSet) -> Vec<(usize, Stratum, f64)> {
    params
        .model
        .strata()
        .iter()
        .flat_map(|&u| [1, 0].into_iter().map(move |z| (z, u, params.delta(z, u))))
        .collect()
}
