//! Simulation scenarios and the repeated-sampling harness that scores the
//! EM and Gibbs estimators by bias, RMSE and interval coverage.

use crate::em::{run_em, EmConfig};
use crate::error::{Error, Result};
use crate::gibbs::{gelman_rubin, run_gibbs, GibbsConfig};
use crate::model::{cell_probabilities, Model, ObservedCounts, ParameterSet, Stratum};
use crate::rng::{sample_multinomial, RngStream};
use crate::stats::{mean, quantile};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Outcome probabilities `[z][u]` shared by the built-in scenarios:
/// `delta_1 = (0.8, 0.7, 0.6, 0.5)`, `delta_0 = (0.5, 0.3, 0.1, 0.2)`.
pub const BASE_DELTA: [[f64; 4]; 2] = [[0.5, 0.3, 0.1, 0.2], [0.8, 0.7, 0.6, 0.5]];

/// Heterogeneity levels of the built-in catalogue.
pub const HETEROGENEITY_LEVELS: [f64; 3] = [0.01, 0.025, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutcomeModel {
    /// The same `delta_zu` in every trial.
    Homogeneous { delta: [[f64; 4]; 2] },
    /// `delta_zur = mu_zu + (-1)^z d (r - (N_R - 1) / 2)` with trials counted
    /// from zero; for three trials this is `mu - (-1)^z d, mu, mu + (-1)^z d`.
    Heterogeneous { mu: [[f64; 4]; 2], d: f64 },
}

/// How units are spread over trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// `R` drawn from `Categorical(p)` for `N_R * n_per_trial` units.
    Categorical,
    /// Exactly `n_per_trial` units in every trial.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub model: Model,
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
    pub pi: Vec<Vec<f64>>,
    pub outcome: OutcomeModel,
    pub n_per_trial: u64,
    pub allocation: Allocation,
}

impl Scenario {
    /// Scenario with `p_r = 1 / N_R` and homogeneous outcomes.
    pub fn new(name: &str, model: Model, alpha: Vec<f64>, pi: Vec<Vec<f64>>, delta: [[f64; 4]; 2]) -> Self {
        let n = alpha.len();
        Self {
            name: name.to_string(),
            model,
            p: vec![1.0 / n as f64; n],
            alpha,
            pi,
            outcome: OutcomeModel::Homogeneous { delta },
            n_per_trial: 500,
            allocation: Allocation::Categorical,
        }
    }

    /// Scenario reproducing a full parameter set.
    pub fn from_params(name: &str, params: &ParameterSet) -> Self {
        let k = params.model.n_strata();
        Self {
            name: name.to_string(),
            model: params.model,
            p: params.p.clone(),
            alpha: params.alpha.clone(),
            pi: params.pi.iter().map(|row| row[..k].to_vec()).collect(),
            outcome: OutcomeModel::Homogeneous { delta: params.delta },
            n_per_trial: 500,
            allocation: Allocation::Categorical,
        }
    }

    pub fn with_n(mut self, n_per_trial: u64) -> Self {
        self.n_per_trial = n_per_trial;
        self
    }

    pub fn with_allocation(mut self, allocation: Allocation) -> Self {
        self.allocation = allocation;
        self
    }

    pub fn with_heterogeneity(mut self, d: f64) -> Self {
        let mu = match self.outcome {
            OutcomeModel::Homogeneous { delta } | OutcomeModel::Heterogeneous { mu: delta, .. } => delta,
        };
        self.outcome = OutcomeModel::Heterogeneous { mu, d };
        self
    }

    pub fn n_trials(&self) -> usize {
        self.alpha.len()
    }

    /// Outcome probabilities of trial `r` (0-based).
    pub fn trial_delta(&self, r: usize) -> [[f64; 4]; 2] {
        match self.outcome {
            OutcomeModel::Homogeneous { delta } => delta,
            OutcomeModel::Heterogeneous { mu, d } => {
                let offset = r as f64 - (self.n_trials() as f64 - 1.0) / 2.0;
                let mut out = mu;
                for (z, row) in out.iter_mut().enumerate() {
                    let sign = if z == 0 { 1.0 } else { -1.0 };
                    for v in row.iter_mut() {
                        *v += sign * d * offset;
                    }
                }
                out
            }
        }
    }

    /// Parameters the estimators are scored against. Under heterogeneity
    /// these carry the centre values `mu_zu`.
    pub fn truth(&self) -> Result<ParameterSet> {
        let delta = match self.outcome {
            OutcomeModel::Homogeneous { delta } => delta,
            OutcomeModel::Heterogeneous { mu, .. } => mu,
        };
        ParameterSet::new(self.model, self.p.clone(), self.alpha.clone(), self.pi.clone(), delta)
    }

    /// Parameters of trial `r` alone, with its own outcome probabilities.
    pub fn trial_params(&self, r: usize) -> Result<ParameterSet> {
        ParameterSet::new(self.model, vec![1.0], vec![self.alpha[r]], vec![self.pi[r].clone()], self.trial_delta(r))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_trials();
        if n == 0 || self.p.len() != n || self.pi.len() != n {
            return Err(Error::Config(format!("scenario {} has inconsistent trial counts", self.name)));
        }
        if self.n_per_trial == 0 {
            return Err(Error::Config("n_per_trial must be positive".into()));
        }
        self.truth()?;
        for r in 0..n {
            self.trial_params(r)?;
        }
        Ok(())
    }
}

/// The catalogue: monotone with 2, 3 and 5 trials, nonmonotone with 3, 4 and
/// 5 trials, and the three-trial heterogeneity variants of both models.
pub fn builtin_scenarios() -> Vec<Scenario> {
    let mono = |name: &str, alpha: &[f64], pi: &[[f64; 3]]| {
        Scenario::new(name, Model::Monotone, alpha.to_vec(), pi.iter().map(|r| r.to_vec()).collect(), BASE_DELTA)
    };
    let non = |name: &str, alpha: &[f64], pi: &[[f64; 4]]| {
        Scenario::new(name, Model::Nonmonotone, alpha.to_vec(), pi.iter().map(|r| r.to_vec()).collect(), BASE_DELTA)
    };
    let mut out = vec![
        mono("monotone-2", &[0.4, 0.6], &[[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]]),
        mono("monotone-3", &[0.4, 0.5, 0.6], &[[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]),
        mono(
            "monotone-5",
            &[0.3, 0.4, 0.5, 0.6, 0.7],
            &[[0.8, 0.1, 0.1], [0.6, 0.3, 0.1], [0.3, 0.2, 0.5], [0.1, 0.3, 0.6], [0.1, 0.1, 0.8]],
        ),
        non("nonmonotone-3", &[0.4, 0.5, 0.6], &[[0.6, 0.2, 0.1, 0.1], [0.1, 0.6, 0.2, 0.1], [0.1, 0.1, 0.6, 0.2]]),
        non(
            "nonmonotone-4",
            &[0.4, 0.5, 0.6, 0.7],
            &[[0.6, 0.2, 0.1, 0.1], [0.1, 0.6, 0.2, 0.1], [0.1, 0.1, 0.6, 0.2], [0.2, 0.3, 0.2, 0.3]],
        ),
        non(
            "nonmonotone-5",
            &[0.3, 0.4, 0.5, 0.6, 0.7],
            &[[0.6, 0.2, 0.1, 0.1], [0.1, 0.6, 0.2, 0.1], [0.3, 0.2, 0.3, 0.2], [0.4, 0.1, 0.4, 0.1], [0.1, 0.1, 0.6, 0.2]],
        ),
    ];
    for base in ["monotone-3", "nonmonotone-3"] {
        let template = out.iter().find(|s| s.name == base).expect("base scenario").clone();
        for d in HETEROGENEITY_LEVELS {
            let mut s = template.clone().with_heterogeneity(d);
            s.name = format!("{base}-d{d}");
            out.push(s);
        }
    }
    out
}

pub fn builtin_scenario(name: &str) -> Result<Scenario> {
    builtin_scenarios().into_iter().find(|s| s.name == name).ok_or_else(|| {
        let names: Vec<String> = builtin_scenarios().into_iter().map(|s| s.name).collect();
        Error::Config(format!("unknown scenario {name}; available: {}", names.join(", ")))
    })
}

/// Simulates one dataset. Units within a trial are exchangeable, so the
/// eight cells of each trial are drawn jointly from their multinomial.
pub fn generate_dataset(scenario: &Scenario, seed: u64) -> Result<ObservedCounts> {
    scenario.validate()?;
    let n = scenario.n_trials();
    let mut rng = RngStream::new(seed);
    let sizes: Vec<u64> = match scenario.allocation {
        Allocation::Fixed => vec![scenario.n_per_trial; n],
        Allocation::Categorical => sample_multinomial(scenario.n_per_trial * n as u64, &scenario.p, &mut rng)?,
    };
    let mut out = ObservedCounts::zeros(n);
    for (r, &size) in sizes.iter().enumerate() {
        let cells = cell_probabilities(&scenario.trial_params(r)?)?.flatten();
        for (i, k) in sample_multinomial(size, &cells, &mut rng)?.into_iter().enumerate() {
            out.set(r, i / 4, (i / 2) % 2, i % 2, k as f64);
        }
    }
    Ok(out)
}

/// Estimator settings for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub em: EmConfig,
    pub iterations: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub level: f64,
    /// Skip the Gibbs sampler and score the MLE only.
    pub em_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { em: EmConfig::default(), iterations: 20_000, burn_in: 4_000, chains: 1, level: 0.95, em_only: false }
    }
}

/// Per-replicate record; stratum arrays follow `Stratum::ALL` and hold NaN
/// for strata outside the model or estimators that were not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub error: Option<String>,
    pub em_converged: bool,
    pub mle: [f64; 4],
    pub lower: [f64; 4],
    pub upper: [f64; 4],
    pub median: [f64; 4],
    pub psrf: [f64; 4],
}

impl ReplicateResult {
    fn failed(index: usize, e: Error) -> Self {
        Self {
            index,
            error: Some(e.to_string()),
            em_converged: false,
            mle: [f64::NAN; 4],
            lower: [f64::NAN; 4],
            upper: [f64::NAN; 4],
            median: [f64::NAN; 4],
            psrf: [f64::NAN; 4],
        }
    }

    pub fn covered(&self, u: Stratum, truth: f64) -> Option<bool> {
        let (lo, hi) = (self.lower[u.index()], self.upper[u.index()]);
        (lo.is_finite() && hi.is_finite()).then_some(lo <= truth && truth <= hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumScore {
    pub stratum: Stratum,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: Option<f64>,
    pub mean_width: Option<f64>,
    pub max_psrf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub config: EvalConfig,
    pub seed: u64,
    pub n_replicates: usize,
    pub completed: usize,
    pub strata: Vec<StratumScore>,
    pub replicates: Vec<ReplicateResult>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn get(&self, u: Stratum) -> Result<&StratumScore> {
        self.strata.iter().find(|s| s.stratum == u).ok_or(Error::AbsentStratum(u))
    }

    /// One row per replicate.
    pub fn write_replicates_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["replicate".to_string(), "error".into(), "em_converged".into()];
        for field in ["mle", "lower", "upper", "median", "psrf"] {
            for u in Stratum::ALL {
                header.push(format!("{field}_{u}"));
            }
        }
        w.write_record(&header).map_err(csv_error)?;
        for rep in &self.replicates {
            let mut row = vec![rep.index.to_string(), rep.error.clone().unwrap_or_default(), rep.em_converged.to_string()];
            for field in [&rep.mle, &rep.lower, &rep.upper, &rep.median, &rep.psrf] {
                row.extend(field.iter().map(|v| if v.is_finite() { v.to_string() } else { String::new() }));
            }
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn run_replicate(scenario: &Scenario, config: &EvalConfig, root: &RngStream, index: usize) -> Result<ReplicateResult> {
    let stream = root.split(index as u64);
    let counts = generate_dataset(scenario, stream.split(0).key())?;
    let em = run_em(&counts, scenario.model, &EmConfig { seed: stream.split(1).key(), ..config.em })?;
    let mut rep = ReplicateResult::failed(index, Error::EmptyDraws);
    rep.error = None;
    rep.em_converged = em.converged;
    for &u in scenario.model.strata() {
        rep.mle[u.index()] = em.params.ace(u).expect("stratum in model");
    }
    if !config.em_only {
        let gibbs = GibbsConfig::new(config.iterations, config.burn_in, stream.split(2).key()).chains(config.chains);
        let draws = run_gibbs(&counts, scenario.model, &gibbs)?;
        let tail = (1.0 - config.level) / 2.0;
        for &u in scenario.model.strata() {
            let xs = draws.ace(u)?;
            rep.lower[u.index()] = quantile(&xs, tail);
            rep.upper[u.index()] = quantile(&xs, 1.0 - tail);
            rep.median[u.index()] = quantile(&xs, 0.5);
            if config.chains > 1 {
                rep.psrf[u.index()] = gelman_rubin(&draws.per_chain(|p| p.ace(u).expect("stratum in model")))?;
            }
        }
    }
    Ok(rep)
}

/// Repeats generate-and-estimate `n_replicates` times. Replicate `i` draws
/// from stream `seed/i`, so results do not depend on scheduling.
pub fn evaluate(scenario: &Scenario, n_replicates: usize, config: &EvalConfig, seed: u64) -> Result<EvalReport> {
    if n_replicates == 0 {
        return Err(Error::Config("n_replicates must be at least 1".into()));
    }
    scenario.validate()?;
    let truth = scenario.truth()?;
    let root = RngStream::new(seed);
    let replicates: Vec<ReplicateResult> = (0..n_replicates)
        .into_par_iter()
        .map(|i| run_replicate(scenario, config, &root, i).unwrap_or_else(|e| ReplicateResult::failed(i, e)))
        .collect();
    let ok: Vec<&ReplicateResult> = replicates.iter().filter(|r| r.error.is_none()).collect();
    let failed = replicates.len() - ok.len();
    let mut warnings = Vec::new();
    if failed * 20 > n_replicates {
        warnings.push(format!("{failed} of {n_replicates} replicates failed and were excluded"));
    }
    let unconverged = ok.iter().filter(|r| !r.em_converged).count();
    if unconverged > 0 {
        warnings.push(format!("EM hit the iteration cap in {unconverged} replicates"));
    }
    let mut strata = Vec::new();
    for &u in scenario.model.strata() {
        let t = truth.ace(u).expect("stratum in model");
        let errors: Vec<f64> = ok.iter().map(|r| r.mle[u.index()] - t).collect();
        let finite = |xs: Vec<f64>| -> Option<Vec<f64>> {
            let v: Vec<f64> = xs.into_iter().filter(|x| x.is_finite()).collect();
            (!v.is_empty()).then_some(v)
        };
        let covered: Vec<f64> = ok.iter().filter_map(|r| r.covered(u, t)).map(|c| c as u8 as f64).collect();
        let widths = finite(ok.iter().map(|r| r.upper[u.index()] - r.lower[u.index()]).collect());
        let psrf = finite(ok.iter().map(|r| r.psrf[u.index()]).collect());
        strata.push(StratumScore {
            stratum: u,
            truth: t,
            bias: if errors.is_empty() { f64::NAN } else { mean(&errors) },
            rmse: if errors.is_empty() { f64::NAN } else { mean(&errors.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt() },
            coverage: (!covered.is_empty()).then(|| mean(&covered)),
            mean_width: widths.map(|w| mean(&w)),
            max_psrf: psrf.map(|p| p.into_iter().fold(f64::NEG_INFINITY, f64::max)),
        });
    }
    Ok(EvalReport {
        scenario: scenario.clone(),
        config: *config,
        seed,
        n_replicates,
        completed: ok.len(),
        strata,
        replicates,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalogue_entries() {
        let all = builtin_scenarios();
        assert_eq!(all.len(), 12);
        let m2 = builtin_scenario("monotone-2").unwrap();
        assert_eq!((m2.pi[0].clone(), m2.alpha[0]), (vec![0.7, 0.2, 0.1], 0.4));
        let n5 = builtin_scenario("nonmonotone-5").unwrap();
        assert_eq!((n5.pi[4].clone(), n5.alpha[4]), (vec![0.1, 0.1, 0.6, 0.2], 0.7));
        let truth = builtin_scenario("monotone-3").unwrap().truth().unwrap();
        for (u, a) in [(Stratum::SS, 0.3), (Stratum::SSbar, 0.4), (Stratum::SbarSbar, 0.5)] {
            assert!((truth.ace(u).unwrap() - a).abs() < 1e-12);
        }
        assert!((n5.truth().unwrap().ace(Stratum::SbarS).unwrap() - 0.3).abs() < 1e-12);
        for s in &all {
            s.validate().unwrap();
            assert!(s.p.iter().all(|&p| (p - 1.0 / s.n_trials() as f64).abs() < 1e-15));
        }
        assert!(builtin_scenario("nope").is_err());
    }

    #[test]
    fn heterogeneity_rule() {
        for d in HETEROGENEITY_LEVELS {
            let s = builtin_scenario(&format!("monotone-3-d{d}")).unwrap();
            for u in [Stratum::SS, Stratum::SSbar, Stratum::SbarSbar] {
                let mu = BASE_DELTA[1][u.index()] - BASE_DELTA[0][u.index()];
                let ace = |r: usize| s.trial_params(r).unwrap().ace(u).unwrap();
                assert!((ace(0) - (mu + 2.0 * d)).abs() < 1e-12);
                assert!((ace(1) - mu).abs() < 1e-12);
                assert!((ace(2) - (mu - 2.0 * d)).abs() < 1e-12);
                assert!((s.trial_delta(0)[1][u.index()] - (BASE_DELTA[1][u.index()] + d)).abs() < 1e-12);
                assert!((s.trial_delta(0)[0][u.index()] - (BASE_DELTA[0][u.index()] - d)).abs() < 1e-12);
            }
            assert!((s.truth().unwrap().ace(Stratum::SS).unwrap() - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn large_sample_frequencies() {
        let s = builtin_scenario("nonmonotone-3").unwrap().with_n(1_000_000 / 3);
        let counts = generate_dataset(&s, 5).unwrap();
        let probs = cell_probabilities(&s.truth().unwrap()).unwrap();
        let total = counts.total();
        for r in 0..3 {
            for z in 0..2 {
                for st in 0..2 {
                    for y in 0..2 {
                        assert!((counts.get(r, z, st, y) / total - probs.get(r, z, st, y)).abs() < 0.005);
                    }
                }
            }
        }
        // marginal checks at three binomial standard errors
        let fixed = s.clone().with_allocation(Allocation::Fixed);
        let counts = generate_dataset(&fixed, 6).unwrap();
        for r in 0..3 {
            let n = counts.trial_total(r);
            assert_eq!(n, fixed.n_per_trial as f64);
            let a = fixed.alpha[r];
            assert!((counts.arm_total(1, r) / n - a).abs() < 3.0 * (a * (1.0 - a) / n).sqrt());
        }
        assert_eq!(generate_dataset(&s, 5).unwrap(), generate_dataset(&s, 5).unwrap());
    }

    #[test]
    fn zero_outcome_probabilities() {
        let mut s = builtin_scenario("monotone-2").unwrap();
        s.outcome = OutcomeModel::Homogeneous { delta: [[0.0; 4]; 2] };
        let c = generate_dataset(&s, 1).unwrap();
        for r in 0..2 {
            for z in 0..2 {
                for st in 0..2 {
                    assert_eq!(c.get(r, z, st, 1), 0.0);
                }
            }
        }
    }

    #[test]
    fn single_replicate_is_deterministic() {
        let s = builtin_scenario("monotone-2").unwrap().with_n(300);
        let cfg = EvalConfig { iterations: 400, burn_in: 100, chains: 2, em: EmConfig { n_starts: 2, ..EmConfig::default() }, ..EvalConfig::default() };
        let a = evaluate(&s, 2, &cfg, 3).unwrap();
        let json = |r: &EvalReport| serde_json::to_string(r).unwrap();
        assert_eq!(json(&a), json(&evaluate(&s, 2, &cfg, 3).unwrap()));
        assert_ne!(a.replicates[0].mle, a.replicates[1].mle);
        assert_eq!(a.completed, 2);
        let score = a.get(Stratum::SS).unwrap();
        assert!(score.rmse >= score.bias.abs());
        assert!((0.0..=1.0).contains(&score.coverage.unwrap()));
        assert!(a.get(Stratum::SbarS).is_err());
        let mut buf = Vec::new();
        a.write_replicates_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("replicate,error,em_converged,mle_SS"));
    }
}
