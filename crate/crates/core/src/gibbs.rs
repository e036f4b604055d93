//! Data-augmentation Gibbs sampler under flat Dirichlet/Beta priors, with
//! posterior summaries and convergence diagnostics.

use crate::em::random_start;
use crate::error::{Error, Result};
use crate::model::{bernoulli_mass, CompleteCounts, Model, ObservedCounts, ParameterSet, PsaceSummary, Stratum};
use crate::rng::{sample_beta, sample_binomial, sample_dirichlet, RngStream};
use crate::stats::{mean, quantiles, variance};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
}

impl GibbsConfig {
    pub fn new(iterations: usize, burn_in: usize, seed: u64) -> Self {
        Self { iterations, burn_in, thin: 1, chains: 1, seed }
    }

    pub fn chains(self, chains: usize) -> Self {
        Self { chains, ..self }
    }

    pub fn thin(self, thin: usize) -> Self {
        Self { thin, ..self }
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::Config(format!("iterations ({}) must exceed burn-in ({})", self.iterations, self.burn_in)));
        }
        if self.chains == 0 || self.thin == 0 {
            return Err(Error::Config("chains and thin must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stored post-burn-in draws, chain by chain, with their derived effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub model: Model,
    pub chains: Vec<Vec<ParameterSet>>,
    pub derived: Vec<Vec<PsaceSummary>>,
    pub config: GibbsConfig,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn new(model: Model, chains: Vec<Vec<ParameterSet>>, config: GibbsConfig) -> Self {
        let derived = chains.iter().map(|c| c.iter().map(ParameterSet::summary).collect()).collect();
        Self { model, chains, derived, config, warnings: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_trials(&self) -> usize {
        self.chains.iter().flatten().next().map_or(0, ParameterSet::n_trials)
    }

    /// All draws, chain after chain.
    pub fn iter(&self) -> impl Iterator<Item = &ParameterSet> {
        self.chains.iter().flatten()
    }

    pub fn summaries(&self) -> impl Iterator<Item = &PsaceSummary> {
        self.derived.iter().flatten()
    }

    /// A scalar of every draw, pooled across chains.
    pub fn pooled(&self, f: impl Fn(&ParameterSet) -> f64) -> Vec<f64> {
        self.iter().map(f).collect()
    }

    pub fn per_chain(&self, f: impl Fn(&ParameterSet) -> f64) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.iter().map(&f).collect()).collect()
    }

    /// Pooled draws of `ACE_u`.
    pub fn ace(&self, u: Stratum) -> Result<Vec<f64>> {
        if !self.model.contains(u) {
            return Err(Error::AbsentStratum(u));
        }
        Ok(self.summaries().map(|s| s.ace(u).expect("stratum present")).collect())
    }

    /// Every `step`-th draw of the pooled sequence.
    pub fn thinned(&self, n: usize) -> Vec<&ParameterSet> {
        let all: Vec<&ParameterSet> = self.iter().collect();
        if n == 0 || all.is_empty() {
            return Vec::new();
        }
        let step = (all.len() / n).max(1);
        all.into_iter().step_by(step).take(n).collect()
    }
}

pub(crate) fn check_counts(counts: &ObservedCounts) -> Result<()> {
    for v in counts.trials().iter().flatten().flatten().flatten() {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::Precondition(format!("invalid count {v}")));
        }
        if (v - v.round()).abs() > 1e-9 {
            return Err(Error::NonIntegralCounts(*v));
        }
    }
    Ok(())
}

/// Draws the strata of every unit given the parameters. Units in a cell are
/// exchangeable, so each two-stratum cell is split by one binomial draw.
/// Returns the complete table and whether any cell had zero total odds.
pub fn impute_strata<R: Rng + ?Sized>(
    counts: &ObservedCounts,
    params: &ParameterSet,
    rng: &mut R,
) -> Result<(CompleteCounts, bool)> {
    impute_with(counts, params.model, |r, z, u| (params.pi(u, r), params.delta(z, u)), rng)
}

/// Imputation with weights `(pi_ur, delta_zur)` supplied per trial.
pub(crate) fn impute_with<R: Rng + ?Sized>(
    counts: &ObservedCounts,
    model: Model,
    weights: impl Fn(usize, usize, Stratum) -> (f64, f64),
    rng: &mut R,
) -> Result<(CompleteCounts, bool)> {
    let mut out = CompleteCounts::zeros(counts.n_trials());
    let mut degenerate = false;
    for r in 0..counts.n_trials() {
        for z in 0..2 {
            for s in 0..2 {
                let strata = model.compatible(z, s);
                for y in 0..2 {
                    let n = counts.get(r, z, s, y).round();
                    if n == 0.0 {
                        continue;
                    }
                    match strata {
                        [u] => out.add(r, z, *u, y, n),
                        [u1, u2] => {
                            let (pi1, d1) = weights(r, z, *u1);
                            let (pi2, d2) = weights(r, z, *u2);
                            let w1 = pi1 * bernoulli_mass(d1, y);
                            let w2 = pi2 * bernoulli_mass(d2, y);
                            let prob = if w1 + w2 > 0.0 {
                                w1 / (w1 + w2)
                            } else {
                                degenerate = true;
                                0.5
                            };
                            let k = sample_binomial(n as u64, prob.clamp(0.0, 1.0), rng)? as f64;
                            out.add(r, z, *u1, y, k);
                            out.add(r, z, *u2, y, n - k);
                        }
                        _ => unreachable!("every observed cell has one or two strata"),
                    }
                }
            }
        }
    }
    Ok((out, degenerate))
}

/// Draws `(p, alpha, pi)` from their Dirichlet and Beta full conditionals.
pub(crate) fn draw_design<R: Rng + ?Sized>(
    complete: &CompleteCounts,
    model: Model,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>, Vec<[f64; 4]>)> {
    let n = complete.n_trials();
    let p = sample_dirichlet(&(0..n).map(|r| complete.trial_total(r) + 1.0).collect::<Vec<_>>(), rng)?;
    let mut alpha = Vec::with_capacity(n);
    let mut pi = Vec::with_capacity(n);
    for r in 0..n {
        alpha.push(sample_beta(complete.arm_total(1, r) + 1.0, complete.arm_total(0, r) + 1.0, rng)?);
        let conc: Vec<f64> = model.strata().iter().map(|&u| complete.stratum_total(u, r) + 1.0).collect();
        pi.push(to_row(sample_dirichlet(&conc, rng)?));
    }
    Ok((p, alpha, pi))
}

/// Draws `(p, alpha, pi, delta)` from their conjugate full conditionals.
pub fn draw_parameters<R: Rng + ?Sized>(complete: &CompleteCounts, model: Model, rng: &mut R) -> Result<ParameterSet> {
    let (p, alpha, pi) = draw_design(complete, model, rng)?;
    let mut delta = [[0.0; 4]; 2];
    for (z, row) in delta.iter_mut().enumerate() {
        for &u in model.strata() {
            row[u.index()] = sample_beta(complete.outcome_total(z, u, 1) + 1.0, complete.outcome_total(z, u, 0) + 1.0, rng)?;
        }
    }
    let mut params = ParameterSet { model, p, alpha, pi, delta };
    params.validate_and_normalize()?;
    Ok(params)
}

fn to_row(v: Vec<f64>) -> [f64; 4] {
    let mut row = [0.0; 4];
    row[..v.len()].copy_from_slice(&v);
    row
}

fn run_chain(counts: &ObservedCounts, model: Model, config: &GibbsConfig, chain: usize) -> Result<(Vec<ParameterSet>, bool)> {
    let mut rng = RngStream::new(config.seed).split(chain as u64);
    let mut params = random_start(model, counts.n_trials(), &mut rng);
    let mut kept = Vec::with_capacity((config.iterations - config.burn_in) / config.thin + 1);
    let mut degenerate = false;
    for it in 0..config.iterations {
        let (complete, d) = impute_strata(counts, &params, &mut rng)?;
        degenerate |= d;
        params = draw_parameters(&complete, model, &mut rng)?;
        if it >= config.burn_in && (it - config.burn_in) % config.thin == 0 {
            kept.push(params.clone());
        }
    }
    Ok((kept, degenerate))
}

/// Runs `config.chains` independent chains started from prior draws.
pub fn run_gibbs(counts: &ObservedCounts, model: Model, config: &GibbsConfig) -> Result<PosteriorDraws> {
    config.check()?;
    check_counts(counts)?;
    let chains: Vec<(Vec<ParameterSet>, bool)> =
        (0..config.chains).into_par_iter().map(|c| run_chain(counts, model, config, c)).collect::<Result<_>>()?;
    let degenerate = chains.iter().any(|c| c.1);
    let mut draws = PosteriorDraws::new(model, chains.into_iter().map(|c| c.0).collect(), *config);
    if degenerate {
        draws.warnings.push("some imputation steps had zero total odds and used an even split".into());
    }
    Ok(draws)
}

/// One row of a posterior summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub quantiles: Vec<f64>,
    /// For effects: whether the central 95% interval excludes zero.
    pub excludes_zero: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub levels: Vec<f64>,
    pub rows: Vec<SummaryRow>,
}

impl PosteriorSummary {
    pub fn get(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub(crate) fn row(name: String, xs: &[f64], levels: &[f64], effect: bool) -> SummaryRow {
    let excludes_zero = effect.then(|| {
        let ci = quantiles(xs, &[0.025, 0.975]);
        ci[0] > 0.0 || ci[1] < 0.0
    });
    SummaryRow { name, mean: mean(xs), quantiles: quantiles(xs, levels), excludes_zero }
}

/// Empirical quantiles (linear interpolation) of every parameter and effect.
pub fn summarize(draws: &PosteriorDraws, levels: &[f64]) -> Result<PosteriorSummary> {
    if draws.is_empty() {
        return Err(Error::EmptyDraws);
    }
    let model = draws.model;
    let n = draws.n_trials();
    let mut rows = Vec::new();
    for &u in model.strata() {
        rows.push(row(format!("ACE[{u}]"), &draws.ace(u)?, levels, true));
    }
    for r in 0..n {
        let s: Vec<f64> = draws.summaries().map(|d| d.ace_s[r]).collect();
        rows.push(row(format!("ACE_S[{}]", r + 1), &s, levels, true));
        let y: Vec<f64> = draws.summaries().map(|d| d.ace_y[r]).collect();
        rows.push(row(format!("ACE_Y[{}]", r + 1), &y, levels, true));
    }
    for z in [1, 0] {
        for &u in model.strata() {
            rows.push(row(format!("delta[{z},{u}]"), &draws.pooled(|p| p.delta(z, u)), levels, false));
        }
    }
    for r in 0..n {
        rows.push(row(format!("p[{}]", r + 1), &draws.pooled(|p| p.p[r]), levels, false));
        rows.push(row(format!("alpha[{}]", r + 1), &draws.pooled(|p| p.alpha[r]), levels, false));
        for &u in model.strata() {
            rows.push(row(format!("pi[{u},{}]", r + 1), &draws.pooled(|p| p.pi(u, r)), levels, false));
        }
    }
    Ok(PosteriorSummary { levels: levels.to_vec(), rows })
}

/// Potential scale reduction factor `sqrt(((n-1)/n W + B/n) / W)`.
///
/// Chains must share a length of at least 10. With zero within-chain
/// variance the factor is 1 if the chains also agree and `+inf` otherwise.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Precondition("the potential scale reduction needs at least two chains".into()));
    }
    let n = chains[0].len();
    if n < 10 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::Precondition("chains must have equal lengths of at least 10 draws".into()));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b = n as f64 * variance(&means);
    let w = mean(&chains.iter().map(|c| variance(c)).collect::<Vec<_>>());
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let nf = n as f64;
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}

/// Silverman's rule-of-thumb bandwidth.
pub fn default_bandwidth(xs: &[f64]) -> f64 {
    let sd = variance(xs).sqrt();
    let q = quantiles(xs, &[0.25, 0.75]);
    let spread = sd.min((q[1] - q[0]) / 1.34);
    let spread = if spread > 0.0 { spread } else { sd };
    0.9 * spread * (xs.len() as f64).powf(-0.2)
}

/// Number of local maxima of a Gaussian kernel density estimate on a
/// 512-point grid, ignoring maxima below 5% of the highest. A heuristic
/// check for unimodality, not a test.
pub fn count_modes(xs: &[f64], bandwidth: f64) -> usize {
    if xs.is_empty() {
        return 0;
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * bandwidth;
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bandwidth;
    if !(bandwidth > 0.0) || hi <= lo {
        return 1;
    }
    // bin first, then smooth the histogram
    let m = 512;
    let step = (hi - lo) / (m - 1) as f64;
    let mut hist = vec![0.0; m];
    for &x in xs {
        hist[(((x - lo) / step).round() as usize).min(m - 1)] += 1.0;
    }
    let reach = (4.0 * bandwidth / step).ceil() as isize;
    let density: Vec<f64> = (0..m as isize)
        .map(|i| {
            (-reach..=reach)
                .filter_map(|k| {
                    let j = i + k;
                    (0..m as isize).contains(&j).then(|| {
                        let d = k as f64 * step / bandwidth;
                        hist[j as usize] * (-0.5 * d * d).exp()
                    })
                })
                .sum()
        })
        .collect();
    let top = density.iter().copied().fold(0.0, f64::max);
    (1..m - 1)
        .filter(|&i| density[i] > density[i - 1] && density[i] >= density[i + 1] && density[i] > 0.05 * top)
        .count()
}
