//! Hierarchical sensitivity analysis: the outcome probabilities vary by
//! trial as `logit(delta_zur) ~ N(mu_zu, sigma^2)` around a common centre,
//! with `sigma` fixed by the analyst.
//!
//! Each `eta_zur = logit(delta_zur)` is refreshed with a Metropolized
//! independence step whose Gaussian proposal sits at the mode of the
//! (log-concave) full conditional.

use crate::em::random_start;
use crate::error::{Error, Result};
use crate::gibbs::{check_counts, draw_design, impute_with, row, GibbsConfig, PosteriorDraws, SummaryRow};
use crate::model::{CompleteCounts, Model, ObservedCounts, ParameterSet, Stratum};
use crate::rng::{open_unit, sample_truncated_normal, RngStream};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Bounds of the flat prior on `mu_zu`.
pub const MU_BOUND: f64 = 5.0;
/// Default sensitivity grid for `sigma`.
pub const DEFAULT_SIGMAS: [f64; 3] = [0.05, 0.2, 0.5];
const NEWTON_STEPS: usize = 100;

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Unnormalized log full conditional of `eta` given `n1` successes and `n0`
/// failures in its cell and the centre `mu`.
pub fn eta_log_density(eta: f64, n1: f64, n0: f64, mu: f64, sigma: f64) -> f64 {
    -n0 * eta - (eta - mu).powi(2) / (2.0 * sigma * sigma) - (n1 + n0) * softplus(-eta)
}

pub fn eta_gradient(eta: f64, n1: f64, n0: f64, mu: f64, sigma: f64) -> f64 {
    n1 - (n1 + n0) * expit(eta) - (eta - mu) / (sigma * sigma)
}

/// Second derivative; bounded above by `-1 / sigma^2`.
pub fn eta_curvature(eta: f64, n1: f64, n0: f64, sigma: f64) -> f64 {
    let e = expit(eta);
    -1.0 / (sigma * sigma) - (n1 + n0) * e * (1.0 - e)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub eta: f64,
    pub curvature: f64,
    /// Newton's method did not settle and bisection located the mode.
    pub fallback: bool,
}

/// Mode of the full conditional by Newton's method, with bisection on the
/// gradient over a bracket that always contains the root.
pub fn find_mode(n1: f64, n0: f64, mu: f64, sigma: f64) -> Mode {
    let n = n1 + n0;
    let mut eta = mu;
    for _ in 0..NEWTON_STEPS {
        let step = eta_gradient(eta, n1, n0, mu, sigma) / eta_curvature(eta, n1, n0, sigma);
        eta -= step;
        if !eta.is_finite() {
            break;
        }
        if step.abs() < 1e-10 * (1.0 + eta.abs()) {
            return Mode { eta, curvature: eta_curvature(eta, n1, n0, sigma), fallback: false };
        }
    }
    let reach = n * sigma * sigma + 1.0;
    let (mut lo, mut hi) = (mu - reach, mu + reach);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eta_gradient(mid, n1, n0, mu, sigma) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    let eta = 0.5 * (lo + hi);
    Mode { eta, curvature: eta_curvature(eta, n1, n0, sigma), fallback: true }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisStep {
    pub eta: f64,
    pub accepted: bool,
    pub fallback: bool,
}

/// Draw from the Laplace approximation `N(mode, -1/curvature)`, always
/// reported as accepted.
pub fn laplace_draw<R: Rng + ?Sized>(n1: f64, n0: f64, mu: f64, sigma: f64, rng: &mut R) -> MisStep {
    let mode = find_mode(n1, n0, mu, sigma);
    let z: f64 = StandardNormal.sample(rng);
    MisStep { eta: mode.eta + (-1.0 / mode.curvature).sqrt() * z, accepted: true, fallback: mode.fallback }
}

/// One Metropolized independence step with proposal `N(mode, -1/curvature)`.
pub fn mis_step<R: Rng + ?Sized>(eta: f64, n1: f64, n0: f64, mu: f64, sigma: f64, rng: &mut R) -> MisStep {
    let mode = find_mode(n1, n0, mu, sigma);
    let sd = (-1.0 / mode.curvature).sqrt();
    let z: f64 = StandardNormal.sample(rng);
    let proposal = mode.eta + sd * z;
    let log_q = |x: f64| -0.5 * ((x - mode.eta) / sd).powi(2);
    let log_ratio = eta_log_density(proposal, n1, n0, mu, sigma) - eta_log_density(eta, n1, n0, mu, sigma) + log_q(eta)
        - log_q(proposal);
    let accepted = log_ratio >= 0.0 || open_unit(rng).ln() < log_ratio;
    MisStep { eta: if accepted { proposal } else { eta }, accepted, fallback: mode.fallback }
}

/// Draws `mu` given the trial logits: `N(mean(eta), sigma^2 / N_R)` on
/// `[-MU_BOUND, MU_BOUND]`.
pub fn draw_mu<R: Rng + ?Sized>(etas: &[f64], sigma: f64, rng: &mut R) -> Result<f64> {
    let m = etas.iter().sum::<f64>() / etas.len() as f64;
    let sd = sigma / (etas.len() as f64).sqrt();
    Ok(sample_truncated_normal(m.clamp(-1e6, 1e6), sd, -MU_BOUND, MU_BOUND, rng)?.value)
}

/// Translates `mu` and every trial logit of one cell by a common `c`. The
/// normal prior on the logits is unchanged by such a shift, so the
/// conditional of `c` is the binomial likelihood alone, restricted to keep
/// `mu` in range. It is refreshed with an independence step around its
/// mode. Without this move `mu` moves by about `sigma / sqrt(N_R)` per sweep
/// and weakly identified cells mix very slowly when `sigma` is small.
pub fn shift_step<R: Rng + ?Sized>(etas: &mut [f64], mu: &mut f64, n1: &[f64], n: &[f64], rng: &mut R) -> bool {
    let log_target = |c: f64| -> f64 {
        etas.iter().zip(n1).zip(n).map(|((e, a), t)| a * (e + c) - t * softplus(e + c)).sum()
    };
    let gradient = |c: f64| -> f64 { etas.iter().zip(n1).zip(n).map(|((e, a), t)| a - t * expit(e + c)).sum() };
    let curvature = |c: f64| -> f64 {
        etas.iter().zip(n).map(|(e, t)| {
            let p = expit(e + c);
            -t * p * (1.0 - p)
        })
        .sum()
    };
    let (lo, hi) = (-MU_BOUND - *mu, MU_BOUND - *mu);
    if !(lo < hi) {
        return false;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        if gradient(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let mode = 0.5 * (a + b);
    let kappa = -curvature(mode);
    if !(kappa > 1e-8) {
        return false;
    }
    let sd = kappa.sqrt().recip();
    let z: f64 = StandardNormal.sample(rng);
    let proposal = mode + sd * z;
    if proposal <= lo || proposal >= hi {
        return false;
    }
    let log_q = |c: f64| -0.5 * ((c - mode) / sd).powi(2);
    let log_ratio = log_target(proposal) - log_target(0.0) + log_q(0.0) - log_q(proposal);
    if log_ratio >= 0.0 || open_unit(rng).ln() < log_ratio {
        for e in etas.iter_mut() {
            *e += proposal;
        }
        *mu += proposal;
        return true;
    }
    false
}

/// Sampler state; `eta[r][z][u]`, `mu[z][u]`. The `SbarS` stratum is always
/// present since the hierarchical model has no monotone variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalState {
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
    pub pi: Vec<[f64; 4]>,
    pub eta: Vec<[[f64; 4]; 2]>,
    pub mu: [[f64; 4]; 2],
    pub sigma: f64,
}

impl HierarchicalState {
    pub fn n_trials(&self) -> usize {
        self.p.len()
    }

    pub fn delta(&self, z: usize, u: Stratum, r: usize) -> f64 {
        expit(self.eta[r][z][u.index()])
    }

    /// Trial-specific effect `delta_1ur - delta_0ur`.
    pub fn trial_ace(&self, u: Stratum, r: usize) -> f64 {
        self.delta(1, u, r) - self.delta(0, u, r)
    }

    /// Centre-scale effect `expit(mu_1u) - expit(mu_0u)`.
    pub fn pooled_ace(&self, u: Stratum) -> f64 {
        expit(self.mu[1][u.index()]) - expit(self.mu[0][u.index()])
    }

    /// The state as a homogeneous parameter set with `delta_zu = expit(mu_zu)`.
    pub fn centre(&self) -> ParameterSet {
        ParameterSet {
            model: Model::Nonmonotone,
            p: self.p.clone(),
            alpha: self.alpha.clone(),
            pi: self.pi.clone(),
            delta: self.mu.map(|row| row.map(expit)),
        }
    }

    fn initial(n_trials: usize, sigma: f64, rng: &mut RngStream) -> Self {
        let start = random_start(Model::Nonmonotone, n_trials, rng);
        let eta0 = start.delta.map(|row| row.map(|d| logit(d.clamp(1e-3, 1.0 - 1e-3))));
        Self {
            p: start.p,
            alpha: start.alpha,
            pi: start.pi,
            eta: vec![eta0; n_trials],
            mu: eta0.map(|row| row.map(|e| e.clamp(-MU_BOUND, MU_BOUND))),
            sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalDraws {
    pub sigma: f64,
    pub config: GibbsConfig,
    pub chains: Vec<Vec<HierarchicalState>>,
    /// Post burn-in acceptance rate of the independence step, `[r][z][u]`,
    /// averaged over chains.
    pub acceptance: Vec<[[f64; 4]; 2]>,
    /// Mode searches that needed the bisection fallback.
    pub fallbacks: usize,
    pub warnings: Vec<String>,
}

impl HierarchicalDraws {
    pub fn len(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_trials(&self) -> usize {
        self.acceptance.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HierarchicalState> {
        self.chains.iter().flatten()
    }

    pub fn trial_ace(&self, u: Stratum, r: usize) -> Vec<f64> {
        self.iter().map(|s| s.trial_ace(u, r)).collect()
    }

    pub fn pooled_ace(&self, u: Stratum) -> Vec<f64> {
        self.iter().map(|s| s.pooled_ace(u)).collect()
    }

    pub fn mu(&self, z: usize, u: Stratum) -> Vec<f64> {
        self.iter().map(|s| s.mu[z][u.index()]).collect()
    }

    pub fn min_acceptance(&self) -> f64 {
        self.acceptance.iter().flatten().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    /// Centre-scale draws in the homogeneous container, for reuse with the
    /// surrogate and summary tools.
    pub fn centre_draws(&self) -> PosteriorDraws {
        let chains = self.chains.iter().map(|c| c.iter().map(HierarchicalState::centre).collect()).collect();
        let mut out = PosteriorDraws::new(Model::Nonmonotone, chains, self.config);
        out.warnings = self.warnings.clone();
        out
    }

    /// Rows `ACE[u]` (centre scale), `ACE[u,r]` (trial specific) and
    /// `mu[z,u]`.
    pub fn summarize(&self, levels: &[f64]) -> Result<Vec<SummaryRow>> {
        if self.is_empty() {
            return Err(Error::EmptyDraws);
        }
        let mut rows = Vec::new();
        for u in Stratum::ALL {
            rows.push(row(format!("ACE[{u}]"), &self.pooled_ace(u), levels, true));
        }
        for u in Stratum::ALL {
            for r in 0..self.n_trials() {
                rows.push(row(format!("ACE[{u},{}]", r + 1), &self.trial_ace(u, r), levels, true));
            }
        }
        for z in [1, 0] {
            for u in Stratum::ALL {
                rows.push(row(format!("mu[{z},{u}]"), &self.mu(z, u), levels, false));
            }
        }
        Ok(rows)
    }
}

fn sweep(
    counts: &ObservedCounts,
    state: &mut HierarchicalState,
    rng: &mut RngStream,
    accepted: &mut [[[f64; 4]; 2]],
    fallbacks: &mut usize,
    initial: bool,
) -> Result<bool> {
    let model = Model::Nonmonotone;
    let (complete, degenerate) =
        impute_with(counts, model, |r, z, u| (state.pi[r][u.index()], state.delta(z, u, r)), rng)?;
    let (p, alpha, pi) = draw_design(&complete, model, rng)?;
    state.p = p;
    state.alpha = alpha;
    state.pi = pi;
    let n = state.n_trials();
    for z in 0..2 {
        for u in Stratum::ALL {
            let etas: Vec<f64> = (0..n).map(|r| state.eta[r][z][u.index()]).collect();
            state.mu[z][u.index()] = draw_mu(&etas, state.sigma, rng)?;
        }
    }
    update_etas(&complete, state, rng, accepted, fallbacks, initial);
    for z in 0..2 {
        for u in Stratum::ALL {
            let i = u.index();
            let mut etas: Vec<f64> = (0..n).map(|r| state.eta[r][z][i]).collect();
            let n1: Vec<f64> = (0..n).map(|r| complete.get(r, z, u, 1)).collect();
            let tot: Vec<f64> = (0..n).map(|r| complete.get(r, z, u, 1) + complete.get(r, z, u, 0)).collect();
            if shift_step(&mut etas, &mut state.mu[z][i], &n1, &tot, rng) {
                for (r, e) in etas.into_iter().enumerate() {
                    state.eta[r][z][i] = e;
                }
            }
        }
    }
    Ok(degenerate)
}

fn update_etas(
    complete: &CompleteCounts,
    state: &mut HierarchicalState,
    rng: &mut RngStream,
    accepted: &mut [[[f64; 4]; 2]],
    fallbacks: &mut usize,
    initial: bool,
) {
    for r in 0..state.n_trials() {
        for z in 0..2 {
            for u in Stratum::ALL {
                let i = u.index();
                // The target has heavier tails than the proposal, so a chain
                // started far out could stall; the first sweep therefore
                // draws straight from the proposal.
                let (n1, n0) = (complete.get(r, z, u, 1), complete.get(r, z, u, 0));
                let step = if initial {
                    laplace_draw(n1, n0, state.mu[z][i], state.sigma, rng)
                } else {
                    mis_step(state.eta[r][z][i], n1, n0, state.mu[z][i], state.sigma, rng)
                };
                state.eta[r][z][i] = step.eta;
                accepted[r][z][i] += step.accepted as u8 as f64;
                *fallbacks += step.fallback as usize;
            }
        }
    }
}

struct ChainOutput {
    kept: Vec<HierarchicalState>,
    accepted: Vec<[[f64; 4]; 2]>,
    fallbacks: usize,
    degenerate: bool,
}

fn run_chain(counts: &ObservedCounts, sigma: f64, config: &GibbsConfig, chain: usize) -> Result<ChainOutput> {
    let n = counts.n_trials();
    let mut rng = RngStream::new(config.seed).split(chain as u64);
    let mut state = HierarchicalState::initial(n, sigma, &mut rng);
    let mut kept = Vec::with_capacity((config.iterations - config.burn_in) / config.thin + 1);
    let mut accepted = vec![[[0.0; 4]; 2]; n];
    let mut scratch = vec![[[0.0; 4]; 2]; n];
    let mut fallbacks = 0;
    let mut degenerate = false;
    for it in 0..config.iterations {
        let counting = it >= config.burn_in;
        let tally = if counting { &mut accepted } else { &mut scratch };
        degenerate |= sweep(counts, &mut state, &mut rng, tally, &mut fallbacks, it == 0)?;
        if counting && (it - config.burn_in) % config.thin == 0 {
            kept.push(state.clone());
        }
    }
    let post = (config.iterations - config.burn_in) as f64;
    for cell in accepted.iter_mut().flatten().flatten() {
        *cell /= post;
    }
    Ok(ChainOutput { kept, accepted, fallbacks, degenerate })
}

/// Gibbs sampler for the hierarchical model. `sigma = 0` is the homogeneous
/// model and belongs to [`crate::gibbs::run_gibbs`].
pub fn run_hierarchical_gibbs(counts: &ObservedCounts, sigma: f64, config: &GibbsConfig) -> Result<HierarchicalDraws> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Precondition(format!(
            "sigma must be positive (got {sigma}); for sigma = 0 use the homogeneous Gibbs sampler"
        )));
    }
    config.check()?;
    check_counts(counts)?;
    let outputs: Vec<ChainOutput> =
        (0..config.chains).into_par_iter().map(|c| run_chain(counts, sigma, config, c)).collect::<Result<_>>()?;
    let n = counts.n_trials();
    let mut acceptance = vec![[[0.0; 4]; 2]; n];
    for out in &outputs {
        for (acc, chain) in acceptance.iter_mut().zip(&out.accepted) {
            for z in 0..2 {
                for i in 0..4 {
                    acc[z][i] += chain[z][i] / outputs.len() as f64;
                }
            }
        }
    }
    let fallbacks = outputs.iter().map(|o| o.fallbacks).sum();
    let mut warnings = Vec::new();
    if outputs.iter().any(|o| o.degenerate) {
        warnings.push("some imputation steps had zero total odds and used an even split".into());
    }
    if fallbacks > 0 {
        warnings.push(format!("{fallbacks} mode searches fell back to bisection"));
    }
    Ok(HierarchicalDraws {
        sigma,
        config: *config,
        chains: outputs.into_iter().map(|o| o.kept).collect(),
        acceptance,
        fallbacks,
        warnings,
    })
}
