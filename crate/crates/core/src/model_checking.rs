//! Goodness of fit against the saturated multinomial: likelihood-ratio tests
//! and posterior predictive p-values.

use crate::em::{random_start, run_em, run_em_from, EmConfig};
use crate::error::{Error, Result};
use crate::gibbs::PosteriorDraws;
use crate::model::{cell_probabilities_unchecked, log_likelihood_with, Model, ObservedCounts, ParameterSet};
use crate::rng::{sample_multinomial, RngStream};
use crate::stats::chi_square_sf;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Log-likelihood of the saturated model, `sum N log(N / N_total)`.
pub fn saturated_log_likelihood(counts: &ObservedCounts) -> f64 {
    let total = counts.total();
    counts.trials().iter().flatten().flatten().flatten().filter(|&&n| n > 0.0).map(|&n| n * (n / total).ln()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub model: Model,
    pub statistic: f64,
    pub df: i64,
    pub p_value: f64,
    pub log_likelihood: f64,
    pub saturated_log_likelihood: f64,
    /// The raw statistic was below `-1e-6` before clamping to zero, which
    /// points to an EM fit short of the maximum.
    pub negative_statistic: bool,
    pub ppp: Option<f64>,
    pub n_rep: Option<usize>,
}

fn untestable(model: Model, n_trials: usize) -> Result<i64> {
    let df = model.gof_df(n_trials);
    if df <= 0 {
        return Err(Error::UntestableModel { model, n_trials, df });
    }
    Ok(df)
}

fn clamp_statistic(t: f64) -> (f64, bool) {
    if t >= 0.0 {
        (t, false)
    } else {
        (0.0, t < -1e-6)
    }
}

/// Likelihood-ratio test of `model` against the saturated model with the
/// chi-square reference on `4 N_R - 6` or `3 N_R - 8` degrees of freedom.
pub fn lrt(counts: &ObservedCounts, model: Model, config: &EmConfig) -> Result<GofReport> {
    let df = untestable(model, counts.n_trials())?;
    let fit = run_em(counts, model, config)?;
    let sat = saturated_log_likelihood(counts);
    let (statistic, negative_statistic) = clamp_statistic(2.0 * (sat - fit.log_likelihood));
    Ok(GofReport {
        model,
        statistic,
        df,
        p_value: chi_square_sf(statistic, df as f64),
        log_likelihood: fit.log_likelihood,
        saturated_log_likelihood: sat,
        negative_statistic,
        ppp: None,
        n_rep: None,
    })
}

/// Discrepancy used by [`posterior_predictive_p`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discrepancy {
    /// `2 (l_sat(y) - l(y; theta))` at the drawn parameters, for observed and
    /// replicated data alike.
    Realized,
    /// The likelihood-ratio statistic with the model refitted to every
    /// replicate (warm start at the draw plus five random restarts).
    Refit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PppResult {
    /// Posterior probability that the replicated discrepancy is at least the
    /// observed one (ties count one half). Small values signal misfit.
    pub ppp: f64,
    pub n_rep: usize,
    pub dropped: usize,
    pub discrepancy: Discrepancy,
    pub warnings: Vec<String>,
}

fn replicate(params: &ParameterSet, total: u64, rng: &mut RngStream) -> Result<ObservedCounts> {
    let probs = cell_probabilities_unchecked(params).flatten();
    let draw = sample_multinomial(total, &probs, rng)?;
    let mut out = ObservedCounts::zeros(params.n_trials());
    for (i, k) in draw.into_iter().enumerate() {
        out.set(i / 8, (i / 4) % 2, (i / 2) % 2, i % 2, k as f64);
    }
    Ok(out)
}

fn refit_statistic(counts: &ObservedCounts, warm: &ParameterSet, config: &EmConfig, rng: &mut RngStream) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut converged = false;
    for k in 0..6 {
        let start = if k == 0 { warm.clone() } else { random_start(warm.model, warm.n_trials(), rng) };
        let fit = run_em_from(counts, start, config.tolerance, config.max_iter).ok()?;
        converged |= fit.converged;
        if best.is_none_or(|b| fit.log_likelihood > b) {
            best = Some(fit.log_likelihood);
        }
    }
    if !converged {
        return None;
    }
    Some(clamp_statistic(2.0 * (saturated_log_likelihood(counts) - best?)).0)
}

/// Posterior predictive p-value from `n_rep` evenly spaced posterior draws.
/// Each replicate table has the observed total and is generated from the
/// full model, margins included.
pub fn posterior_predictive_p(
    counts: &ObservedCounts,
    draws: &PosteriorDraws,
    n_rep: usize,
    discrepancy: Discrepancy,
    config: &EmConfig,
    seed: u64,
) -> Result<PppResult> {
    if draws.is_empty() {
        return Err(Error::EmptyDraws);
    }
    if n_rep == 0 || n_rep > draws.len() {
        return Err(Error::Precondition(format!("n_rep must be between 1 and the {} available draws", draws.len())));
    }
    if !counts.is_integral() {
        return Err(Error::NonIntegralCounts(counts.total()));
    }
    if draws.n_trials() != counts.n_trials() {
        return Err(Error::Precondition("draws and counts have different numbers of trials".into()));
    }
    let total = counts.total().round() as u64;
    let sat_obs = saturated_log_likelihood(counts);
    let observed_refit = match discrepancy {
        Discrepancy::Refit => Some(lrt(counts, draws.model, config)?.statistic),
        Discrepancy::Realized => None,
    };
    let selected = draws.thinned(n_rep);
    let root = RngStream::new(seed);
    let scores: Vec<Option<f64>> = selected
        .par_iter()
        .enumerate()
        .map(|(j, &theta)| {
            let mut rng = root.split(j as u64);
            let rep = replicate(theta, total, &mut rng).ok()?;
            let (t_obs, t_rep) = match discrepancy {
                Discrepancy::Realized => {
                    let probs = cell_probabilities_unchecked(theta);
                    let t_obs = 2.0 * (sat_obs - log_likelihood_with(counts, &probs));
                    let t_rep = 2.0 * (saturated_log_likelihood(&rep) - log_likelihood_with(&rep, &probs));
                    (t_obs, t_rep)
                }
                Discrepancy::Refit => (observed_refit?, refit_statistic(&rep, theta, config, &mut rng)?),
            };
            Some(if t_rep > t_obs {
                1.0
            } else if t_rep == t_obs {
                0.5
            } else {
                0.0
            })
        })
        .collect();
    let kept: Vec<f64> = scores.iter().flatten().copied().collect();
    let dropped = scores.len() - kept.len();
    let mut warnings = Vec::new();
    if dropped * 10 > scores.len() {
        warnings.push(format!("{dropped} of {} replicates were dropped", scores.len()));
    }
    if kept.is_empty() {
        return Err(Error::Numerical("every replicate was dropped".into()));
    }
    Ok(PppResult {
        ppp: kept.iter().sum::<f64>() / kept.len() as f64,
        n_rep: kept.len(),
        dropped,
        discrepancy,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::{run_gibbs, GibbsConfig};
    use crate::model::cell_probabilities;
    use crate::model::fixtures::*;

    fn rounded(params: &ParameterSet, per_trial: f64) -> ObservedCounts {
        let c = ObservedCounts::expected_per_trial(&cell_probabilities(params).unwrap(), per_trial);
        ObservedCounts::from_trials(c.trials().iter().map(|t| t.map(|a| a.map(|b| b.map(f64::round)))).collect()).unwrap()
    }

    #[test]
    fn saturated_values() {
        let mut c = ObservedCounts::zeros(1);
        c.set(0, 1, 1, 1, 5.0);
        assert_eq!(saturated_log_likelihood(&c), 0.0);
        c.set(0, 0, 0, 0, 5.0);
        c.set(0, 1, 1, 1, 1.0);
        c.set(0, 0, 0, 0, 1.0);
        assert!((saturated_log_likelihood(&c) - 2.0 * 0.5f64.ln()).abs() < 1e-15);

        let counts = rounded(&three_trial_nonmonotone(), 1000.0);
        let total = counts.total();
        let direct: f64 = counts.trials().iter().flatten().flatten().flatten().map(|&n| n * (n / total).ln()).sum();
        assert!((saturated_log_likelihood(&counts) - direct).abs() < 1e-9);
    }

    #[test]
    fn lrt_df_and_nesting() {
        let counts = rounded(&three_trial_nonmonotone(), 500.0);
        let cfg = EmConfig { n_starts: 8, ..EmConfig::with_seed(1) };
        let m = lrt(&counts, Model::Monotone, &cfg).unwrap();
        let nm = lrt(&counts, Model::Nonmonotone, &cfg).unwrap();
        assert_eq!((m.df, nm.df), (6, 1));
        assert!(m.statistic >= nm.statistic - 1e-6);
        assert!(nm.statistic >= 0.0 && (0.0..=1.0).contains(&nm.p_value));
        // expected counts from the true model fit it almost exactly
        assert!(nm.statistic < 1e-2, "{}", nm.statistic);
        assert!(m.p_value < 0.1, "{} {}", m.statistic, m.p_value);
        let large = rounded(&three_trial_nonmonotone(), 5000.0);
        assert!(lrt(&large, Model::Monotone, &cfg).unwrap().p_value < 1e-6);
        let two = counts.select_trials(&[0, 1]);
        assert!(matches!(lrt(&two, Model::Nonmonotone, &cfg), Err(Error::UntestableModel { df: -2, .. })));
    }

    #[test]
    fn ppp_direction_and_determinism() {
        let counts = rounded(&three_trial_nonmonotone(), 2000.0);
        let cfg = EmConfig { n_starts: 3, ..EmConfig::with_seed(1) };
        let gibbs = GibbsConfig::new(3000, 1000, 4);
        let nm = run_gibbs(&counts, Model::Nonmonotone, &gibbs).unwrap();
        let m = run_gibbs(&counts, Model::Monotone, &gibbs).unwrap();
        let p_nm = posterior_predictive_p(&counts, &nm, 200, Discrepancy::Realized, &cfg, 7).unwrap();
        let p_m = posterior_predictive_p(&counts, &m, 200, Discrepancy::Realized, &cfg, 7).unwrap();
        assert!(p_m.ppp < 0.05, "{}", p_m.ppp);
        assert!((0.2..=0.8).contains(&p_nm.ppp) || p_nm.ppp > 0.8, "{}", p_nm.ppp);
        let again = posterior_predictive_p(&counts, &nm, 200, Discrepancy::Realized, &cfg, 7).unwrap();
        assert_eq!(p_nm, again);
        assert!(posterior_predictive_p(&counts, &nm, nm.len() + 1, Discrepancy::Realized, &cfg, 7).is_err());

        let refit = posterior_predictive_p(&counts, &m, 20, Discrepancy::Refit, &cfg, 7).unwrap();
        assert!(refit.ppp < 0.1);
    }
}
