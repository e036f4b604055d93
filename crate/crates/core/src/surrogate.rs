//! Surrogate validity from principal-stratum effects: causal necessity and
//! sufficiency, treatment-effect prediction in a new trial, and the
//! surrogate paradox.

use crate::bounds::Interval;
use crate::error::{Error, Result};
use crate::gibbs::PosteriorDraws;
use crate::model::{Model, ParameterSet, Stratum};
use crate::stats::{median, quantile};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Credible interval and its zero check for one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumEvidence {
    pub median: f64,
    pub interval: Interval,
    pub contains_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateVerdict {
    pub model: Model,
    pub level: f64,
    pub evidence: BTreeMap<Stratum, StratumEvidence>,
    /// `ACE_u = 0` supported for `SS` and `SbarSbar`.
    pub necessity: BTreeMap<Stratum, bool>,
    /// `ACE_u != 0` supported for `SSbar` (and `SbarS` without monotonicity).
    pub sufficiency: BTreeMap<Stratum, bool>,
    /// Posterior probability of `ACE_SSbar + ACE_SbarS >= 0`. Absent under
    /// monotonicity.
    pub sum_condition: Option<f64>,
}

impl SurrogateVerdict {
    pub fn necessity_holds(&self) -> bool {
        self.necessity.values().all(|&b| b)
    }

    pub fn sufficiency_for(&self, u: Stratum) -> Result<bool> {
        self.sufficiency.get(&u).copied().ok_or(Error::AbsentStratum(u))
    }

    pub fn evidence_for(&self, u: Stratum) -> Result<&StratumEvidence> {
        self.evidence.get(&u).ok_or(Error::AbsentStratum(u))
    }

    pub fn sum_condition(&self) -> Result<f64> {
        self.sum_condition.ok_or(Error::AbsentStratum(Stratum::SbarS))
    }
}

/// Reads necessity and sufficiency off central `level` credible intervals.
pub fn evaluate_surrogate(draws: &PosteriorDraws, level: f64) -> Result<SurrogateVerdict> {
    if draws.is_empty() {
        return Err(Error::EmptyDraws);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Precondition(format!("credible level {level} is outside (0, 1)")));
    }
    let tail = (1.0 - level) / 2.0;
    let mut evidence = BTreeMap::new();
    let mut aces = BTreeMap::new();
    for &u in draws.model.strata() {
        let xs = draws.ace(u)?;
        let interval = Interval::new(quantile(&xs, tail), quantile(&xs, 1.0 - tail));
        let contains_zero = interval.contains(0.0, 0.0);
        evidence.insert(u, StratumEvidence { median: median(&xs), interval, contains_zero });
        aces.insert(u, xs);
    }
    let necessity = [Stratum::SS, Stratum::SbarSbar].into_iter().map(|u| (u, evidence[&u].contains_zero)).collect();
    let sufficiency = [Stratum::SSbar, Stratum::SbarS]
        .into_iter()
        .filter(|&u| draws.model.contains(u))
        .map(|u| (u, !evidence[&u].contains_zero))
        .collect();
    let sum_condition = aces.get(&Stratum::SbarS).map(|sbars| {
        let ssbar = &aces[&Stratum::SSbar];
        ssbar.iter().zip(sbars).filter(|(a, b)| *a + *b >= 0.0).count() as f64 / sbars.len() as f64
    });
    Ok(SurrogateVerdict { model: draws.model, level, evidence, necessity, sufficiency, sum_condition })
}

/// Treatment effect on the outcome in a new trial under monotonicity and
/// causal necessity: `ACE^S * ACE_SSbar`.
pub fn predict_ace_y_monotone(ace_s_new: f64, ace_ssbar: f64) -> f64 {
    ace_s_new * ace_ssbar
}

/// Sharp range of the new-trial outcome effect without monotonicity, given
/// causal necessity. A non-positive surrogate effect must be handled by
/// relabelling the surrogate first.
pub fn predict_ace_y_bounds(ace_s_new: f64, ace_ssbar: f64, ace_sbars: f64) -> Result<Interval> {
    if !(ace_s_new > 0.0 && ace_s_new <= 1.0) {
        return Err(Error::Precondition(format!(
            "new-trial surrogate effect {ace_s_new} must lie in (0, 1]; relabel S as 1 - S when it is negative"
        )));
    }
    let at_zero = ace_s_new * ace_ssbar;
    let at_max = (ace_ssbar + ace_sbars) / 2.0 + ace_s_new * (ace_ssbar - ace_sbars) / 2.0;
    Ok(if ace_ssbar + ace_sbars >= 0.0 { Interval::new(at_zero, at_max) } else { Interval::new(at_max, at_zero) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Zero,
    Negative,
}

impl Sign {
    pub fn of(x: f64) -> Sign {
        if x > 0.0 {
            Sign::Positive
        } else if x < 0.0 {
            Sign::Negative
        } else {
            Sign::Zero
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignConclusion {
    Positive,
    Zero,
    Indeterminate,
}

/// What the sign of the new surrogate effect says about the outcome effect,
/// assuming causal necessity. `ace_sbars` is ignored under monotonicity.
pub fn sign_conclusion(ace_s_new: Sign, ace_ssbar: f64, ace_sbars: f64, model: Model) -> SignConclusion {
    match ace_s_new {
        Sign::Zero if model.is_monotone() => SignConclusion::Zero,
        Sign::Positive if ace_ssbar > 0.0 && (model.is_monotone() || ace_ssbar + ace_sbars >= 0.0) => {
            SignConclusion::Positive
        }
        _ => SignConclusion::Indeterminate,
    }
}

/// Posterior probability of each sign verdict, applying [`sign_conclusion`]
/// draw by draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignProbabilities {
    pub positive: f64,
    pub zero: f64,
    pub indeterminate: f64,
}

pub fn sign_posterior(draws: &PosteriorDraws, ace_s_new: Sign) -> Result<SignProbabilities> {
    if draws.is_empty() {
        return Err(Error::EmptyDraws);
    }
    let mut tally = [0usize; 3];
    for d in draws.summaries() {
        let ssbar = d.ace(Stratum::SSbar).unwrap_or(0.0);
        let sbars = d.ace(Stratum::SbarS).unwrap_or(0.0);
        match sign_conclusion(ace_s_new, ssbar, sbars, draws.model) {
            SignConclusion::Positive => tally[0] += 1,
            SignConclusion::Zero => tally[1] += 1,
            SignConclusion::Indeterminate => tally[2] += 1,
        }
    }
    let n = draws.len() as f64;
    Ok(SignProbabilities { positive: tally[0] as f64 / n, zero: tally[1] as f64 / n, indeterminate: tally[2] as f64 / n })
}

/// Posterior spread of the predicted new-trial outcome effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub ace_s_new: f64,
    pub model: Model,
    /// Median of the point prediction (monotone) or of each endpoint.
    pub median: Interval,
    /// Central credible range: lower quantile of the lower endpoint to upper
    /// quantile of the upper endpoint.
    pub credible: Interval,
    pub level: f64,
}

pub fn predict_from_draws(draws: &PosteriorDraws, ace_s_new: f64, level: f64) -> Result<PredictionSummary> {
    if draws.is_empty() {
        return Err(Error::EmptyDraws);
    }
    let ssbar = draws.ace(Stratum::SSbar)?;
    let (lo, hi): (Vec<f64>, Vec<f64>) = if draws.model.is_monotone() {
        if !(0.0..=1.0).contains(&ace_s_new) {
            return Err(Error::Precondition(format!("monotone surrogate effect {ace_s_new} must lie in [0, 1]")));
        }
        ssbar.iter().map(|&a| (predict_ace_y_monotone(ace_s_new, a), predict_ace_y_monotone(ace_s_new, a))).unzip()
    } else {
        let sbars = draws.ace(Stratum::SbarS)?;
        let mut lo = Vec::with_capacity(ssbar.len());
        let mut hi = Vec::with_capacity(ssbar.len());
        for (&a, &b) in ssbar.iter().zip(&sbars) {
            let iv = predict_ace_y_bounds(ace_s_new, a, b)?;
            lo.push(iv.lo);
            hi.push(iv.hi);
        }
        (lo, hi)
    };
    let tail = (1.0 - level) / 2.0;
    Ok(PredictionSummary {
        ace_s_new,
        model: draws.model,
        median: Interval::new(median(&lo), median(&hi)),
        credible: Interval::new(quantile(&lo, tail), quantile(&hi, 1.0 - tail)),
        level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParadoxReport {
    pub trial: usize,
    pub ace_s: f64,
    pub ace_y: f64,
    pub ace_s_sign: Sign,
    pub ace_y_sign: Sign,
    /// Positive surrogate effect alongside a negative outcome effect.
    pub paradox: bool,
}

/// Surrogate and outcome effects of trial `r` (0-based) and whether they
/// point in opposite directions.
pub fn paradox_check(params: &ParameterSet, r: usize) -> Result<ParadoxReport> {
    let n = params.n_trials();
    if r >= n {
        return Err(Error::TrialOutOfRange { trial: r + 1, n_trials: n });
    }
    let strata = params.model.strata();
    let ace_s = strata.iter().map(|&u| params.pi(u, r) * (u.surrogate(1) as f64 - u.surrogate(0) as f64)).sum::<f64>();
    let ace_y = strata.iter().map(|&u| params.pi(u, r) * (params.delta(1, u) - params.delta(0, u))).sum::<f64>();
    Ok(ParadoxReport {
        trial: r + 1,
        ace_s,
        ace_y,
        ace_s_sign: Sign::of(ace_s),
        ace_y_sign: Sign::of(ace_y),
        paradox: ace_s > 0.0 && ace_y < 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::GibbsConfig;

    const TOL: f64 = 1e-12;

    fn centered(aces: [f64; 4]) -> [[f64; 4]; 2] {
        [aces.map(|a| 0.5 - a / 2.0), aces.map(|a| 0.5 + a / 2.0)]
    }

    fn with_aces(pi: [f64; 4], aces: [f64; 4]) -> ParameterSet {
        ParameterSet::new(Model::Nonmonotone, vec![1.0], vec![0.5], vec![pi.to_vec()], centered(aces)).unwrap()
    }

    fn degenerate(model: Model, aces: [f64; 4], n: usize) -> PosteriorDraws {
        let pi = if model.is_monotone() { vec![0.3, 0.4, 0.3] } else { vec![0.3, 0.3, 0.2, 0.2] };
        let p = ParameterSet::new(model, vec![1.0], vec![0.5], vec![pi], centered(aces)).unwrap();
        PosteriorDraws::new(model, vec![vec![p; n]], GibbsConfig::new(n, 0, 0))
    }

    #[test]
    fn verdict_on_degenerate_draws() {
        let draws = degenerate(Model::Nonmonotone, [0.0, 0.4, 0.0, -0.2], 50);
        let v = evaluate_surrogate(&draws, 0.95).unwrap();
        assert!(v.necessity[&Stratum::SS] && v.necessity[&Stratum::SbarSbar] && v.necessity_holds());
        assert!(v.sufficiency_for(Stratum::SSbar).unwrap());
        assert!(v.sufficiency_for(Stratum::SbarS).unwrap());
        assert_eq!(v.sum_condition().unwrap(), 1.0);

        let mono = degenerate(Model::Monotone, [0.0, 0.4, 0.0, 0.0], 50);
        let v = evaluate_surrogate(&mono, 0.95).unwrap();
        assert!(v.necessity_holds() && v.sufficiency_for(Stratum::SSbar).unwrap());
        assert!(matches!(v.sufficiency_for(Stratum::SbarS), Err(Error::AbsentStratum(Stratum::SbarS))));
        assert!(matches!(v.sum_condition(), Err(Error::AbsentStratum(_))));
        assert!(evaluate_surrogate(&mono, 1.0).is_err());
    }

    #[test]
    fn monotone_prediction() {
        assert!((predict_ace_y_monotone(0.2, 0.5) - 0.10).abs() < TOL);
        assert_eq!(predict_ace_y_monotone(0.0, 0.7), 0.0);
        assert_eq!(predict_ace_y_monotone(1.0, 0.7), 0.7);
    }

    #[test]
    fn prediction_bounds_examples() {
        let iv = predict_ace_y_bounds(0.2, 0.5, -0.4).unwrap();
        assert!((iv.lo - 0.10).abs() < TOL && (iv.hi - 0.14).abs() < TOL);
        let iv = predict_ace_y_bounds(0.2, 0.5, 0.5).unwrap();
        assert!((iv.lo - 0.10).abs() < TOL && (iv.hi - 0.5).abs() < TOL);
        let iv = predict_ace_y_bounds(1.0, 0.3, -0.1).unwrap();
        assert!((iv.lo - 0.3).abs() < TOL && (iv.hi - 0.3).abs() < TOL);
        assert!(matches!(predict_ace_y_bounds(0.0, 0.3, 0.1), Err(Error::Precondition(_))));
        assert!(predict_ace_y_bounds(-0.1, 0.3, 0.1).is_err());
    }

    #[test]
    fn prediction_bounds_cover_every_feasible_split() {
        let cases = [(0.2, 0.5, -0.4), (0.05, 0.8, -0.9), (0.6, -0.3, 0.7), (0.35, 0.1, 0.1), (0.9, -0.5, -0.2)];
        for (s, a, b) in cases {
            let iv = predict_ace_y_bounds(s, a, b).unwrap();
            let mono = predict_ace_y_monotone(s, a);
            if a + b >= 0.0 {
                assert_eq!(mono, iv.lo);
            } else {
                assert_eq!(mono, iv.hi);
            }
            // direct enumeration over pi_SbarS, with ACE_SS = ACE_SbarSbar = 0
            let hi_t = (1.0 - s) / 2.0;
            let mut seen = (f64::INFINITY, f64::NEG_INFINITY);
            for k in 0..=1000 {
                let t = hi_t * k as f64 / 1000.0;
                let pi_ssbar = s + t;
                let rest = 1.0 - pi_ssbar - t;
                let params = with_aces([rest / 2.0, pi_ssbar, rest / 2.0, t], [0.0, a, 0.0, b]);
                let y = paradox_check(&params, 0).unwrap().ace_y;
                assert!(iv.lo - 1e-12 <= y && y <= iv.hi + 1e-12, "{s} {a} {b} {t}: {y} not in {iv:?}");
                seen = (seen.0.min(y), seen.1.max(y));
            }
            assert!((seen.0 - iv.lo).abs() < 1e-12 && (seen.1 - iv.hi).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_conclusions() {
        assert_eq!(sign_conclusion(Sign::Positive, 0.5, -0.4, Model::Nonmonotone), SignConclusion::Positive);
        assert_eq!(sign_conclusion(Sign::Zero, 0.5, f64::NAN, Model::Monotone), SignConclusion::Zero);
        assert_eq!(sign_conclusion(Sign::Positive, 0.4, -0.6, Model::Nonmonotone), SignConclusion::Indeterminate);
        assert_eq!(sign_conclusion(Sign::Positive, 0.4, f64::NAN, Model::Monotone), SignConclusion::Positive);
        assert_eq!(sign_conclusion(Sign::Positive, -0.1, 0.0, Model::Monotone), SignConclusion::Indeterminate);

        let draws = degenerate(Model::Nonmonotone, [0.0, 0.5, 0.0, -0.4], 10);
        let probs = sign_posterior(&draws, Sign::Positive).unwrap();
        assert!((probs.positive - 1.0).abs() < 1e-12 && probs.indeterminate.abs() < 1e-12);
    }

    #[test]
    fn paradox_examples() {
        let validation = with_aces([0.2, 0.4, 0.2, 0.2], [0.0, 0.4, 0.0, -0.6]);
        let rep = paradox_check(&validation, 0).unwrap();
        assert!((rep.ace_s - 0.2).abs() < TOL && (rep.ace_y - 0.04).abs() < TOL && !rep.paradox);
        let new = with_aces([0.1, 0.4, 0.2, 0.3], [0.0, 0.4, 0.0, -0.6]);
        let rep = paradox_check(&new, 0).unwrap();
        assert!((rep.ace_s - 0.1).abs() < TOL && (rep.ace_y + 0.02).abs() < TOL && rep.paradox);
        assert_eq!((rep.ace_s_sign, rep.ace_y_sign), (Sign::Positive, Sign::Negative));
        let flat = with_aces([0.1, 0.4, 0.2, 0.3], [0.0; 4]);
        let rep = paradox_check(&flat, 0).unwrap();
        assert!(rep.ace_y.abs() < TOL && !rep.paradox);
        assert!(paradox_check(&flat, 1).is_err());
        // agrees with the per-trial summary
        assert!((new.summary().ace_y[0] - rep_of(&new)).abs() < TOL);
    }

    fn rep_of(p: &ParameterSet) -> f64 {
        paradox_check(p, 0).unwrap().ace_y
    }

    #[test]
    fn draws_prediction_summary() {
        let draws = degenerate(Model::Nonmonotone, [0.0, 0.5, 0.0, -0.4], 20);
        let s = predict_from_draws(&draws, 0.2, 0.95).unwrap();
        assert!((s.median.lo - 0.10).abs() < TOL && (s.median.hi - 0.14).abs() < TOL);
        let mono = degenerate(Model::Monotone, [0.0, 0.5, 0.0, 0.0], 20);
        let s = predict_from_draws(&mono, 0.2, 0.95).unwrap();
        assert!((s.median.lo - 0.10).abs() < TOL && s.median.width() < TOL);
    }
}
