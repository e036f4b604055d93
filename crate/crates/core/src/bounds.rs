//! Large-sample bounds on stratum effects when the stratum proportions are
//! only partially identified, plus percentile bootstrap intervals.
//!
//! Within a trial the observed `(z, s)` cells are two-component Bernoulli
//! mixtures. Given the mixing weights, the component means are bounded by
//! [`mixture_bounds`]. Without monotonicity the weights depend on the unknown
//! `t = pi_{SbarS,r}`, which ranges over
//! `R_r = [max(0, P_01 - P_11), min(P_01, P_10)]`; the bounds widen as the
//! stratum shrinks, so the extremes sit where the stratum mass is smallest.

use crate::error::{Error, Result};
use crate::model::{observed_distribution, Model, ObservedCounts, ObservedDistribution, Stratum};
use crate::rng::{sample_multinomial, RngStream};
use crate::stats::quantile;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Stratum masses at or below this are treated as absent.
pub const MASS_TOL: f64 = 1e-12;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const VACUOUS: Interval = Interval { lo: -1.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64, tol: f64) -> bool {
        x >= self.lo - tol && x <= self.hi + tol
    }

    pub fn contains_interval(&self, other: &Interval, tol: f64) -> bool {
        other.lo >= self.lo - tol && other.hi <= self.hi + tol
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Bounds on the component means of `p0 = alpha p1 + (1 - alpha) p2`.
///
/// Returns the interval for `p1` and, when `alpha < 1`, for `p2`.
pub fn mixture_bounds(p0: f64, alpha: f64) -> Result<(Interval, Option<Interval>)> {
    if !(0.0..=1.0).contains(&p0) || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::ParameterDomain(format!("mixture_bounds(p0={p0}, alpha={alpha})")));
    }
    if alpha == 0.0 {
        return Err(Error::UndefinedComponent);
    }
    let side = |a: f64| Interval::new((1.0 - (1.0 - p0) / a).max(0.0), (p0 / a).min(1.0));
    let p2 = (alpha < 1.0).then(|| side(1.0 - alpha));
    Ok((side(alpha), p2))
}

/// Bounds on one stratum effect in one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumBounds {
    pub stratum: Stratum,
    pub lower: f64,
    pub upper: f64,
    /// `false` when the result is the vacuous `[-1, 1]`.
    pub informative: bool,
    /// `false` when no parameter of the model reproduces the distribution
    /// (monotone model with `P_11 < P_01`); the identified set is then empty
    /// and the vacuous interval is reported.
    pub feasible: bool,
}

impl StratumBounds {
    fn vacuous(stratum: Stratum, feasible: bool) -> Self {
        Self { stratum, lower: -1.0, upper: 1.0, informative: false, feasible }
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.lower, self.upper)
    }
}

/// Observed `(z, s)` cells containing stratum `u`: treated cell, control cell.
fn cells(u: Stratum) -> ((usize, usize), (usize, usize)) {
    ((1, u.surrogate(1)), (0, u.surrogate(0)))
}

/// Effect bounds for a stratum of mass `pi` given its treated cell
/// `(P1, w1 = omega_{1,s|1})` and control cell `(P0, w0)`.
fn effect_bounds(pi: f64, (p1, w1): (f64, f64), (p0, w0): (f64, f64)) -> (f64, f64) {
    let upper = (w1 / pi).min(1.0) - (1.0 - (p0 - w0) / pi).max(0.0);
    let lower = (1.0 - (p1 - w1) / pi).max(0.0) - (w0 / pi).min(1.0);
    (lower, upper)
}

struct TrialView {
    p: [[f64; 2]; 2],
    w: [[f64; 2]; 2],
}

impl TrialView {
    fn new(dist: &ObservedDistribution, r: usize) -> Result<Self> {
        dist.check_trial(r)?;
        let mut p = [[0.0; 2]; 2];
        let mut w = [[0.0; 2]; 2];
        for z in 0..2 {
            for s in 0..2 {
                p[z][s] = dist.p(z, s, r);
                w[z][s] = dist.omega(1, s, z, r);
            }
        }
        Ok(Self { p, w })
    }

    fn cell(&self, (z, s): (usize, usize)) -> (f64, f64) {
        (self.p[z][s], self.w[z][s])
    }

    fn stratum(&self, u: Stratum, pi: f64, feasible: bool) -> StratumBounds {
        if !feasible || !(pi > MASS_TOL) {
            return StratumBounds::vacuous(u, feasible);
        }
        let (t, c) = cells(u);
        let (lower, upper) = effect_bounds(pi, self.cell(t), self.cell(c));
        StratumBounds { stratum: u, lower, upper, informative: narrower(lower, upper), feasible }
    }
}

fn narrower(lower: f64, upper: f64) -> bool {
    lower > -1.0 + MASS_TOL || upper < 1.0 - MASS_TOL
}

/// Feasible range `R_r` of `pi_{SbarS,r}`.
pub fn sbars_range(dist: &ObservedDistribution, r: usize) -> Result<Interval> {
    dist.check_trial(r)?;
    let (p11, p01, p10) = (dist.p(1, 1, r), dist.p(0, 1, r), dist.p(1, 0, r));
    Ok(Interval::new((p01 - p11).max(0.0), p01.min(p10)))
}

/// Stratum proportions implied by `pi_{SbarS,r} = t`, in [`Stratum::ALL`] order.
pub fn proportions_at(dist: &ObservedDistribution, r: usize, t: f64) -> [f64; 4] {
    let (p11, p01, p10) = (dist.p(1, 1, r), dist.p(0, 1, r), dist.p(1, 0, r));
    [p01 - t, p11 - p01 + t, p10 - t, t]
}

/// Bounds with monotonicity (`pi_{SbarS,r} = 0`) for SS, SSbar and SbarSbar.
pub fn psace_bounds_monotone(dist: &ObservedDistribution, r: usize) -> Result<Vec<StratumBounds>> {
    let view = TrialView::new(dist, r)?;
    let feasible = view.p[1][1] >= view.p[0][1];
    let pi = proportions_at(dist, r, 0.0);
    Ok(Model::Monotone.strata().iter().map(|&u| view.stratum(u, pi[u.index()], feasible)).collect())
}

/// Bounds without monotonicity for all four strata.
pub fn psace_bounds_nonmonotone(dist: &ObservedDistribution, r: usize) -> Result<Vec<StratumBounds>> {
    let view = TrialView::new(dist, r)?;
    let (p11, p01, p10) = (view.p[1][1], view.p[0][1], view.p[1][0]);
    // smallest mass each stratum attains over R_r
    let least = [p01 - p10, p11 - p01, p10 - p01, p01 - p11].map(|m: f64| m.max(0.0));
    Ok(Stratum::ALL.iter().map(|&u| view.stratum(u, least[u.index()], true)).collect())
}

pub fn psace_bounds(dist: &ObservedDistribution, r: usize, model: Model) -> Result<Vec<StratumBounds>> {
    match model {
        Model::Monotone => psace_bounds_monotone(dist, r),
        Model::Nonmonotone => psace_bounds_nonmonotone(dist, r),
    }
}

/// Bounds for stratum `u` with `pi_{SbarS,r}` fixed at `t`, built from the
/// per-cell mixture bounds.
pub fn conditional_bounds(dist: &ObservedDistribution, r: usize, u: Stratum, t: f64) -> Result<StratumBounds> {
    let view = TrialView::new(dist, r)?;
    let pi = proportions_at(dist, r, t);
    let mass = pi[u.index()];
    if !(mass > MASS_TOL) {
        return Ok(StratumBounds::vacuous(u, true));
    }
    let (tc, cc) = cells(u);
    let component = |(z, s): (usize, usize)| -> Result<Interval> {
        let (pz, wz) = view.cell((z, s));
        let alpha = (mass / pz).min(1.0);
        Ok(mixture_bounds((wz / pz).clamp(0.0, 1.0), alpha)?.0)
    };
    let (d1, d0) = (component(tc)?, component(cc)?);
    let (lower, upper) = (d1.lo - d0.hi, d1.hi - d0.lo);
    Ok(StratumBounds { stratum: u, lower, upper, informative: narrower(lower, upper), feasible: true })
}

/// Bounds and bootstrap interval for one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumInterval {
    pub stratum: Stratum,
    pub lower: f64,
    pub upper: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub informative: bool,
    pub feasible: bool,
}

/// Point bounds and percentile bootstrap intervals for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsResult {
    /// 1-based trial number.
    pub trial: usize,
    pub model: Model,
    pub strata: Vec<StratumInterval>,
    pub replicates: usize,
    pub skipped: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl BoundsResult {
    pub fn get(&self, u: Stratum) -> Option<&StratumInterval> {
        self.strata.iter().find(|s| s.stratum == u)
    }
}

/// Resamples each `(z, r)` arm multinomially over its `(s, y)` cells with the
/// arm size held fixed and reports the 2.5% quantile of the lower bounds and
/// the 97.5% quantile of the upper bounds.
pub fn bootstrap_bounds(counts: &ObservedCounts, r: usize, model: Model, replicates: usize, seed: u64) -> Result<BoundsResult> {
    if replicates == 0 {
        return Err(Error::Precondition("at least one bootstrap replicate is required".into()));
    }
    if r >= counts.n_trials() {
        return Err(Error::TrialOutOfRange { trial: r + 1, n_trials: counts.n_trials() });
    }
    if !counts.is_integral() {
        let bad = counts.trials().iter().flatten().flatten().flatten().find(|v| (*v - v.round()).abs() >= 1e-9);
        return Err(Error::NonIntegralCounts(bad.copied().unwrap_or(f64::NAN)));
    }
    let table = counts.trial(r);
    let single = ObservedCounts::from_trials(vec![*table])?;
    let point = psace_bounds(&observed_distribution(&single)?, 0, model)?;

    let root = RngStream::new(seed).split(r as u64);
    let draws: Vec<Option<Vec<StratumBounds>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = root.split(b as u64);
            let mut cells = *table;
            for z in 0..2 {
                let n = table[z].iter().flatten().sum::<f64>().round() as u64;
                let probs = [table[z][0][0], table[z][0][1], table[z][1][0], table[z][1][1]];
                if n == 0 {
                    return None;
                }
                let k = sample_multinomial(n, &probs, &mut rng).ok()?;
                cells[z] = [[k[0] as f64, k[1] as f64], [k[2] as f64, k[3] as f64]];
            }
            let dist = ObservedDistribution::from_trial_tables(&[cells]).ok()?;
            psace_bounds(&dist, 0, model).ok()
        })
        .collect();
    let kept: Vec<&Vec<StratumBounds>> = draws.iter().flatten().collect();
    let skipped = replicates - kept.len();
    let mut warnings = Vec::new();
    if skipped * 10 > replicates {
        warnings.push(format!("{skipped} of {replicates} bootstrap replicates were skipped"));
    }
    if kept.is_empty() {
        return Err(Error::Numerical("every bootstrap replicate failed".into()));
    }
    let strata = point
        .iter()
        .enumerate()
        .map(|(i, pb)| {
            let lows: Vec<f64> = kept.iter().map(|b| b[i].lower).collect();
            let highs: Vec<f64> = kept.iter().map(|b| b[i].upper).collect();
            StratumInterval {
                stratum: pb.stratum,
                lower: pb.lower,
                upper: pb.upper,
                ci_lower: quantile(&lows, 0.025),
                ci_upper: quantile(&highs, 0.975),
                informative: pb.informative,
                feasible: pb.feasible,
            }
        })
        .collect();
    Ok(BoundsResult { trial: r + 1, model, strata, replicates, skipped, seed, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::{cell_probabilities, TrialCells};
    use rand::Rng;

    /// Independent oracle: scan `t` over `R_r` on a grid, apply the mixture
    /// bounds cell by cell and keep the extremes.
    fn grid_oracle(dist: &ObservedDistribution, r: usize, u: Stratum, monotone: bool) -> (f64, f64) {
        let range = if monotone { Interval::new(0.0, 0.0) } else { sbars_range(dist, r).unwrap() };
        let n = 10_000;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            let t = range.lo + (range.hi - range.lo) * i as f64 / (n - 1) as f64;
            let t = if i == n - 1 { range.hi } else { t };
            let b = conditional_bounds(dist, r, u, t).unwrap();
            lo = lo.min(b.lower);
            hi = hi.max(b.upper);
        }
        (lo, hi)
    }

    fn random_table<R: Rng>(rng: &mut R) -> TrialCells {
        let mut t = [[[0.0; 2]; 2]; 2];
        for z in 0..2 {
            for s in 0..2 {
                for y in 0..2 {
                    // occasionally exact zeros to exercise boundaries
                    t[z][s][y] = if rng.random::<f64>() < 0.05 { 0.0 } else { rng.random::<f64>() };
                }
            }
        }
        t
    }

    #[test]
    fn lemma_examples() {
        let (p1, p2) = mixture_bounds(0.3, 1.0).unwrap();
        assert!((p1.lo - 0.3).abs() < 1e-15 && p1.hi == 0.3 && p2.is_none());
        assert_eq!(mixture_bounds(0.5, 0.5).unwrap().0, Interval::new(0.0, 1.0));
        let (p1, p2) = mixture_bounds(0.9, 0.5).unwrap();
        assert!((p1.lo - 0.8).abs() < 1e-15 && p1.hi == 1.0);
        assert!((p2.unwrap().lo - 0.8).abs() < 1e-15);
        assert!(matches!(mixture_bounds(0.5, 0.0), Err(Error::UndefinedComponent)));
    }

    #[test]
    fn point_identification_when_mixing_stratum_vanishes() {
        // P11 = P01 = 0.5
        let t: TrialCells = [[[0.3, 0.2], [0.1, 0.4]], [[0.3, 0.2], [0.2, 0.3]]];
        let dist = ObservedDistribution::from_trial_tables(&[t]).unwrap();
        let b = psace_bounds_monotone(&dist, 0).unwrap();
        let q11 = 0.6;
        let q01 = 0.8;
        assert!((b[0].lower - (q11 - q01)).abs() < 1e-12 && (b[0].upper - (q11 - q01)).abs() < 1e-12);
        assert!(!b[1].informative);
    }

    #[test]
    fn sbarsbar_lower_with_zero_control_outcome() {
        let t: TrialCells = [[[0.5, 0.0], [0.2, 0.3]], [[0.1, 0.3], [0.2, 0.4]]];
        let dist = ObservedDistribution::from_trial_tables(&[t]).unwrap();
        let b = psace_bounds_monotone(&dist, 0).unwrap();
        let q10 = dist.q(1, 0, 0).unwrap();
        assert!((b[2].lower - q10).abs() < 1e-12);
    }

    #[test]
    fn vacuous_ss_when_p01_below_p10() {
        let t: TrialCells = [[[0.4, 0.3], [0.2, 0.1]], [[0.3, 0.3], [0.2, 0.2]]];
        let dist = ObservedDistribution::from_trial_tables(&[t]).unwrap();
        assert!(dist.p(0, 1, 0) < dist.p(1, 0, 0));
        let b = psace_bounds_nonmonotone(&dist, 0).unwrap();
        assert_eq!((b[0].lower, b[0].upper, b[0].informative), (-1.0, 1.0, false));
    }

    #[test]
    fn closed_form_matches_grid_oracle() {
        let mut rng = RngStream::new(11);
        for _ in 0..200 {
            let dist = ObservedDistribution::from_trial_tables(&[random_table(&mut rng)]).unwrap();
            let nm = psace_bounds_nonmonotone(&dist, 0).unwrap();
            for b in &nm {
                let (lo, hi) = grid_oracle(&dist, 0, b.stratum, false);
                assert!((b.lower - lo).abs() < 1e-9 && (b.upper - hi).abs() < 1e-9, "{b:?} vs ({lo}, {hi})");
            }
            let m = psace_bounds_monotone(&dist, 0).unwrap();
            for (bm, bn) in m.iter().zip(&nm) {
                if !bm.feasible {
                    continue;
                }
                let (lo, hi) = grid_oracle(&dist, 0, bm.stratum, true);
                assert!((bm.lower - lo).abs() < 1e-9 && (bm.upper - hi).abs() < 1e-9);
                assert!(bn.interval().contains_interval(&bm.interval(), 1e-12));
            }
        }
    }

    #[test]
    fn true_effects_lie_inside_population_bounds() {
        let params = three_trial_nonmonotone();
        let dist = ObservedDistribution::from_probabilities(&cell_probabilities(&params).unwrap()).unwrap();
        for r in 0..3 {
            for b in psace_bounds_nonmonotone(&dist, r).unwrap() {
                let ace = params.ace(b.stratum).unwrap();
                assert!(b.interval().contains(ace, 1e-12), "r={r} {b:?} ace={ace}");
                assert!(b.lower >= -1.0 && b.upper <= 1.0 && b.lower <= b.upper);
            }
        }
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let mut counts = ObservedCounts::zeros(1);
        counts.set(0, 1, 1, 1, 20.0);
        counts.set(0, 0, 0, 0, 20.0);
        let res = bootstrap_bounds(&counts, 0, Model::Monotone, 1, 3).unwrap();
        for s in &res.strata {
            assert_eq!((s.ci_lower, s.ci_upper), (s.lower, s.upper));
        }

        let table = three_trial_conditional_table();
        let counts =
            ObservedCounts::from_trials(table.iter().map(|t| t.map(|a| a.map(|b| b.map(|v| (v * 1000.0_f64).round())))).collect())
                .unwrap();
        let a = bootstrap_bounds(&counts, 1, Model::Nonmonotone, 200, 9).unwrap();
        let b = bootstrap_bounds(&counts, 1, Model::Nonmonotone, 200, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trial, 2);
        for s in &a.strata {
            assert!(s.ci_lower <= s.lower + 0.1 && s.ci_upper >= s.upper - 0.1);
        }
    }

    #[test]
    fn bootstrap_interval_tracks_population_bounds() {
        // Bounds divide by the smallest stratum mass (0.1 for SSbar in trial 1),
        // so their bootstrap sd is about 0.06 at 10^4 units per trial and
        // 0.018 at 10^5; a 0.02 tolerance on the 2.5%/97.5% quantiles needs 10^6.
        let table = three_trial_conditional_table();
        let counts =
            ObservedCounts::from_trials(table.iter().map(|t| t.map(|a| a.map(|b| b.map(|v| (v * 1_000_000.0_f64).round())))).collect())
                .unwrap();
        let dist = ObservedDistribution::from_trial_tables(&table).unwrap();
        for r in 0..3 {
            let pop = psace_bounds_nonmonotone(&dist, r).unwrap();
            let res = bootstrap_bounds(&counts, r, Model::Nonmonotone, 2000, 17).unwrap();
            for (p, s) in pop.iter().zip(&res.strata) {
                assert!((s.ci_lower - p.lower).abs() < 0.02 && (s.ci_upper - p.upper).abs() < 0.02, "r={r} {p:?} {s:?}");
            }
        }
    }
}
