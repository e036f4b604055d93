//! Identification: closed-form moment estimators from a pair of trials, the
//! ratio-variation condition, local identifiability through the rank of the
//! probability-map Jacobian, and inversion of the population system.

use crate::em::{run_em, EmConfig};
use crate::error::{Error, Result};
use crate::model::{
    cell_probabilities_unchecked, Model, ObservedCounts, ObservedDistribution, ParameterSet, Stratum, TrialCells,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Relative tolerance for the cross-multiplied ratio conditions.
pub const RATIO_TOL: f64 = 1e-10;
/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-8;
/// Finite-difference step for Jacobians.
pub const FD_STEP: f64 = 1e-6;
/// Inversions with a larger residual norm are flagged as inexact.
pub const EXACT_TOL: f64 = 1e-6;

/// Endpoint probabilities recovered from two trials under monotonicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimates {
    /// `delta[z][u]`; the `SbarS` column is zero.
    pub delta: [[f64; 4]; 2],
    /// Some raw solution fell outside `[0, 1]` and was clamped.
    pub clamped: bool,
}

impl MomentEstimates {
    pub fn delta(&self, z: usize, u: Stratum) -> f64 {
        self.delta[z][u.index()]
    }
}

/// Monotone-model stratum proportions implied by one trial's margins.
pub fn monotone_proportions(dist: &ObservedDistribution, r: usize) -> [f64; 4] {
    let (p11, p01, p10) = (dist.p(1, 1, r), dist.p(0, 1, r), dist.p(1, 0, r));
    [p01, p11 - p01, p10, 0.0]
}

fn degenerate(a: f64, b: f64, c: f64, d: f64) -> bool {
    // a d == b c up to rounding
    let scale = (a * d).abs().max((b * c).abs());
    (a * d - b * c).abs() <= RATIO_TOL * scale.max(f64::MIN_POSITIVE) || scale == 0.0
}

/// Solves the two 2x2 moment systems of a trial pair.
pub fn moment_estimators_two_trials(dist: &ObservedDistribution, r1: usize, r2: usize) -> Result<MomentEstimates> {
    dist.check_trial(r1)?;
    dist.check_trial(r2)?;
    let (a, b) = (monotone_proportions(dist, r1), monotone_proportions(dist, r2));
    let (ss, ssb, sbsb) = (Stratum::SS.index(), Stratum::SSbar.index(), Stratum::SbarSbar.index());
    if degenerate(a[ss], a[ssb], b[ss], b[ssb]) {
        return Err(Error::RatioDegeneracy { r1: r1 + 1, r2: r2 + 1, condition: 'a' });
    }
    if degenerate(a[ssb], a[sbsb], b[ssb], b[sbsb]) {
        return Err(Error::RatioDegeneracy { r1: r1 + 1, r2: r2 + 1, condition: 'b' });
    }
    let solve = |m11: f64, m12: f64, m21: f64, m22: f64, v1: f64, v2: f64| {
        let det = m11 * m22 - m12 * m21;
        ((v1 * m22 - m12 * v2) / det, (m11 * v2 - m21 * v1) / det)
    };
    // treated, S = 1: SS and SSbar
    let (d1ss, d1ssb) = solve(a[ss], a[ssb], b[ss], b[ssb], dist.omega(1, 1, 1, r1), dist.omega(1, 1, 1, r2));
    // control, S = 0: SSbar and SbarSbar
    let (d0ssb, d0sbsb) = solve(a[ssb], a[sbsb], b[ssb], b[sbsb], dist.omega(1, 0, 0, r1), dist.omega(1, 0, 0, r2));
    let single = |z: usize, s: usize| -> Result<f64> { dist.q(z, s, r1).or_else(|_| dist.q(z, s, r2)) };
    let d1sbsb = single(1, 0)?;
    let d0ss = single(0, 1)?;
    let mut delta = [[0.0; 4]; 2];
    delta[1][ss] = d1ss;
    delta[1][ssb] = d1ssb;
    delta[1][sbsb] = d1sbsb;
    delta[0][ss] = d0ss;
    delta[0][ssb] = d0ssb;
    delta[0][sbsb] = d0sbsb;
    let mut clamped = false;
    for v in delta.iter_mut().flatten() {
        if *v < 0.0 || *v > 1.0 {
            clamped = true;
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(MomentEstimates { delta, clamped })
}

/// Ratio conditions for one pair of trials (1-based numbers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCheck {
    pub r1: usize,
    pub r2: usize,
    /// `pi_SS / pi_SSbar` differs between the trials.
    pub a: bool,
    /// `pi_SSbar / pi_SbarSbar` differs between the trials.
    pub b: bool,
}

/// Checks both ratio conditions for every pair by cross-multiplication.
pub fn check_ratio_variation(pi: &[[f64; 4]]) -> Vec<PairCheck> {
    let (ss, ssb, sbsb) = (Stratum::SS.index(), Stratum::SSbar.index(), Stratum::SbarSbar.index());
    let mut out = Vec::new();
    for i in 0..pi.len() {
        for j in i + 1..pi.len() {
            let (x, y) = (pi[i], pi[j]);
            out.push(PairCheck {
                r1: i + 1,
                r2: j + 1,
                a: !degenerate(x[ss], x[ssb], y[ss], y[ssb]),
                b: !degenerate(x[ssb], x[sbsb], y[ssb], y[sbsb]),
            });
        }
    }
    out
}

/// Coordinates used to parametrize the simplices: one trial proportion and
/// one stratum per trial are implied by the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chart {
    pub drop_trial: usize,
    pub drop_stratum: Stratum,
}

impl Chart {
    pub fn default_for(model: Model) -> Self {
        Self { drop_trial: 0, drop_stratum: *model.strata().last().expect("non-empty") }
    }

    fn encode(&self, params: &ParameterSet) -> Vec<f64> {
        let n = params.n_trials();
        let mut theta: Vec<f64> = (0..n).filter(|&r| r != self.drop_trial).map(|r| params.p[r]).collect();
        theta.extend_from_slice(&params.alpha);
        for r in 0..n {
            theta.extend(params.model.strata().iter().filter(|&&u| u != self.drop_stratum).map(|&u| params.pi(u, r)));
        }
        for z in 0..2 {
            theta.extend(params.model.strata().iter().map(|&u| params.delta(z, u)));
        }
        theta
    }

    fn decode(&self, model: Model, n: usize, theta: &[f64]) -> ParameterSet {
        let mut it = theta.iter().copied();
        let mut p = vec![0.0; n];
        for (r, slot) in p.iter_mut().enumerate() {
            if r != self.drop_trial {
                *slot = it.next().expect("length");
            }
        }
        p[self.drop_trial] = 1.0 - p.iter().sum::<f64>();
        let alpha: Vec<f64> = (0..n).map(|_| it.next().expect("length")).collect();
        let mut pi = vec![[0.0; 4]; n];
        for row in pi.iter_mut() {
            for &u in model.strata().iter().filter(|&&u| u != self.drop_stratum) {
                row[u.index()] = it.next().expect("length");
            }
            row[self.drop_stratum.index()] = 1.0 - row.iter().sum::<f64>();
        }
        let mut delta = [[0.0; 4]; 2];
        for row in delta.iter_mut() {
            for &u in model.strata() {
                row[u.index()] = it.next().expect("length");
            }
        }
        ParameterSet { model, p, alpha, pi, delta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub model: Model,
    pub n_trials: usize,
    pub n_params: usize,
    pub n_free_frequencies: usize,
    pub jacobian_rank: usize,
    pub full_rank: bool,
    pub singular_values: Vec<f64>,
    pub ratio_variation: Vec<PairCheck>,
    /// The trial-count condition (`N_R >= 3` without monotonicity, `>= 2`
    /// with it) that full rank requires.
    pub necessary_condition: bool,
    pub notes: Vec<String>,
}

fn numeric_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, theta: &[f64]) -> DMatrix<f64> {
    let m = f(theta).len();
    let mut jac = DMatrix::zeros(m, theta.len());
    let mut x = theta.to_vec();
    for j in 0..theta.len() {
        let orig = x[j];
        x[j] = orig + FD_STEP;
        let up = f(&x);
        x[j] = orig - FD_STEP;
        let down = f(&x);
        x[j] = orig;
        for i in 0..m {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * FD_STEP);
        }
    }
    jac
}

/// Local identifiability at `params` with the default chart.
pub fn local_identifiability(params: &ParameterSet) -> Result<IdentifiabilityReport> {
    local_identifiability_with(params, Chart::default_for(params.model))
}

/// Rank of the Jacobian of the joint cell probabilities with respect to the
/// free parameters in the given chart.
pub fn local_identifiability_with(params: &ParameterSet, chart: Chart) -> Result<IdentifiabilityReport> {
    params.validate()?;
    let model = params.model;
    let n = params.n_trials();
    if chart.drop_trial >= n || !model.contains(chart.drop_stratum) {
        return Err(Error::Config(format!("invalid chart {chart:?} for a {model} model with {n} trials")));
    }
    let theta = chart.encode(params);
    let jac = numeric_jacobian(|t| cell_probabilities_unchecked(&chart.decode(model, n, t)).flatten(), &theta);
    let sv: Vec<f64> = {
        let mut s: Vec<f64> = jac.svd(false, false).singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    };
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * top).count();
    let n_params = model.n_free_params(n);
    let needed = if model.is_monotone() { 2 } else { 3 };
    let necessary_condition = n >= needed;
    let mut notes = Vec::new();
    if !necessary_condition {
        notes.push(format!(
            "the {model} model needs at least {needed} trials for local identifiability; {n} given (parameters {n_params} > free frequencies {})",
            8 * n - 1
        ));
    }
    Ok(IdentifiabilityReport {
        model,
        n_trials: n,
        n_params,
        n_free_frequencies: 8 * n - 1,
        jacobian_rank: rank,
        full_rank: rank == n_params,
        singular_values: sv,
        ratio_variation: check_ratio_variation(&params.pi),
        necessary_condition,
        notes,
    })
}

/// Which parameter blocks are known when inverting the population system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub model: Model,
    pub p: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub pi: Option<Vec<[f64; 4]>>,
}

impl Template {
    pub fn unknown(model: Model) -> Self {
        Self { model, p: None, alpha: None, pi: None }
    }

    /// Design parameters `p`, `alpha`, `pi` taken from `params`.
    pub fn design_of(params: &ParameterSet) -> Self {
        Self { model: params.model, p: Some(params.p.clone()), alpha: Some(params.alpha.clone()), pi: Some(params.pi.clone()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub params: ParameterSet,
    /// Euclidean norm of fitted minus given `P(Z, S, Y | R)`.
    pub residual_norm: f64,
    /// `residual_norm <= 1e-6`; otherwise no parameter value reproduces the
    /// probabilities.
    pub exact: bool,
    pub notes: Vec<String>,
}

fn conditional_residual(params: &ParameterSet, table: &[TrialCells]) -> Vec<f64> {
    let probs = cell_probabilities_unchecked(params);
    let mut res = Vec::with_capacity(8 * table.len());
    for (r, t) in table.iter().enumerate() {
        let c = probs.conditional_on_trial(r);
        for z in 0..2 {
            for s in 0..2 {
                for y in 0..2 {
                    res.push(c[z][s][y] - t[z][s][y]);
                }
            }
        }
    }
    res
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Least squares for `delta` with `p`, `alpha`, `pi` held fixed; the system
/// is linear in `delta`.
fn solve_delta(base: &ParameterSet, table: &[TrialCells]) -> Result<[[f64; 4]; 2]> {
    let model = base.model;
    let strata = model.strata();
    let k = strata.len();
    let rows = 8 * table.len();
    let mut a = DMatrix::zeros(rows, 2 * k);
    let mut b = DVector::zeros(rows);
    let mut i = 0;
    for (r, t) in table.iter().enumerate() {
        for z in 0..2 {
            let arm = if z == 1 { base.alpha[r] } else { 1.0 - base.alpha[r] };
            for s in 0..2 {
                for y in 0..2 {
                    // arm * sum_u pi (y ? delta : 1 - delta)
                    let mut rhs = t[z][s][y];
                    for &u in model.compatible(z, s) {
                        let col = z * k + strata.iter().position(|&v| v == u).expect("stratum in model");
                        let w = arm * base.pi(u, r);
                        if y == 1 {
                            a[(i, col)] += w;
                        } else {
                            a[(i, col)] -= w;
                            rhs -= w;
                        }
                    }
                    b[i] = rhs;
                    i += 1;
                }
            }
        }
    }
    let x = a.svd(true, true).solve(&b, 1e-14).map_err(|e| Error::Numerical(e.to_string()))?;
    let mut delta = [[0.0; 4]; 2];
    for z in 0..2 {
        for (j, &u) in strata.iter().enumerate() {
            delta[z][u.index()] = x[z * k + j];
        }
    }
    Ok(delta)
}

fn check_table(table: &[TrialCells]) -> Result<()> {
    if table.is_empty() {
        return Err(Error::Precondition("no trials".into()));
    }
    for (r, t) in table.iter().enumerate() {
        if t.iter().flatten().flatten().any(|v| !(*v >= 0.0)) {
            return Err(Error::Precondition(format!("block of trial {} has a negative or missing entry", r + 1)));
        }
        let sum: f64 = t.iter().flatten().flatten().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Precondition(format!("block of trial {} does not sum to one (sum {sum})", r + 1)));
        }
    }
    Ok(())
}

/// Recovers the unknown parameters from `P(Z, S, Y | R)`.
///
/// With `pi` known (or recoverable from the margins under monotonicity) the
/// endpoint probabilities follow from linear least squares. Otherwise the
/// system is solved by multi-start EM on expected counts at scale `10^6`
/// followed by a Levenberg-Marquardt polish of the squared residuals.
pub fn invert_population_system(table: &[TrialCells], template: &Template, seed: u64) -> Result<Inversion> {
    check_table(table)?;
    let model = template.model;
    let n = table.len();
    let mut notes = Vec::new();
    let alpha: Vec<f64> = match &template.alpha {
        Some(a) => a.clone(),
        None => table.iter().map(|t| t[1].iter().flatten().sum::<f64>()).collect(),
    };
    let p = template.p.clone().unwrap_or_else(|| {
        notes.push("trial proportions are not identified by conditional probabilities; reported as uniform".into());
        vec![1.0 / n as f64; n]
    });
    let dist = ObservedDistribution::from_trial_tables(table)?;
    let pi: Option<Vec<[f64; 4]>> = match (&template.pi, model) {
        (Some(pi), _) => Some(pi.clone()),
        (None, Model::Monotone) => Some((0..n).map(|r| monotone_proportions(&dist, r).map(|v| v.max(0.0))).collect()),
        (None, Model::Nonmonotone) => None,
    };
    let mut params = match pi {
        Some(pi) => {
            let mut base = ParameterSet { model, p, alpha, pi, delta: [[0.5; 4]; 2] };
            base.validate_and_normalize()?;
            base.delta = solve_delta(&base, table)?;
            if base.delta.iter().flatten().any(|d| !(0.0..=1.0).contains(d)) {
                notes.push("least-squares endpoint probabilities left [0, 1] and were clamped".into());
                base.delta.iter_mut().flatten().for_each(|d| *d = d.clamp(0.0, 1.0));
            }
            base
        }
        None => {
            let counts = ObservedCounts::from_trials(table.iter().map(|t| t.map(|a| a.map(|b| b.map(|v| v * 1e6)))).collect())?;
            let em = run_em(&counts, model, &EmConfig { tolerance: 1e-9, max_iter: 50_000, n_starts: 20, seed })?;
            let mut fit = polish(em.params, table, &alpha);
            fit.p = p;
            fit
        }
    };
    if model.is_monotone() {
        params.delta[0][3] = 0.0;
        params.delta[1][3] = 0.0;
    }
    params.validate_and_normalize()?;
    let residual_norm = norm(&conditional_residual(&params, table));
    Ok(Inversion { exact: residual_norm <= EXACT_TOL, params, residual_norm, notes })
}

/// Levenberg-Marquardt on `(pi, delta)` with `alpha` fixed; steps leaving the
/// parameter space are rejected.
fn polish(start: ParameterSet, table: &[TrialCells], alpha: &[f64]) -> ParameterSet {
    let model = start.model;
    let n = start.n_trials();
    let chart = Chart::default_for(model);
    let mut params = start;
    params.alpha = alpha.to_vec();
    // theta layout from the chart; p and alpha columns stay fixed
    let full = chart.encode(&params);
    let fixed = (n - 1) + n;
    let decode = |free: &[f64]| {
        let mut t = full[..fixed].to_vec();
        t.extend_from_slice(free);
        chart.decode(model, n, &t)
    };
    let inside = |p: &ParameterSet| {
        p.pi.iter().flatten().all(|v| *v >= 0.0) && p.delta.iter().flatten().all(|v| (0.0..=1.0).contains(v))
    };
    let mut x = full[fixed..].to_vec();
    let mut res = conditional_residual(&params, table);
    let mut cost = norm(&res);
    let mut lambda = 1e-3;
    for _ in 0..200 {
        if cost < 1e-15 {
            break;
        }
        let jac = numeric_jacobian(|t| conditional_residual(&decode(t), table), &x);
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * DVector::from_vec(res.clone());
        let mut improved = false;
        for _ in 0..20 {
            let mut lhs = jtj.clone();
            for i in 0..lhs.nrows() {
                lhs[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = lhs.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let p = decode(&cand);
            if inside(&p) {
                let r = conditional_residual(&p, table);
                let c = norm(&r);
                if c < cost {
                    x = cand;
                    res = r;
                    cost = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = true;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    decode(&x)
}
