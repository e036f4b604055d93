//! Data model: principal strata, observed and complete-data count tables,
//! parameter sets, and the forward map from parameters to observed-cell
//! probabilities together with the observed- and complete-data likelihoods.
//!
//! Tables are indexed `[r][z][s][y]` (observed) or `[r][z][u][y]` (complete)
//! with 0-based trials internally; anything user-facing reports 1-based
//! trial numbers.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Simplex tolerance used when validating probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Deviations from the simplex below this are renormalized silently.
pub const RENORMALIZE_TOL: f64 = 1e-12;

/// Principal stratum `U = (S(1), S(0))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    /// `(1, 1)`: surrogate positive under both arms.
    SS,
    /// `(1, 0)`: surrogate switched on by treatment.
    SSbar,
    /// `(0, 0)`: surrogate negative under both arms.
    SbarSbar,
    /// `(0, 1)`: surrogate switched off by treatment (excluded by monotonicity).
    SbarS,
}

impl Stratum {
    pub const ALL: [Stratum; 4] = [Stratum::SS, Stratum::SSbar, Stratum::SbarSbar, Stratum::SbarS];

    pub fn index(self) -> usize {
        match self {
            Stratum::SS => 0,
            Stratum::SSbar => 1,
            Stratum::SbarSbar => 2,
            Stratum::SbarS => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Stratum> {
        Self::ALL.get(i).copied()
    }

    /// Potential surrogate value `S(z)` for members of this stratum.
    pub fn surrogate(self, z: usize) -> usize {
        let (s1, s0) = match self {
            Stratum::SS => (1, 1),
            Stratum::SSbar => (1, 0),
            Stratum::SbarSbar => (0, 0),
            Stratum::SbarS => (0, 1),
        };
        if z == 1 {
            s1
        } else {
            s0
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stratum::SS => "SS",
            Stratum::SSbar => "SSbar",
            Stratum::SbarSbar => "SbarSbar",
            Stratum::SbarS => "SbarS",
        }
    }

    pub fn parse(name: &str) -> Option<Stratum> {
        Self::ALL.into_iter().find(|u| u.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

/// Structural model: with or without the monotonicity assumption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Monotone,
    Nonmonotone,
}

impl Model {
    pub fn from_monotonicity(monotone: bool) -> Model {
        if monotone {
            Model::Monotone
        } else {
            Model::Nonmonotone
        }
    }

    pub fn is_monotone(self) -> bool {
        self == Model::Monotone
    }

    pub fn strata(self) -> &'static [Stratum] {
        match self {
            Model::Monotone => &Stratum::ALL[..3],
            Model::Nonmonotone => &Stratum::ALL,
        }
    }

    pub fn n_strata(self) -> usize {
        self.strata().len()
    }

    pub fn contains(self, u: Stratum) -> bool {
        !(self.is_monotone() && u == Stratum::SbarS)
    }

    /// `O(z, s)`: strata compatible with observing `Z = z`, `S = s`.
    pub fn compatible(self, z: usize, s: usize) -> &'static [Stratum] {
        use Stratum::*;
        const O11: [Stratum; 2] = [SS, SSbar];
        const O10: [Stratum; 2] = [SbarSbar, SbarS];
        const O01: [Stratum; 2] = [SS, SbarS];
        const O00: [Stratum; 2] = [SSbar, SbarSbar];
        match (z, s, self) {
            (1, 1, _) => &O11,
            (1, 0, Model::Nonmonotone) => &O10,
            (1, 0, Model::Monotone) => &O10[..1],
            (0, 1, Model::Nonmonotone) => &O01,
            (0, 1, Model::Monotone) => &O01[..1],
            (0, 0, _) => &O00,
            _ => &[],
        }
    }

    /// Number of free parameters `(p, alpha, pi, delta)` for `n_trials` trials.
    pub fn n_free_params(self, n_trials: usize) -> usize {
        let k = self.n_strata();
        (n_trials - 1) + n_trials + (k - 1) * n_trials + 2 * k
    }

    /// Degrees of freedom of the likelihood-ratio test against the saturated
    /// model: `4 N_R - 6` (monotone) or `3 N_R - 8` (nonmonotone).
    pub fn gof_df(self, n_trials: usize) -> i64 {
        (8 * n_trials as i64 - 1) - self.n_free_params(n_trials) as i64
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Monotone => "monotone",
            Model::Nonmonotone => "nonmonotone",
        })
    }
}

/// One trial's `[z][s][y]` block.
pub type TrialCells = [[[f64; 2]; 2]; 2];

#[inline]
pub(crate) fn bernoulli_mass(prob: f64, y: usize) -> f64 {
    if y == 1 {
        prob
    } else {
        1.0 - prob
    }
}

#[inline]
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

fn check_trial(trial: usize, n_trials: usize) -> Result<()> {
    if trial >= n_trials {
        return Err(Error::TrialOutOfRange { trial: trial + 1, n_trials });
    }
    Ok(())
}

/// Observed contingency table `N_{zsyr}`.
///
/// Entries are stored as `f64` so that expected (population-scale) counts can
/// be fed to the EM routines; samplers that need whole numbers check
/// [`ObservedCounts::is_integral`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedCounts {
    cells: Vec<TrialCells>,
}

impl ObservedCounts {
    pub fn zeros(n_trials: usize) -> Self {
        Self { cells: vec![[[[0.0; 2]; 2]; 2]; n_trials] }
    }

    /// Builds a table from per-trial `[z][s][y]` blocks.
    pub fn from_trials(cells: Vec<TrialCells>) -> Result<Self> {
        let counts = Self { cells };
        counts.validate()?;
        Ok(counts)
    }

    /// Expected counts `total * P(z, s, y, r)`.
    pub fn expected(probs: &CellProbabilities, total: f64) -> Self {
        let cells = probs
            .cells
            .iter()
            .map(|t| t.map(|zs| zs.map(|sy| sy.map(|v| v * total))))
            .collect();
        Self { cells }
    }

    /// Expected counts with `per_trial` units in every trial:
    /// `per_trial * P(z, s, y | r)`.
    pub fn expected_per_trial(probs: &CellProbabilities, per_trial: f64) -> Self {
        let cells = (0..probs.n_trials())
            .map(|r| probs.conditional_on_trial(r).map(|zs| zs.map(|sy| sy.map(|v| v * per_trial))))
            .collect();
        Self { cells }
    }

    pub fn n_trials(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, r: usize, z: usize, s: usize, y: usize) -> f64 {
        self.cells[r][z][s][y]
    }

    pub fn set(&mut self, r: usize, z: usize, s: usize, y: usize, value: f64) {
        self.cells[r][z][s][y] = value;
    }

    pub fn add(&mut self, r: usize, z: usize, s: usize, y: usize, value: f64) {
        self.cells[r][z][s][y] += value;
    }

    pub fn trial(&self, r: usize) -> &TrialCells {
        &self.cells[r]
    }

    pub fn trials(&self) -> &[TrialCells] {
        &self.cells
    }

    pub fn total(&self) -> f64 {
        (0..self.n_trials()).map(|r| self.trial_total(r)).sum()
    }

    pub fn trial_total(&self, r: usize) -> f64 {
        self.arm_total(0, r) + self.arm_total(1, r)
    }

    pub fn arm_total(&self, z: usize, r: usize) -> f64 {
        self.cells[r][z].iter().flatten().sum()
    }

    pub fn is_integral(&self) -> bool {
        self.cells.iter().flatten().flatten().flatten().all(|v| (v - v.round()).abs() < 1e-9)
    }

    /// Checks that the table is usable; returns warnings for empty arms.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.cells.is_empty() {
            return Err(Error::Precondition("at least one trial is required".into()));
        }
        for v in self.cells.iter().flatten().flatten().flatten() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::Precondition(format!("invalid count {v}")));
            }
        }
        if self.total() <= 0.0 {
            return Err(Error::Precondition("total count must be positive".into()));
        }
        let mut warnings = Vec::new();
        for r in 0..self.n_trials() {
            for z in 0..2 {
                if self.arm_total(z, r) == 0.0 {
                    warnings.push(format!("trial {} has no observations in arm z={z}", r + 1));
                }
            }
        }
        Ok(warnings)
    }

    /// Returns a table with trials reordered so that new trial `i` is old
    /// trial `order[i]`.
    pub fn permute_trials(&self, order: &[usize]) -> Self {
        Self { cells: order.iter().map(|&r| self.cells[r]).collect() }
    }

    /// Keeps only the listed trials, in the given order.
    pub fn select_trials(&self, trials: &[usize]) -> Self {
        self.permute_trials(trials)
    }
}

/// Joint cell probabilities `P(Z=z, S=s, Y=y, R=r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellProbabilities {
    cells: Vec<TrialCells>,
}

impl CellProbabilities {
    pub fn from_trials(cells: Vec<TrialCells>) -> Self {
        Self { cells }
    }

    pub fn n_trials(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, r: usize, z: usize, s: usize, y: usize) -> f64 {
        self.cells[r][z][s][y]
    }

    pub fn trials(&self) -> &[TrialCells] {
        &self.cells
    }

    pub fn sum(&self) -> f64 {
        self.cells.iter().flatten().flatten().flatten().sum()
    }

    pub fn trial_mass(&self, r: usize) -> f64 {
        self.cells[r].iter().flatten().flatten().sum()
    }

    /// `P(Z=z, S=s, Y=y | R=r)`.
    pub fn conditional_on_trial(&self, r: usize) -> TrialCells {
        let m = self.trial_mass(r);
        self.cells[r].map(|zs| zs.map(|sy| sy.map(|v| v / m)))
    }

    /// Flattened in `(r, z, s, y)` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.cells.iter().flatten().flatten().flatten().copied().collect()
    }
}

/// Empirical or population conditional distribution of `(S, Y)` given
/// `(Z, R)`: `P_{zsr}`, `omega_{ys|zr}`, and `Q_{zsr}` on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedDistribution {
    /// `p[r][z][s] = P(S=s | Z=z, R=r)`.
    p: Vec<[[f64; 2]; 2]>,
    /// `omega[r][z][s][y] = P(Y=y, S=s | Z=z, R=r)`.
    omega: Vec<TrialCells>,
}

impl ObservedDistribution {
    /// Builds from per-trial `P(Z, S, Y | R)` (or any non-negative weights
    /// per trial); each arm must carry positive mass.
    pub fn from_trial_tables(tables: &[TrialCells]) -> Result<Self> {
        let mut p = Vec::with_capacity(tables.len());
        let mut omega = Vec::with_capacity(tables.len());
        for (r, t) in tables.iter().enumerate() {
            let mut pr = [[0.0; 2]; 2];
            let mut wr = [[[0.0; 2]; 2]; 2];
            for z in 0..2 {
                let arm: f64 = t[z].iter().flatten().sum();
                if !(arm > 0.0) {
                    return Err(Error::EmptyArm { z, trial: r + 1 });
                }
                for s in 0..2 {
                    for y in 0..2 {
                        wr[z][s][y] = t[z][s][y] / arm;
                    }
                    pr[z][s] = wr[z][s][0] + wr[z][s][1];
                }
            }
            p.push(pr);
            omega.push(wr);
        }
        Ok(Self { p, omega })
    }

    /// Population distribution implied by a cell-probability table.
    pub fn from_probabilities(probs: &CellProbabilities) -> Result<Self> {
        Self::from_trial_tables(probs.trials())
    }

    pub fn n_trials(&self) -> usize {
        self.p.len()
    }

    /// `P(S=s | Z=z, R=r)`.
    pub fn p(&self, z: usize, s: usize, r: usize) -> f64 {
        self.p[r][z][s]
    }

    /// `P(Y=y, S=s | Z=z, R=r)`.
    pub fn omega(&self, y: usize, s: usize, z: usize, r: usize) -> f64 {
        self.omega[r][z][s][y]
    }

    /// `P(Y=1 | Z=z, S=s, R=r)`; errors when the `(z, s)` cell is empty.
    pub fn q(&self, z: usize, s: usize, r: usize) -> Result<f64> {
        let p = self.p[r][z][s];
        if !(p > 0.0) {
            return Err(Error::EmptyCell { z, s, trial: r + 1 });
        }
        Ok((self.omega[r][z][s][1] / p).clamp(0.0, 1.0))
    }

    pub fn check_trial(&self, r: usize) -> Result<()> {
        check_trial(r, self.n_trials())
    }
}

/// Empirical conditional frequencies of a count table.
pub fn observed_distribution(counts: &ObservedCounts) -> Result<ObservedDistribution> {
    ObservedDistribution::from_trial_tables(counts.trials())
}

/// Model parameters `(p, alpha, pi, delta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub model: Model,
    /// Trial proportions `p_r`.
    pub p: Vec<f64>,
    /// Treatment probabilities `alpha_r`.
    pub alpha: Vec<f64>,
    /// Stratum proportions `pi[r][u]`; the `SbarS` slot is zero under monotonicity.
    pub pi: Vec<[f64; 4]>,
    /// Endpoint probabilities `delta[z][u]`; the `SbarS` column is unused
    /// under monotonicity.
    pub delta: [[f64; 4]; 2],
}

fn normalize_simplex(v: &mut [f64], what: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|x| !x.is_finite() || *x < -RENORMALIZE_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::ParameterDomain(format!("{what} is not a probability vector: {v:?}")));
    }
    if (sum - 1.0).abs() <= RENORMALIZE_TOL {
        for x in v.iter_mut() {
            *x = x.max(0.0) / sum;
        }
    }
    Ok(())
}

fn check_unit(x: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::ParameterDomain(format!("{what} = {x} is outside [0, 1]")));
    }
    Ok(())
}

impl ParameterSet {
    /// Validating constructor; `pi` rows may have 3 (monotone) or 4 entries.
    pub fn new(model: Model, p: Vec<f64>, alpha: Vec<f64>, pi: Vec<Vec<f64>>, delta: [[f64; 4]; 2]) -> Result<Self> {
        let pi = pi
            .into_iter()
            .map(|row| {
                let mut out = [0.0; 4];
                if row.len() != model.n_strata() && row.len() != 4 {
                    return Err(Error::ParameterDomain(format!(
                        "stratum vector has {} entries; {model} model needs {}",
                        row.len(),
                        model.n_strata()
                    )));
                }
                out[..row.len()].copy_from_slice(&row);
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut params = Self { model, p, alpha, pi, delta };
        params.validate_and_normalize()?;
        Ok(params)
    }

    pub fn n_trials(&self) -> usize {
        self.p.len()
    }

    pub fn delta(&self, z: usize, u: Stratum) -> f64 {
        self.delta[z][u.index()]
    }

    pub fn pi(&self, u: Stratum, r: usize) -> f64 {
        self.pi[r][u.index()]
    }

    /// Validates the invariants, renormalizing simplices that are off by at
    /// most [`RENORMALIZE_TOL`].
    pub fn validate_and_normalize(&mut self) -> Result<()> {
        let n = self.p.len();
        if n == 0 || self.alpha.len() != n || self.pi.len() != n {
            return Err(Error::ParameterDomain(format!(
                "inconsistent trial dimensions: p={}, alpha={}, pi={}",
                n,
                self.alpha.len(),
                self.pi.len()
            )));
        }
        normalize_simplex(&mut self.p, "p")?;
        for (r, a) in self.alpha.iter().enumerate() {
            check_unit(*a, &format!("alpha_{}", r + 1))?;
        }
        for (r, row) in self.pi.iter_mut().enumerate() {
            if self.model.is_monotone() {
                if row[3].abs() > RENORMALIZE_TOL {
                    return Err(Error::ParameterDomain(format!(
                        "pi_SbarS,{} = {} must be zero under monotonicity",
                        r + 1,
                        row[3]
                    )));
                }
                row[3] = 0.0;
            }
            normalize_simplex(&mut row[..], &format!("pi_{}", r + 1))?;
        }
        for z in 0..2 {
            for &u in self.model.strata() {
                check_unit(self.delta[z][u.index()], &format!("delta_{z},{u}"))?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.clone().validate_and_normalize()
    }

    /// Uniform proportions and one-half endpoint probabilities.
    pub fn barycenter(model: Model, n_trials: usize) -> Self {
        let k = model.n_strata() as f64;
        let mut row = [0.0; 4];
        for &u in model.strata() {
            row[u.index()] = 1.0 / k;
        }
        let mut delta = [[0.5; 4]; 2];
        if model.is_monotone() {
            delta[0][3] = 0.0;
            delta[1][3] = 0.0;
        }
        Self {
            model,
            p: vec![1.0 / n_trials as f64; n_trials],
            alpha: vec![0.5; n_trials],
            pi: vec![row; n_trials],
            delta,
        }
    }

    /// `ACE_u = delta_{1u} - delta_{0u}`; `None` for strata absent from the model.
    pub fn ace(&self, u: Stratum) -> Option<f64> {
        self.model.contains(u).then(|| self.delta(1, u) - self.delta(0, u))
    }

    pub fn summary(&self) -> PsaceSummary {
        let mut ace = [0.0; 4];
        for &u in self.model.strata() {
            ace[u.index()] = self.delta(1, u) - self.delta(0, u);
        }
        let ace_s = self.pi.iter().map(|row| row[Stratum::SSbar.index()] - row[Stratum::SbarS.index()]).collect();
        let ace_y = self
            .pi
            .iter()
            .map(|row| self.model.strata().iter().map(|u| ace[u.index()] * row[u.index()]).sum())
            .collect();
        PsaceSummary { model: self.model, ace, ace_s, ace_y }
    }

    /// Reorders trials so that new trial `i` is old trial `order[i]`.
    pub fn permute_trials(&self, order: &[usize]) -> Self {
        Self {
            model: self.model,
            p: order.iter().map(|&r| self.p[r]).collect(),
            alpha: order.iter().map(|&r| self.alpha[r]).collect(),
            pi: order.iter().map(|&r| self.pi[r]).collect(),
            delta: self.delta,
        }
    }
}

/// Derived causal contrasts of a parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsaceSummary {
    pub model: Model,
    ace: [f64; 4],
    /// `ACE^S_r = pi_{SSbar,r} - pi_{SbarS,r}`.
    pub ace_s: Vec<f64>,
    /// `ACE^Y_r = sum_u ACE_u pi_{ur}`.
    pub ace_y: Vec<f64>,
}

impl PsaceSummary {
    pub fn ace(&self, u: Stratum) -> Option<f64> {
        self.model.contains(u).then(|| self.ace[u.index()])
    }
}

/// Forward map without validation (used by finite-difference Jacobians,
/// which step slightly outside the parameter domain).
pub(crate) fn cell_probabilities_unchecked(params: &ParameterSet) -> CellProbabilities {
    let cells = (0..params.n_trials())
        .map(|r| {
            let mut t = [[[0.0; 2]; 2]; 2];
            for z in 0..2 {
                let arm = params.p[r] * if z == 1 { params.alpha[r] } else { 1.0 - params.alpha[r] };
                for s in 0..2 {
                    for y in 0..2 {
                        let mix: f64 = params
                            .model
                            .compatible(z, s)
                            .iter()
                            .map(|&u| params.pi(u, r) * bernoulli_mass(params.delta(z, u), y))
                            .sum();
                        t[z][s][y] = arm * mix;
                    }
                }
            }
            t
        })
        .collect();
    CellProbabilities { cells }
}

/// `P(Z=z, S=s, Y=y, R=r) = p_r a_r(z) sum_{u in O(z,s)} pi_{ur} delta_{zu}^y (1-delta_{zu})^{1-y}`.
pub fn cell_probabilities(params: &ParameterSet) -> Result<CellProbabilities> {
    params.validate()?;
    Ok(cell_probabilities_unchecked(params))
}

pub(crate) fn log_likelihood_with(counts: &ObservedCounts, probs: &CellProbabilities) -> f64 {
    let mut ll = 0.0;
    for (tc, tp) in counts.trials().iter().zip(probs.trials()) {
        for z in 0..2 {
            for s in 0..2 {
                for y in 0..2 {
                    let n = tc[z][s][y];
                    if n > 0.0 {
                        let p = tp[z][s][y];
                        if p <= 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        ll += n * p.ln();
                    }
                }
            }
        }
    }
    ll
}

/// `sum N_{zsyr} log P(z, s, y, r)` with `0 log 0 = 0`; `-inf` when a positive
/// count falls on a zero-probability cell.
pub fn observed_log_likelihood(counts: &ObservedCounts, params: &ParameterSet) -> Result<f64> {
    if counts.n_trials() != params.n_trials() {
        return Err(Error::Precondition(format!(
            "counts have {} trials but parameters have {}",
            counts.n_trials(),
            params.n_trials()
        )));
    }
    let probs = cell_probabilities(params)?;
    Ok(log_likelihood_with(counts, &probs))
}

/// Complete-data table `n_{zuyr}`, stored `[r][z][u][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteCounts {
    cells: Vec<[[[f64; 2]; 4]; 2]>,
}

impl CompleteCounts {
    pub fn zeros(n_trials: usize) -> Self {
        Self { cells: vec![[[[0.0; 2]; 4]; 2]; n_trials] }
    }

    pub fn n_trials(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, r: usize, z: usize, u: Stratum, y: usize) -> f64 {
        self.cells[r][z][u.index()][y]
    }

    pub fn set(&mut self, r: usize, z: usize, u: Stratum, y: usize, v: f64) {
        self.cells[r][z][u.index()][y] = v;
    }

    pub fn add(&mut self, r: usize, z: usize, u: Stratum, y: usize, v: f64) {
        self.cells[r][z][u.index()][y] += v;
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().flatten().flatten().flatten().sum()
    }

    /// `n_{+++r}`.
    pub fn trial_total(&self, r: usize) -> f64 {
        self.cells[r].iter().flatten().flatten().sum()
    }

    /// `n_{z++r}`.
    pub fn arm_total(&self, z: usize, r: usize) -> f64 {
        self.cells[r][z].iter().flatten().sum()
    }

    /// `n_{+u+r}`.
    pub fn stratum_total(&self, u: Stratum, r: usize) -> f64 {
        (0..2).map(|z| self.cells[r][z][u.index()][0] + self.cells[r][z][u.index()][1]).sum()
    }

    /// `n_{zuy+}`.
    pub fn outcome_total(&self, z: usize, u: Stratum, y: usize) -> f64 {
        self.cells.iter().map(|t| t[z][u.index()][y]).sum()
    }

    /// `n_{zuyr}` summed into observed cells `N_{z, S_u(z), y, r}`.
    pub fn collapse(&self) -> ObservedCounts {
        let mut out = ObservedCounts::zeros(self.n_trials());
        for r in 0..self.n_trials() {
            for z in 0..2 {
                for u in Stratum::ALL {
                    for y in 0..2 {
                        out.add(r, z, u.surrogate(z), y, self.get(r, z, u, y));
                    }
                }
            }
        }
        out
    }
}

/// Complete-data log-likelihood up to the multinomial coefficient.
pub fn complete_log_likelihood(complete: &CompleteCounts, params: &ParameterSet) -> Result<f64> {
    params.validate()?;
    if complete.n_trials() != params.n_trials() {
        return Err(Error::Precondition("trial dimension mismatch".into()));
    }
    let model = params.model;
    let mut ll = 0.0;
    for r in 0..complete.n_trials() {
        for z in 0..2 {
            for y in 0..2 {
                let n = complete.get(r, z, Stratum::SbarS, y);
                if !model.contains(Stratum::SbarS) && n > 0.0 {
                    return Err(Error::Support {
                        z,
                        s: Stratum::SbarS.surrogate(z),
                        stratum: Stratum::SbarS,
                        trial: r + 1,
                    });
                }
            }
        }
        ll += xlogy(complete.trial_total(r), params.p[r]);
        ll += xlogy(complete.arm_total(1, r), params.alpha[r]);
        ll += xlogy(complete.arm_total(0, r), 1.0 - params.alpha[r]);
        for &u in model.strata() {
            ll += xlogy(complete.stratum_total(u, r), params.pi(u, r));
        }
    }
    for z in 0..2 {
        for &u in model.strata() {
            ll += xlogy(complete.outcome_total(z, u, 1), params.delta(z, u));
            ll += xlogy(complete.outcome_total(z, u, 0), 1.0 - params.delta(z, u));
        }
    }
    Ok(ll)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Three-trial nonmonotone parameter set used throughout the worked
    /// population example (equal trial sizes).
    pub fn three_trial_nonmonotone() -> ParameterSet {
        ParameterSet::new(
            Model::Nonmonotone,
            vec![1.0 / 3.0; 3],
            vec![0.4, 0.5, 0.6],
            vec![
                vec![0.6, 0.2, 0.1, 0.1],
                vec![0.1, 0.6, 0.2, 0.1],
                vec![0.1, 0.1, 0.6, 0.2],
            ],
            [[0.5, 0.3, 0.1, 0.2], [0.8, 0.7, 0.6, 0.5]],
        )
        .unwrap()
    }

    /// Published `P(Z, S, Y | R)` table for the same example, `[r][z][s][y]`.
    pub fn three_trial_conditional_table() -> Vec<TrialCells> {
        // rows in source order: (S=1,Y=1), (S=1,Y=0), (S=0,Y=1), (S=0,Y=0)
        let cols = [
            ([0.248, 0.072, 0.044, 0.036], [0.192, 0.228, 0.042, 0.138]),
            ([0.250, 0.100, 0.085, 0.065], [0.035, 0.065, 0.100, 0.300]),
            ([0.090, 0.030, 0.276, 0.204], [0.036, 0.084, 0.036, 0.244]),
        ];
        cols.iter()
            .map(|(z1, z0)| {
                let block = |v: &[f64; 4]| [[v[3], v[2]], [v[1], v[0]]];
                [block(z0), block(z1)]
            })
            .collect()
    }
}
