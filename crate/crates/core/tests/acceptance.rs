//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `PSACE_ACCEPTANCE=1,2,8` runs a subset. The PSRF and MIS checks of
//! criterion 10 reuse the runs of criteria 4 and 9.

use psace::bounds::{psace_bounds, Interval};
use psace::em::EmConfig;
use psace::gibbs::{run_gibbs, GibbsConfig};
use psace::identification::{invert_population_system, moment_estimators_two_trials, Template};
use psace::model::{Model, ObservedCounts, ObservedDistribution, ParameterSet, Stratum, TrialCells};
use psace::model_checking::{lrt, posterior_predictive_p, Discrepancy};
use psace::rng::RngStream;
use psace::sensitivity::run_hierarchical_gibbs;
use psace::simulation::{builtin_scenario, evaluate, generate_dataset, EvalConfig, EvalReport};
use psace::stats::{ks_p_value, ks_statistic, median, quantile};
use psace::surrogate::{paradox_check, predict_ace_y_bounds};
use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use std::time::Instant;

const SS: usize = 0;
const SSBAR: usize = 1;
const SBARSBAR: usize = 2;
const STRATA: [Stratum; 4] = [Stratum::SS, Stratum::SSbar, Stratum::SbarSbar, Stratum::SbarS];
/// `S(z)` for each stratum, in the order above.
const S_OF: [[usize; 4]; 2] = [[1, 0, 0, 1], [1, 1, 0, 0]];
const DELTA: [[f64; 4]; 2] = [[0.5, 0.3, 0.1, 0.2], [0.8, 0.7, 0.6, 0.5]];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// `P(Z, S, Y | R = r)` computed directly from the parameters.
fn forward(alpha: f64, pi: [f64; 4], delta: [[f64; 4]; 2]) -> TrialCells {
    let mut t = [[[0.0; 2]; 2]; 2];
    for z in 0..2 {
        let pz = if z == 1 { alpha } else { 1.0 - alpha };
        for u in 0..4 {
            let s = S_OF[z][u];
            t[z][s][1] += pz * pi[u] * delta[z][u];
            t[z][s][0] += pz * pi[u] * (1.0 - delta[z][u]);
        }
    }
    t
}

fn criterion_1() -> Verdict {
    // P(Z, S, Y | R) as printed, columns (S=1,Y=1), (S=1,Y=0), (S=0,Y=1), (S=0,Y=0)
    let printed = [
        ([0.248, 0.072, 0.044, 0.036], [0.192, 0.228, 0.042, 0.138]),
        ([0.250, 0.100, 0.085, 0.065], [0.035, 0.065, 0.100, 0.300]),
        ([0.090, 0.030, 0.276, 0.204], [0.036, 0.084, 0.036, 0.244]),
    ];
    let table: Vec<TrialCells> = printed
        .iter()
        .map(|(z1, z0)| {
            let block = |v: &[f64; 4]| [[v[3], v[2]], [v[1], v[0]]];
            [block(z0), block(z1)]
        })
        .collect();
    let template = Template {
        model: Model::Nonmonotone,
        p: Some(vec![1.0 / 3.0; 3]),
        alpha: Some(vec![0.4, 0.5, 0.6]),
        pi: Some(vec![[0.6, 0.2, 0.1, 0.1], [0.1, 0.6, 0.2, 0.1], [0.1, 0.1, 0.6, 0.2]]),
    };
    let start = Instant::now();
    let inv = match invert_population_system(&table, &template, 1) {
        Ok(inv) => inv,
        Err(e) => return verdict(false, format!("inversion failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let want = [0.8, 0.5, 0.7, 0.3, 0.6, 0.1, 0.5, 0.2];
    let got: Vec<f64> = STRATA.iter().flat_map(|&u| [inv.params.delta(1, u), inv.params.delta(0, u)]).collect();
    let err = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    verdict(
        inv.residual_norm < 1e-8 && err < 1e-6 && secs < 10.0,
        format!("residual {:.1e}, max |delta error| {err:.1e}, {secs:.2} s", inv.residual_norm),
    )
}

fn criterion_2() -> Verdict {
    let alpha = [0.4, 0.6];
    let pi = [[0.7, 0.2, 0.1, 0.0], [0.1, 0.2, 0.7, 0.0]];
    let start = Instant::now();
    let table: Vec<TrialCells> = (0..2).map(|r| forward(alpha[r], pi[r], DELTA)).collect();
    let est = ObservedDistribution::from_trial_tables(&table).and_then(|d| moment_estimators_two_trials(&d, 0, 1));
    let secs = start.elapsed().as_secs_f64();
    let est = match est {
        Ok(e) => e,
        Err(e) => return verdict(false, format!("moment estimators failed: {e}")),
    };
    let mut err: f64 = 0.0;
    for z in 0..2 {
        for u in [SS, SSBAR, SBARSBAR] {
            err = err.max((est.delta(z, STRATA[u]) - DELTA[z][u]).abs());
        }
    }
    verdict(err < 1e-12 && secs < 1.0, format!("max |delta error| {err:.1e}, {secs:.3} s"))
}

/// Mixture bounds on the mean of a component with weight `a` in a cell whose
/// overall mean is `q`.
fn component_range(q: f64, a: f64) -> (f64, f64) {
    (((q - (1.0 - a)) / a).max(0.0), (q / a).min(1.0))
}

/// Extremes of the stratum effect over a grid of `pi_{SbarS}` values.
fn oracle(t: &TrialCells, u: usize, monotone: bool) -> (f64, f64) {
    let arm = |z: usize| t[z].iter().flatten().sum::<f64>();
    let p = |z: usize, s: usize| (t[z][s][0] + t[z][s][1]) / arm(z);
    let q = |z: usize, s: usize| t[z][s][1] / (t[z][s][0] + t[z][s][1]);
    let (p11, p01, p10) = (p(1, 1), p(0, 1), p(1, 0));
    let (lo_t, hi_t) = if monotone { (0.0, 0.0) } else { ((p01 - p11).max(0.0), p01.min(p10)) };
    let n = 2000;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..=n {
        let x = if i == n { hi_t } else { lo_t + (hi_t - lo_t) * i as f64 / n as f64 };
        let mass = [p01 - x, (p11 - p01) + x, p10 - x, x][u];
        if mass <= 1e-12 {
            lo = lo.min(-1.0);
            hi = hi.max(1.0);
            continue;
        }
        let (s1, s0) = (S_OF[1][u], S_OF[0][u]);
        let (a1, b1) = component_range(q(1, s1), (mass / p(1, s1)).min(1.0));
        let (a0, b0) = component_range(q(0, s0), (mass / p(0, s0)).min(1.0));
        lo = lo.min(a1 - b0);
        hi = hi.max(b1 - a0);
    }
    (lo, hi)
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut rng = RngStream::new(3);
    let tables: Vec<TrialCells> = (0..1000)
        .map(|_| {
            let mut t = [[[0.0; 2]; 2]; 2];
            for v in t.iter_mut().flatten().flatten() {
                *v = if rng.random::<f64>() < 0.05 { 0.0 } else { rng.random::<f64>() };
            }
            t
        })
        .collect();
    let results: Vec<(f64, usize, usize)> = tables
        .par_iter()
        .map(|t| {
            let dist = ObservedDistribution::from_trial_tables(std::slice::from_ref(t)).unwrap();
            let nm = psace_bounds(&dist, 0, Model::Nonmonotone).unwrap();
            let m = psace_bounds(&dist, 0, Model::Monotone).unwrap();
            let mut err: f64 = 0.0;
            let mut nested = 0;
            for b in &nm {
                let (lo, hi) = oracle(t, b.stratum.index(), false);
                err = err.max((b.lower - lo).abs()).max((b.upper - hi).abs());
            }
            let feasible = m.iter().all(|b| b.feasible);
            if feasible {
                for (bm, bn) in m.iter().zip(&nm) {
                    let (lo, hi) = oracle(t, bm.stratum.index(), true);
                    err = err.max((bm.lower - lo).abs()).max((bm.upper - hi).abs());
                    let inner = Interval::new(bm.lower, bm.upper);
                    nested += usize::from(!Interval::new(bn.lower, bn.upper).contains_interval(&inner, 1e-12));
                }
            }
            (err, usize::from(feasible), nested)
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let err = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let feasible: usize = results.iter().map(|r| r.1).sum();
    let violations: usize = results.iter().map(|r| r.2).sum();
    verdict(
        err < 1e-9 && violations == 0 && secs < 60.0,
        format!("max |closed form - oracle| {err:.1e}; {violations} nesting violations over {feasible} monotone-feasible tables; {secs:.1} s"),
    )
}

fn coverage_line(report: &EvalReport, strata: &[usize]) -> String {
    strata
        .iter()
        .map(|&u| {
            let s = report.get(STRATA[u]).unwrap();
            format!("{} cov {:.3} bias {:+.4}", STRATA[u], s.coverage.unwrap_or(f64::NAN), s.bias)
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn median_bias(report: &EvalReport, u: usize, truth: f64) -> f64 {
    let xs: Vec<f64> = report.replicates.iter().filter(|r| r.error.is_none()).map(|r| r.median[u] - truth).collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Criterion 4 and the PSRF half of criterion 10 share one run.
fn criteria_4_and_10b() -> (Verdict, Verdict) {
    let start = Instant::now();
    let scenario = builtin_scenario("monotone-3").unwrap().with_n(500);
    let config = EvalConfig { iterations: 20_000, burn_in: 4_000, chains: 5, ..EvalConfig::default() };
    let report = match evaluate(&scenario, 200, &config, 4004) {
        Ok(r) => r,
        Err(e) => return (verdict(false, e.to_string()), verdict(false, e.to_string())),
    };
    let secs = start.elapsed().as_secs_f64();
    let mut pass = report.completed == 200;
    let mut detail = Vec::new();
    let mut worst_psrf: f64 = 0.0;
    for u in [SS, SSBAR, SBARSBAR] {
        let s = report.get(STRATA[u]).unwrap();
        let cov = s.coverage.unwrap_or(f64::NAN);
        let mb = median_bias(&report, u, s.truth);
        pass &= (0.90..=0.98).contains(&cov) && s.bias.abs() < 0.03 && mb.abs() < 0.03;
        worst_psrf = worst_psrf.max(s.max_psrf.unwrap_or(f64::INFINITY));
        detail.push(format!("{} cov {cov:.3} bias(mle) {:+.4} bias(median) {mb:+.4}", STRATA[u], s.bias));
    }
    let c4 = verdict(pass, format!("{}/200 replicates; {}; {secs:.0} s", report.completed, detail.join("; ")));
    let c10 = verdict(worst_psrf < 1.05, format!("max PSRF over 200 replicates x 3 strata, 5 chains: {worst_psrf:.4}"));
    (c4, c10)
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let scenario = builtin_scenario("monotone-3-d0.05").unwrap().with_n(2000);
    let report = match evaluate(&scenario, 200, &EvalConfig::default(), 5005) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let cov = report.get(Stratum::SS).ok().and_then(|s| s.coverage).unwrap_or(f64::NAN);
    verdict(
        cov < 0.90 && report.completed == 200,
        format!("{}; {:.0} s", coverage_line(&report, &[SS, SSBAR, SBARSBAR]), start.elapsed().as_secs_f64()),
    )
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let mut df_ok = true;
    for n in 2..=10i64 {
        df_ok &= Model::Monotone.gof_df(n as usize) == 4 * n - 6 && Model::Nonmonotone.gof_df(n as usize) == 3 * n - 8;
    }
    let scenario = builtin_scenario("nonmonotone-3").unwrap().with_n(500);
    let root = RngStream::new(6006);
    let ps: Vec<Option<f64>> = (0..200u64)
        .into_par_iter()
        .map(|i| {
            let s = root.split(i);
            let counts = generate_dataset(&scenario, s.split(0).key()).ok()?;
            let cfg = EmConfig { n_starts: 10, ..EmConfig::with_seed(s.split(1).key()) };
            lrt(&counts, Model::Nonmonotone, &cfg).ok().map(|g| g.p_value)
        })
        .collect();
    let ps: Vec<f64> = ps.into_iter().flatten().collect();
    let d = ks_statistic(&ps, |x| x.clamp(0.0, 1.0));
    let p = ks_p_value(d, ps.len());
    verdict(
        df_ok && ps.len() == 200 && p > 0.01,
        format!(
            "df formulas {}; {} p-values, KS D {d:.4}, KS p {p:.3}, median p {:.3}; {:.0} s",
            if df_ok { "match" } else { "MISMATCH" },
            ps.len(),
            median(&ps),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let scenario = builtin_scenario("nonmonotone-5").unwrap().with_n(2000);
    let root = RngStream::new(7007);
    let runs: Vec<Option<(f64, f64)>> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let s = root.split(i);
            let counts = generate_dataset(&scenario, s.split(0).key()).ok()?;
            let em = EmConfig::with_seed(s.split(1).key());
            let gibbs = GibbsConfig::new(10_000, 2_000, s.split(2).key());
            let ppp = |model| -> Option<f64> {
                let draws = run_gibbs(&counts, model, &gibbs).ok()?;
                posterior_predictive_p(&counts, &draws, 500, Discrepancy::Realized, &em, s.split(3).key()).ok().map(|r| r.ppp)
            };
            Some((ppp(Model::Monotone)?, ppp(Model::Nonmonotone)?))
        })
        .collect();
    let ok: Vec<(f64, f64)> = runs.into_iter().flatten().collect();
    let hits = ok.iter().filter(|(m, nm)| *m < 0.10 && (0.2..=0.8).contains(nm)).count();
    let ms: Vec<f64> = ok.iter().map(|r| r.0).collect();
    let nms: Vec<f64> = ok.iter().map(|r| r.1).collect();
    verdict(
        hits >= 16,
        format!(
            "{hits}/20 runs with monotone ppp < 0.10 and nonmonotone ppp in [0.2, 0.8]; median ppp {:.3} vs {:.3}; {:.0} s",
            median(&ms),
            median(&nms),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    let iv = match predict_ace_y_bounds(0.2, 0.5, -0.4) {
        Ok(iv) => iv,
        Err(e) => return verdict(false, e.to_string()),
    };
    // strata effects 0, 0.4, 0, -0.6 in the order SS, SSbar, SbarSbar, SbarS
    let delta = [[0.5, 0.3, 0.5, 0.8], [0.5, 0.7, 0.5, 0.2]];
    let params = ParameterSet::new(
        Model::Nonmonotone,
        vec![0.5, 0.5],
        vec![0.5, 0.5],
        vec![vec![0.2, 0.4, 0.2, 0.2], vec![0.1, 0.4, 0.2, 0.3]],
        delta,
    )
    .unwrap();
    let a = paradox_check(&params, 0).unwrap();
    let b = paradox_check(&params, 1).unwrap();
    let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
    let pass = close(iv.lo, 0.10)
        && close(iv.hi, 0.14)
        && close(a.ace_s, 0.2)
        && close(a.ace_y, 0.04)
        && !a.paradox
        && close(b.ace_s, 0.1)
        && close(b.ace_y, -0.02)
        && b.paradox
        && start.elapsed().as_secs_f64() < 1.0;
    verdict(
        pass,
        format!(
            "interval [{:.15}, {:.15}]; validation ({:.15}, {:.15}); new trial ({:.15}, {:.15}) paradox {}",
            iv.lo, iv.hi, a.ace_s, a.ace_y, b.ace_s, b.ace_y, b.paradox
        ),
    )
}

/// Criterion 9 and the MIS half of criterion 10 share one run.
fn criteria_9_and_10c() -> (Verdict, Verdict) {
    let start = Instant::now();
    let scenario = builtin_scenario("nonmonotone-3").unwrap().with_n(2000);
    let counts = generate_dataset(&scenario, 9000).unwrap();
    let config = GibbsConfig::new(20_000, 4_000, 9001).chains(4);
    let homogeneous = run_gibbs(&counts, Model::Nonmonotone, &config).unwrap();
    let base: Vec<f64> = STRATA.iter().map(|&u| median(&homogeneous.ace(u).unwrap())).collect();
    let sigmas = [0.05, 0.2, 0.5];
    let runs: Vec<_> = sigmas.par_iter().map(|&s| run_hierarchical_gibbs(&counts, s, &config)).collect();
    let mut max_gap: f64 = 0.0;
    let mut widths = vec![[0.0; 4]; sigmas.len()];
    let mut min_acc = f64::INFINITY;
    let mut lines = Vec::new();
    for (k, run) in runs.iter().enumerate() {
        let draws = match run {
            Ok(d) => d,
            Err(e) => return (verdict(false, e.to_string()), verdict(false, e.to_string())),
        };
        min_acc = min_acc.min(draws.min_acceptance());
        let mut cells = Vec::new();
        for (u, &stratum) in STRATA.iter().enumerate() {
            let xs = draws.pooled_ace(stratum);
            let m = median(&xs);
            max_gap = max_gap.max((m - base[u]).abs());
            widths[k][u] = quantile(&xs, 0.975) - quantile(&xs, 0.025);
            cells.push(format!("{stratum} {:+.3}", m - base[u]));
        }
        lines.push(format!("sigma {}: {}", sigmas[k], cells.join(" ")));
    }
    let monotone_widths = (0..4).filter(|&u| widths[0][u] <= widths[1][u] && widths[1][u] <= widths[2][u]).count();
    let c9 = verdict(
        max_gap <= 0.08 && monotone_widths >= 3,
        format!(
            "median gaps vs homogeneous [{}]; max {max_gap:.3}; widths non-decreasing for {monotone_widths}/4 strata; {:.0} s",
            lines.join("; "),
            start.elapsed().as_secs_f64()
        ),
    );
    let c10 = verdict(min_acc > 0.5, format!("minimum MIS acceptance over all cells and sigmas {min_acc:.4}"));
    (c9, c10)
}

/// Zero data: every outcome probability keeps its prior marginal.
fn criterion_10a() -> Verdict {
    let start = Instant::now();
    let mut worst = f64::INFINITY;
    let mut tested = 0;
    for model in [Model::Monotone, Model::Nonmonotone] {
        let draws = run_gibbs(&ObservedCounts::zeros(3), model, &GibbsConfig::new(21_000, 1_000, 1010).thin(5)).unwrap();
        for z in 0..2 {
            for &u in model.strata() {
                let xs = draws.pooled(|p| p.delta(z, u));
                worst = worst.min(ks_p_value(ks_statistic(&xs, |x| x.clamp(0.0, 1.0)), xs.len()));
                tested += 1;
            }
        }
    }
    // hierarchical prior: eta ~ N(mu, sigma^2), mu ~ U(-5, 5), delta = expit(eta)
    let sigma = 0.5;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let cdf = |x: f64| {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let l = (x / (1.0 - x)).ln();
        // Simpson over mu
        let n = 2000;
        let h = 10.0 / n as f64;
        let f = |mu: f64| normal.cdf((l - mu) / sigma);
        let mut acc = f(-5.0) + f(5.0);
        for i in 1..n {
            acc += f(-5.0 + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0 / 10.0
    };
    // without data mu wanders slowly over [-5, 5]; heavy thinning keeps the
    // retained draws close to independent, as the test assumes
    let draws = run_hierarchical_gibbs(&ObservedCounts::zeros(3), sigma, &GibbsConfig::new(1_002_000, 2_000, 1011).thin(500));
    let hier = match draws {
        Ok(d) => d,
        Err(e) => return verdict(false, e.to_string()),
    };
    let mut worst_h = f64::INFINITY;
    for z in 0..2 {
        for &u in &STRATA {
            let xs: Vec<f64> = hier.iter().map(|s| s.delta(z, u, 0)).collect();
            worst_h = worst_h.min(ks_p_value(ks_statistic(&xs, cdf), xs.len()));
            tested += 1;
        }
    }
    verdict(
        worst > 0.01 && worst_h > 0.01,
        format!(
            "{tested} marginals; smallest KS p {worst:.3} (homogeneous), {worst_h:.3} (hierarchical, sigma {sigma}); {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("PSACE_ACCEPTANCE").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |k: u32| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut results: Vec<(u32, Verdict)> = Vec::new();
    let report = |k: u32, v: &Verdict| println!("{} criterion {k}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);

    type Single = fn() -> Verdict;
    let singles: [(u32, Single); 5] = [(1, criterion_1), (2, criterion_2), (3, criterion_3), (6, criterion_6), (8, criterion_8)];
    for (k, f) in singles {
        if want(k) {
            let v = f();
            report(k, &v);
            results.push((k, v));
        }
    }
    if want(4) {
        let (c4, c10b) = criteria_4_and_10b();
        report(4, &c4);
        results.push((4, c4));
        results.push((10, c10b));
    }
    if want(5) {
        let v = criterion_5();
        report(5, &v);
        results.push((5, v));
    }
    if want(7) {
        let v = criterion_7();
        report(7, &v);
        results.push((7, v));
    }
    if want(9) {
        let (c9, c10c) = criteria_9_and_10c();
        report(9, &c9);
        results.push((9, c9));
        results.push((10, c10c));
    }
    if want(10) {
        let c10a = criterion_10a();
        results.push((10, c10a));
        let parts: Vec<&Verdict> = results.iter().filter(|(k, _)| *k == 10).map(|(_, v)| v).collect();
        let pass = parts.iter().all(|v| v.pass);
        let mut detail = parts.iter().map(|v| v.detail.as_str()).collect::<Vec<_>>().join(" | ");
        if !(want(4) && want(9)) {
            detail.push_str(" (PSRF and MIS parts need criteria 4 and 9 selected)");
        }
        report(10, &verdict(pass, detail));
    }
    let failed: Vec<u32> = results.iter().filter(|(_, v)| !v.pass).map(|(k, _)| *k).collect();
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
