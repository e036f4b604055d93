//! A small repeated-sampling study: bias, RMSE and coverage per stratum.

use psace::simulation::{builtin_scenario, evaluate, EvalConfig};

fn main() -> psace::Result<()> {
    let scenario = builtin_scenario("monotone-2")?.with_n(1000);
    let config = EvalConfig { iterations: 3000, burn_in: 1000, ..EvalConfig::default() };
    let report = evaluate(&scenario, 20, &config, 2024)?;
    println!("{} of {} replicates completed", report.completed, report.n_replicates);
    for s in &report.strata {
        println!(
            "{:<9} truth {:.3}  bias {:+.4}  rmse {:.4}  coverage {:.2}  width {:.3}",
            s.stratum,
            s.truth,
            s.bias,
            s.rmse,
            s.coverage.unwrap_or(f64::NAN),
            s.mean_width.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
