//! Posterior quantiles and convergence diagnostics from the data-augmentation
//! sampler, with several chains.

use psace::gibbs::{count_modes, default_bandwidth, gelman_rubin, run_gibbs, summarize, GibbsConfig};
use psace::model::Model;
use psace::simulation::{builtin_scenario, generate_dataset};

fn main() -> psace::Result<()> {
    let scenario = builtin_scenario("monotone-3")?.with_n(1000);
    let counts = generate_dataset(&scenario, 3)?;
    let config = GibbsConfig::new(6000, 2000, 3).chains(4);
    let draws = run_gibbs(&counts, Model::Monotone, &config)?;

    let summary = summarize(&draws, &[0.025, 0.5, 0.975])?;
    for row in summary.rows.iter().filter(|r| r.name.starts_with("ACE[")) {
        println!("{:<14} {:>7.3} {:>7.3} {:>7.3}", row.name, row.quantiles[0], row.quantiles[1], row.quantiles[2]);
    }
    for &u in Model::Monotone.strata() {
        let psrf = gelman_rubin(&draws.per_chain(|p| p.ace(u).unwrap()))?;
        let xs = draws.ace(u)?;
        println!("{u}: PSRF {psrf:.3}, modes {}", count_modes(&xs, default_bandwidth(&xs)));
    }
    Ok(())
}
