//! Sensitivity of the stratum effects to between-trial heterogeneity of the
//! outcome probabilities.

use psace::gibbs::GibbsConfig;
use psace::model::Stratum;
use psace::sensitivity::{run_hierarchical_gibbs, DEFAULT_SIGMAS};
use psace::simulation::{builtin_scenario, generate_dataset};
use psace::stats::median;

fn main() -> psace::Result<()> {
    let counts = generate_dataset(&builtin_scenario("nonmonotone-3-d0.025")?.with_n(2000), 9)?;
    let config = GibbsConfig::new(6000, 2000, 9);
    for sigma in DEFAULT_SIGMAS {
        let draws = run_hierarchical_gibbs(&counts, sigma, &config)?;
        print!("sigma {sigma:<5}");
        for u in Stratum::ALL {
            print!("  {u} {:+.3}", median(&draws.pooled_ace(u)));
        }
        println!("  (min acceptance {:.3})", draws.min_acceptance());
    }
    Ok(())
}
