//! Maximum likelihood by EM on simulated data, compared with the truth.

use psace::em::{run_em, EmConfig};
use psace::model::{Model, Stratum};
use psace::simulation::{builtin_scenario, generate_dataset};

fn main() -> psace::Result<()> {
    let scenario = builtin_scenario("nonmonotone-3")?.with_n(5000);
    let truth = scenario.truth()?.summary();
    let counts = generate_dataset(&scenario, 11)?;

    let fit = run_em(&counts, Model::Nonmonotone, &EmConfig::with_seed(11))?;
    let est = fit.params.summary();
    println!("log-likelihood {:.3} after {} iterations (start {})", fit.log_likelihood, fit.iterations, fit.start);
    println!("{:<10} {:>8} {:>8}", "stratum", "truth", "mle");
    for u in Stratum::ALL {
        println!("{:<10} {:>8.3} {:>8.3}", u, truth.ace(u).unwrap(), est.ace(u).unwrap());
    }
    for (r, (s, y)) in est.ace_s.iter().zip(&est.ace_y).enumerate() {
        println!("trial {}: ACE^S {s:.3}  ACE^Y {y:.3}", r + 1);
    }
    Ok(())
}
