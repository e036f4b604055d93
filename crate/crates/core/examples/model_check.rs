//! Likelihood-ratio test and posterior predictive p-value for both models on
//! data generated without monotonicity.

use psace::em::EmConfig;
use psace::gibbs::{run_gibbs, GibbsConfig};
use psace::model::Model;
use psace::model_checking::{lrt, posterior_predictive_p, Discrepancy};
use psace::simulation::{builtin_scenario, generate_dataset};

fn main() -> psace::Result<()> {
    let scenario = builtin_scenario("nonmonotone-4")?.with_n(2000);
    let counts = generate_dataset(&scenario, 21)?;
    let em = EmConfig::with_seed(21);
    for model in [Model::Monotone, Model::Nonmonotone] {
        let gof = lrt(&counts, model, &em)?;
        let draws = run_gibbs(&counts, model, &GibbsConfig::new(4000, 1000, 21))?;
        let ppp = posterior_predictive_p(&counts, &draws, 300, Discrepancy::Realized, &em, 21)?;
        println!("{model}: G2 {:.2} on {} df, p {:.4}, ppp {:.3}", gof.statistic, gof.df, gof.p_value, ppp.ppp);
    }
    Ok(())
}
