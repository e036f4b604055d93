//! The surrogate paradox and prediction of the outcome effect in a new trial.

use psace::gibbs::{run_gibbs, GibbsConfig};
use psace::model::{Model, ParameterSet};
use psace::simulation::{builtin_scenario, generate_dataset};
use psace::surrogate::{evaluate_surrogate, paradox_check, predict_ace_y_bounds, predict_from_draws};

fn main() -> psace::Result<()> {
    // Stratum effects 0 / 0.4 / 0 / -0.6: the validation trial looks fine,
    // the new trial has a positive surrogate effect and a negative outcome effect.
    let delta = [[0.5, 0.3, 0.5, 0.8], [0.5, 0.7, 0.5, 0.2]];
    let params = ParameterSet::new(
        Model::Nonmonotone,
        vec![0.5, 0.5],
        vec![0.5, 0.5],
        vec![vec![0.2, 0.4, 0.2, 0.2], vec![0.1, 0.4, 0.2, 0.3]],
        delta,
    )?;
    for r in 0..2 {
        let p = paradox_check(&params, r)?;
        println!("trial {}: ACE^S {:+.2}  ACE^Y {:+.2}  paradox {}", p.trial, p.ace_s, p.ace_y, p.paradox);
    }
    let iv = predict_ace_y_bounds(0.1, 0.4, -0.6)?;
    println!("ACE^S = 0.1 admits ACE^Y in [{:.2}, {:.2}]", iv.lo, iv.hi);

    let counts = generate_dataset(&builtin_scenario("nonmonotone-3")?.with_n(3000), 4)?;
    let draws = run_gibbs(&counts, Model::Nonmonotone, &GibbsConfig::new(6000, 2000, 4))?;
    // this scenario has effects in SS and SbarSbar, so necessity should fail
    let verdict = evaluate_surrogate(&draws, 0.95)?;
    println!("necessity holds: {}", verdict.necessity_holds());
    let pred = predict_from_draws(&draws, 0.2, 0.95)?;
    println!("ACE^S = 0.2 predicts ACE^Y in [{:.3}, {:.3}] (95% credible)", pred.credible.lo, pred.credible.hi);
    Ok(())
}
