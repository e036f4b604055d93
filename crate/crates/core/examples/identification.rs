//! Identification from several trials: closed-form moment estimators under
//! monotonicity, inversion of the population system and the local rank check.

use psace::identification::{invert_population_system, local_identifiability, moment_estimators_two_trials, Template};
use psace::model::{cell_probabilities, Model, ObservedDistribution, ParameterSet, Stratum};
use psace::simulation::BASE_DELTA;

fn main() -> psace::Result<()> {
    let monotone = ParameterSet::new(
        Model::Monotone,
        vec![0.5, 0.5],
        vec![0.5, 0.5],
        vec![vec![0.6, 0.3, 0.1, 0.0], vec![0.2, 0.3, 0.5, 0.0]],
        BASE_DELTA,
    )?;
    let dist = ObservedDistribution::from_probabilities(&cell_probabilities(&monotone)?)?;
    let est = moment_estimators_two_trials(&dist, 0, 1)?;
    for &u in Model::Monotone.strata() {
        println!("{u}: delta_1 {:.3}, delta_0 {:.3}", est.delta(1, u), est.delta(0, u));
    }

    let nonmonotone = ParameterSet::new(
        Model::Nonmonotone,
        vec![1.0 / 3.0; 3],
        vec![0.4, 0.5, 0.6],
        vec![vec![0.6, 0.2, 0.1, 0.1], vec![0.1, 0.6, 0.2, 0.1], vec![0.1, 0.1, 0.6, 0.2]],
        BASE_DELTA,
    )?;
    let probs = cell_probabilities(&nonmonotone)?;
    let table: Vec<_> = (0..3).map(|r| probs.conditional_on_trial(r)).collect();
    let inv = invert_population_system(&table, &Template::design_of(&nonmonotone), 1)?;
    println!("inversion residual {:.2e}, exact {}", inv.residual_norm, inv.exact);
    for u in Stratum::ALL {
        println!("ACE_{u}: {:.4}", inv.params.ace(u).unwrap());
    }

    for n in [2, 3] {
        let trials: Vec<usize> = (0..n).collect();
        let sub = ParameterSet::new(
            Model::Nonmonotone,
            vec![1.0 / n as f64; n],
            trials.iter().map(|&r| nonmonotone.alpha[r]).collect(),
            trials.iter().map(|&r| nonmonotone.pi[r].to_vec()).collect(),
            BASE_DELTA,
        )?;
        let rep = local_identifiability(&sub)?;
        println!("N_R={n}: rank {}/{} full {} {:?}", rep.jacobian_rank, rep.n_params, rep.full_rank, rep.notes);
    }
    Ok(())
}
