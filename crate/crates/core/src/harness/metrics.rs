use std::collections::BTreeMap;

use rand::Rng;

use crate::datasets::{State, StateFormat, Transition};
use crate::error::{Error, Result};
use crate::gridworld::{argmax, sample_index, Action, Grid, PosState, N_ACTIONS};
use crate::models::ActionModel;

fn labels(test: &[Transition]) -> Result<Vec<usize>> {
    if test.is_empty() {
        return Err(Error::Parameter("empty test set".into()));
    }
    test.iter()
        .map(|t| {
            t.a.map(Action::index)
                .ok_or_else(|| Error::Domain("test records must carry actions".into()))
        })
        .collect()
}

/// Fraction of records whose argmax action equals the label.
pub fn metric_accuracy(model: &dyn ActionModel, test: &[Transition]) -> Result<f64> {
    let y = labels(test)?;
    let p = model.action_probs(test)?;
    let hits = p.iter().zip(&y).filter(|(p, &a)| argmax(&p[..]) == a).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Mean `−log p(a|·)` of the labels, in nats.
pub fn metric_nll(model: &dyn ActionModel, test: &[Transition]) -> Result<f64> {
    let y = labels(test)?;
    let p = model.action_probs(test)?;
    let total: f64 = p.iter().zip(&y).map(|(p, &a)| -p[a].ln()).sum();
    Ok(total / test.len() as f64)
}

pub fn entropy(p: &[f64; N_ACTIONS]) -> f64 {
    p.iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum()
}

/// Mean Shannon entropy (nats) of the predictive distribution over `inputs`.
pub fn metric_entropy(model: &dyn ActionModel, inputs: &[Transition]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Parameter("empty test set".into()));
    }
    let p = model.action_probs(inputs)?;
    Ok(p.iter().map(entropy).sum::<f64>() / inputs.len() as f64)
}

fn render(grid: &Grid, format: StateFormat, s: PosState) -> Result<State> {
    Ok(match format {
        StateFormat::Pos => State::Pos(s),
        StateFormat::Img => State::Img(grid.render_img(s)?),
    })
}

/// Fraction of `episodes` that reach the goal within `horizon` actions, with
/// actions sampled from the policy.
pub fn metric_reward<R: Rng>(
    policy: &dyn ActionModel,
    grid: &Grid,
    format: StateFormat,
    episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Parameter("episodes must be positive".into()));
    }
    let mut successes = 0;
    for _ in 0..episodes {
        let mut s = grid.start();
        for _ in 0..horizon {
            if s == grid.goal() {
                break;
            }
            let state = render(grid, format, s)?;
            let record = Transition {
                s: state.clone(),
                a: None,
                s_next: state,
                goal: Some(grid.goal()),
            };
            let p = policy.action_probs(std::slice::from_ref(&record))?[0];
            let a = sample_index(&p, rng)
                .and_then(Action::from_index)
                .ok_or_else(|| Error::Domain("policy returned an empty distribution".into()))?;
            s = grid.step(s, a)?;
        }
        if s == grid.goal() {
            successes += 1;
        }
    }
    Ok(successes as f64 / episodes as f64)
}

/// Best accuracy any policy blind to the goal can reach on `test`: the
/// majority label per state.
pub fn bayes_accuracy(test: &[Transition]) -> Result<f64> {
    let y = labels(test)?;
    let mut counts: BTreeMap<PosState, [usize; N_ACTIONS]> = BTreeMap::new();
    for (t, a) in test.iter().zip(y) {
        let s = t
            .s
            .position()
            .ok_or_else(|| Error::Domain("state has no player".into()))?;
        counts.entry(s).or_default()[a] += 1;
    }
    let best: usize = counts.values().map(|c| c.iter().copied().max().unwrap_or(0)).sum();
    Ok(best as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::build_test_set;
    use crate::gridworld::{generate_maze, make_open_grid, solve_expert, ExpertPolicy};
    use crate::learning::{ExpertModel, ExpertSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Uniform;

    impl ActionModel for Uniform {
        fn action_probs(&self, records: &[Transition]) -> Result<Vec<[f64; N_ACTIONS]>> {
            Ok(vec![[0.25; N_ACTIONS]; records.len()])
        }
    }

    #[test]
    fn uniform_entropy_is_ln4() {
        let g = generate_maze(10, 0).unwrap();
        let test = build_test_set(&g, &solve_expert(&g)).unwrap();
        let h = metric_entropy(&Uniform, &test).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!((metric_nll(&Uniform, &test).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn expert_is_perfect() {
        let g = generate_maze(10, 3).unwrap();
        let e = solve_expert(&g);
        let test = build_test_set(&g, &e).unwrap();
        let m = ExpertModel(ExpertSet::single(g.clone(), e, StateFormat::Pos));
        assert_eq!(metric_accuracy(&m, &test).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(metric_reward(&m, &g, StateFormat::Pos, 25, 38, &mut rng).unwrap(), 1.0);
    }

    #[test]
    fn diagonal_expert_always_arrives() {
        let g = make_open_grid(20).unwrap();
        let e = ExpertPolicy::stochastic_diagonal(0.5).unwrap();
        let m = ExpertModel(ExpertSet::single(g.clone(), e, StateFormat::Pos));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(metric_reward(&m, &g, StateFormat::Pos, 25, 38, &mut rng).unwrap(), 1.0);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(metric_accuracy(&Uniform, &[]).is_err());
        assert!(metric_entropy(&Uniform, &[]).is_err());
    }
}
