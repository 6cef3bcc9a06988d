//! The exact chain against enumeration and Monte Carlo.

use flexibit_core::gridworld::{
    generate_dataset, generate_trajectory, noisy_policy, trajectory_rng, uniform_policy, Action, Cell, GridState,
    HORIZON,
};
use flexibit_core::masking::{apply_pattern, sample_pattern, MaskPattern, TaskKind, TaskSpec};
use flexibit_core::oracle::{brute_force_marginals, entropy, Chain, Evidence};
use flexibit_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn state(agent: usize, key: usize) -> GridState {
    GridState::new(Cell::new(agent).unwrap(), Cell::new(key).unwrap())
}

#[test]
fn sparse_states_at_horizon_seven_match_enumeration() {
    let chain = Chain::build();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let tr = generate_trajectory(&mut rng);
        let mut ev = Evidence::empty(7);
        for t in [0, 3, 6] {
            ev.observe_state(t, tr.states[t]);
        }
        let a = chain.posterior_marginals(&ev).unwrap();
        let b = brute_force_marginals(&ev, noisy_policy).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10, "{}", a.max_abs_diff(&b));
    }
}

#[test]
fn uniform_policy_chain_matches_enumeration() {
    let chain = Chain::with_policy(uniform_policy);
    let mut ev = Evidence::empty(5);
    ev.observe_state(0, state(0, 5)).observe_action(2, Action::Right);
    ev.rtg0 = Some(1);
    let a = chain.posterior_marginals(&ev).unwrap();
    let b = brute_force_marginals(&ev, uniform_policy).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-12);
}

#[test]
fn expected_return_matches_sampled_episodes() {
    let exact = Chain::build().expected_return();
    let n = 10_000u64;
    let mean: f64 = (0..n)
        .map(|i| generate_trajectory(&mut trajectory_rng(77, i)).episode_return() as f64)
        .sum::<f64>()
        / n as f64;
    assert!((mean - exact).abs() <= 0.05, "{mean} vs {exact}");
}

#[test]
fn success_probability_matches_sampled_episodes() {
    let p = Chain::build().success_probability();
    let n = 10_000u64;
    let hits = (0..n)
        .filter(|&i| {
            let tr = generate_trajectory(&mut trajectory_rng(78, i));
            tr.final_state().unwrap().agent == flexibit_core::gridworld::GOAL
        })
        .count() as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((hits / n as f64 - p).abs() < 3.0 * sigma, "{} vs {p}", hits / n as f64);
}

#[test]
fn bc_floor_is_mean_policy_entropy() {
    let data = generate_dataset(30, 4);
    let chain = Chain::build();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut examples = Vec::new();
    let mut direct = 0.0;
    for tr in data.iter() {
        let p = sample_pattern(&TaskSpec::new(TaskKind::Bc), &mut rng);
        let t = p.action_target.iter().position(|&b| b).unwrap();
        direct += entropy(&noisy_policy(tr.states[t]));
        examples.push(apply_pattern(tr, &p).unwrap());
    }
    direct /= examples.len() as f64;
    let floor = chain.bayes_optimal_loss(&examples).unwrap();
    assert!((floor - direct).abs() < 1e-12, "{floor} vs {direct}");
}

#[test]
fn forward_dynamics_floor_is_zero() {
    let data = generate_dataset(30, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let examples: Vec<_> = data
        .iter()
        .map(|tr| apply_pattern(tr, &sample_pattern(&TaskSpec::new(TaskKind::ForwardDyn), &mut rng)).unwrap())
        .collect();
    assert!(Chain::build().bayes_optimal_loss(&examples).unwrap().abs() < 1e-12);
}

#[test]
fn teleporting_evidence_is_rejected() {
    let mut ev = Evidence::empty(HORIZON);
    ev.observe_state(0, state(0, 5)).observe_state(1, state(10, 5));
    assert!(matches!(Chain::build().posterior_marginals(&ev), Err(Error::ZeroLikelihood)));
}

#[test]
fn fully_observed_history_needs_no_inference() {
    let data = generate_dataset(5, 6);
    let tr = data.iter().next().unwrap();
    let ex = apply_pattern(tr, &MaskPattern::all_visible(HORIZON)).unwrap();
    let m = Chain::build().posterior_marginals(&Evidence::from_example(&ex)).unwrap();
    for t in 0..HORIZON {
        assert!((m.agent[t][tr.states[t].agent.index()] - 1.0).abs() < 1e-12);
        assert!((m.action[t][tr.actions[t].index()] - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn marginals_are_distributions(seed in any::<u64>(), reveal in proptest::collection::vec(any::<bool>(), 10)) {
        let tr = generate_trajectory(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut ev = Evidence::empty(HORIZON);
        for (t, &r) in reveal.iter().enumerate() {
            if r {
                ev.observe_state(t, tr.states[t]);
            }
        }
        let m = Chain::build().posterior_marginals(&ev).unwrap();
        for t in 0..HORIZON {
            prop_assert!((m.agent[t].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((m.key[t].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((m.action[t].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!((m.rtg0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn evidence_text_round_trips(seed in any::<u64>(), mask in proptest::collection::vec(0u8..8, 10), rtg in proptest::option::of(-10i32..=10)) {
        let tr = generate_trajectory(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut ev = Evidence::empty(HORIZON);
        for (t, &m) in mask.iter().enumerate() {
            if m & 1 != 0 { ev.agent[t] = Some(tr.states[t].agent); }
            if m & 2 != 0 { ev.key[t] = Some(tr.states[t].key); }
            if m & 4 != 0 { ev.action[t] = Some(tr.actions[t]); }
        }
        ev.rtg0 = rtg;
        let back: Evidence = ev.to_string().parse().unwrap();
        prop_assert_eq!(back, ev);
    }
}
