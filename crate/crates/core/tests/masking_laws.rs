//! Distributional laws of the masking samplers and per-family structure.

use std::collections::HashSet;

use flexibit_core::gridworld::{generate_dataset, HORIZON};
use flexibit_core::masking::{
    apply_pattern, draw_random_masking, fixed_rate_masking, pattern_statistics, recognize, sample_any_single,
    sample_pattern, MaskPattern, TaskKind, TaskSpec,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

fn chi_square_p(observed: &[f64], expected: &[f64]) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((observed.len() - 1) as f64).unwrap().cdf(stat)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn uniform_rate_count_is_uniform() {
    let stats = pattern_statistics(&TaskSpec::new(TaskKind::Rnd), 100_000, &mut rng(1));
    let n = 2 * HORIZON;
    assert_eq!(stats.count_histogram.len(), n + 1);
    let obs: Vec<f64> = stats.count_histogram.iter().map(|&c| c as f64).collect();
    let p = chi_square_p(&obs, &vec![100_000.0 / (n + 1) as f64; n + 1]);
    assert!(p > 0.001, "p = {p}");
}

#[test]
fn each_token_is_hidden_half_the_time() {
    let stats = pattern_statistics(&TaskSpec::new(TaskKind::Rnd), 100_000, &mut rng(2));
    for f in &stats.position_frequency {
        // 5 sigma of a fair coin over 10^5 draws
        assert!((f - 0.5).abs() < 5.0 * (0.25f64 / 1e5).sqrt(), "{f}");
    }
    assert!((stats.rtg_visible_rate - 0.5).abs() < 0.01);
}

#[test]
fn fixed_rate_count_is_binomial() {
    let n = 2 * HORIZON;
    let mut counts = vec![0.0; n + 1];
    let mut r = rng(3);
    for _ in 0..100_000 {
        counts[fixed_rate_masking(HORIZON, 0.15, &mut r).masked_count()] += 1.0;
    }
    let b = Binomial::new(0.15, n as u64).unwrap();
    // bins with small expectation pooled into the tail
    let cut = (0..=n).find(|&k| b.pmf(k as u64) * 1e5 < 5.0).unwrap();
    let mut obs: Vec<f64> = counts[..cut].to_vec();
    let mut exp: Vec<f64> = (0..cut).map(|k| b.pmf(k as u64) * 1e5).collect();
    obs.push(counts[cut..].iter().sum());
    exp.push(1e5 - exp.iter().sum::<f64>());
    let p = chi_square_p(&obs, &exp);
    assert!(p > 0.001, "p = {p}");
}

#[test]
fn resampled_target_count_is_uniform_above_zero() {
    let spec = TaskSpec::new(TaskKind::Rnd);
    let mut r = rng(4);
    let n = 2 * HORIZON;
    let mut counts = vec![0.0; n];
    for _ in 0..100_000 {
        let p = sample_pattern(&spec, &mut r);
        counts[p.target_count() - 1] += 1.0;
    }
    let p = chi_square_p(&counts, &vec![1e5 / n as f64; n]);
    assert!(p > 0.001, "p = {p}");
}

#[test]
fn all_draws_each_scheme_equally() {
    let spec = TaskSpec::new(TaskKind::All);
    let mut r = rng(5);
    let mut counts = [0.0; 8];
    for _ in 0..100_000 {
        let (k, p) = sample_any_single(&spec, &mut r);
        assert!(recognize(k, &p));
        counts[TaskKind::SINGLE.iter().position(|&s| s == k).unwrap()] += 1.0;
    }
    let p = chi_square_p(&counts, &[12_500.0; 8]);
    assert!(p > 0.001, "p = {p}");
}

#[test]
fn uniform_rate_covers_state_visibility_rows() {
    let mut r = rng(6);
    let mut seen = HashSet::new();
    for _ in 0..1_000_000 {
        let p = draw_random_masking(HORIZON, &mut r);
        let row = p.state_visible.iter().fold(0u16, |acc, &v| acc << 1 | v as u16);
        seen.insert(row);
    }
    assert!(seen.len() as f64 >= 0.99 * 1024.0, "{} rows", seen.len());
}

#[test]
fn bc_target_position_is_uniform() {
    let stats = pattern_statistics(&TaskSpec::new(TaskKind::Bc), 50_000, &mut rng(7));
    let obs: Vec<f64> = stats.action_target_histogram.iter().map(|&c| c as f64).collect();
    let p = chi_square_p(&obs, &vec![5_000.0; HORIZON]);
    assert!(p > 0.001, "p = {p}");
}

#[test]
fn waypoint_count_is_uniform_over_one_to_three() {
    let spec = TaskSpec::new(TaskKind::Waypoint);
    let mut r = rng(8);
    let mut counts = [0.0; 3];
    for _ in 0..30_000 {
        let p = sample_pattern(&spec, &mut r);
        let t = p.action_target.iter().position(|&b| b).unwrap();
        assert!((0..=t).all(|j| p.state_visible[j]));
    }
    // with an empty action prefix every visible state after s0 is a waypoint
    for _ in 0..300_000 {
        let p = sample_pattern(&spec, &mut r);
        if p.action_target[0] {
            let m = (1..HORIZON).filter(|&j| p.state_visible[j]).count();
            counts[m - 1] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let p = chi_square_p(&counts, &[total / 3.0; 3]);
    assert!(p > 0.001, "p = {p} {counts:?}");
}

fn any_kind() -> impl Strategy<Value = TaskKind> {
    proptest::sample::select(TaskKind::EVERY.to_vec())
}

proptest! {
    #[test]
    fn sampled_patterns_are_well_formed_members(kind in any_kind(), seed in any::<u64>()) {
        let p = sample_pattern(&TaskSpec::new(kind), &mut rng(seed));
        prop_assert_eq!(p.len(), HORIZON);
        prop_assert!(p.is_well_formed());
        prop_assert!(recognize(kind, &p));
        if kind != TaskKind::Reward && kind != TaskKind::Rnd && kind != TaskKind::All {
            prop_assert!(!p.rtg_visible);
        }
    }

    #[test]
    fn apply_then_unmask_is_lossless(kind in any_kind(), seed in any::<u64>(), idx in 0usize..20) {
        let data = generate_dataset(20, 9);
        let tr = data.iter().nth(idx).unwrap();
        let p = sample_pattern(&TaskSpec::new(kind), &mut rng(seed));
        let ex = apply_pattern(tr, &p).unwrap();
        prop_assert_eq!(&ex.unmask(), tr);
        prop_assert_eq!(ex.visible_rtg().is_some(), p.rtg_visible);
    }

    #[test]
    fn length_mismatch_is_reported(len in 1usize..HORIZON) {
        let data = generate_dataset(2, 1);
        let tr = data.iter().next().unwrap();
        prop_assert!(apply_pattern(tr, &MaskPattern::all_targets(len)).is_err());
    }
}
