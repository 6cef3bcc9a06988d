//! Rollouts, backward histories and the loss matrix.

use flexibit_core::evaluation::{
    emit_heatmap, heatmap_svg, normalize_columns, regime_comparison, standard_rows, LossMatrix, ALL_ROW, RND_FT_ROW,
    RND_ROW,
};
use flexibit_core::gridworld::{initial_states, reward, step, Cell, GridState, HORIZON};
use flexibit_core::inference::{backward_infer, rollout_batch, Conditioning, Mode, INCONSISTENT_FLAG, MAX_RETRIES};
use flexibit_core::masking::TaskKind;
use flexibit_core::model::{init_params, ModelConfig, ModelParams};
use flexibit_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params() -> ModelParams<f32> {
    init_params(&ModelConfig::default(), 2).unwrap()
}

fn state(agent: usize, key: usize) -> GridState {
    GridState::new(Cell::new(agent).unwrap(), Cell::new(key).unwrap())
}

fn matrix(seed: u64) -> LossMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = LossMatrix::empty(standard_rows(), TaskKind::SINGLE.to_vec());
    for row in &mut m.values {
        for v in row.iter_mut() {
            *v = rand::Rng::random_range(&mut rng, 0.01..3.0);
        }
    }
    m
}

#[test]
fn rollouts_follow_the_environment() {
    let starts = initial_states();
    let p = params();
    let out = rollout_batch(
        &p,
        &starts,
        &Conditioning::default(),
        HORIZON,
        Mode::Sample,
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    assert_eq!(out.len(), starts.len());
    for (tr, s0) in out.iter().zip(&starts) {
        assert_eq!(tr.states[0], *s0);
        assert_eq!(tr.len(), HORIZON);
        for t in 0..HORIZON - 1 {
            assert_eq!(tr.states[t + 1], step(tr.states[t], tr.actions[t]));
            assert_eq!(tr.rewards[t], reward(tr.states[t], tr.states[t + 1]));
        }
    }
}

#[test]
fn argmax_rollouts_are_repeatable() {
    let p = params();
    let starts = initial_states();
    let cond = Conditioning::default();
    let a = rollout_batch(&p, &starts, &cond, HORIZON, Mode::Argmax, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = rollout_batch(&p, &starts, &cond, HORIZON, Mode::Argmax, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn backward_histories_end_where_asked_and_are_consistent_or_flagged() {
    let p = params();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for last in [state(15, 15), state(5, 0), state(11, 2)] {
        let h = backward_infer(&p, last, HORIZON, &mut rng, MAX_RETRIES).unwrap();
        let tr = &h.trajectory;
        assert_eq!(tr.len(), HORIZON);
        assert_eq!(tr.states[HORIZON - 1], last);
        for t in 0..HORIZON - 1 {
            assert_eq!(step(tr.states[t], tr.actions[t]), tr.states[t + 1], "t={t}");
        }
        let flagged = h.flags.iter().any(|f| f == INCONSISTENT_FLAG);
        assert_eq!(flagged, !tr.states[0].is_initial());
    }
}

#[test]
fn keyless_agent_in_the_locked_room_has_no_legal_history() {
    // reachable one step at a time, never from a start state
    let h = backward_infer(&params(), state(11, 2), HORIZON, &mut ChaCha8Rng::seed_from_u64(7), MAX_RETRIES).unwrap();
    assert!(h.flags.iter().any(|f| f == INCONSISTENT_FLAG));
}

#[test]
fn bad_history_length_is_rejected() {
    let err = backward_infer(&params(), state(15, 15), 0, &mut ChaCha8Rng::seed_from_u64(8), 4).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn normalized_minimum_is_one_per_column() {
    let n = normalize_columns(&matrix(1)).unwrap();
    for j in 0..n.columns.len() {
        let min = n.column(j).fold(f64::INFINITY, f64::min);
        assert_eq!(min, 1.0);
    }
}

#[test]
fn missing_cells_survive_normalization() {
    let mut m = matrix(2);
    m.values[3][4] = f64::NAN;
    let n = normalize_columns(&m).unwrap();
    assert!(n.values[3][4].is_nan());
    assert!(n.values[2][4].is_finite());
}

#[test]
fn all_zero_column_is_degenerate() {
    let mut m = matrix(3);
    for row in &mut m.values {
        row[1] = 0.0;
    }
    assert!(matches!(normalize_columns(&m), Err(Error::DegenerateColumn(c)) if c == TaskKind::SINGLE[1].name()));
}

#[test]
fn tiny_minimum_is_floored() {
    let mut m = matrix(4);
    m.values[0][0] = 1e-9;
    m.values[1][0] = 0.5;
    let n = normalize_columns(&m).unwrap();
    assert!((n.values[1][0] - 0.5 / 1e-4).abs() < 1e-6);
}

#[test]
fn hypothesis_counts_follow_the_matrix() {
    let mut m = LossMatrix::empty(standard_rows(), TaskKind::SINGLE.to_vec());
    let (rnd, all, ft) = (
        m.row_index(RND_ROW).unwrap(),
        m.row_index(ALL_ROW).unwrap(),
        m.row_index(RND_FT_ROW).unwrap(),
    );
    for (j, &c) in TaskKind::SINGLE.iter().enumerate() {
        let s = m.row_index(c.name()).unwrap();
        m.values[s][j] = 1.0;
        // rnd beats specialized in the first three columns, ties in the fourth
        m.values[rnd][j] = [0.5, 0.5, 0.5, 1.0, 2.0, 2.0, 2.0, 2.0][j];
        m.values[all][j] = 1.5;
        m.values[ft][j] = [1.0, 1.04, 1.2, 1.0, 1.0, 1.0, 1.0, 1.0][j];
    }
    let r = regime_comparison(&m);
    assert_eq!(r.columns, 8);
    assert_eq!(r.rnd_vs_specialized, 4);
    assert_eq!(r.all_vs_specialized, 0);
    assert_eq!(r.ft_vs_specialized, 6);
    assert_eq!(r.ft_near_specialized, 7);
    assert_eq!(r.rnd_vs_all, 4);
    assert_eq!(r.ft_vs_rnd, 5);
    assert_eq!(r.ft_vs_all, 8);
    assert!(r.h1 && r.h2 && !r.h3 && r.h4);
    assert!(r.to_string().contains("RND wins 4/8"));
}

#[test]
fn heatmap_is_well_formed_svg() {
    let n = normalize_columns(&matrix(5)).unwrap();
    let svg = heatmap_svg(&n);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let rects = doc.descendants().filter(|e| e.has_tag_name("rect")).count();
    assert_eq!(rects, 1 + n.rows.len() * n.columns.len());
    let texts: Vec<String> = doc
        .descendants()
        .filter(|e| e.has_tag_name("text"))
        .filter_map(|e| e.text().map(str::to_owned))
        .collect();
    for r in &n.rows {
        assert!(texts.contains(r), "row {r}");
    }
    for c in &n.columns {
        assert!(texts.iter().any(|t| t == c.name()));
    }
    assert!(texts.iter().any(|t| t == "1.00"));
}

#[test]
fn emitted_files_are_byte_stable() {
    let m = matrix(6);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = emit_heatmap(&m, a.path()).unwrap();
    let fb = emit_heatmap(&m, b.path()).unwrap();
    for (x, y) in [(&fa.raw_csv, &fb.raw_csv), (&fa.normalized_csv, &fb.normalized_csv), (&fa.svg, &fb.svg)] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    assert_eq!(LossMatrix::read_csv(&fa.raw_csv).unwrap().to_csv(), m.to_csv());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalization_is_idempotent(seed in any::<u64>()) {
        let n = normalize_columns(&matrix(seed)).unwrap();
        prop_assert_eq!(normalize_columns(&n).unwrap(), n);
    }

    #[test]
    fn normalization_commutes_with_row_order(seed in any::<u64>(), rot in 0usize..11) {
        let m = matrix(seed);
        let mut p = m.clone();
        p.rows.rotate_left(rot);
        p.values.rotate_left(rot);
        let mut n = normalize_columns(&m).unwrap();
        n.rows.rotate_left(rot);
        n.values.rotate_left(rot);
        prop_assert_eq!(normalize_columns(&p).unwrap(), n);
    }

    #[test]
    fn csv_round_trips(seed in any::<u64>(), hole in 0usize..88) {
        let mut m = matrix(seed);
        m.values[hole / 8][hole % 8] = f64::NAN;
        let back = LossMatrix::from_csv(&m.to_csv()).unwrap();
        prop_assert_eq!(back.to_csv(), m.to_csv());
        prop_assert!(back.values[hole / 8][hole % 8].is_nan());
        prop_assert_eq!(back.rows, m.rows);
    }
}
