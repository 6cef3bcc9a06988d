//! Finite-difference checks for every differentiable operation.

use flexibit_tensor::{finite_diff_check, GradCheckOptions, Result, Tape, Tensor, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts an arbitrary-shaped output against fixed random weights so every
/// output coordinate contributes to the scalar loss.
fn project(tape: &mut Tape<f64>, v: Value, seed: u64) -> Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.shape(v).iter().product::<usize>();
    let w = random(&[n, 1], &mut rng);
    let w = tape.constant(&w);
    let flat = tape.reshape(v, &[1, n])?;
    let out = tape.matmul(flat, w)?;
    Ok(tape.sum(out))
}

fn check<L>(params: Vec<Tensor<f64>>, loss: L) -> f64
where
    L: Fn(&mut Tape<f64>, &[Value]) -> Result<Value>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    finite_diff_check(&params, loss, GradCheckOptions::default(), &mut rng)
        .unwrap()
        .max_rel_error
}

const TOL: f64 = 1e-6;

#[test]
fn matmul_flat_and_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = check(vec![random(&[2, 3], &mut rng), random(&[3, 4], &mut rng)], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        project(t, c, 5)
    });
    assert!(err < TOL, "{err}");
    let err = check(
        vec![random(&[2, 3, 5, 3], &mut rng), random(&[3, 4], &mut rng)],
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            project(t, c, 6)
        },
    );
    assert!(err < TOL, "{err}");
    let err = check(
        vec![random(&[4, 2, 3], &mut rng), random(&[4, 3, 5], &mut rng)],
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            project(t, c, 7)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn transpose_add_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let err = check(
        vec![random(&[3, 2, 4], &mut rng), random(&[2, 4], &mut rng)],
        |t, v| {
            let s = t.add(v[0], v[1])?;
            let s = t.scale(s, 0.7);
            let tr = t.transpose(s)?;
            project(t, tr, 8)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn concat_slice_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let err = check(
        vec![
            random(&[2, 3, 2], &mut rng),
            random(&[2, 3, 5], &mut rng),
            random(&[4, 5], &mut rng),
        ],
        |t, v| {
            let c = t.concat_last_dim(&[v[0], v[1]])?;
            let s = t.slice_last_dim(c, 1, 5)?;
            let r = t.reshape(s, &[6, 5])?;
            let f = t.concat_first_dim(&[r, v[2]])?;
            project(t, f, 9)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn activations_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let err = check(vec![random(&[3, 6], &mut rng)], |t, v| {
        let g = t.gelu(v[0]);
        let s = t.softmax_last_dim(g);
        project(t, s, 10)
    });
    assert!(err < TOL, "{err}");
    // keep inputs away from the kink for relu
    let shifted = Tensor::new(
        vec![8],
        vec![0.5, -0.5, 1.2, -0.8, 0.3, -1.1, 0.9, -0.2],
    )
    .unwrap();
    let err = check(vec![shifted], |t, v| {
        let r = t.relu(v[0]);
        project(t, r, 11)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn layer_norm_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let err = check(
        vec![
            random(&[4, 6], &mut rng),
            random(&[6], &mut rng),
            random(&[6], &mut rng),
        ],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            project(t, y, 12)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn embedding_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let err = check(vec![random(&[5, 4], &mut rng), random(&[4, 3], &mut rng)], |t, v| {
        let e = t.embedding_lookup(v[0], &[0, 3, 3, 1, 4, 0])?;
        let logits = t.matmul(e, v[1])?;
        t.cross_entropy_with_logits(logits, &[Some(0), None, Some(2), Some(1), None, Some(2)])
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn sum_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let err = check(vec![random(&[3, 3], &mut rng)], |t, v| {
        let g = t.gelu(v[0]);
        let m = t.mean(g);
        let s = t.sum(v[0]);
        let both = t.concat_first_dim(&[m, s])?;
        project(t, both, 13)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn corrupted_pullback_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = vec![random(&[5, 5], &mut rng)];
    let good = check(params.clone(), |t, v| {
        let y = t.map(v[0], f64::sin, f64::cos);
        project(t, y, 14)
    });
    assert!(good < TOL, "{good}");
    let bad = check(params, |t, v| {
        let y = t.map(v[0], f64::sin, |x| 1.1 * x.cos());
        project(t, y, 14)
    });
    assert!(bad > 1e-2, "{bad}");
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&[7, 9], &mut rng);
    let b = random(&[9, 5], &mut rng);
    let run = || {
        let mut t = Tape::<f32>::new();
        let av = t.constant(&a.cast());
        let bv = t.constant(&b.cast());
        let c = t.matmul(av, bv).unwrap();
        let s = t.softmax_last_dim(c);
        t.data(s).to_vec()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Tensor<f64> = Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect(),
            ).unwrap();
            let mut t = Tape::new();
            let v = t.constant(&x);
            let y = t.softmax_last_dim(v);
            for row in t.data(y).chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn matmul_gradient_random_shapes(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![random(&[m, k], &mut rng), random(&[k, n], &mut rng)];
            let err = check(params, |t, v| {
                let c = t.matmul(v[0], v[1])?;
                project(t, c, seed)
            });
            prop_assert!(err < TOL);
        }
    }
}
