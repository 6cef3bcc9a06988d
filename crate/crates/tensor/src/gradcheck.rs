//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::{Result, Scalar, Tape, Tensor, Value};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub eps: f64,
    /// Coordinates to sample; all coordinates are checked when there are fewer.
    pub coords: usize,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is zero are judged by absolute error.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords: 200,
            denom_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    /// `(parameter index, flat offset)` of the worst coordinate.
    pub worst: (usize, usize),
}

fn eval<F, L>(params: &[Tensor<F>], loss: &L) -> Result<f64>
where
    F: Scalar,
    L: Fn(&mut Tape<F>, &[Value]) -> Result<Value>,
{
    let mut tape = Tape::new();
    let vars: Vec<Value> = params.iter().map(|p| tape.param(p)).collect();
    let out = loss(&mut tape, &vars)?;
    Ok(tape.data(out)[0].as_f64())
}

/// Compares `backward` gradients of `loss` against central differences on a
/// random subsample of parameter coordinates.
pub fn finite_diff_check<F, L, R>(
    params: &[Tensor<F>],
    loss: L,
    opts: GradCheckOptions,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Scalar,
    L: Fn(&mut Tape<F>, &[Value]) -> Result<Value>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let vars: Vec<Value> = params.iter().map(|p| tape.param(p)).collect();
    let out = loss(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<F>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("trainable leaf").to_vec())
        .collect();

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.numel();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let chosen: Vec<usize> = if total <= opts.coords {
        (0..total).collect()
    } else {
        let mut ix = sample(rng, total, opts.coords).into_vec();
        ix.sort_unstable();
        ix
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords_checked: chosen.len(),
        worst: (0, 0),
    };
    for flat in chosen {
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let off = flat - offsets[pi];
        let orig = work[pi].data()[off];
        work[pi].data_mut()[off] = orig + F::lit(opts.eps);
        let up = eval(&work, &loss)?;
        work[pi].data_mut()[off] = orig - F::lit(opts.eps);
        let down = eval(&work, &loss)?;
        work[pi].data_mut()[off] = orig;

        let numeric = (up - down) / (2.0 * opts.eps);
        let a = analytic[pi][off].as_f64();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(opts.denom_floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (pi, off);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::new(vec![4], vec![0.3, -1.1, 2.5, 0.0]).unwrap();
        let report = finite_diff_check(
            &[p],
            |tape: &mut Tape<f64>, v: &[Value]| {
                let sq = tape.map(v[0], |x| 0.5 * x * x, |x| x);
                Ok(tape.sum(sq))
            },
            GradCheckOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(report.coords_checked, 4);
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
    }
}
