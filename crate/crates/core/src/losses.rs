//! Differentiable discrepancy losses built from tape primitives.
//!
//! Inputs are `(N, K²)` probability rows (typically `softmax(0.1·z)`).

use crate::error::Result;
use crate::ot::{ProjectionSet, SwdDirections};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

fn projection_constant<T: Real>(tape: &mut Tape<T>, proj: &ProjectionSet) -> Var {
    let rows = proj.count() * proj.bins();
    let cells = proj.side() * proj.side();
    let m: Vec<T> = proj.projection_matrix().into_iter().map(T::lit).collect();
    tape.constant(Tensor::new([rows, cells], m))
}

/// `cumsum(project(p)) − cumsum(project(q))` with shape `(N, P, B)`.
pub fn pemd_cumulative_differences<T: Real>(
    tape: &mut Tape<T>,
    p: Var,
    q: Var,
    proj: &ProjectionSet,
) -> Result<Var> {
    let n = tape.shape(p)[0];
    let w = projection_constant(tape, proj);
    let pp = tape.linear(p, w, None)?;
    let qp = tape.linear(q, w, None)?;
    let diff = tape.sub(pp, qp)?;
    let diff = tape.reshape(diff, &[n, proj.count(), proj.bins()])?;
    tape.cumulative_sum(diff, 2)
}

/// Mean over the batch of per-sample p-EMD between rows of `p` and `q`.
///
/// Cumulative sums are linear, so the difference of cumulative sums is taken
/// as the cumulative sum of the projected difference.
pub fn pemd_loss<T: Real>(tape: &mut Tape<T>, p: Var, q: Var, proj: &ProjectionSet) -> Result<Var> {
    let n = tape.shape(p)[0];
    let d = pemd_cumulative_differences(tape, p, q, proj)?;
    let a = tape.abs(d)?;
    let s = tape.sum(a)?;
    tape.scale(s, 1.0 / (n * proj.count()) as f64)
}

/// Both batches projected onto the slice directions: two `(N, M)` matrices.
pub fn swd_projections<T: Real>(tape: &mut Tape<T>, p: Var, q: Var, dirs: &SwdDirections) -> Result<(Var, Var)> {
    let d: Vec<T> = dirs.as_slice().iter().map(|&v| T::lit(v)).collect();
    let w = tape.constant(Tensor::new([dirs.count(), dirs.dim()], d));
    Ok((tape.linear(p, w, None)?, tape.linear(q, w, None)?))
}

/// Batch-empirical sliced W1 between the rows of `p` and of `q`.
pub fn swd_loss<T: Real>(tape: &mut Tape<T>, p: Var, q: Var, dirs: &SwdDirections) -> Result<Var> {
    let n = tape.shape(p)[0];
    let (pp, qp) = swd_projections(tape, p, q, dirs)?;
    let ps = tape.sort_columns(pp)?;
    let qs = tape.sort_columns(qp)?;
    let d = tape.sub(ps, qs)?;
    let a = tape.abs(d)?;
    let s = tape.sum(a)?;
    tape.scale(s, 1.0 / (n * dirs.count()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histograms::Histogram2d;
    use crate::ot::{pemd, swd_with_directions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .flat_map(|_| {
                let raw: Vec<f64> = (0..25).map(|_| rng.random::<f64>().powi(3)).collect();
                let t: f64 = raw.iter().sum();
                raw.into_iter().map(move |v| v / t)
            })
            .collect()
    }

    #[test]
    fn tape_pemd_matches_value_pemd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for count in [2, 16] {
            let proj = ProjectionSet::new(count, 5).unwrap();
            let a = random_rows(&mut rng, 4);
            let b = random_rows(&mut rng, 4);
            let mut tape = Tape::<f64>::new();
            let p = tape.constant(Tensor::new([4, 25], a.clone()));
            let q = tape.constant(Tensor::new([4, 25], b.clone()));
            let l = pemd_loss(&mut tape, p, q, &proj).unwrap();
            let want: f64 = (0..4)
                .map(|i| {
                    let hp = Histogram2d::new(5, a[i * 25..(i + 1) * 25].to_vec()).unwrap();
                    let hq = Histogram2d::new(5, b[i * 25..(i + 1) * 25].to_vec()).unwrap();
                    pemd(&hp, &hq, &proj).unwrap()
                })
                .sum::<f64>()
                / 4.0;
            assert!((tape.value(l).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_swd_matches_value_swd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dirs = SwdDirections::sample(32, 25, &mut rng);
        let a = random_rows(&mut rng, 6);
        let b = random_rows(&mut rng, 6);
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new([6, 25], a.clone()));
        let q = tape.constant(Tensor::new([6, 25], b.clone()));
        let l = swd_loss(&mut tape, p, q, &dirs).unwrap();
        assert!((tape.value(l).item() - swd_with_directions(&a, &b, &dirs)).abs() < 1e-12);
    }
}
