//! Central finite-difference checks of the tape's analytic gradients.
//!
//! The oracle evaluates the same graph at `f64`, perturbing one input
//! coordinate at a time by `±FD_STEP`. Relative error is
//! `|analytic − numeric| / max(|analytic|, |numeric|, DENOM_FLOOR)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ot::{ProjectionSet, SwdDirections};
use crate::rng::stream;
use crate::tape::{Conv2dAttrs, PrimitiveKind, Tape, Var};
use crate::tensor::Tensor;
use crate::{losses, model};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const DENOM_FLOOR: f64 = 1e-3;

/// Minimum distance of `abs` and sort arguments from a kink. A step of
/// `FD_STEP` on logits scaled by 0.1 moves probabilities by at most 2.5e-5.
const KINK_GAP: f64 = 5e-5;

/// Outcome of one named check over a number of random points.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= REL_TOL
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compare analytic and numeric gradients of `f` with respect to every input.
///
/// `f` must build a scalar from the given leaves. When `max_coords` is set, at
/// most that many coordinates (drawn at random across all inputs) are checked.
/// Coordinates whose `±FD_STEP` stencil crosses a kink (a sign change at a
/// `prelu` or `abs` input, or a reordering in `sort_columns`) are skipped.
pub fn check_gradient<F>(
    inputs: &[Tensor<f64>],
    f: F,
    max_coords: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let base_signature = tape.kink_signature();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    // random order, so that a limit picks a uniform subset of smooth coordinates
    for k in (1..coords.len()).rev() {
        coords.swap(k, rng.random_range(0..=k));
    }
    let limit = max_coords.unwrap_or(coords.len());

    let eval = |perturbed: &[Tensor<f64>]| -> Result<(f64, Vec<u64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item(), tape.kink_signature()))
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (i, j) in coords {
        if checked == limit {
            break;
        }
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + FD_STEP;
        let (plus, sig_plus) = eval(&work)?;
        work[i].data_mut()[j] = orig - FD_STEP;
        let (minus, sig_minus) = eval(&work)?;
        work[i].data_mut()[j] = orig;
        if sig_plus != base_signature || sig_minus != base_signature {
            continue;
        }
        checked += 1;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i][j], numeric));
    }
    Ok(worst)
}

/// `Σ out ⊙ weights` as a scalar, using only tape primitives.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let n = tape.value(out).len();
    let flat = tape.reshape(out, &[1, n])?;
    let w = tape.constant(weights.clone().reshaped([1, n]));
    let y = tape.linear(flat, w, None)?;
    tape.sum(y)
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Uniform values with magnitude at least `gap`, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let m = rng.random_range(gap..1.5);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

/// Columns of `(rows, cols)` whose sorted entries are at least `gap` apart.
fn separated_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor<f64> {
    let mut data = vec![0.0; rows * cols];
    for c in 0..cols {
        let mut vals: Vec<f64> = Vec::with_capacity(rows);
        while vals.len() < rows {
            let v = rng.random_range(-2.0..2.0);
            if vals.iter().all(|&u: &f64| (u - v).abs() > gap) {
                vals.push(v);
            }
        }
        for r in 0..rows {
            data[r * cols + c] = vals[r];
        }
    }
    Tensor::new([rows, cols], data)
}

fn run_points<G>(name: &str, points: usize, rng: &mut ChaCha8Rng, mut one: G) -> Result<GradCheck>
where
    G: FnMut(&mut ChaCha8Rng) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for _ in 0..points {
        worst = worst.max(one(rng)?);
    }
    Ok(GradCheck { name: name.to_string(), points, max_rel_err: worst })
}

/// Check one primitive at `points` random inputs.
pub fn check_primitive(kind: PrimitiveKind, points: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = stream(seed, kind.name());
    run_points(kind.name(), points, &mut rng, |rng| primitive_point(kind, rng))
}

fn primitive_point(kind: PrimitiveKind, rng: &mut ChaCha8Rng) -> Result<f64> {
    use PrimitiveKind as K;
    let mut sub = stream(rng.random(), "coords");
    match kind {
        K::Leaf => Ok(0.0),
        K::Conv2d => {
            let attrs = Conv2dAttrs { stride: rng.random_range(1..=2), pad: rng.random_range(0..=1) };
            let inputs = [
                uniform(rng, &[2, 2, 5, 5], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
            ];
            let side = (5 + 2 * attrs.pad - 3) / attrs.stride + 1;
            let w = uniform(rng, &[2 * 3 * side * side], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), attrs)?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::InstanceNorm => {
            let inputs = [
                uniform(rng, &[2, 3, 3, 3], -2.0, 2.0),
                uniform(rng, &[3], 0.5, 1.5),
                uniform(rng, &[3], -1.0, 1.0),
            ];
            let w = uniform(rng, &[54], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::Prelu => {
            let inputs = [away_from_zero(rng, &[2, 3, 4], 1e-2), uniform(rng, &[3], 0.05, 0.5)];
            let w = uniform(rng, &[24], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.prelu(v[0], v[1])?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::Linear => {
            let inputs = [
                uniform(rng, &[3, 4], -1.0, 1.0),
                uniform(rng, &[5, 4], -1.0, 1.0),
                uniform(rng, &[5], -1.0, 1.0),
            ];
            let w = uniform(rng, &[15], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.linear(v[0], v[1], Some(v[2]))?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::ConcatChannels => {
            let inputs = [uniform(rng, &[2, 2, 3], -1.0, 1.0), uniform(rng, &[2, 3, 3], -1.0, 1.0)];
            let w = uniform(rng, &[30], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.concat_channels(v[0], v[1])?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::GlobalAveragePool => {
            let inputs = [uniform(rng, &[2, 3, 2, 2], -1.0, 1.0)];
            let w = uniform(rng, &[6], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.global_average_pool(v[0])?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::SoftmaxTemperature => {
            let scale = rng.random_range(0.1..2.0);
            let inputs = [uniform(rng, &[3, 6], -3.0, 3.0)];
            let w = uniform(rng, &[18], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.softmax_temperature(v[0], scale)?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::CrossEntropy => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
            let inputs = [uniform(rng, &[4, 6], -3.0, 3.0)];
            check_gradient(&inputs, |t, v| t.cross_entropy(v[0], &labels), None, &mut sub)
        }
        K::Add | K::Sub => {
            let inputs = [uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)];
            let w = uniform(rng, &[12], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = if kind == K::Add { t.add(v[0], v[1])? } else { t.sub(v[0], v[1])? };
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::Scale => {
            let factor = rng.random_range(-3.0..3.0);
            let inputs = [uniform(rng, &[3, 4], -1.0, 1.0)];
            let w = uniform(rng, &[12], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.scale(v[0], factor)?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::Abs => {
            let inputs = [away_from_zero(rng, &[3, 4], 1e-2)];
            let w = uniform(rng, &[12], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.abs(v[0])?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::CumulativeSum => {
            let axis = rng.random_range(0..3);
            let inputs = [uniform(rng, &[2, 3, 4], -1.0, 1.0)];
            let w = uniform(rng, &[24], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.cumulative_sum(v[0], axis)?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::Sum => {
            let inputs = [uniform(rng, &[3, 4], -1.0, 1.0)];
            check_gradient(&inputs, |t, v| t.sum(v[0]), None, &mut sub)
        }
        K::Reshape => {
            let inputs = [uniform(rng, &[2, 6], -1.0, 1.0)];
            let w = uniform(rng, &[12], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.reshape(v[0], &[3, 4])?;
                    let y = t.cumulative_sum(y, 1)?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
        K::SortColumns => {
            let inputs = [separated_columns(rng, 5, 3, 1e-2)];
            let w = uniform(rng, &[15], -1.0, 1.0);
            check_gradient(
                &inputs,
                |t, v| {
                    let y = t.sort_columns(v[0])?;
                    weighted_sum(t, y, &w)
                },
                None,
                &mut sub,
            )
        }
    }
}

/// Composed losses used by training: CE, p-EMD∘softmax(0.1·z), SWD and their sum.
pub fn check_losses(points: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let proj = ProjectionSet::new(16, 5)?;
    let classes = 25;
    let mut out = Vec::new();

    let mut rng = stream(seed, "loss/ce");
    out.push(run_points("loss/cross_entropy", points, &mut rng, |rng| {
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..classes)).collect();
        let z = uniform(rng, &[3, classes], -4.0, 4.0);
        let mut sub = stream(rng.random(), "coords");
        check_gradient(&[z], |t, v| t.cross_entropy(v[0], &labels), None, &mut sub)
    })?);

    let mut rng = stream(seed, "loss/pemd");
    out.push(run_points("loss/pemd_softmax", points, &mut rng, |rng| {
        let (z1, z2) = tie_free_pair(rng, &proj, 1, classes);
        let mut sub = stream(rng.random(), "coords");
        check_gradient(
            &[z1, z2],
            |t, v| {
                let p = t.softmax_temperature(v[0], 0.1)?;
                let q = t.softmax_temperature(v[1], 0.1)?;
                losses::pemd_loss(t, p, q, &proj)
            },
            None,
            &mut sub,
        )
    })?);

    let mut rng = stream(seed, "loss/swd");
    out.push(run_points("loss/swd", points, &mut rng, |rng| {
        let dirs = SwdDirections::sample(16, classes, rng);
        let (z1, z2) = swd_tie_free_pair(rng, &dirs, classes);
        let mut sub = stream(rng.random(), "coords");
        check_gradient(
            &[z1, z2],
            |t, v| {
                let p = t.softmax_temperature(v[0], 0.1)?;
                let q = t.softmax_temperature(v[1], 0.1)?;
                losses::swd_loss(t, p, q, &dirs)
            },
            None,
            &mut sub,
        )
    })?);

    let mut rng = stream(seed, "loss/pemd+swd");
    out.push(run_points("loss/pemd_plus_swd", points, &mut rng, |rng| {
        let dirs = SwdDirections::sample(16, classes, rng);
        let (z1, z2) = loop {
            let (a, b) = tie_free_pair(rng, &proj, 2, classes);
            if swd_ties_clear(&a, &b, &dirs) {
                break (a, b);
            }
        };
        let mut sub = stream(rng.random(), "coords");
        check_gradient(
            &[z1, z2],
            |t, v| {
                let p = t.softmax_temperature(v[0], 0.1)?;
                let q = t.softmax_temperature(v[1], 0.1)?;
                let a = losses::pemd_loss(t, p, q, &proj)?;
                let b = losses::swd_loss(t, p, q, &dirs)?;
                t.add(a, b)
            },
            None,
            &mut sub,
        )
    })?);
    Ok(out)
}

/// Logit batches whose projected cumulative-sum differences stay clear of zero,
/// so that `abs` is differentiable within the finite-difference stencil.
fn tie_free_pair(rng: &mut ChaCha8Rng, proj: &ProjectionSet, rows: usize, classes: usize) -> (Tensor<f64>, Tensor<f64>) {
    // Entries before the first or after the last occupied bin of a projection
    // are zero for every pair of unit-mass histograms.
    let (bins, cells) = (proj.bins(), proj.side() * proj.side());
    let m = proj.projection_matrix();
    let mut structural = Vec::with_capacity(proj.count() * bins);
    for a in 0..proj.count() {
        let mut cum = 0.0;
        for b in 0..bins {
            let row = (a * bins + b) * cells;
            cum += m[row..row + cells].iter().sum::<f64>();
            structural.push(cum < 1e-9 || cum > cells as f64 - 1e-9);
        }
    }
    loop {
        let z1 = uniform(rng, &[rows, classes], -20.0, 20.0);
        let z2 = uniform(rng, &[rows, classes], -20.0, 20.0);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(z1.clone());
        let b = tape.constant(z2.clone());
        let p = tape.softmax_temperature(a, 0.1).expect("shape");
        let q = tape.softmax_temperature(b, 0.1).expect("shape");
        let diffs = losses::pemd_cumulative_differences(&mut tape, p, q, proj).expect("shape");
        let d = tape.value(diffs).data();
        if d.iter().enumerate().all(|(k, v)| structural[k % structural.len()] || v.abs() > KINK_GAP) {
            return (z1, z2);
        }
    }
}

fn swd_ties_clear(z1: &Tensor<f64>, z2: &Tensor<f64>, dirs: &SwdDirections) -> bool {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(z1.clone());
    let b = tape.constant(z2.clone());
    let p = tape.softmax_temperature(a, 0.1).expect("shape");
    let q = tape.softmax_temperature(b, 0.1).expect("shape");
    let (pp, qp) = losses::swd_projections(&mut tape, p, q, dirs).expect("shape");
    let (pv, qv) = (tape.value(pp), tape.value(qp));
    let (n, m) = (pv.shape()[0], pv.shape()[1]);
    let gap = |v: &Tensor<f64>| {
        (0..m).all(|c| {
            (0..n).all(|i| (0..n).all(|j| i == j || (v.data()[i * m + c] - v.data()[j * m + c]).abs() > KINK_GAP))
        })
    };
    let sorted_diff_clear = {
        let mut ok = true;
        for c in 0..m {
            let mut a: Vec<f64> = (0..n).map(|i| pv.data()[i * m + c]).collect();
            let mut b: Vec<f64> = (0..n).map(|i| qv.data()[i * m + c]).collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            ok &= a.iter().zip(&b).all(|(x, y)| (x - y).abs() > KINK_GAP);
        }
        ok
    };
    gap(pv) && gap(qv) && sorted_diff_clear
}

fn swd_tie_free_pair(rng: &mut ChaCha8Rng, dirs: &SwdDirections, classes: usize) -> (Tensor<f64>, Tensor<f64>) {
    loop {
        let z1 = uniform(rng, &[2, classes], -20.0, 20.0);
        let z2 = uniform(rng, &[2, classes], -20.0, 20.0);
        if swd_ties_clear(&z1, &z2, dirs) {
            return (z1, z2);
        }
    }
}

/// Full forward + cross-entropy path of a reduced-size twin model.
pub fn check_model(points: usize, seed: u64) -> Result<GradCheck> {
    let arch = model::ArchConfig::tiny();
    let mut rng = stream(seed, "model");
    run_points("model/forward_cross_entropy", points, &mut rng, |rng| {
        let m = model::TwinRegistrationModel::init(&arch, rng.random());
        let params = m.params().cast::<f64>();
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let side = arch.patch_side;
        let batch = 2;
        let a = uniform(rng, &[batch, 1, side, side], -1.0, 1.0);
        let b = uniform(rng, &[batch, 1, side, side], -1.0, 1.0);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..arch.classes())).collect();
        let head = if rng.random_bool(0.5) { model::Head::First } else { model::Head::Second };
        let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
        inputs.push(a);
        inputs.push(b);
        let mut sub = stream(rng.random(), "coords");
        check_gradient(
            &inputs,
            |t, v| {
                let bound = model::BoundParams::from_vars(&names, &v[..names.len()]);
                let fa = model::features(t, &arch, &bound, v[names.len()])?;
                let fb = model::features(t, &arch, &bound, v[names.len() + 1])?;
                let logits = model::head_logits(t, &arch, &bound, head, fa, fb)?;
                t.cross_entropy(logits, &labels)
            },
            Some(50),
            &mut sub,
        )
    })
}

/// Every primitive, every composed loss and the tiny model path.
pub fn full_suite(points: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for kind in PrimitiveKind::ALL {
        out.push(check_primitive(kind, points, seed)?);
    }
    out.extend(check_losses(points, seed)?);
    out.push(check_model(points, seed)?);
    Ok(out)
}
