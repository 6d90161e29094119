//! Discrepancy measures between displacement distributions.
//!
//! * [`emd1d`]: exact Earth Mover's distance on a uniform 1D grid, the L1
//!   distance of cumulative sums, in linear time.
//! * [`pemd`]: projected EMD for `K×K` histograms. Each histogram is projected
//!   onto `P` lines at angles evenly spread over `[0°, 90°]` (both ends
//!   included), mass is split linearly between the two nearest 1D bins, and
//!   the 1D EMDs are averaged.
//! * [`exact_emd2d`]: the exact 2D EMD with Euclidean ground distance, used as
//!   the reference p-EMD is validated against.
//! * [`swd_batch`]: batch-empirical sliced Wasserstein (W1) over class
//!   vectors; blind to which class sits next to which.
//! * [`diffusion_distance`]: L1 norms of the difference map summed over a
//!   blur-and-downsample pyramid.
//!
//! Every projection of a feasible 2D plan is a feasible 1D plan with no larger
//! cost, so `pemd(p, q) ≤ exact_emd2d(p, q)` holds for any inputs.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::histograms::Histogram2d;
use crate::transport::{self, TransportPlan};

/// Entry tolerance on the total mass of a histogram.
pub const MASS_TOL: f64 = 1e-4;
const NEG_TOL: f64 = 1e-6;

/// Validate and rescale to exactly unit mass.
fn normalize(h: &[f64]) -> Result<Vec<f64>> {
    for (index, &value) in h.iter().enumerate() {
        if value < -NEG_TOL || value.is_nan() {
            return Err(Error::NegativeMass { index, value });
        }
    }
    let clamped: Vec<f64> = h.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::NotNormalized(total));
    }
    Ok(clamped.into_iter().map(|v| v / total).collect())
}

/// Exact 1D EMD between histograms on a grid with uniform `spacing`.
pub fn emd1d(p: &[f64], q: &[f64], spacing: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    let p = normalize(p)?;
    let q = normalize(q)?;
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(&q) {
        cp += a;
        cq += b;
        total += (cp - cq).abs();
    }
    Ok(spacing * total)
}

/// Projection angles and 1D binning for p-EMD on a `K×K` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    side: usize,
    angles_deg: Vec<f64>,
    radius: usize,
    max_angle: f64,
}

impl ProjectionSet {
    /// `count` angles `k·90/(count−1)`; a single projection uses 0°.
    pub fn new(count: usize, side: usize) -> Result<Self> {
        if count == 0 || side == 0 {
            return Err(Error::invalid("projection count and grid side must be positive"));
        }
        let angles_deg = if count == 1 {
            vec![0.0]
        } else {
            (0..count).map(|k| k as f64 * 90.0 / (count - 1) as f64).collect()
        };
        Ok(ProjectionSet { side, angles_deg, radius: Self::radius_for(side), max_angle: 90.0 })
    }

    /// Reference set with `count` angles `k·180/count` over a half turn.
    ///
    /// Not used in training; the benchmark reports it next to the quadrant
    /// sets because directions in the second quadrant are otherwise only
    /// seen through their axis components.
    pub fn half_turn(count: usize, side: usize) -> Result<Self> {
        if count == 0 || side == 0 {
            return Err(Error::invalid("projection count and grid side must be positive"));
        }
        let angles_deg = (0..count).map(|k| k as f64 * 180.0 / count as f64).collect();
        Ok(ProjectionSet { side, angles_deg, radius: Self::radius_for(side), max_angle: 180.0 })
    }

    fn radius_for(side: usize) -> usize {
        let half = (side as f64 - 1.0) / 2.0;
        (half * std::f64::consts::SQRT_2 - 1e-12).ceil().max(0.0) as usize
    }

    pub fn count(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of 1D bins, `2R + 1`.
    pub fn bins(&self) -> usize {
        2 * self.radius + 1
    }

    /// Bin centers `−R..=R` with unit spacing.
    pub fn bin_centers(&self) -> Vec<f64> {
        let r = self.radius as isize;
        (-r..=r).map(|c| c as f64).collect()
    }

    /// Linear deposit weights: `weights[b · K² + cell]` is the share of 2D
    /// cell `cell` (class order) landing in 1D bin `b` at `angle`.
    pub fn deposit_weights(&self, angle_deg: f64) -> Result<Vec<f64>> {
        if !(0.0..=self.max_angle).contains(&angle_deg) {
            return Err(Error::invalid(format!("projection angle {angle_deg} outside [0, {}]", self.max_angle)));
        }
        let (cos, sin) = unit_direction(angle_deg);
        let k = self.side;
        let half = (k as f64 - 1.0) / 2.0;
        let bins = self.bins();
        let mut w = vec![0.0; bins * k * k];
        for iy in 0..k {
            for ix in 0..k {
                let s = (ix as f64 - half) * cos + (iy as f64 - half) * sin;
                let pos = s + self.radius as f64;
                let lo = pos.floor();
                let frac = pos - lo;
                let lo = lo as usize;
                let cell = iy * k + ix;
                w[lo * k * k + cell] += 1.0 - frac;
                if frac > 0.0 {
                    w[(lo + 1) * k * k + cell] += frac;
                }
            }
        }
        Ok(w)
    }

    /// All projections stacked: a `(P·B) × K²` matrix in row-major order.
    pub fn projection_matrix(&self) -> Vec<f64> {
        self.angles_deg
            .iter()
            .flat_map(|&a| self.deposit_weights(a).expect("angles are in range"))
            .collect()
    }
}

/// `(cos θ, sin θ)` with the axis-aligned cases exact.
fn unit_direction(angle_deg: f64) -> (f64, f64) {
    if angle_deg == 0.0 {
        (1.0, 0.0)
    } else if angle_deg == 90.0 {
        (0.0, 1.0)
    } else {
        let r = angle_deg.to_radians();
        (r.cos(), r.sin())
    }
}

/// Project a `K×K` histogram onto the line at `angle_deg`.
pub fn project_histogram(h: &Histogram2d, angle_deg: f64, proj: &ProjectionSet) -> Result<Vec<f64>> {
    if h.side() != proj.side() {
        return Err(Error::LengthMismatch(h.side(), proj.side()));
    }
    let w = proj.deposit_weights(angle_deg)?;
    let cells = h.data().len();
    Ok((0..proj.bins())
        .map(|b| {
            w[b * cells..(b + 1) * cells]
                .iter()
                .zip(h.data())
                .map(|(a, v)| a * v)
                .sum()
        })
        .collect())
}

/// Projected EMD: mean over the projection set of the 1D EMD (unit spacing).
pub fn pemd(p: &Histogram2d, q: &Histogram2d, proj: &ProjectionSet) -> Result<f64> {
    if p.side() != q.side() {
        return Err(Error::LengthMismatch(p.side(), q.side()));
    }
    let p = Histogram2d::new(p.side(), normalize(p.data())?)?;
    let q = Histogram2d::new(q.side(), normalize(q.data())?)?;
    let mut total = 0.0;
    for &angle in proj.angles() {
        let pp = project_histogram(&p, angle, proj)?;
        let qp = project_histogram(&q, angle, proj)?;
        total += emd1d(&pp, &qp, 1.0)?;
    }
    Ok(total / proj.count() as f64)
}

/// Euclidean distances between the cell centers of a `K×K` grid, in class order.
pub fn grid_ground_distance(side: usize) -> Vec<f64> {
    let n = side * side;
    let mut c = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let dx = (a % side) as f64 - (b % side) as f64;
            let dy = (a / side) as f64 - (b / side) as f64;
            c[a * n + b] = dx.hypot(dy);
        }
    }
    c
}

/// Exact EMD between `K×K` histograms with Euclidean ground distance in grid units.
pub fn exact_emd2d(p: &Histogram2d, q: &Histogram2d) -> Result<TransportPlan> {
    if p.side() != q.side() {
        return Err(Error::LengthMismatch(p.side(), q.side()));
    }
    let (tp, tq) = (p.total(), q.total());
    if (tp - tq).abs() > MASS_TOL {
        return Err(Error::MassMismatch(tp - tq));
    }
    let a = normalize(p.data())?;
    let b = normalize(q.data())?;
    transport::solve(&a, &b, &grid_ground_distance(p.side()))
}

/// Random unit directions in class space for sliced Wasserstein.
#[derive(Clone, Debug)]
pub struct SwdDirections {
    dim: usize,
    /// `count × dim`, row-major.
    dirs: Vec<f64>,
}

impl SwdDirections {
    /// `count` normalized standard-normal draws in `dim` dimensions.
    pub fn sample<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Self {
        let mut dirs = Vec::with_capacity(count * dim);
        for _ in 0..count {
            let mut d: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            d.iter_mut().for_each(|v| *v /= norm);
            dirs.extend(d);
        }
        SwdDirections { dim, dirs }
    }

    pub fn count(&self) -> usize {
        self.dirs.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.dirs
    }

    pub fn direction(&self, k: usize) -> &[f64] {
        &self.dirs[k * self.dim..(k + 1) * self.dim]
    }
}

/// Sliced W1 between two batches of `N` probability rows of length `dim`.
///
/// `out1` and `out2` are row-major `N × dim`. The generator is taken by value;
/// pass `&mut rng` to keep drawing from the same stream afterwards.
pub fn swd_batch<R: Rng>(out1: &[f64], out2: &[f64], dim: usize, slices: usize, mut rng: R) -> Result<f64> {
    if dim == 0 || !out1.len().is_multiple_of(dim) || out1.is_empty() {
        return Err(Error::invalid("swd inputs must be non-empty N×dim batches"));
    }
    if out1.len() != out2.len() {
        return Err(Error::LengthMismatch(out1.len() / dim, out2.len() / dim));
    }
    for row in out1.chunks_exact(dim).chain(out2.chunks_exact(dim)) {
        let t: f64 = row.iter().sum();
        if (t - 1.0).abs() > MASS_TOL {
            return Err(Error::NotNormalized(t));
        }
    }
    let dirs = SwdDirections::sample(slices, dim, &mut rng);
    Ok(swd_with_directions(out1, out2, &dirs))
}

/// Sliced W1 for fixed directions.
pub fn swd_with_directions(out1: &[f64], out2: &[f64], dirs: &SwdDirections) -> f64 {
    let dim = dirs.dim();
    let n = out1.len() / dim;
    let mut total = 0.0;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for k in 0..dirs.count() {
        let d = dirs.direction(k);
        for (i, (r1, r2)) in out1.chunks_exact(dim).zip(out2.chunks_exact(dim)).enumerate() {
            a[i] = r1.iter().zip(d).map(|(x, y)| x * y).sum();
            b[i] = r2.iter().zip(d).map(|(x, y)| x * y).sum();
        }
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        total += a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    total / dirs.count() as f64
}

/// Diffusion distance with a 3×3 Gaussian (reflect padding) and 2× decimation.
///
/// Sums `‖d_l‖₁` for `d_0 = p − q` and `d_{l+1} = decimate(blur(d_l))`, over at
/// most `levels` terms, stopping once the map is 1×1.
pub fn diffusion_distance(p: &Histogram2d, q: &Histogram2d, sigma: f64, levels: usize) -> Result<f64> {
    if p.side() != q.side() {
        return Err(Error::LengthMismatch(p.side(), q.side()));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let mut side = p.side();
    let mut d: Vec<f64> = p.data().iter().zip(q.data()).map(|(a, b)| a - b).collect();
    let g1 = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k = [g1 / (1.0 + 2.0 * g1), 1.0 / (1.0 + 2.0 * g1), g1 / (1.0 + 2.0 * g1)];
    let mut total = 0.0;
    for level in 0..levels {
        total += d.iter().map(|v| v.abs()).sum::<f64>();
        if side == 1 || level + 1 == levels {
            break;
        }
        let blurred = blur3(&d, side, &k);
        let next = side.div_ceil(2);
        d = (0..next)
            .flat_map(|y| (0..next).map(move |x| (x, y)))
            .map(|(x, y)| blurred[2 * y * side + 2 * x])
            .collect();
        side = next;
    }
    Ok(total)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Separable 3-tap blur.
fn blur3(d: &[f64], side: usize, k: &[f64; 3]) -> Vec<f64> {
    let mut tmp = vec![0.0; d.len()];
    for y in 0..side {
        for x in 0..side {
            tmp[y * side + x] = (0..3)
                .map(|t| k[t] * d[y * side + reflect(x as isize + t as isize - 1, side)])
                .sum();
        }
    }
    let mut out = vec![0.0; d.len()];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = (0..3)
                .map(|t| k[t] * tmp[reflect(y as isize + t as isize - 1, side) * side + x])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn delta(n: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        v
    }

    #[test]
    fn emd1d_basics() {
        let p = [0.1, 0.4, 0.5];
        assert_eq!(emd1d(&p, &p, 1.0).unwrap(), 0.0);
        assert!((emd1d(&delta(5, 0), &delta(5, 3), 1.0).unwrap() - 3.0).abs() < 1e-15);
        assert!((emd1d(&delta(5, 0), &delta(5, 3), 0.5).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(emd1d(&p, &[0.5, 0.5], 1.0), Err(Error::LengthMismatch(3, 2))));
        assert!(emd1d(&[1.1, -0.1], &[0.5, 0.5], 1.0).is_err());
        assert!(emd1d(&[0.5, 0.4], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn projection_set_layout() {
        let p16 = ProjectionSet::new(16, 5).unwrap();
        assert_eq!(p16.bins(), 7);
        assert_eq!(p16.angles()[0], 0.0);
        assert_eq!(p16.angles()[15], 90.0);
        assert!((p16.angles()[1] - 6.0).abs() < 1e-12);
        assert_eq!(ProjectionSet::new(2, 5).unwrap().angles(), &[0.0, 90.0]);
        assert_eq!(p16.bin_centers(), vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn axis_projections_are_marginals() {
        let proj = ProjectionSet::new(2, 5).unwrap();
        let h = Histogram2d::from_fn(5, |x, y| (1 + x + 3 * y) as f64);
        let h = h.normalized().unwrap();
        let px = project_histogram(&h, 0.0, &proj).unwrap();
        let py = project_histogram(&h, 90.0, &proj).unwrap();
        assert_eq!(px[0], 0.0);
        assert_eq!(px[6], 0.0);
        for i in 0..5 {
            let col: f64 = (0..5).map(|y| h.get(i, y)).sum();
            let row: f64 = (0..5).map(|x| h.get(x, i)).sum();
            assert!((px[i + 1] - col).abs() < 1e-15);
            assert!((py[i + 1] - row).abs() < 1e-15);
        }
        assert!(project_histogram(&h, 91.0, &proj).is_err());
        assert!(project_histogram(&h, -1.0, &proj).is_err());
    }

    #[test]
    fn diagonal_projection_splits_linearly() {
        let proj = ProjectionSet::new(16, 5).unwrap();
        // centered (1, 1) is cell (3, 3)
        let h = Histogram2d::point_mass(5, 3, 3);
        let v = project_histogram(&h, 45.0, &proj).unwrap();
        let s = std::f64::consts::SQRT_2;
        // bin centers -3..3 live at indices 0..6; center 1 is index 4
        assert!((v[4] - (2.0 - s)).abs() < 1e-12);
        assert!((v[5] - (s - 1.0)).abs() < 1e-12);
        assert!((v[4] - 0.58579).abs() < 1e-5 && (v[5] - 0.41421).abs() < 1e-5);
    }

    #[test]
    fn pemd_two_projections_on_point_masses() {
        let proj = ProjectionSet::new(2, 5).unwrap();
        let p = Histogram2d::point_mass(5, 0, 0);
        for (dx, dy) in [(1, 0), (2, 3), (4, 4), (0, 1)] {
            let q = Histogram2d::point_mass(5, dx, dy);
            let got = pemd(&p, &q, &proj).unwrap();
            assert!((got - (dx + dy) as f64 / 2.0).abs() < 1e-12);
        }
        assert_eq!(pemd(&p, &p, &proj).unwrap(), 0.0);
    }

    #[test]
    fn exact_emd2d_examples() {
        let p = Histogram2d::point_mass(5, 0, 0);
        let q = Histogram2d::point_mass(5, 3, 4);
        assert!((exact_emd2d(&p, &q).unwrap().cost - 5.0).abs() < 1e-12);
        let same = exact_emd2d(&p, &p).unwrap();
        assert_eq!(same.cost, 0.0);
        let split = Histogram2d::from_fn(5, |x, y| if y == 0 && (x == 0 || x == 2) { 0.5 } else { 0.0 });
        let mid = Histogram2d::point_mass(5, 1, 0);
        assert!((exact_emd2d(&split, &mid).unwrap().cost - 1.0).abs() < 1e-12);
        let half = Histogram2d::from_fn(5, |_, _| 0.5 / 25.0);
        assert!(matches!(exact_emd2d(&p, &half), Err(Error::MassMismatch(_))));
    }

    #[test]
    fn swd_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<f64> = (0..3)
            .flat_map(|i| {
                let mut r = vec![0.02; 25];
                r[i] += 0.5;
                r
            })
            .collect();
        assert_eq!(swd_batch(&rows, &rows, 25, 128, &mut rng).unwrap(), 0.0);
        let permuted: Vec<f64> = [2, 0, 1].iter().flat_map(|&i| rows[i * 25..(i + 1) * 25].to_vec()).collect();
        assert!(swd_batch(&rows, &permuted, 25, 128, &mut rng).unwrap() < 1e-6);
        // single row: mean |<a − b, d>|
        let a = &rows[..25];
        let b = &rows[25..50];
        let seed_rng = ChaCha8Rng::seed_from_u64(9);
        let got = swd_batch(a, b, 25, 32, seed_rng.clone()).unwrap();
        let dirs = SwdDirections::sample(32, 25, &mut seed_rng.clone());
        let want = (0..32)
            .map(|k| {
                a.iter()
                    .zip(b)
                    .zip(dirs.direction(k))
                    .map(|((x, y), d)| (x - y) * d)
                    .sum::<f64>()
                    .abs()
            })
            .sum::<f64>()
            / 32.0;
        assert!((got - want).abs() < 1e-12);
        assert!(swd_batch(&rows, a, 25, 4, &mut rng).is_err());
    }

    #[test]
    fn diffusion_distance_properties() {
        let p = Histogram2d::from_fn(5, |x, y| (1 + x * y) as f64).normalized().unwrap();
        let q = Histogram2d::from_fn(5, |x, y| (1 + x + 2 * y) as f64).normalized().unwrap();
        assert_eq!(diffusion_distance(&p, &p, 0.5, 10).unwrap(), 0.0);
        let l1: f64 = p.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs()).sum();
        assert_eq!(diffusion_distance(&p, &q, 0.5, 1).unwrap(), l1);
        let pq = diffusion_distance(&p, &q, 0.5, 10).unwrap();
        let qp = diffusion_distance(&q, &p, 0.5, 10).unwrap();
        assert_eq!(pq.to_bits(), qp.to_bits());
        assert!(pq > l1);
    }
}
