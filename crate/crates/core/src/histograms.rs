//! The quantised displacement label space and its probability maps.
//!
//! Class indices are y-major: `index = iy·K + ix`, where `ix` selects the
//! horizontal displacement and `iy` the vertical one.

use crate::error::{Error, Result};

/// Per-axis displacement values (in full-resolution pixels) of a `K×K` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DisplacementGrid {
    values: Vec<i32>,
}

impl Default for DisplacementGrid {
    fn default() -> Self {
        DisplacementGrid { values: vec![-38, -19, 0, 19, 38] }
    }
}

impl DisplacementGrid {
    /// Values must be strictly increasing and symmetric about zero.
    pub fn new(values: Vec<i32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("displacement grid needs at least one value"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("displacements {values:?} are not strictly increasing")));
        }
        let k = values.len();
        if (0..k).any(|i| values[i] != -values[k - 1 - i]) {
            return Err(Error::invalid(format!("displacements {values:?} are not symmetric about 0")));
        }
        Ok(DisplacementGrid { values })
    }

    pub fn side(&self) -> usize {
        self.values.len()
    }

    pub fn class_count(&self) -> usize {
        self.side() * self.side()
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn max_abs(&self) -> i32 {
        *self.values.last().unwrap()
    }

    /// `(ix, iy)` grid cell of a class.
    pub fn class_to_cell(&self, index: usize) -> Result<(usize, usize)> {
        if index >= self.class_count() {
            return Err(Error::invalid(format!(
                "class {index} out of range for {} classes",
                self.class_count()
            )));
        }
        Ok((index % self.side(), index / self.side()))
    }

    /// `(dx, dy)` in pixels.
    pub fn class_to_displacement(&self, index: usize) -> Result<(i32, i32)> {
        let (ix, iy) = self.class_to_cell(index)?;
        Ok((self.values[ix], self.values[iy]))
    }

    pub fn displacement_to_class(&self, dx: i32, dy: i32) -> Result<usize> {
        let find = |v: i32| {
            self.values
                .iter()
                .position(|&u| u == v)
                .ok_or_else(|| Error::invalid(format!("displacement {v} is not on the grid")))
        };
        Ok(find(dy)? * self.side() + find(dx)?)
    }
}

/// Normalized probabilities over the `K²` displacement classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = probs.iter().enumerate().find(|(_, &p)| !(p >= 0.0)) {
            return Err(Error::NegativeMass { index, value });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::NotNormalized(total));
        }
        Ok(ClassDistribution { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        ClassDistribution { probs: vec![1.0 / classes as f64; classes] }
    }

    pub fn one_hot(classes: usize, index: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[index] = 1.0;
        ClassDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// First index of the maximum probability.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `softmax(temperature_scale · logits)` computed in double precision.
///
/// Classification losses use scale 1.0; discrepancy measures use 0.1.
pub fn logits_to_distribution(logits: &[f32], temperature_scale: f64) -> Result<ClassDistribution> {
    if !(temperature_scale > 0.0 && temperature_scale.is_finite()) {
        return Err(Error::invalid(format!("temperature scale must be positive, got {temperature_scale}")));
    }
    if logits.is_empty() {
        return Err(Error::invalid("empty logit vector"));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite logit {bad}")));
    }
    let scaled: Vec<f64> = logits.iter().map(|&z| z as f64 * temperature_scale).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ClassDistribution { probs: exps.into_iter().map(|e| e / total).collect() })
}

/// A `K×K` histogram stored row-major: entry `(iy, ix)` at `iy·K + ix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram2d {
    side: usize,
    data: Vec<f64>,
}

impl Histogram2d {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || data.len() != side * side {
            return Err(Error::LengthMismatch(data.len(), side * side));
        }
        Ok(Histogram2d { side, data })
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(side * side);
        for iy in 0..side {
            for ix in 0..side {
                data.push(f(ix, iy));
            }
        }
        Histogram2d { side, data }
    }

    /// Unit mass at `(ix, iy)`.
    pub fn point_mass(side: usize, ix: usize, iy: usize) -> Self {
        Self::from_fn(side, |x, y| if x == ix && y == iy { 1.0 } else { 0.0 })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.data[iy * self.side + ix]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Flatten back to class order.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    /// Scaled to unit mass; `None` when the total is not positive.
    pub fn normalized(&self) -> Option<Self> {
        let t = self.total();
        (t > 0.0).then(|| Histogram2d { side: self.side, data: self.data.iter().map(|v| v / t).collect() })
    }
}

/// View a class distribution as its `K×K` spatial probability map.
pub fn to_spatial_map(d: &ClassDistribution) -> Result<Histogram2d> {
    let n = d.probs.len();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::invalid(format!("{n} classes do not form a square grid")));
    }
    Histogram2d::new(side, d.probs.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn class_index_convention() {
        let g = DisplacementGrid::default();
        assert_eq!(g.class_to_displacement(12).unwrap(), (0, 0));
        assert_eq!(g.class_to_displacement(0).unwrap(), (-38, -38));
        assert_eq!(g.class_to_displacement(24).unwrap(), (38, 38));
        // y-major: index 1 moves along x, index 5 along y
        assert_eq!(g.class_to_displacement(1).unwrap(), (-19, -38));
        assert_eq!(g.class_to_displacement(5).unwrap(), (-38, -19));
        assert!(g.class_to_displacement(25).is_err());
        for i in 0..25 {
            let (dx, dy) = g.class_to_displacement(i).unwrap();
            assert_eq!(g.displacement_to_class(dx, dy).unwrap(), i);
        }
    }

    #[test]
    fn grid_validation() {
        assert!(DisplacementGrid::new(vec![-1, 0, 2]).is_err());
        assert!(DisplacementGrid::new(vec![0, 0]).is_err());
        assert!(DisplacementGrid::new(vec![-4, 4]).is_ok());
    }

    #[test]
    fn zero_logits_give_uniform() {
        for scale in [0.1, 1.0, 3.0] {
            let d = logits_to_distribution(&[0.0; 25], scale).unwrap();
            assert!(d.probs().iter().all(|&p| (p - 0.04).abs() < 1e-15));
        }
    }

    #[test]
    fn scaled_single_peak() {
        let mut z = [0.0f32; 25];
        z[3] = 10.0;
        let d = logits_to_distribution(&z, 0.1).unwrap();
        let e = std::f64::consts::E;
        let want = e / (e + 24.0);
        assert!((d.probs()[3] - want).abs() < 1e-12);
        assert!((want - 0.1017).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(logits_to_distribution(&[f32::NAN, 0.0], 1.0).is_err());
        assert!(logits_to_distribution(&[0.0, 1.0], 0.0).is_err());
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ClassDistribution::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn spatial_map_layout() {
        let u = to_spatial_map(&ClassDistribution::uniform(25)).unwrap();
        assert!(u.data().iter().all(|&v| v == 1.0 / 25.0));
        let c = to_spatial_map(&ClassDistribution::one_hot(25, 12)).unwrap();
        assert_eq!(c.get(2, 2), 1.0);
        assert_eq!(c.total(), 1.0);
        let g = DisplacementGrid::default();
        let (dx, dy) = g.class_to_displacement(7).unwrap();
        let m = to_spatial_map(&ClassDistribution::one_hot(25, 7)).unwrap();
        let (ix, iy) = g.class_to_cell(7).unwrap();
        assert_eq!(m.get(ix, iy), 1.0);
        assert_eq!((g.values()[ix], g.values()[iy]), (dx, dy));
    }

    #[test]
    fn lower_scale_never_lowers_entropy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let z: Vec<f32> = (0..25).map(|_| rng.random_range(-10.0..10.0)).collect();
            let soft = logits_to_distribution(&z, 0.1).unwrap().entropy();
            let sharp = logits_to_distribution(&z, 1.0).unwrap().entropy();
            assert!(soft >= sharp - 1e-12);
        }
    }

    proptest! {
        #[test]
        fn temperature_preserves_argmax(z in proptest::collection::vec(-50.0f32..50.0, 25)) {
            let best = argmax(&z);
            prop_assume!(z.iter().enumerate().all(|(i, &v)| i == best || v < z[best]));
            let d = logits_to_distribution(&z, 0.1).unwrap();
            prop_assert_eq!(d.argmax(), best);
        }

        #[test]
        fn spatial_round_trip_is_exact(raw in proptest::collection::vec(0.0f64..1.0, 25)) {
            let t: f64 = raw.iter().sum();
            prop_assume!(t > 0.0);
            let probs: Vec<f64> = raw.iter().map(|v| v / t).collect();
            let d = ClassDistribution::new(probs.clone()).unwrap();
            let m = to_spatial_map(&d).unwrap();
            prop_assert_eq!(m.flatten(), probs);
            prop_assert_eq!(m.total().to_bits(), d.probs().iter().sum::<f64>().to_bits());
        }
    }
}
