//! Synthetic two-modality images, patch-pair sampling and the dataset file.
//!
//! Images are sums of anisotropic Gaussian blobs and flat polygons, smoothed
//! and rescaled to `[0, 1]`. Domain A keeps intensities as they are and
//! standardizes patches with the whole image's mean and variance. Domain B
//! remaps intensities with a decreasing nonlinear curve and standardizes every
//! patch by its own statistics.
//!
//! A pair is a fixed 77×77 window and a moving window displaced by one of the
//! grid's displacement classes, optionally warped by a small affine, then
//! cropped to 76×76 and 2×2 mean-pooled to 38×38. Geometry is sampled once per
//! pair index and reused for both domains, so domain A and domain B datasets
//! written from the same seed are aligned index by index.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::histograms::DisplacementGrid;
use crate::model::ByteReader;
use crate::rng::{child_seed, stream};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 256;
pub const WINDOW: usize = 77;
pub const PATCH_SIDE: usize = 38;
pub const MIN_WINDOW_STD: f64 = 0.02;
pub const MAX_RETRIES: usize = 100;

/// Rotation, scale and shear ranges of the moving-window augmentation.
pub const MAX_ROTATION_DEG: f64 = 8.0;
pub const SCALE_RANGE: (f64, f64) = (0.92, 1.08);
pub const MAX_SHEAR: f64 = 0.08;

/// Grey-level image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceImage {
    pub side: usize,
    pub seed: u64,
    pub data: Vec<f32>,
}

impl SourceImage {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.side + x]
    }

    /// Mean and standard deviation of all pixels.
    pub fn stats(&self) -> (f64, f64) {
        mean_std(self.data.iter().map(|&v| v as f64))
    }

    /// Smallest standard deviation over every `window`×`window` sub-window.
    pub fn min_window_std(&self, window: usize) -> f64 {
        let n = self.side;
        let w = n + 1;
        let mut s1 = vec![0.0f64; w * w];
        let mut s2 = vec![0.0f64; w * w];
        for y in 0..n {
            for x in 0..n {
                let v = self.at(x, y) as f64;
                s1[(y + 1) * w + x + 1] = v + s1[y * w + x + 1] + s1[(y + 1) * w + x] - s1[y * w + x];
                s2[(y + 1) * w + x + 1] = v * v + s2[y * w + x + 1] + s2[(y + 1) * w + x] - s2[y * w + x];
            }
        }
        let area = (window * window) as f64;
        let mut best = f64::INFINITY;
        for y in 0..=n - window {
            for x in 0..=n - window {
                let rect = |s: &[f64]| s[(y + window) * w + x + window] - s[y * w + x + window] - s[(y + window) * w + x] + s[y * w + x];
                let m = rect(&s1) / area;
                let var = (rect(&s2) / area - m * m).max(0.0);
                best = best.min(var.sqrt());
            }
        }
        best
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn render(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![0.0f64; side * side];
    let extent = side as f64;

    let blobs = rng.random_range(20..=40);
    for _ in 0..blobs {
        let (cx, cy) = (rng.random_range(0.0..extent), rng.random_range(0.0..extent));
        let (sx, sy): (f64, f64) = (rng.random_range(4.0..28.0), rng.random_range(4.0..28.0));
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let amp = rng.random_range(0.3..1.0);
        let (c, s) = (theta.cos(), theta.sin());
        let reach = 3.5 * sx.max(sy);
        let (x0, x1) = (((cx - reach).floor().max(0.0)) as usize, ((cx + reach).ceil().min(extent - 1.0)) as usize);
        let (y0, y1) = (((cy - reach).floor().max(0.0)) as usize, ((cy + reach).ceil().min(extent - 1.0)) as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let u = (c * dx + s * dy) / sx;
                let v = (-s * dx + c * dy) / sy;
                img[y * side + x] += amp * (-0.5 * (u * u + v * v)).exp();
            }
        }
    }

    let polygons = rng.random_range(3..=6);
    for _ in 0..polygons {
        let (cx, cy) = (rng.random_range(0.0..extent), rng.random_range(0.0..extent));
        let vertices = rng.random_range(3..=7);
        let mut angles: Vec<f64> = (0..vertices).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let poly: Vec<(f64, f64)> = angles
            .iter()
            .map(|&a| {
                let r = rng.random_range(15.0..55.0);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let level = rng.random_range(0.4..1.2);
        for y in 0..side {
            for x in 0..side {
                if inside(&poly, x as f64, y as f64) {
                    img[y * side + x] += level;
                }
            }
        }
    }

    let img = blur(&img, side, 1.5);
    let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    img.into_iter().map(|v| (v - lo) / span).collect()
}

/// Even-odd rule.
fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

/// Separable Gaussian blur with mirrored borders.
fn blur(img: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / ks).collect();
    let n = side as isize;
    let mirror = |i: isize| -> usize {
        let i = if i < 0 { -i - 1 } else { i };
        (if i >= n { 2 * n - i - 1 } else { i }) as usize
    };
    let mut tmp = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            tmp[y * side + x] = (-r..=r).map(|d| k[(d + r) as usize] * img[y * side + mirror(x as isize + d)]).sum();
        }
    }
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = (-r..=r).map(|d| k[(d + r) as usize] * tmp[mirror(y as isize + d) * side + x]).sum();
        }
    }
    out
}

/// Deterministic in `seed`. Draws are rejected while some 77×77 window has a
/// standard deviation below 0.02; after 100 rejections the draw with the
/// largest minimum window deviation is kept.
pub fn generate_image(seed: u64) -> SourceImage {
    generate_image_sized(seed, IMAGE_SIDE)
}

pub fn generate_image_sized(seed: u64, side: usize) -> SourceImage {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for attempt in 0..=MAX_RETRIES {
        let mut rng = stream(child_seed(seed, &format!("attempt/{attempt}")), "image");
        let img = render(side, &mut rng);
        let candidate = SourceImage { side, seed, data: img.iter().map(|&v| v as f32).collect() };
        let score = if side >= WINDOW { candidate.min_window_std(WINDOW) } else { f64::INFINITY };
        if score >= MIN_WINDOW_STD {
            return candidate;
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, img));
        }
    }
    let img = best.unwrap().1;
    SourceImage { side, seed, data: img.iter().map(|&v| v as f32).collect() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn code(self) -> u8 {
        match self {
            Domain::A => 0,
            Domain::B => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Domain::A),
            1 => Some(Domain::B),
            _ => None,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Domain::A => 'A',
            Domain::B => 'B',
        }
    }
}

/// Intensity curve of domain B: `0.8·(1 − v^0.4) + 0.2·v^0.4`.
pub fn domain_b_remap(v: f64) -> f64 {
    let w = v.max(0.0).powf(0.4);
    0.8 * (1.0 - w) + 0.2 * w
}

pub fn modality_transform(image: &SourceImage, domain: Domain) -> SourceImage {
    match domain {
        Domain::A => image.clone(),
        Domain::B => SourceImage {
            side: image.side,
            seed: image.seed,
            data: image.data.iter().map(|&v| domain_b_remap(v as f64) as f32).collect(),
        },
    }
}

/// Small affine applied to the moving window around its center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear: f64,
}

impl Affine {
    /// Row-major 2×2 map from window offsets to image offsets.
    pub fn matrix(&self) -> [f64; 4] {
        let t = self.rotation_deg.to_radians();
        let (c, s) = (t.cos(), t.sin());
        let k = self.scale;
        // rotation · shear · scale
        [k * c, k * (c * self.shear - s), k * s, k * (s * self.shear + c)]
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Affine {
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            shear: rng.random_range(-MAX_SHEAR..=MAX_SHEAR),
        }
    }
}

/// Where a pair is cut from an image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairGeometry {
    pub fixed_center: (usize, usize),
    pub label: usize,
    pub affine: Option<Affine>,
}

/// Distance kept between a window center and the image border so that a
/// warped window, its displacement and bilinear support stay inside.
pub fn center_margin(grid: &DisplacementGrid) -> usize {
    let half = (WINDOW / 2) as f64;
    let stretch = SCALE_RANGE.1 * (1.0 + MAX_SHEAR);
    (half * std::f64::consts::SQRT_2 * stretch).ceil() as usize + 1 + grid.max_abs() as usize
}

pub fn sample_geometry(side: usize, grid: &DisplacementGrid, rng: &mut ChaCha8Rng, augment: bool) -> Result<PairGeometry> {
    let m = center_margin(grid);
    if side < 2 * m + 1 {
        return Err(Error::invalid(format!("a {side}-pixel image is too small for windows with margin {m}")));
    }
    let x = rng.random_range(m..side - m);
    let y = rng.random_range(m..side - m);
    let label = rng.random_range(0..grid.class_count());
    let affine = augment.then(|| Affine::sample(rng));
    Ok(PairGeometry { fixed_center: (x, y), label, affine })
}

fn bilinear(img: &SourceImage, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let (x1, y1) = ((x0 + 1).min(img.side - 1), (y0 + 1).min(img.side - 1));
    let p = |x, y| img.at(x, y) as f64;
    (1.0 - fy) * ((1.0 - fx) * p(x0, y0) + fx * p(x1, y0)) + fy * ((1.0 - fx) * p(x0, y1) + fx * p(x1, y1))
}

/// 76×76 crop of the 77×77 window at `center` (last row and column dropped),
/// 2×2 mean-pooled to 38×38.
fn cut(img: &SourceImage, center: (usize, usize), affine: Option<&Affine>) -> Vec<f64> {
    let half = (WINDOW / 2) as isize;
    let crop = 2 * PATCH_SIDE;
    let mut window = vec![0.0f64; crop * crop];
    for r in 0..crop {
        for c in 0..crop {
            let (du, dv) = (c as isize - half, r as isize - half);
            window[r * crop + c] = match affine {
                None => img.at((center.0 as isize + du) as usize, (center.1 as isize + dv) as usize) as f64,
                Some(a) => {
                    let m = a.matrix();
                    let (du, dv) = (du as f64, dv as f64);
                    let x = center.0 as f64 + m[0] * du + m[1] * dv;
                    let y = center.1 as f64 + m[2] * du + m[3] * dv;
                    bilinear(img, x, y)
                }
            };
        }
    }
    let mut out = vec![0.0f64; PATCH_SIDE * PATCH_SIDE];
    for r in 0..PATCH_SIDE {
        for c in 0..PATCH_SIDE {
            let s = window[2 * r * crop + 2 * c]
                + window[2 * r * crop + 2 * c + 1]
                + window[(2 * r + 1) * crop + 2 * c]
                + window[(2 * r + 1) * crop + 2 * c + 1];
            out[r * PATCH_SIDE + c] = s / 4.0;
        }
    }
    out
}

/// Mean 0, variance 1 with the given statistics, or the patch's own when `None`.
fn standardize(patch: &[f64], stats: Option<(f64, f64)>) -> Vec<f32> {
    let (m, s) = stats.unwrap_or_else(|| mean_std(patch.iter().copied()));
    let s = s.max(1e-12);
    patch.iter().map(|&v| ((v - m) / s) as f32).collect()
}

/// One fixed/moving pair in a given domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub fixed: Vec<f32>,
    pub moving: Vec<f32>,
    pub label: u8,
    pub domain_fixed: Domain,
    pub domain_moving: Domain,
}

/// An image already transformed to its domain, with the statistics that
/// domain's patch standardization uses.
pub struct DomainImage {
    pub domain: Domain,
    pub image: SourceImage,
    global: (f64, f64),
}

impl DomainImage {
    pub fn new(source: &SourceImage, domain: Domain) -> Self {
        let image = modality_transform(source, domain);
        let global = image.stats();
        DomainImage { domain, image, global }
    }

    fn patch(&self, center: (usize, usize), affine: Option<&Affine>) -> Vec<f32> {
        let raw = cut(&self.image, center, affine);
        match self.domain {
            Domain::A => standardize(&raw, Some(self.global)),
            Domain::B => standardize(&raw, None),
        }
    }

    /// Extract the pair described by `geometry`.
    pub fn extract(&self, geometry: &PairGeometry, grid: &DisplacementGrid) -> Result<PatchPair> {
        let (dx, dy) = grid.class_to_displacement(geometry.label)?;
        let (cx, cy) = geometry.fixed_center;
        let moving_center = ((cx as i64 + dx as i64) as usize, (cy as i64 + dy as i64) as usize);
        Ok(PatchPair {
            fixed: self.patch(geometry.fixed_center, None),
            moving: self.patch(moving_center, geometry.affine.as_ref()),
            label: geometry.label as u8,
            domain_fixed: self.domain,
            domain_moving: self.domain,
        })
    }
}

/// Sample a geometry and extract the pair from `image` in `domain`.
pub fn sample_patch_pair(
    image: &SourceImage,
    domain: Domain,
    grid: &DisplacementGrid,
    rng: &mut ChaCha8Rng,
    augment: bool,
) -> Result<PatchPair> {
    let g = sample_geometry(image.side, grid, rng, augment)?;
    DomainImage::new(image, domain).extract(&g, grid)
}

/// Tensors for a list of pairs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub fixed: Tensor<f32>,
    pub moving: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// A labelled list of pairs with common patch and grid sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    side: usize,
    grid_side: usize,
    pairs: Vec<PatchPair>,
}

/// Fixed/moving domain combination used for evaluation and target sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pairing {
    pub fixed: Domain,
    pub moving: Domain,
}

impl Pairing {
    pub const AA: Pairing = Pairing { fixed: Domain::A, moving: Domain::A };
    pub const BA: Pairing = Pairing { fixed: Domain::B, moving: Domain::A };
    pub const AB: Pairing = Pairing { fixed: Domain::A, moving: Domain::B };
    pub const BB: Pairing = Pairing { fixed: Domain::B, moving: Domain::B };
    pub const ALL: [Pairing; 4] = [Pairing::AA, Pairing::BA, Pairing::AB, Pairing::BB];
    /// The three pairings that involve domain B.
    pub const CROSS: [Pairing; 3] = [Pairing::BA, Pairing::AB, Pairing::BB];

    pub fn name(self) -> String {
        format!("{}{}", self.fixed.letter(), self.moving.letter())
    }

    pub fn involves_b(self) -> bool {
        self.fixed == Domain::B || self.moving == Domain::B
    }
}

impl PairSet {
    pub fn new(side: usize, grid_side: usize, pairs: Vec<PatchPair>) -> Result<Self> {
        let n = side * side;
        let classes = grid_side * grid_side;
        for (i, p) in pairs.iter().enumerate() {
            if p.fixed.len() != n || p.moving.len() != n {
                return Err(Error::invalid(format!("pair {i} does not have {side}×{side} patches")));
            }
            if p.label as usize >= classes {
                return Err(Error::invalid(format!("pair {i} has label {} outside {classes} classes", p.label)));
            }
        }
        Ok(PairSet { side, grid_side, pairs })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[PatchPair] {
        &self.pairs
    }

    /// Pairs `range` as a new set.
    pub fn slice(&self, range: std::ops::Range<usize>) -> PairSet {
        PairSet { side: self.side, grid_side: self.grid_side, pairs: self.pairs[range].to_vec() }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let n = self.side * self.side;
        let mut fixed = Vec::with_capacity(indices.len() * n);
        let mut moving = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = &self.pairs[i];
            fixed.extend_from_slice(&p.fixed);
            moving.extend_from_slice(&p.moving);
            labels.push(p.label as usize);
        }
        let shape = [indices.len(), 1, self.side, self.side];
        Batch { fixed: Tensor::new(shape, fixed), moving: Tensor::new(shape, moving), labels }
    }

    /// Fixed patches from `fixed_set`, moving patches from `moving_set`, index
    /// by index. Both sets must come from the same geometry (same seed).
    pub fn combine(fixed_set: &PairSet, moving_set: &PairSet) -> Result<PairSet> {
        if fixed_set.len() != moving_set.len() || fixed_set.side != moving_set.side || fixed_set.grid_side != moving_set.grid_side {
            return Err(Error::invalid("sets to combine differ in size"));
        }
        let pairs = fixed_set
            .pairs
            .iter()
            .zip(&moving_set.pairs)
            .enumerate()
            .map(|(i, (f, m))| {
                if f.label != m.label {
                    return Err(Error::invalid(format!("pair {i}: labels {} and {} differ, sets are not aligned", f.label, m.label)));
                }
                Ok(PatchPair {
                    fixed: f.fixed.clone(),
                    moving: m.moving.clone(),
                    label: f.label,
                    domain_fixed: f.domain_fixed,
                    domain_moving: m.domain_moving,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairSet { side: fixed_set.side, grid_side: fixed_set.grid_side, pairs })
    }

    /// The pairing drawn from aligned single-domain sets `a` and `b`.
    pub fn pairing(a: &PairSet, b: &PairSet, pairing: Pairing) -> Result<PairSet> {
        let pick = |d: Domain| if d == Domain::A { a } else { b };
        Self::combine(pick(pairing.fixed), pick(pairing.moving))
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.side * self.side;
        let mut out = Vec::with_capacity(16 + self.pairs.len() * (8 * n + 4));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.pairs.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.side as u16).to_le_bytes());
        out.extend_from_slice(&(self.grid_side as u16).to_le_bytes());
        for p in &self.pairs {
            for v in p.fixed.iter().chain(&p.moving) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&[p.label, p.domain_fixed.code(), p.domain_moving.code(), 0]);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(r.error(0, format!("bad magic {magic:?}, expected \"PEMD\"")));
        }
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(r.error(4, format!("unsupported dataset version {version}")));
        }
        let count = r.u32("pair count")? as usize;
        let side = r.u16("patch side")? as usize;
        let grid_side = r.u16("grid side")? as usize;
        if side == 0 || grid_side == 0 || grid_side * grid_side > 256 {
            return Err(r.error(12, format!("invalid sizes: patch side {side}, grid side {grid_side}")));
        }
        let n = side * side;
        let record = 8 * n + 4;
        let expected = 16 + count * record;
        if bytes.len() != expected {
            return Err(r.error(
                bytes.len().min(expected) as u64,
                format!("file has {} bytes, header promises {expected}", bytes.len()),
            ));
        }
        let floats = |raw: &[u8]| -> Vec<f32> { raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect() };
        let mut pairs = Vec::with_capacity(count);
        for i in 0..count {
            let start = r.pos as u64;
            let fixed = floats(r.take(4 * n, "fixed patch")?);
            let moving = floats(r.take(4 * n, "moving patch")?);
            let tail = r.take(4, "pair trailer")?;
            let (label, df, dm, pad) = (tail[0], tail[1], tail[2], tail[3]);
            if label as usize >= grid_side * grid_side {
                return Err(r.error(start, format!("pair {i} has label {label} outside the grid")));
            }
            let (Some(domain_fixed), Some(domain_moving)) = (Domain::from_code(df), Domain::from_code(dm)) else {
                return Err(r.error(start, format!("pair {i} has unknown domain codes {df}, {dm}")));
            };
            if pad != 0 {
                return Err(r.error(start, format!("pair {i} has nonzero padding byte")));
            }
            pairs.push(PatchPair { fixed, moving, label, domain_fixed, domain_moving });
        }
        Ok(PairSet { side, grid_side, pairs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::invalid("refusing to write an empty dataset"));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"PEMD";
pub const DATASET_VERSION: u32 = 1;

/// Sizes of a generated benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub image_count: usize,
    pub image_side: usize,
    pub pairs_per_modality: usize,
    pub train_count: usize,
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { image_count: 9, image_side: IMAGE_SIDE, pairs_per_modality: 5120, train_count: 4096, augment: true }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_count == 0 || self.pairs_per_modality == 0 {
            return Err(Error::Config("image_count and pairs_per_modality must be positive".into()));
        }
        if self.train_count == 0 || self.train_count >= self.pairs_per_modality {
            return Err(Error::Config(format!(
                "train_count must be in 1..{}, got {}",
                self.pairs_per_modality, self.train_count
            )));
        }
        Ok(())
    }
}

/// Train/test splits of both domains, aligned index by index.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub a_train: PairSet,
    pub a_test: PairSet,
    pub b_train: PairSet,
    pub b_test: PairSet,
}

pub const DATASET_FILES: [&str; 4] = ["domain_a_train.pemd", "domain_a_test.pemd", "domain_b_train.pemd", "domain_b_test.pemd"];

impl Datasets {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (set, name) in [&self.a_train, &self.a_test, &self.b_train, &self.b_test].into_iter().zip(DATASET_FILES) {
            set.save(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| PairSet::load(&dir.join(name));
        Ok(Datasets {
            a_train: load(DATASET_FILES[0])?,
            a_test: load(DATASET_FILES[1])?,
            b_train: load(DATASET_FILES[2])?,
            b_test: load(DATASET_FILES[3])?,
        })
    }
}

/// Images `0..image_count` (image `k` from seed `k`), pairs sampled from the
/// `seed`-derived stream, pair `i` cut from image `i mod image_count`.
pub fn generate_datasets(seed: u64, config: &DataConfig) -> Result<Datasets> {
    config.validate()?;
    let grid = DisplacementGrid::default();
    let images: Vec<(DomainImage, DomainImage)> = (0..config.image_count)
        .map(|k| {
            let img = generate_image_sized(k as u64, config.image_side);
            (DomainImage::new(&img, Domain::A), DomainImage::new(&img, Domain::B))
        })
        .collect();
    let mut rng = stream(seed, "data/pairs");
    let mut a = Vec::with_capacity(config.pairs_per_modality);
    let mut b = Vec::with_capacity(config.pairs_per_modality);
    for i in 0..config.pairs_per_modality {
        let (ia, ib) = &images[i % config.image_count];
        let g = sample_geometry(config.image_side, &grid, &mut rng, config.augment)?;
        a.push(ia.extract(&g, &grid)?);
        b.push(ib.extract(&g, &grid)?);
    }
    let split = config.train_count;
    let b_test = b.split_off(split);
    let a_test = a.split_off(split);
    let g = grid.side();
    Ok(Datasets {
        a_train: PairSet::new(PATCH_SIDE, g, a)?,
        a_test: PairSet::new(PATCH_SIDE, g, a_test)?,
        b_train: PairSet::new(PATCH_SIDE, g, b)?,
        b_test: PairSet::new(PATCH_SIDE, g, b_test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remap_endpoints_and_monotonicity() {
        assert!((domain_b_remap(0.0) - 0.8).abs() < 1e-12);
        assert!((domain_b_remap(1.0) - 0.2).abs() < 1e-12);
        let vals: Vec<f64> = (0..100).map(|i| domain_b_remap(i as f64 / 99.0)).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn affine_identity() {
        let a = Affine { rotation_deg: 0.0, scale: 1.0, shear: 0.0 };
        assert_eq!(a.matrix(), [1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn margin_keeps_warped_windows_inside() {
        let grid = DisplacementGrid::default();
        let m = center_margin(&grid) as f64;
        let worst = Affine { rotation_deg: MAX_ROTATION_DEG, scale: SCALE_RANGE.1, shear: MAX_SHEAR }.matrix();
        let reach = [(-38.0, -38.0), (37.0, -38.0), (-38.0, 37.0), (37.0, 37.0)]
            .iter()
            .map(|&(u, v)| (worst[0] * u + worst[1] * v).abs().max((worst[2] * u + worst[3] * v).abs()))
            .fold(0.0, f64::max);
        assert!(reach + 38.0 + 1.0 <= m, "reach {reach}, margin {m}");
    }

    #[test]
    fn combine_requires_alignment() {
        let p = |label| PatchPair { fixed: vec![0.0; 4], moving: vec![1.0; 4], label, domain_fixed: Domain::A, domain_moving: Domain::A };
        let a = PairSet::new(2, 5, vec![p(1), p(2)]).unwrap();
        let b = PairSet::new(2, 5, vec![p(1), p(3)]).unwrap();
        assert!(PairSet::combine(&a, &b).is_err());
        assert!(PairSet::combine(&a, &a).is_ok());
    }
}
