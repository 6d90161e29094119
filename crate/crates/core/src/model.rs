//! Twin feature network with two classifier heads.
//!
//! One feature extractor (blocks of conv → instance norm → PReLU) is applied
//! with shared weights to both patches of a pair. The two feature maps are
//! concatenated along channels and fed to a classification head (more blocks,
//! global average pooling and a linear layer to one logit per displacement
//! class). Two heads with identical structure but independently drawn weights
//! exist for classifier-discrepancy training.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tape::{Conv2dAttrs, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const PRELU_INIT: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl BlockSpec {
    pub const fn new(in_channels: usize, out_channels: usize, stride: usize, pad: usize) -> Self {
        BlockSpec { in_channels, out_channels, kernel: 3, stride, pad }
    }

    fn output_side(&self, side: usize) -> Option<usize> {
        let padded = side + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

/// Layer layout of a [`TwinRegistrationModel`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub patch_side: usize,
    pub feature_blocks: Vec<BlockSpec>,
    pub head_blocks: Vec<BlockSpec>,
    pub grid_side: usize,
}

impl Default for ArchConfig {
    /// 38×38 patches → 16×18×18 features; head 32→32→64→64, pool, linear to 25.
    fn default() -> Self {
        ArchConfig {
            patch_side: 38,
            feature_blocks: vec![
                BlockSpec::new(1, 8, 1, 0),
                BlockSpec::new(8, 16, 2, 1),
                BlockSpec::new(16, 32, 1, 1),
                BlockSpec::new(32, 16, 1, 1),
            ],
            head_blocks: vec![
                BlockSpec::new(32, 32, 2, 1),
                BlockSpec::new(32, 64, 2, 1),
                BlockSpec::new(64, 64, 1, 1),
            ],
            grid_side: 5,
        }
    }
}

impl ArchConfig {
    /// Reduced network on 8×8 patches for finite-difference checks.
    pub fn tiny() -> Self {
        ArchConfig {
            patch_side: 8,
            feature_blocks: vec![BlockSpec::new(1, 2, 1, 0), BlockSpec::new(2, 3, 2, 1)],
            head_blocks: vec![BlockSpec::new(6, 4, 2, 1)],
            grid_side: 3,
        }
    }

    pub fn classes(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// `(channels, side)` of the feature map for one patch.
    pub fn feature_output(&self) -> Result<(usize, usize)> {
        let mut side = self.patch_side;
        let mut ch = 1;
        for (i, b) in self.feature_blocks.iter().enumerate() {
            if b.in_channels != ch {
                return Err(Error::invalid(format!("feature block {i} expects {} channels, gets {ch}", b.in_channels)));
            }
            side = b
                .output_side(side)
                .ok_or_else(|| Error::invalid(format!("feature block {i} does not fit a {side}×{side} input")))?;
            ch = b.out_channels;
        }
        Ok((ch, side))
    }

    pub fn validate(&self) -> Result<()> {
        let (mut ch, mut side) = self.feature_output()?;
        ch *= 2;
        for (i, b) in self.head_blocks.iter().enumerate() {
            if b.in_channels != ch {
                return Err(Error::invalid(format!("head block {i} expects {} channels, gets {ch}", b.in_channels)));
            }
            side = b
                .output_side(side)
                .ok_or_else(|| Error::invalid(format!("head block {i} does not fit a {side}×{side} input")))?;
            ch = b.out_channels;
        }
        Ok(())
    }

    fn head_width(&self) -> usize {
        self.head_blocks
            .last()
            .map(|b| b.out_channels)
            .unwrap_or_else(|| 2 * self.feature_blocks.last().map(|b| b.out_channels).unwrap_or(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    First,
    Second,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::First => "head1",
            Head::Second => "head2",
        }
    }
}

/// Parameter groups that are updated (or frozen) together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Feature,
    Head1,
    Head2,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Feature, ParamGroup::Head1, ParamGroup::Head2];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Feature => "feature",
            ParamGroup::Head1 => "head1",
            ParamGroup::Head2 => "head2",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let first = name.split('.').next()?;
        ParamGroup::ALL.into_iter().find(|g| g.prefix() == first)
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => *v = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar parameters in a group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(n, _)| ParamGroup::of(n) == Some(group))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(n, v)| (n.clone(), v.cast())).collect() }
    }
}

impl ParamStore<f32> {
    /// FNV-1a digest over names, shapes and value bits of one group.
    pub fn digest(&self, group: ParamGroup) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.iter().filter(|(n, _)| ParamGroup::of(n) == Some(group)) {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Checkpoint bytes: `"PMDL"`, version u32, then per parameter
    /// name length u16, UTF-8 name, rank u8, dims u32[], values f32[] (all LE).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error(0, format!("bad magic {magic:?}, expected \"PMDL\"")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(4, format!("unsupported checkpoint version {version}")));
        }
        let mut store = ParamStore::default();
        while r.pos < bytes.len() {
            let start = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error(start as u64, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "values")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if store.get(&name).is_some() {
                return Err(r.error(start as u64, format!("duplicate parameter {name}")));
            }
            store.insert(name, Tensor::new(shape, data));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMDL";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn error(&self, offset: u64, message: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset, message: message.into() }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos as u64, format!("truncated while reading {what}")));
        }
        let bytes: &'a [u8] = self.bytes;
        let s = &bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parameter handles on a tape, looked up by name.
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        BoundParams { vars: names.iter().cloned().zip(vars.iter().copied()).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

fn block<T: Real>(tape: &mut Tape<T>, bound: &BoundParams, prefix: &str, spec: &BlockSpec, x: Var) -> Result<Var> {
    let w = bound.get(&format!("{prefix}.conv.weight"))?;
    let b = bound.get(&format!("{prefix}.conv.bias"))?;
    let y = tape.conv2d(x, w, Some(b), Conv2dAttrs { stride: spec.stride, pad: spec.pad })?;
    let g = bound.get(&format!("{prefix}.norm.gamma"))?;
    let be = bound.get(&format!("{prefix}.norm.beta"))?;
    let y = tape.instance_norm(y, g, be, NORM_EPS)?;
    let s = bound.get(&format!("{prefix}.prelu.slope"))?;
    tape.prelu(y, s)
}

/// Shared feature extractor on `(N, 1, S, S)` patches.
pub fn features<T: Real>(tape: &mut Tape<T>, arch: &ArchConfig, bound: &BoundParams, x: Var) -> Result<Var> {
    let mut y = x;
    for (i, spec) in arch.feature_blocks.iter().enumerate() {
        y = block(tape, bound, &format!("feature.{i}"), spec, y)?;
    }
    Ok(y)
}

/// Classifier head on the channel concatenation of both feature maps.
pub fn head_logits<T: Real>(
    tape: &mut Tape<T>,
    arch: &ArchConfig,
    bound: &BoundParams,
    head: Head,
    fixed: Var,
    moving: Var,
) -> Result<Var> {
    let mut y = tape.concat_channels(fixed, moving)?;
    let p = head.prefix();
    for (i, spec) in arch.head_blocks.iter().enumerate() {
        y = block(tape, bound, &format!("{p}.{i}"), spec, y)?;
    }
    let pooled = tape.global_average_pool(y)?;
    let w = bound.get(&format!("{p}.fc.weight"))?;
    let b = bound.get(&format!("{p}.fc.bias"))?;
    tape.linear(pooled, w, Some(b))
}

fn init_block(store: &mut ParamStore<f32>, prefix: &str, spec: &BlockSpec, rng: &mut ChaCha8Rng) {
    let fan_in = spec.in_channels * spec.kernel * spec.kernel;
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n = spec.out_channels * fan_in;
    let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    let bb = (1.0 / fan_in as f64).sqrt() as f32;
    let b = (0..spec.out_channels).map(|_| rng.random_range(-bb..bb)).collect();
    let c = spec.out_channels;
    store.insert(format!("{prefix}.conv.weight"), Tensor::new([c, spec.in_channels, spec.kernel, spec.kernel], w));
    store.insert(format!("{prefix}.conv.bias"), Tensor::new([c], b));
    store.insert(format!("{prefix}.norm.gamma"), Tensor::full([c], 1.0));
    store.insert(format!("{prefix}.norm.beta"), Tensor::zeros([c]));
    store.insert(format!("{prefix}.prelu.slope"), Tensor::full([c], PRELU_INIT));
}

fn init_head(store: &mut ParamStore<f32>, arch: &ArchConfig, head: Head, rng: &mut ChaCha8Rng) {
    let p = head.prefix();
    for (i, spec) in arch.head_blocks.iter().enumerate() {
        init_block(store, &format!("{p}.{i}"), spec, rng);
    }
    let width = arch.head_width();
    let classes = arch.classes();
    let bound = (1.0 / width as f64).sqrt() as f32;
    let w = (0..classes * width).map(|_| rng.random_range(-bound..bound)).collect();
    let b = (0..classes).map(|_| rng.random_range(-bound..bound)).collect();
    store.insert(format!("{p}.fc.weight"), Tensor::new([classes, width], w));
    store.insert(format!("{p}.fc.bias"), Tensor::new([classes], b));
}

/// Shared feature network plus two independently initialized heads.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinRegistrationModel {
    arch: ArchConfig,
    params: ParamStore<f32>,
}

/// Which parameter groups receive gradients when bound to a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub feature: bool,
    pub head1: bool,
    pub head2: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable { feature: false, head1: false, head2: false };

    pub fn includes(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Feature => self.feature,
            ParamGroup::Head1 => self.head1,
            ParamGroup::Head2 => self.head2,
        }
    }
}

impl TwinRegistrationModel {
    /// Deterministic in `seed`; feature and heads draw from separate streams.
    pub fn init(arch: &ArchConfig, seed: u64) -> Self {
        arch.validate().expect("valid architecture");
        let mut params = ParamStore::default();
        let mut rng = stream(seed, "model-init/feature");
        for (i, spec) in arch.feature_blocks.iter().enumerate() {
            init_block(&mut params, &format!("feature.{i}"), spec, &mut rng);
        }
        init_head(&mut params, arch, Head::First, &mut stream(seed, "model-init/head1"));
        init_head(&mut params, arch, Head::Second, &mut stream(seed, "model-init/head2"));
        TwinRegistrationModel { arch: arch.clone(), params }
    }

    /// Wrap loaded parameters, checking names and shapes against `arch`.
    pub fn from_params(arch: &ArchConfig, params: ParamStore<f32>) -> Result<Self> {
        let reference = Self::init(arch, 0);
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                None => return Err(Error::invalid(format!("checkpoint lacks parameter {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::invalid(format!(
                        "parameter {name} has shape {:?}, architecture needs {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::invalid("checkpoint has parameters the architecture does not use"));
        }
        // keep the architecture's canonical ordering
        let mut ordered = ParamStore::default();
        for name in reference.params.names() {
            ordered.insert(name, params.get(name).unwrap().clone());
        }
        Ok(TwinRegistrationModel { arch: arch.clone(), params: ordered })
    }

    pub fn load(arch: &ArchConfig, path: &Path) -> Result<Self> {
        Self::from_params(arch, ParamStore::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// Place every parameter on the tape; only `trainable` groups track gradients.
    pub fn bind(&self, tape: &mut Tape<f32>, trainable: Trainable) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let rg = ParamGroup::of(name).is_some_and(|g| trainable.includes(g));
                (name.to_string(), tape.leaf(t.clone(), rg))
            })
            .collect();
        BoundParams { vars }
    }

    /// Logits `(N, K²)` of one head for `(N, 1, S, S)` fixed and moving patches.
    pub fn forward(&self, tape: &mut Tape<f32>, bound: &BoundParams, fixed: Var, moving: Var, head: Head) -> Result<Var> {
        let fa = features(tape, &self.arch, bound, fixed)?;
        let fb = features(tape, &self.arch, bound, moving)?;
        head_logits(tape, &self.arch, bound, head, fa, fb)
    }

    /// Logits of one head without gradient tracking, as row-major `N × K²`.
    pub fn logits(&self, fixed: &Tensor<f32>, moving: &Tensor<f32>, head: Head) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::NONE);
        let a = tape.constant(fixed.clone());
        let b = tape.constant(moving.clone());
        let y = self.forward(&mut tape, &bound, a, b, head)?;
        Ok(tape.value(y).clone())
    }

    /// Logits of both heads sharing one feature pass.
    pub fn logits_both(&self, fixed: &Tensor<f32>, moving: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::NONE);
        let a = tape.constant(fixed.clone());
        let b = tape.constant(moving.clone());
        let fa = features(&mut tape, &self.arch, &bound, a)?;
        let fb = features(&mut tape, &self.arch, &bound, b)?;
        let l1 = head_logits(&mut tape, &self.arch, &bound, Head::First, fa, fb)?;
        let l2 = head_logits(&mut tape, &self.arch, &bound, Head::Second, fa, fb)?;
        Ok((tape.value(l1).clone(), tape.value(l2).clone()))
    }

    /// Feature map of a batch of patches, for shape inspection.
    pub fn feature_map(&self, patches: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::NONE);
        let x = tape.constant(patches.clone());
        let y = features(&mut tape, &self.arch, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_shapes_and_counts() {
        let arch = ArchConfig::default();
        assert_eq!(arch.feature_output().unwrap(), (16, 18));
        let m = TwinRegistrationModel::init(&arch, 7);
        let f = m.params().count(ParamGroup::Feature);
        let h1 = m.params().count(ParamGroup::Head1);
        let h2 = m.params().count(ParamGroup::Head2);
        assert!((10_000..=16_000).contains(&f), "feature params {f}");
        assert!((55_000..=85_000).contains(&h1), "head params {h1}");
        assert_eq!(h1, h2);
        let x = Tensor::zeros([2, 1, 38, 38]);
        assert_eq!(m.feature_map(&x).unwrap().shape(), &[2, 16, 18, 18]);
    }

    #[test]
    fn init_is_deterministic_with_independent_heads() {
        let arch = ArchConfig::default();
        let a = TwinRegistrationModel::init(&arch, 7);
        let b = TwinRegistrationModel::init(&arch, 7);
        assert_eq!(a.params().encode(), b.params().encode());
        let (mut same, mut total) = (0usize, 0usize);
        for (name, t) in a.params().iter().filter(|(n, _)| n.starts_with("head1.")) {
            let other = a.params().get(&name.replacen("head1", "head2", 1)).unwrap();
            total += t.len();
            same += t.data().iter().zip(other.data()).filter(|(x, y)| x == y).count();
        }
        assert!(same as f64 / total as f64 <= 0.01, "{same}/{total} equal");
        assert_ne!(a.params().digest(ParamGroup::Head1), a.params().digest(ParamGroup::Head2));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = TwinRegistrationModel::init(&ArchConfig::tiny(), 3);
        let bytes = m.params().encode();
        let p = Path::new("mem");
        let back = ParamStore::decode(&bytes, p).unwrap();
        assert_eq!(back.encode(), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParamStore::decode(&bad, p), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(ParamStore::decode(&bad, p).is_err());
        assert!(ParamStore::decode(&bytes[..bytes.len() - 3], p).is_err());
        let restored = TwinRegistrationModel::from_params(&ArchConfig::tiny(), back).unwrap();
        assert_eq!(restored, m);
        assert!(TwinRegistrationModel::from_params(&ArchConfig::default(), m.params().clone()).is_err());
    }

    #[test]
    fn forward_contract() {
        let m = TwinRegistrationModel::init(&ArchConfig::default(), 1);
        let mut rng = stream(5, "test");
        let a = Tensor::new([1, 1, 38, 38], (0..1444).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = Tensor::new([1, 1, 38, 38], (0..1444).map(|_| rng.random_range(-1.0..1.0)).collect());
        let l = m.logits(&a, &b, Head::First).unwrap();
        assert_eq!(l.shape(), &[1, 25]);
        assert_eq!(l, m.logits(&a, &b, Head::First).unwrap());
        let swapped = m.logits(&b, &a, Head::First).unwrap();
        assert_ne!(l, swapped);
        let (l1, l2) = m.logits_both(&a, &b).unwrap();
        assert_eq!(l1, l);
        assert_eq!(l2, m.logits(&a, &b, Head::Second).unwrap());
        let small = Tensor::zeros([1, 1, 2, 2]);
        assert!(m.logits(&small, &small, Head::First).is_err());
    }
}
