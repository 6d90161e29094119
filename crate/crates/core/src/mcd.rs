//! Three-step classifier-discrepancy adaptation.
//!
//! Each outer iteration runs
//! 1. a supervised update of the features and the first head on source pairs,
//! 2. an update of both heads that keeps them accurate on source pairs while
//!    maximizing their disagreement `D` on target pairs (features frozen),
//! 3. `repeat` updates of the features that minimize `D` (heads frozen).
//!
//! `D` compares the two heads' `softmax(0.1·z)` outputs with p-EMD, SWD or the
//! sum of both. With [`DiscrepancyKind::None`] only step 1 runs.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::histograms::argmax;
use crate::losses::{pemd_loss, swd_loss};
use crate::model::{features, head_logits, ArchConfig, BoundParams, Head, ParamGroup, Trainable, TwinRegistrationModel};
use crate::optim::{Adam, AdamConfig};
use crate::ot::{ProjectionSet, SwdDirections};
use crate::rng::stream;
use crate::synth::{Batch, PairSet};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DiscrepancyKind {
    None,
    Pemd,
    Swd,
    PemdPlusSwd,
}

impl DiscrepancyKind {
    pub fn name(self) -> &'static str {
        match self {
            DiscrepancyKind::None => "none",
            DiscrepancyKind::Pemd => "pemd",
            DiscrepancyKind::Swd => "swd",
            DiscrepancyKind::PemdPlusSwd => "pemd_plus_swd",
        }
    }

    fn uses_pemd(self) -> bool {
        matches!(self, DiscrepancyKind::Pemd | DiscrepancyKind::PemdPlusSwd)
    }

    fn uses_swd(self) -> bool {
        matches!(self, DiscrepancyKind::Swd | DiscrepancyKind::PemdPlusSwd)
    }
}

impl fmt::Display for DiscrepancyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DiscrepancyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DiscrepancyKind::None),
            "pemd" => Ok(DiscrepancyKind::Pemd),
            "swd" => Ok(DiscrepancyKind::Swd),
            "pemd_plus_swd" => Ok(DiscrepancyKind::PemdPlusSwd),
            _ => Err(Error::Config(format!(
                "unknown discrepancy kind {s:?} (expected none, pemd, swd or pemd_plus_swd)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub discrepancy: DiscrepancyKind,
    /// Number of p-EMD projection angles.
    pub projections: usize,
    /// Number of SWD slice directions.
    pub slices: usize,
    /// Logit scale applied before the softmax that feeds `D`.
    pub temperature_scale: f64,
    /// Weight of `D` in step 2.
    pub lambda: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub step3_repeat: usize,
    pub seed: u64,
    /// Probe accuracies are recomputed every this many iterations and carried forward in between.
    pub probe_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            discrepancy: DiscrepancyKind::PemdPlusSwd,
            projections: 16,
            slices: 128,
            temperature_scale: 0.1,
            lambda: 1.0,
            adam: AdamConfig::default(),
            batch_size: 64,
            iterations: 500,
            step3_repeat: 2,
            seed: 0,
            probe_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature_scale > 0.0 && self.temperature_scale.is_finite()) {
            return bad(format!("temperature_scale must be positive, got {}", self.temperature_scale));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.step3_repeat < 1 {
            return bad("step3_repeat must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.discrepancy.uses_pemd() && self.projections < 2 {
            return bad(format!("projections must be at least 2, got {}", self.projections));
        }
        if self.discrepancy.uses_swd() && self.slices < 1 {
            return bad("slices must be at least 1".into());
        }
        if !(self.adam.lr >= 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam settings need lr >= 0 and betas in [0, 1)".into());
        }
        if self.probe_every < 1 {
            return bad("probe_every must be at least 1".into());
        }
        Ok(())
    }
}

/// One row of training telemetry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub loss_src: f64,
    pub disc_step2: f64,
    pub disc_step3: f64,
    pub acc_probe_head1: f64,
    pub acc_probe_head2: f64,
}

impl StepReport {
    pub fn is_finite(&self) -> bool {
        [self.loss_src, self.disc_step2, self.disc_step3, self.acc_probe_head1, self.acc_probe_head2]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub const HISTORY_HEADER: &str = "iteration,loss_src,disc_step2,disc_step3,acc_probe_head1,acc_probe_head2";

pub fn write_history(history: &[StepReport], path: &Path) -> Result<()> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.6},{:.6}\n",
            r.iteration, r.loss_src, r.disc_step2, r.disc_step3, r.acc_probe_head1, r.acc_probe_head2
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Source,
    MaxDiscrepancy,
    MinDiscrepancy,
}

/// Parameter digests around one step, in [`ParamGroup::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepEvent {
    pub iteration: usize,
    pub phase: Phase,
    pub before: [u64; 3],
    pub after: [u64; 3],
    pub inner_updates: usize,
}

impl StepEvent {
    pub fn changed(&self, group: ParamGroup) -> bool {
        let i = ParamGroup::ALL.iter().position(|&g| g == group).unwrap();
        self.before[i] != self.after[i]
    }
}

/// Discrepancy between the heads' temperature-scaled outputs.
pub struct Discrepancy {
    kind: DiscrepancyKind,
    projections: Option<ProjectionSet>,
    temperature_scale: f64,
}

impl Discrepancy {
    pub fn new(config: &TrainConfig, grid_side: usize) -> Result<Self> {
        let projections = if config.discrepancy.uses_pemd() {
            Some(ProjectionSet::new(config.projections, grid_side)?)
        } else {
            None
        };
        Ok(Discrepancy { kind: config.discrepancy, projections, temperature_scale: config.temperature_scale })
    }

    pub fn kind(&self) -> DiscrepancyKind {
        self.kind
    }

    /// `D(logits1, logits2)` on the tape; `dirs` is required for SWD kinds.
    pub fn build<T: crate::tensor::Real>(
        &self,
        tape: &mut Tape<T>,
        logits1: Var,
        logits2: Var,
        dirs: Option<&SwdDirections>,
    ) -> Result<Var> {
        let p = tape.softmax_temperature(logits1, self.temperature_scale)?;
        let q = tape.softmax_temperature(logits2, self.temperature_scale)?;
        let pemd = match &self.projections {
            Some(proj) => Some(pemd_loss(tape, p, q, proj)?),
            None => None,
        };
        let swd = if self.kind.uses_swd() {
            let dirs = dirs.ok_or_else(|| Error::invalid("SWD discrepancy needs slice directions"))?;
            Some(swd_loss(tape, p, q, dirs)?)
        } else {
            None
        };
        match (pemd, swd) {
            (Some(a), Some(b)) => tape.add(a, b),
            (Some(a), None) | (None, Some(a)) => Ok(a),
            (None, None) => Err(Error::invalid("discrepancy kind none has no loss")),
        }
    }
}

/// Model plus the three per-role optimizers.
pub struct Trainer {
    config: TrainConfig,
    model: TwinRegistrationModel,
    discrepancy: Option<Discrepancy>,
    opt_source: Adam,
    opt_max: Adam,
    opt_min: Adam,
    slices_rng: ChaCha8Rng,
}

fn labels_of(batch: &Batch) -> &[usize] {
    &batch.labels
}

impl Trainer {
    pub fn new(config: TrainConfig, model: TwinRegistrationModel) -> Result<Self> {
        config.validate()?;
        let discrepancy = match config.discrepancy {
            DiscrepancyKind::None => None,
            _ => Some(Discrepancy::new(&config, model.arch().grid_side)?),
        };
        Ok(Trainer {
            slices_rng: stream(config.seed, "swd-slices"),
            opt_source: Adam::new(config.adam),
            opt_max: Adam::new(config.adam),
            opt_min: Adam::new(config.adam),
            discrepancy,
            config,
            model,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &TwinRegistrationModel {
        &self.model
    }

    pub fn into_model(self) -> TwinRegistrationModel {
        self.model
    }

    fn sample_directions(&mut self) -> Option<SwdDirections> {
        let d = self.discrepancy.as_ref()?;
        d.kind.uses_swd().then(|| {
            SwdDirections::sample(self.config.slices, self.model.arch().classes(), &mut self.slices_rng)
        })
    }

    fn apply(model: &mut TwinRegistrationModel, opt: &mut Adam, tape: &Tape<f32>, bound: &BoundParams, trainable: Trainable) -> Result<()> {
        let grads: Vec<(String, crate::tensor::Tensor<f32>)> = bound
            .iter()
            .filter(|(n, _)| ParamGroup::of(n).is_some_and(|g| trainable.includes(g)))
            .filter_map(|(n, v)| tape.grad(v).map(|g| (n.to_string(), g.clone())))
            .collect();
        opt.step(model.params_mut(), grads.iter().map(|(n, g)| (n.as_str(), g)))
    }

    /// Step 1: cross-entropy of the first head, updating features and head 1.
    /// Returns the loss before the update.
    pub fn step_source(&mut self, source: &Batch) -> Result<f64> {
        if source.labels.is_empty() {
            return Err(Error::invalid("empty source batch"));
        }
        let trainable = Trainable { feature: true, head1: true, head2: false };
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, trainable);
        let a = tape.constant(source.fixed.clone());
        let b = tape.constant(source.moving.clone());
        let logits = self.model.forward(&mut tape, &bound, a, b, Head::First)?;
        let loss = tape.cross_entropy(logits, labels_of(source))?;
        tape.backward(loss)?;
        Self::apply(&mut self.model, &mut self.opt_source, &tape, &bound, trainable)?;
        Ok(tape.value(loss).item() as f64)
    }

    /// Step 2: `CE(h1, src) + CE(h2, src) − λ·D(target)` over both heads with
    /// features frozen. Returns `D` before the update.
    pub fn step_max_discrepancy(&mut self, source: &Batch, target: &Batch) -> Result<f64> {
        if source.labels.is_empty() || target.labels.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let dirs = self.sample_directions();
        let disc = self.discrepancy.as_ref().ok_or_else(|| Error::invalid("no discrepancy configured"))?;
        let trainable = Trainable { feature: false, head1: true, head2: true };
        let arch = self.model.arch().clone();
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, trainable);
        let sa = tape.constant(source.fixed.clone());
        let sb = tape.constant(source.moving.clone());
        let fa = features(&mut tape, &arch, &bound, sa)?;
        let fb = features(&mut tape, &arch, &bound, sb)?;
        let l1 = head_logits(&mut tape, &arch, &bound, Head::First, fa, fb)?;
        let l2 = head_logits(&mut tape, &arch, &bound, Head::Second, fa, fb)?;
        let ce1 = tape.cross_entropy(l1, labels_of(source))?;
        let ce2 = tape.cross_entropy(l2, labels_of(source))?;
        let ce = tape.add(ce1, ce2)?;
        let ta = tape.constant(target.fixed.clone());
        let tb = tape.constant(target.moving.clone());
        let ga = features(&mut tape, &arch, &bound, ta)?;
        let gb = features(&mut tape, &arch, &bound, tb)?;
        let t1 = head_logits(&mut tape, &arch, &bound, Head::First, ga, gb)?;
        let t2 = head_logits(&mut tape, &arch, &bound, Head::Second, ga, gb)?;
        let d = disc.build(&mut tape, t1, t2, dirs.as_ref())?;
        let neg = tape.scale(d, -self.config.lambda)?;
        let loss = tape.add(ce, neg)?;
        tape.backward(loss)?;
        Self::apply(&mut self.model, &mut self.opt_max, &tape, &bound, trainable)?;
        Ok(tape.value(d).item() as f64)
    }

    /// Step 3: `repeat` feature updates minimizing `D(target)` with both heads
    /// frozen. Returns `D` before the first update and the number of updates.
    pub fn step_min_discrepancy(&mut self, target: &Batch) -> Result<(f64, usize)> {
        if target.labels.is_empty() {
            return Err(Error::invalid("empty target batch"));
        }
        let dirs = self.sample_directions();
        let disc = self.discrepancy.as_ref().ok_or_else(|| Error::invalid("no discrepancy configured"))?;
        let trainable = Trainable { feature: true, head1: false, head2: false };
        let mut first = f64::NAN;
        let mut updates = 0;
        for k in 0..self.config.step3_repeat {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, trainable);
            let ta = tape.constant(target.fixed.clone());
            let tb = tape.constant(target.moving.clone());
            let ga = features(&mut tape, self.model.arch(), &bound, ta)?;
            let gb = features(&mut tape, self.model.arch(), &bound, tb)?;
            let t1 = head_logits(&mut tape, self.model.arch(), &bound, Head::First, ga, gb)?;
            let t2 = head_logits(&mut tape, self.model.arch(), &bound, Head::Second, ga, gb)?;
            let d = disc.build(&mut tape, t1, t2, dirs.as_ref())?;
            tape.backward(d)?;
            if k == 0 {
                first = tape.value(d).item() as f64;
            }
            Self::apply(&mut self.model, &mut self.opt_min, &tape, &bound, trainable)?;
            updates += 1;
        }
        Ok((first, updates))
    }
}

/// `D` of the current model on a batch, with explicit slice directions.
pub fn measure_discrepancy(
    model: &TwinRegistrationModel,
    config: &TrainConfig,
    batch: &Batch,
    dirs: Option<&SwdDirections>,
) -> Result<f64> {
    let disc = Discrepancy::new(config, model.arch().grid_side)?;
    let (l1, l2) = model.logits_both(&batch.fixed, &batch.moving)?;
    let mut tape = Tape::new();
    let a = tape.constant(l1);
    let b = tape.constant(l2);
    let d = disc.build(&mut tape, a, b, dirs)?;
    Ok(tape.value(d).item() as f64)
}

/// Per-head argmax accuracy on a labelled set.
pub fn head_accuracies(model: &TwinRegistrationModel, set: &PairSet) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::invalid("empty probe set"));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let classes = model.arch().classes();
    let (mut c1, mut c2) = (0usize, 0usize);
    for chunk in idx.chunks(128) {
        let batch = set.batch(chunk);
        let (l1, l2) = model.logits_both(&batch.fixed, &batch.moving)?;
        for (i, &label) in batch.labels.iter().enumerate() {
            c1 += (argmax(&l1.data()[i * classes..(i + 1) * classes]) == label) as usize;
            c2 += (argmax(&l2.data()[i * classes..(i + 1) * classes]) == label) as usize;
        }
    }
    Ok((c1 as f64 / set.len() as f64, c2 as f64 / set.len() as f64))
}

/// Endless reshuffled passes over a set, from a named seed stream.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64, name: &str) -> Self {
        let mut rng = stream(seed, name);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, pos: 0, rng }
    }

    pub fn next_indices(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn digests(model: &TwinRegistrationModel) -> [u64; 3] {
    ParamGroup::ALL.map(|g| model.params().digest(g))
}

/// Train from a fresh model initialized from `config.seed`.
pub fn train(
    config: &TrainConfig,
    arch: &ArchConfig,
    source: &PairSet,
    target: &PairSet,
    probe: &PairSet,
) -> Result<(TwinRegistrationModel, Vec<StepReport>)> {
    train_observed(config, arch, source, target, probe, &mut |_| {})
}

/// [`train`] reporting parameter digests around every step to `observer`.
pub fn train_observed(
    config: &TrainConfig,
    arch: &ArchConfig,
    source: &PairSet,
    target: &PairSet,
    probe: &PairSet,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<(TwinRegistrationModel, Vec<StepReport>)> {
    config.validate()?;
    arch.validate()?;
    for (what, set) in [("source", source), ("target", target), ("probe", probe)] {
        if set.is_empty() {
            return Err(Error::invalid(format!("{what} set is empty")));
        }
        if set.side() != arch.patch_side || set.grid_side() != arch.grid_side {
            return Err(Error::invalid(format!(
                "{what} set has {}-pixel patches on a {}×{} grid, model expects {} on {}×{}",
                set.side(),
                set.grid_side(),
                set.grid_side(),
                arch.patch_side,
                arch.grid_side,
                arch.grid_side
            )));
        }
    }
    let model = TwinRegistrationModel::init(arch, config.seed);
    let mut trainer = Trainer::new(config.clone(), model)?;
    let mut src_sampler = BatchSampler::new(source.len(), config.seed, "shuffle/source");
    let mut tgt_sampler = BatchSampler::new(target.len(), config.seed, "shuffle/target");
    let adapt = config.discrepancy != DiscrepancyKind::None;
    let mut history = Vec::with_capacity(config.iterations);
    let mut probe_acc = (f64::NAN, f64::NAN);
    for it in 0..config.iterations {
        let src = source.batch(&src_sampler.next_indices(config.batch_size));

        let before = digests(&trainer.model);
        let loss_src = trainer.step_source(&src)?;
        let after = digests(&trainer.model);
        observer(&StepEvent { iteration: it, phase: Phase::Source, before, after, inner_updates: 1 });

        let (mut disc2, mut disc3) = (0.0, 0.0);
        if adapt {
            let tgt = target.batch(&tgt_sampler.next_indices(config.batch_size));
            let before = after;
            disc2 = trainer.step_max_discrepancy(&src, &tgt)?;
            let after = digests(&trainer.model);
            observer(&StepEvent { iteration: it, phase: Phase::MaxDiscrepancy, before, after, inner_updates: 1 });

            let before = after;
            let (d, updates) = trainer.step_min_discrepancy(&tgt)?;
            disc3 = d;
            let after = digests(&trainer.model);
            observer(&StepEvent { iteration: it, phase: Phase::MinDiscrepancy, before, after, inner_updates: updates });
        }

        if it % config.probe_every == 0 || it + 1 == config.iterations {
            probe_acc = head_accuracies(&trainer.model, probe)?;
        }
        history.push(StepReport {
            iteration: it,
            loss_src,
            disc_step2: disc2,
            disc_step3: disc3,
            acc_probe_head1: probe_acc.0,
            acc_probe_head2: probe_acc.1,
        });
    }
    Ok((trainer.into_model(), history))
}
