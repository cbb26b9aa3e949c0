//! Training orchestration: a mapping worker that keeps per-slide probability
//! maps current and a training worker that samples patches from them.
//!
//! The two workers share a versioned [`MapStore`] and a weight snapshot slot.
//! [`InterleavedState`] runs the same two roles on one thread in a fixed
//! schedule and is the reference semantics; [`run_training`] dispatches to it
//! or to the two-thread runner.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, PoisonError, RwLock};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate, aggregate_backward, pixel_softmax, slide_class_probs, ProbMap, SlideLogits,
};
use crate::divergence::{beta_divergence, beta_divergence_grad_q, BetaParams, DiscreteDist};
use crate::model::{
    to_logit_map, Gradients, Network, NetworkConfig, Padding, Real, Sgd, TrainStep,
};
use crate::rng::{derive2, rng_from, Rng};
use crate::sampler::{
    patch_distribution, sample_patch_centers, ShuffleBuffer, SlideSelectionState,
};
use crate::synthwsi::{apply_dihedral, augment, extract_patch, Label, Patch, SyntheticSlide};
use crate::{Error, Result};

/// Slide-level probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`
/// before entering the loss.
pub const PROB_CLAMP: f64 = 1e-7;

const TAG_TRAIN: u64 = 0x74_7261_696e;
const TAG_MAP: u64 = 0x6d_6170;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Sampling sharpness: patch centres are drawn with probability `∝ Q^alpha`.
    pub alpha: f64,
    /// Percentage of malign pixel logits pooled into the slide logit.
    pub eta: f64,
    pub beta: BetaParams,
    /// Initial training steps that use the KL loss before switching to `beta`.
    pub kl_warmup_steps: u64,
    pub patch_size: usize,
    pub batch_size: usize,
    /// Patches sampled from the current map per buffer refill.
    pub patches_per_step: usize,
    pub buffer_capacity: usize,
    pub min_fill_fraction: f64,
    /// `N`: every slide is remapped at least once per `N` epochs.
    pub staleness_bound: u64,
    pub map_chunk_size: usize,
    pub total_steps: u64,
    /// Training steps between weight snapshots handed to the mapping worker.
    pub exchange_period: u64,
    /// Deterministic mode: training steps after each mapping action.
    pub train_steps_per_map: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub augment: bool,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            alpha: 2.0,
            eta: 50.0,
            beta: BetaParams {
                beta0: 0.0,
                beta1: 1.0,
            },
            kl_warmup_steps: 0,
            patch_size: 32,
            batch_size: 8,
            patches_per_step: 8,
            buffer_capacity: 64,
            min_fill_fraction: 0.5,
            staleness_bound: 4,
            map_chunk_size: 64,
            total_steps: 400,
            exchange_period: 50,
            train_steps_per_map: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            clip_norm: 5.0,
            augment: true,
            deterministic: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn train_step(&self) -> TrainStep {
        TrainStep {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
        }
    }

    pub fn validate(&self, model: &NetworkConfig) -> Result<()> {
        model.validate()?;
        self.beta.validate()?;
        self.train_step().validate()?;
        let bad = |msg: String| Err(Error::Infeasible(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!(
                "alpha = {} must be a finite non-negative number",
                self.alpha
            ));
        }
        if !(self.eta > 0.0 && self.eta <= 100.0) {
            return bad(format!("eta = {} outside (0, 100]", self.eta));
        }
        let m = model.size_multiple();
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(m) {
            return bad(format!(
                "patch_size {} must be a positive multiple of {m}",
                self.patch_size
            ));
        }
        if self.map_chunk_size == 0 || !self.map_chunk_size.is_multiple_of(m) {
            return bad(format!(
                "map_chunk_size {} must be a positive multiple of {m}",
                self.map_chunk_size
            ));
        }
        if self.patches_per_step == 0 || self.total_steps == 0 || self.exchange_period == 0 {
            return bad(
                "patches_per_step, total_steps and exchange_period must be positive".into(),
            );
        }
        if self.staleness_bound == 0 {
            return bad("staleness_bound must be positive".into());
        }
        if self.buffer_capacity < self.batch_size {
            return bad(format!(
                "buffer_capacity {} smaller than batch_size {}",
                self.buffer_capacity, self.batch_size
            ));
        }
        if !(0.0..=1.0).contains(&self.min_fill_fraction) {
            return bad(format!(
                "min_fill_fraction {} outside [0, 1]",
                self.min_fill_fraction
            ));
        }
        Ok(())
    }

    fn validate_dataset(&self, model: &NetworkConfig, slides: &[SyntheticSlide]) -> Result<()> {
        self.validate(model)?;
        if slides.is_empty() {
            return Err(Error::Infeasible("empty dataset".into()));
        }
        if !slides.iter().any(|s| s.label == Label::Malign) {
            return Err(Error::EmptyClass("malign"));
        }
        if !slides.iter().any(|s| s.label == Label::Benign) {
            return Err(Error::EmptyClass("benign"));
        }
        let m = model.size_multiple();
        for (i, s) in slides.iter().enumerate() {
            if s.id != i {
                return Err(Error::Infeasible(format!(
                    "slide at position {i} has id {}",
                    s.id
                )));
            }
            if s.channels != model.in_channels {
                return Err(Error::Infeasible(format!(
                    "slide {i} has {} channels, model expects {}",
                    s.channels, model.in_channels
                )));
            }
            if s.height % m != 0 || s.width % m != 0 {
                return Err(Error::Infeasible(format!(
                    "slide {i} size {}x{} not a multiple of {m}",
                    s.height, s.width
                )));
            }
            if self.patch_size > s.height || self.patch_size > s.width {
                return Err(Error::Infeasible(format!(
                    "patch_size {} exceeds slide {i} ({}x{})",
                    self.patch_size, s.height, s.width
                )));
            }
        }
        Ok(())
    }
}

fn slide_loss(
    slide_logits: &SlideLogits,
    label: Label,
    beta: &BetaParams,
) -> Result<(f64, (f64, f64))> {
    let (q0, q1) = slide_class_probs(slide_logits);
    let clamped = DiscreteDist::bernoulli(q1.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))?;
    let target = DiscreteDist::one_hot(label.class(), 2)?;
    let beta = beta.as_array();
    let loss = beta_divergence(&target, &clamped, &beta)?;
    let g = beta_divergence_grad_q(&target, &clamped, &beta)?;
    // straight through the clamp, then through the two-class softmax
    let dl1 = q0 * q1 * (g[1] - g[0]);
    Ok((loss, (-dl1, dl1)))
}

/// Loss of one patch against its inherited label:
/// `L_beta(onehot(label) || softmax(aggregate(forward(patch))))`.
pub fn patch_loss<T: Real>(
    net: &Network<T>,
    pixels: &[T],
    size: usize,
    label: Label,
    eta: f64,
    beta: &BetaParams,
) -> Result<f64> {
    let logits = net.forward(pixels, size, size)?;
    let slide_logits = aggregate(&to_logit_map(&logits, size, size)?, eta)?;
    slide_loss(&slide_logits, label, beta).map(|(loss, _)| loss)
}

/// [`patch_loss`] and its parameter gradient.
pub fn patch_loss_and_grad<T: Real>(
    net: &Network<T>,
    pixels: &[T],
    size: usize,
    label: Label,
    eta: f64,
    beta: &BetaParams,
) -> Result<(f64, Gradients<T>)> {
    let (logits, cache) = net.forward_cached(pixels, size, size)?;
    let slide_logits = aggregate(&to_logit_map(&logits, size, size)?, eta)?;
    let (loss, slide_grad) = slide_loss(&slide_logits, label, beta)?;
    let upstream = aggregate_backward(slide_grad, &slide_logits, (size, size))?;
    let upstream: Vec<T> = upstream.values().iter().map(|&v| T::from_f64(v)).collect();
    Ok((loss, net.backward(&cache, &upstream)?))
}

/// Malign probability map of a whole slide, computed in overlapping tiles of
/// `chunk` pixels.
pub fn map_slide(net: &Network<f32>, slide: &SyntheticSlide, chunk: usize) -> Result<ProbMap> {
    let (h, w) = (slide.height, slide.width);
    let logits = match net.config.padding {
        Padding::Zero => net.forward_tiled(&slide.pixels, h, w, chunk)?,
        Padding::Periodic => net.forward(&slide.pixels, h, w)?,
    };
    Ok(pixel_softmax(&to_logit_map(&logits, h, w)?))
}

/// A published map and its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MapEntry {
    pub slide_id: usize,
    pub map: ProbMap,
    /// Training steps completed by the weights that produced the map.
    pub weights_version: u64,
    /// Mapping epoch in which the slide was selected.
    pub epoch: u64,
    /// Per-slide publication counter, starting at 1.
    pub version: u64,
    /// Training step at which the mapping pass started.
    pub pass_start: u64,
    pub checksum: u64,
}

/// Latest probability map of every slide. Entries are immutable and replaced
/// whole, so readers see either the old or the new map.
#[derive(Debug)]
pub struct MapStore {
    slots: Vec<RwLock<Option<Arc<MapEntry>>>>,
    latest: Mutex<Option<Arc<MapEntry>>>,
    torn_reads: AtomicU64,
    reads: AtomicU64,
}

impl MapStore {
    pub fn new(slide_count: usize) -> Self {
        MapStore {
            slots: (0..slide_count).map(|_| RwLock::new(None)).collect(),
            latest: Mutex::new(None),
            torn_reads: AtomicU64::new(0),
            reads: AtomicU64::new(0),
        }
    }

    pub fn slide_count(&self) -> usize {
        self.slots.len()
    }

    /// Replaces the map of `slide_id` and returns its new version.
    pub fn publish(
        &self,
        slide_id: usize,
        map: ProbMap,
        weights_version: u64,
        epoch: u64,
        pass_start: u64,
    ) -> u64 {
        let slot = &self.slots[slide_id];
        let mut guard = slot.write().unwrap_or_else(PoisonError::into_inner);
        let version = guard.as_ref().map_or(0, |e| e.version) + 1;
        let entry = Arc::new(MapEntry {
            slide_id,
            checksum: map.checksum(),
            map,
            weights_version,
            epoch,
            version,
            pass_start,
        });
        *guard = Some(entry.clone());
        drop(guard);
        *self.latest.lock().unwrap_or_else(PoisonError::into_inner) = Some(entry);
        version
    }

    fn verify(&self, entry: Option<Arc<MapEntry>>) -> Option<Arc<MapEntry>> {
        if let Some(e) = &entry {
            self.reads.fetch_add(1, Ordering::Relaxed);
            if e.map.checksum() != e.checksum {
                self.torn_reads.fetch_add(1, Ordering::Relaxed);
            }
        }
        entry
    }

    pub fn get(&self, slide_id: usize) -> Option<Arc<MapEntry>> {
        let entry = self.slots[slide_id]
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .clone();
        self.verify(entry)
    }

    /// Most recently published map of any slide.
    pub fn latest(&self) -> Option<Arc<MapEntry>> {
        let entry = self
            .latest
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .clone();
        self.verify(entry)
    }

    pub fn version(&self, slide_id: usize) -> u64 {
        self.slots[slide_id]
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .as_ref()
            .map_or(0, |e| e.version)
    }

    /// Reads whose checksum did not match the published one.
    pub fn torn_reads(&self) -> u64 {
        self.torn_reads.load(Ordering::Relaxed)
    }

    pub fn checked_reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn maps(&self) -> Vec<Option<Arc<MapEntry>>> {
        (0..self.slots.len()).map(|s| self.get(s)).collect()
    }
}

/// Maps every slide with `net` and publishes the results.
pub fn run_mapping_pass(
    net: &Network<f32>,
    slides: &[SyntheticSlide],
    chunk: usize,
    store: &MapStore,
    weights_version: u64,
) -> Result<()> {
    for (i, slide) in slides.iter().enumerate() {
        let map = map_slide(net, slide, chunk)?;
        store.publish(i, map, weights_version, 0, weights_version);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Slide whose map fed the buffer during this step.
    pub slide_id: usize,
    /// Fraction of malign-labelled patches in the batch without lesion pixels.
    pub gamma_estimate: Option<f64>,
    pub malign_patches: usize,
    pub noisy_patches: usize,
    pub buffer_fill: usize,
    /// Steps between the weights that produced the map in use and the current weights.
    pub staleness: u64,
    /// Steps since the mapping pass of the map in use started.
    pub map_lag: u64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub slide_id: usize,
    pub version: u64,
    pub weights_version: u64,
    pub epoch: u64,
    pub pass_start: u64,
}

/// Append-only record of a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub maps: Vec<MapRecord>,
    pub torn_reads: u64,
    pub checked_reads: u64,
    pub exchange_period: u64,
    pub slide_count: usize,
}

impl RunLog {
    /// CSV with columns `step,loss,slide_id,gamma_estimate,buffer_fill,staleness`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,slide_id,gamma_estimate,buffer_fill,staleness\n");
        for s in &self.steps {
            let gamma = s.gamma_estimate.map(|g| g.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{gamma},{},{}",
                s.step, s.loss, s.slide_id, s.buffer_fill, s.staleness
            );
        }
        out
    }

    /// CSV of mapping events: `slide_id,version,weights_version,epoch,pass_start`.
    pub fn maps_csv(&self) -> String {
        let mut out = String::from("slide_id,version,weights_version,epoch,pass_start\n");
        for m in &self.maps {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                m.slide_id, m.version, m.weights_version, m.epoch, m.pass_start
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn max_staleness(&self) -> u64 {
        self.steps.iter().map(|s| s.staleness).max().unwrap_or(0)
    }

    /// Steps whose staleness exceeds the exchange period plus the duration
    /// of the mapping pass behind the map in use.
    pub fn staleness_violations(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.staleness > self.exchange_period + s.map_lag)
            .count()
    }

    /// Pooled label-noise rate over the steps in `range`: noisy malign
    /// patches divided by malign patches.
    pub fn pooled_gamma(&self, range: Range<usize>) -> Option<f64> {
        let steps = &self.steps[range.start.min(self.steps.len())..range.end.min(self.steps.len())];
        let malign: usize = steps.iter().map(|s| s.malign_patches).sum();
        let noisy: usize = steps.iter().map(|s| s.noisy_patches).sum();
        (malign > 0).then(|| noisy as f64 / malign as f64)
    }

    /// Pooled label-noise rate over the final quarter of the steps.
    pub fn final_quarter_gamma(&self) -> Option<f64> {
        let n = self.steps.len();
        self.pooled_gamma(n - n / 4..n)
    }

    pub fn mean_loss(&self, range: Range<usize>) -> f64 {
        let steps = &self.steps[range];
        steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64
    }

    /// `counts[epoch][slide]`: mapping visits per epoch.
    pub fn visit_counts_per_epoch(&self) -> Vec<Vec<u64>> {
        let epochs = self.maps.iter().map(|m| m.epoch + 1).max().unwrap_or(0) as usize;
        let mut counts = vec![vec![0; self.slide_count]; epochs];
        for m in &self.maps {
            counts[m.epoch as usize][m.slide_id] += 1;
        }
        counts
    }

    /// Longest run of consecutive completed epochs without a visit, over all
    /// slides.
    pub fn max_unvisited_epochs(&self) -> u64 {
        let counts = self.visit_counts_per_epoch();
        // the last epoch may be incomplete
        let complete = counts.len().saturating_sub(1);
        let mut worst = 0;
        for s in 0..self.slide_count {
            let mut run = 0;
            for epoch in counts.iter().take(complete) {
                run = if epoch[s] == 0 { run + 1 } else { 0 };
                worst = worst.max(run);
            }
        }
        worst
    }
}

/// Explicit patches for one training step, bypassing map-based sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedStep {
    pub slide_id: usize,
    pub centers: Vec<(usize, usize)>,
    /// Dihedral element applied to each patch.
    pub transforms: Vec<usize>,
}

/// Overrides for the otherwise random slide and patch choices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schedule {
    /// Slides visited by the mapping worker, cycled.
    pub mapping: Option<Vec<usize>>,
    /// Patches pushed at each training step, indexed by step.
    pub training: Option<Vec<ForcedStep>>,
}

impl Schedule {
    /// Random forced schedule covering `steps` training steps.
    pub fn random(
        slides: &[SyntheticSlide],
        config: &PipelineConfig,
        steps: u64,
        seed: u64,
    ) -> Self {
        use rand::Rng as _;
        let mut rng = rng_from(seed);
        let training = (0..steps)
            .map(|_| {
                let slide = &slides[rng.gen_range(0..slides.len())];
                let n = config.patches_per_step.max(config.buffer_capacity);
                ForcedStep {
                    slide_id: slide.id,
                    centers: (0..n)
                        .map(|_| {
                            (
                                rng.gen_range(0..slide.height),
                                rng.gen_range(0..slide.width),
                            )
                        })
                        .collect(),
                    transforms: (0..n).map(|_| rng.gen_range(0..8)).collect(),
                }
            })
            .collect();
        Schedule {
            mapping: Some((0..slides.len()).collect()),
            training: Some(training),
        }
    }
}

struct Trainer<'a> {
    slides: &'a [SyntheticSlide],
    config: &'a PipelineConfig,
    net: Network<f32>,
    opt: Sgd<f32>,
    buffer: ShuffleBuffer<Patch>,
    rng: Rng,
    step: u64,
}

impl<'a> Trainer<'a> {
    fn new(
        slides: &'a [SyntheticSlide],
        model: &NetworkConfig,
        config: &'a PipelineConfig,
    ) -> Result<Self> {
        let net = Network::init(model)?;
        Ok(Trainer {
            slides,
            config,
            opt: Sgd::new(&net, config.train_step())?,
            net,
            buffer: ShuffleBuffer::new(config.buffer_capacity, config.min_fill_fraction)?,
            rng: rng_from(derive2(config.seed, TAG_TRAIN, 0)),
            step: 0,
        })
    }

    fn push(&mut self, patch: Patch) {
        self.buffer.push(patch, &mut self.rng);
    }

    fn fill_from_map(&mut self, entry: &MapEntry) -> Result<()> {
        let slide = &self.slides[entry.slide_id];
        let dist = patch_distribution(entry.slide_id, &entry.map, self.config.alpha)?;
        while !self.buffer.is_ready(self.config.batch_size) {
            let centers = sample_patch_centers(&dist, self.config.patches_per_step, &mut self.rng);
            for c in centers {
                let patch = extract_patch(slide, c, self.config.patch_size)?;
                let patch = if self.config.augment {
                    augment(&patch, &mut self.rng)?
                } else {
                    patch
                };
                self.push(patch);
            }
        }
        Ok(())
    }

    fn fill_forced(&mut self, forced: &ForcedStep) -> Result<()> {
        if forced.centers.len() != forced.transforms.len() {
            return Err(Error::LengthMismatch {
                expected: forced.centers.len(),
                actual: forced.transforms.len(),
            });
        }
        let slide = self.slides.get(forced.slide_id).ok_or_else(|| {
            Error::Infeasible(format!("forced slide {} does not exist", forced.slide_id))
        })?;
        for (&c, &t) in forced.centers.iter().zip(&forced.transforms) {
            let patch = apply_dihedral(&extract_patch(slide, c, self.config.patch_size)?, t)?;
            self.push(patch);
        }
        if !self.buffer.is_ready(self.config.batch_size) {
            return Err(Error::Infeasible(format!(
                "forced step {} leaves the buffer under-filled",
                self.step
            )));
        }
        Ok(())
    }

    fn train(&mut self, entry: &MapEntry, forced: Option<&ForcedStep>) -> Result<StepRecord> {
        let slide_id = match forced {
            Some(f) => {
                self.fill_forced(f)?;
                f.slide_id
            }
            None => {
                self.fill_from_map(entry)?;
                entry.slide_id
            }
        };
        let batch = self
            .buffer
            .pop_batch(self.config.batch_size, &mut self.rng)?;
        let mut grads = Gradients::zeros_like(&self.net);
        let mut loss = 0.0;
        let beta = if self.step < self.config.kl_warmup_steps {
            BetaParams::KL
        } else {
            self.config.beta
        };
        for patch in &batch {
            let (l, g) = patch_loss_and_grad(
                &self.net,
                &patch.pixels,
                patch.size,
                patch.inherited_label,
                self.config.eta,
                &beta,
            )?;
            loss += l;
            grads.add_assign(&g);
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        let grad_norm = self.opt.apply(&mut self.net, &mut grads);
        if self.net.params().any(|p| !p.is_finite()) {
            return Err(Error::Worker(format!(
                "non-finite weights after step {}",
                self.step
            )));
        }
        let malign: Vec<&Patch> = batch
            .iter()
            .filter(|p| p.inherited_label == Label::Malign)
            .collect();
        let noisy = malign.iter().filter(|p| p.is_lesion_free()).count();
        let record = StepRecord {
            step: self.step,
            loss: loss / n,
            slide_id,
            gamma_estimate: (!malign.is_empty()).then(|| noisy as f64 / malign.len() as f64),
            malign_patches: malign.len(),
            noisy_patches: noisy,
            buffer_fill: self.buffer.len(),
            staleness: self.step - entry.weights_version.min(self.step),
            map_lag: self.step - entry.pass_start.min(self.step),
            grad_norm,
        };
        self.step += 1;
        Ok(record)
    }

    fn forced_step(&self, schedule: &'a Schedule) -> Result<Option<&'a ForcedStep>> {
        match &schedule.training {
            None => Ok(None),
            Some(steps) => steps.get(self.step as usize).map(Some).ok_or_else(|| {
                Error::Infeasible(format!("forced schedule ends before step {}", self.step))
            }),
        }
    }
}

struct Mapper<'a> {
    slides: &'a [SyntheticSlide],
    selection: SlideSelectionState,
    rng: Rng,
    chunk: usize,
    forced: Option<&'a [usize]>,
    cursor: usize,
}

impl<'a> Mapper<'a> {
    fn new(
        slides: &'a [SyntheticSlide],
        config: &PipelineConfig,
        schedule: &'a Schedule,
    ) -> Result<Self> {
        let selection = SlideSelectionState::new(
            slides.iter().map(|s| s.label).collect(),
            slides.iter().map(|s| s.pixel_count()).collect(),
            config.staleness_bound,
        )?;
        if let Some(ids) = &schedule.mapping {
            if ids.is_empty() || ids.iter().any(|&s| s >= slides.len()) {
                return Err(Error::Infeasible(
                    "forced mapping schedule is empty or out of range".into(),
                ));
            }
        }
        Ok(Mapper {
            slides,
            selection,
            rng: rng_from(derive2(config.seed, TAG_MAP, 0)),
            chunk: config.map_chunk_size,
            forced: schedule.mapping.as_deref(),
            cursor: 0,
        })
    }

    /// Maps one slide with `net` and publishes it.
    fn act(
        &mut self,
        net: &Network<f32>,
        weights_version: u64,
        pass_start: u64,
        store: &MapStore,
    ) -> Result<MapRecord> {
        let epoch = self.selection.epoch();
        let slide_id = match self.forced {
            Some(ids) => {
                let s = ids[self.cursor % ids.len()];
                self.cursor += 1;
                s
            }
            None => self.selection.next_slide(&mut self.rng),
        };
        let map = map_slide(net, &self.slides[slide_id], self.chunk)?;
        self.selection.record_map(slide_id, &map);
        let version = store.publish(slide_id, map, weights_version, epoch, pass_start);
        Ok(MapRecord {
            slide_id,
            version,
            weights_version,
            epoch,
            pass_start,
        })
    }
}

/// Final weights, run log and maps of a training run.
#[derive(Debug)]
pub struct TrainingRun {
    pub weights: Network<f32>,
    pub log: RunLog,
    pub store: MapStore,
}

/// Single-threaded pipeline: each call to [`Self::step`] performs one mapping
/// action followed by `train_steps_per_map` training steps.
pub struct InterleavedState<'a> {
    trainer: Trainer<'a>,
    mapper: Mapper<'a>,
    schedule: &'a Schedule,
    store: MapStore,
    snapshot: Arc<Network<f32>>,
    snapshot_version: u64,
    log: RunLog,
}

impl<'a> InterleavedState<'a> {
    pub fn new(
        slides: &'a [SyntheticSlide],
        model: &NetworkConfig,
        config: &'a PipelineConfig,
        schedule: &'a Schedule,
    ) -> Result<Self> {
        config.validate_dataset(model, slides)?;
        let trainer = Trainer::new(slides, model, config)?;
        Ok(InterleavedState {
            mapper: Mapper::new(slides, config, schedule)?,
            schedule,
            store: MapStore::new(slides.len()),
            snapshot: Arc::new(trainer.net.clone()),
            snapshot_version: 0,
            log: RunLog {
                exchange_period: config.exchange_period,
                slide_count: slides.len(),
                ..RunLog::default()
            },
            trainer,
        })
    }

    pub fn step(&mut self) -> Result<()> {
        let record = self.mapper.act(
            &self.snapshot,
            self.snapshot_version,
            self.trainer.step,
            &self.store,
        )?;
        self.log.maps.push(record);
        let config = self.trainer.config;
        for _ in 0..config.train_steps_per_map {
            if self.finished() {
                break;
            }
            let entry = self.store.latest().expect("a map was just published");
            let forced = self.trainer.forced_step(self.schedule)?;
            let record = self.trainer.train(&entry, forced)?;
            self.log.steps.push(record);
            if self.trainer.step.is_multiple_of(config.exchange_period) {
                self.snapshot = Arc::new(self.trainer.net.clone());
                self.snapshot_version = self.trainer.step;
            }
        }
        Ok(())
    }

    pub fn finished(&self) -> bool {
        self.trainer.step >= self.trainer.config.total_steps
    }

    pub fn weights(&self) -> &Network<f32> {
        &self.trainer.net
    }

    pub fn store(&self) -> &MapStore {
        &self.store
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn into_run(mut self) -> TrainingRun {
        self.log.torn_reads = self.store.torn_reads();
        self.log.checked_reads = self.store.checked_reads();
        TrainingRun {
            weights: self.trainer.net,
            log: self.log,
            store: self.store,
        }
    }
}

/// One round of the deterministic schedule.
pub fn step_interleaved(state: &mut InterleavedState<'_>) -> Result<()> {
    state.step()
}

pub fn run_training(
    slides: &[SyntheticSlide],
    model: &NetworkConfig,
    config: &PipelineConfig,
) -> Result<TrainingRun> {
    run_training_with(slides, model, config, &Schedule::default())
}

/// [`run_training`] with optional forced slide and patch choices.
pub fn run_training_with(
    slides: &[SyntheticSlide],
    model: &NetworkConfig,
    config: &PipelineConfig,
    schedule: &Schedule,
) -> Result<TrainingRun> {
    if config.deterministic {
        run_interleaved(slides, model, config, schedule)
    } else {
        run_concurrent(slides, model, config, schedule)
    }
}

fn run_interleaved(
    slides: &[SyntheticSlide],
    model: &NetworkConfig,
    config: &PipelineConfig,
    schedule: &Schedule,
) -> Result<TrainingRun> {
    if config.train_steps_per_map == 0 {
        return Err(Error::Infeasible(
            "train_steps_per_map must be positive to finish training".into(),
        ));
    }
    let mut state = InterleavedState::new(slides, model, config, schedule)?;
    while !state.finished() {
        state.step()?;
    }
    Ok(state.into_run())
}

/// Sets the flag when dropped, including during unwinding.
struct SetOnDrop<'a>(&'a AtomicBool);

impl Drop for SetOnDrop<'_> {
    fn drop(&mut self) {
        self.0.store(true, Ordering::Release);
    }
}

fn run_concurrent(
    slides: &[SyntheticSlide],
    model: &NetworkConfig,
    config: &PipelineConfig,
    schedule: &Schedule,
) -> Result<TrainingRun> {
    config.validate_dataset(model, slides)?;
    let mut trainer = Trainer::new(slides, model, config)?;
    let mut mapper = Mapper::new(slides, config, schedule)?;
    let store = MapStore::new(slides.len());
    let snapshot = Mutex::new((0u64, Arc::new(trainer.net.clone())));
    let steps_done = AtomicU64::new(0);
    let training_done = AtomicBool::new(false);
    let mapping_failed = AtomicBool::new(false);

    let (map_result, train_result) = thread::scope(|scope| {
        let mapping = scope.spawn(|| {
            let _failed_guard = scopeguard_on_err(&mapping_failed);
            let mut records = Vec::new();
            while !training_done.load(Ordering::Acquire) {
                let pass_start = steps_done.load(Ordering::Acquire);
                let (version, net) = snapshot
                    .lock()
                    .unwrap_or_else(PoisonError::into_inner)
                    .clone();
                records.push(mapper.act(&net, version, pass_start, &store)?);
            }
            _failed_guard.disarm();
            Ok::<_, Error>(records)
        });
        let training = scope.spawn(|| {
            let _done = SetOnDrop(&training_done);
            let mut records = Vec::new();
            let mut backoff = Duration::from_micros(100);
            while trainer.step < config.total_steps {
                if mapping_failed.load(Ordering::Acquire) {
                    return Err(Error::Worker("mapping worker stopped".into()));
                }
                let Some(entry) = store.latest() else {
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_millis(20));
                    continue;
                };
                let forced = trainer.forced_step(schedule)?;
                records.push(trainer.train(&entry, forced)?);
                if trainer.step % config.exchange_period == 0 {
                    *snapshot.lock().unwrap_or_else(PoisonError::into_inner) =
                        (trainer.step, Arc::new(trainer.net.clone()));
                }
                steps_done.store(trainer.step, Ordering::Release);
            }
            Ok::<_, Error>(records)
        });
        let train_result = training
            .join()
            .unwrap_or_else(|_| Err(Error::Worker("training worker panicked".into())));
        let map_result = mapping
            .join()
            .unwrap_or_else(|_| Err(Error::Worker("mapping worker panicked".into())));
        (map_result, train_result)
    });
    let (maps, steps) = match (map_result, train_result) {
        (Err(e), _) => return Err(Error::Worker(format!("mapping worker: {e}"))),
        (_, Err(e)) => return Err(Error::Worker(format!("training worker: {e}"))),
        (Ok(maps), Ok(steps)) => (maps, steps),
    };
    Ok(TrainingRun {
        weights: trainer.net,
        log: RunLog {
            steps,
            maps,
            torn_reads: store.torn_reads(),
            checked_reads: store.checked_reads(),
            exchange_period: config.exchange_period,
            slide_count: slides.len(),
        },
        store,
    })
}

struct FailGuard<'a> {
    flag: &'a AtomicBool,
    armed: bool,
}

impl FailGuard<'_> {
    fn disarm(mut self) {
        self.armed = false;
    }
}

impl Drop for FailGuard<'_> {
    fn drop(&mut self) {
        if self.armed {
            self.flag.store(true, Ordering::Release);
        }
    }
}

fn scopeguard_on_err(flag: &AtomicBool) -> FailGuard<'_> {
    FailGuard { flag, armed: true }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthwsi::{generate_dataset, DatasetSpec};

    fn dataset(slides: usize, size: usize, fraction: f64, seed: u64) -> Vec<SyntheticSlide> {
        generate_dataset(&DatasetSpec {
            slide_count: slides,
            height: size,
            width: size,
            lesion_fraction_min: fraction,
            lesion_fraction_max: fraction,
            seed,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    fn small_config(steps: u64) -> PipelineConfig {
        PipelineConfig {
            patch_size: 16,
            batch_size: 4,
            patches_per_step: 4,
            buffer_capacity: 16,
            map_chunk_size: 16,
            total_steps: steps,
            exchange_period: 5,
            train_steps_per_map: 2,
            deterministic: true,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn tiled_map_equals_whole_map() {
        let slides = dataset(2, 32, 0.05, 1);
        let net = Network::<f32>::init(&NetworkConfig::default()).unwrap();
        let whole = map_slide(&net, &slides[0], 32).unwrap();
        let tiled = map_slide(&net, &slides[0], 16).unwrap();
        assert_eq!(whole.shape(), (32, 32));
        assert!(whole
            .values()
            .iter()
            .zip(tiled.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn untrained_maps_are_near_one_half() {
        let slides = dataset(2, 32, 0.05, 2);
        for seed in 0..3 {
            let net = Network::<f32>::init(&NetworkConfig {
                seed,
                ..NetworkConfig::default()
            })
            .unwrap();
            let map = map_slide(&net, &slides[1], 32).unwrap();
            let mean = map.sum() / 1024.0;
            assert!((mean - 0.5).abs() < 0.2, "seed {seed}: mean {mean}");
            assert!(map.values().iter().all(|&q| (0.05..=0.95).contains(&q)));
        }
    }

    #[test]
    fn publishing_increments_version_by_one() {
        let store = MapStore::new(3);
        assert_eq!(store.version(1), 0);
        assert_eq!(store.publish(1, ProbMap::filled(4, 4, 0.3), 0, 0, 0), 1);
        assert_eq!(store.publish(1, ProbMap::filled(4, 4, 0.4), 5, 0, 5), 2);
        assert_eq!(store.version(1), 2);
        assert_eq!(store.version(0), 0);
        let latest = store.latest().unwrap();
        assert_eq!((latest.slide_id, latest.weights_version), (1, 5));
        assert_eq!(store.torn_reads(), 0);
    }

    #[test]
    fn slide_loss_gradient_matches_finite_differences() {
        for &label in &[Label::Benign, Label::Malign] {
            for beta in [
                BetaParams::KL,
                BetaParams::new(0.2, 0.6).unwrap(),
                BetaParams::new(0.0, 1.0).unwrap(),
            ] {
                let logits = SlideLogits {
                    l0: 0.3,
                    l1: -0.4,
                    eta: 50.0,
                    top_set: vec![0],
                };
                let (_, (d0, d1)) = slide_loss(&logits, label, &beta).unwrap();
                let eps = 1e-6;
                let at = |l0: f64, l1: f64| {
                    slide_loss(
                        &SlideLogits {
                            l0,
                            l1,
                            ..logits.clone()
                        },
                        label,
                        &beta,
                    )
                    .unwrap()
                    .0
                };
                let fd0 = (at(0.3 + eps, -0.4) - at(0.3 - eps, -0.4)) / (2.0 * eps);
                let fd1 = (at(0.3, -0.4 + eps) - at(0.3, -0.4 - eps)) / (2.0 * eps);
                assert!((fd0 - d0).abs() < 1e-7 && (fd1 - d1).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn deterministic_runs_are_identical() {
        let slides = dataset(4, 32, 0.05, 3);
        let model = NetworkConfig::default();
        let config = small_config(12);
        let a = run_training(&slides, &model, &config).unwrap();
        let b = run_training(&slides, &model, &config).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.steps.len(), 12);
        assert_ne!(a.weights, Network::init(&model).unwrap());
    }

    #[test]
    fn zero_training_steps_per_round_never_change_weights() {
        let slides = dataset(4, 32, 0.05, 4);
        let model = NetworkConfig::default();
        let config = PipelineConfig {
            train_steps_per_map: 0,
            ..small_config(10)
        };
        let schedule = Schedule::default();
        let mut state = InterleavedState::new(&slides, &model, &config, &schedule).unwrap();
        let initial = state.weights().clone();
        for _ in 0..slides.len() {
            step_interleaved(&mut state).unwrap();
        }
        assert_eq!(state.weights(), &initial);
        // mapping-only schedule covers every slide within the first epoch
        assert!((0..slides.len()).all(|s| state.store().version(s) == 1));
        assert!(state.log().maps.iter().all(|m| m.epoch == 0));
        assert!(run_training(&slides, &model, &config).is_err());
    }

    #[test]
    fn clean_labels_reduce_training_loss() {
        let slides = dataset(4, 32, 1.0, 5);
        let model = NetworkConfig::default();
        let config = PipelineConfig {
            beta: BetaParams::KL,
            ..small_config(200)
        };
        let run = run_training(&slides, &model, &config).unwrap();
        let first = run.log.mean_loss(0..20);
        let last = run.log.mean_loss(180..200);
        assert!(last < first, "loss {first} -> {last}");
        assert_eq!(run.log.pooled_gamma(0..200), Some(0.0));
    }

    #[test]
    fn noiseless_micro_dataset_descends_monotonically() {
        let slides = dataset(2, 16, 1.0, 6);
        let mut net = Network::<f32>::init(&NetworkConfig::default()).unwrap();
        let mut opt = Sgd::new(
            &net,
            TrainStep {
                learning_rate: 0.05,
                momentum: 0.0,
                batch_size: 2,
                clip_norm: 5.0,
            },
        )
        .unwrap();
        let beta = BetaParams::KL;
        let mut previous = f64::INFINITY;
        for step in 0..50 {
            let mut grads = Gradients::zeros_like(&net);
            let mut loss = 0.0;
            for slide in &slides {
                let (l, g) =
                    patch_loss_and_grad(&net, &slide.pixels, 16, slide.label, 50.0, &beta).unwrap();
                loss += l / 2.0;
                grads.add_assign(&g);
            }
            grads.scale(0.5);
            assert!(loss < previous, "step {step}: {loss} >= {previous}");
            previous = loss;
            opt.apply(&mut net, &mut grads);
        }
    }

    #[test]
    fn interleaved_and_concurrent_agree_under_forced_schedule() {
        let slides = dataset(4, 32, 0.05, 7);
        let model = NetworkConfig::default();
        let config = small_config(15);
        let schedule = Schedule::random(&slides, &config, config.total_steps, 8);
        let interleaved = run_training_with(&slides, &model, &config, &schedule).unwrap();
        let concurrent = run_training_with(
            &slides,
            &model,
            &PipelineConfig {
                deterministic: false,
                ..config.clone()
            },
            &schedule,
        )
        .unwrap();
        assert_eq!(interleaved.weights, concurrent.weights);
        let losses = |r: &TrainingRun| r.log.steps.iter().map(|s| s.loss).collect::<Vec<_>>();
        assert_eq!(losses(&interleaved), losses(&concurrent));
    }

    #[test]
    fn concurrent_run_keeps_its_invariants() {
        let slides = dataset(4, 32, 0.05, 9);
        let config = PipelineConfig {
            deterministic: false,
            ..small_config(60)
        };
        let run = run_training(&slides, &NetworkConfig::default(), &config).unwrap();
        assert_eq!(run.log.steps.len(), 60);
        assert_eq!(run.log.torn_reads, 0);
        assert!(run.log.checked_reads >= 60);
        assert_eq!(run.log.staleness_violations(), 0);
        assert!(run.log.max_unvisited_epochs() < config.staleness_bound);
    }

    #[test]
    fn interleaved_staleness_is_bounded() {
        let slides = dataset(4, 32, 0.05, 10);
        let config = small_config(40);
        let run = run_training(&slides, &NetworkConfig::default(), &config).unwrap();
        assert!(run.log.max_staleness() < config.exchange_period + config.train_steps_per_map);
        assert_eq!(run.log.staleness_violations(), 0);
        let csv = run.log.to_csv();
        assert!(csv.starts_with("step,loss,slide_id,gamma_estimate,buffer_fill,staleness\n"));
        assert_eq!(csv.lines().count(), 41);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let slides = dataset(4, 32, 0.05, 11);
        let model = NetworkConfig::default();
        let bad_patch = PipelineConfig {
            patch_size: 18,
            ..small_config(5)
        };
        assert!(matches!(
            run_training(&slides, &model, &bad_patch),
            Err(Error::Infeasible(_))
        ));
        let too_big = PipelineConfig {
            patch_size: 64,
            ..small_config(5)
        };
        assert!(run_training(&slides, &model, &too_big).is_err());
        let benign: Vec<SyntheticSlide> = slides
            .iter()
            .filter(|s| s.label == Label::Benign)
            .cloned()
            .collect();
        assert!(run_training(&benign, &model, &small_config(5)).is_err());
        let json = r#"{"alpha": 1.0, "bogus": 3}"#;
        let err = serde_json::from_str::<PipelineConfig>(json)
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"));
    }

    #[test]
    fn worker_failure_aborts_the_run() {
        let slides = dataset(4, 32, 0.05, 12);
        let config = PipelineConfig {
            deterministic: false,
            ..small_config(5)
        };
        let mut schedule = Schedule::random(&slides, &config, 5, 13);
        schedule.training.as_mut().unwrap()[2].slide_id = 99;
        let err =
            run_training_with(&slides, &NetworkConfig::default(), &config, &schedule).unwrap_err();
        assert!(matches!(err, Error::Worker(_)), "{err}");
    }
}
