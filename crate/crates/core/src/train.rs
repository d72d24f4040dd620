//! Patch-based training loop with validation-driven model selection,
//! early stopping, JSONL progress logging and exact resume.
//!
//! All randomness (shuffling, patch placement, augmentation, dropout) is drawn
//! from streams keyed by `(seed, purpose, epoch, ordinal)`, so a run resumed
//! at an epoch boundary continues bit-identically.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_transform, sample_transform, AugmentationPolicy};
use crate::checkpoint::{Checkpoint, RngState, TrainProgress};
use crate::dataset::{load_case, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::infer::{predict_logits, threshold_logits, InferenceConfig, LogitModel};
use crate::losses::{loss_and_logit_grad, LossConfig};
use crate::metrics::dice_score;
use crate::model::{spec_for_variant, ArchitectureSpec, Model, Normalization};
use crate::optim::{AdamState, OptimizerConfig};
use crate::volume::{labels_to_regions, LabelMap, MultiModalVolume, Region, RegionMapping};

/// Optional overrides applied on top of a named variant's canonical spec.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub depth: Option<usize>,
    pub base_channels: Option<usize>,
    pub normalization: Option<Normalization>,
    pub dropout_rate: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant_name: String,
    pub model: ModelOverrides,
    pub loss: LossConfig,
    pub augmentation: AugmentationPolicy,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: u64,
    /// Hard cap on optimizer steps, checked after every step.
    pub max_steps: Option<u64>,
    pub patch_size: [usize; 3],
    /// Share of patches centered on a tumor voxel.
    pub tumor_patch_fraction: f64,
    /// Validate every this many epochs.
    pub val_interval: u64,
    /// Validation rounds without improvement before stopping.
    pub patience: u64,
    /// Probability cut used when scoring validation predictions.
    pub val_threshold: f64,
    pub val_overlap: f64,
    pub seed: u64,
    /// Parameter initialization seed; defaults to `seed`.
    pub init_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant_name: "unet3d".into(),
            model: ModelOverrides::default(),
            loss: LossConfig::default(),
            augmentation: AugmentationPolicy::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 1,
            max_epochs: 100,
            max_steps: None,
            patch_size: [96; 3],
            tumor_patch_fraction: 0.5,
            val_interval: 1,
            patience: 10,
            val_threshold: 0.5,
            val_overlap: 0.25,
            seed: 0,
            init_seed: None,
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        let mut spec = spec_for_variant(&self.variant_name)?;
        let o = &self.model;
        if let Some(d) = o.depth {
            spec.depth = d;
        }
        if let Some(b) = o.base_channels {
            spec.base_channels = b;
        }
        if let Some(n) = o.normalization {
            spec.normalization = n;
        }
        if let Some(r) = o.dropout_rate {
            spec.dropout_rate = r;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.architecture()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.augmentation.validate()?;
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        let d = spec.divisor();
        if self.patch_size.iter().any(|p| *p == 0 || p % d != 0) {
            return bad(format!("patch size {:?} must be divisible by {d}", self.patch_size));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.val_interval == 0 {
            return bad("max_epochs, batch_size and val_interval must be positive".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tumor_patch_fraction) {
            return bad(format!("tumor_patch_fraction must lie in [0, 1], got {}", self.tumor_patch_fraction));
        }
        if !(self.val_threshold > 0.0 && self.val_threshold < 1.0) {
            return bad(format!("val_threshold must lie in (0, 1), got {}", self.val_threshold));
        }
        if !(0.0..1.0).contains(&self.val_overlap) {
            return bad(format!("val_overlap must lie in [0, 1), got {}", self.val_overlap));
        }
        Ok(())
    }

    fn inference(&self) -> InferenceConfig {
        InferenceConfig { patch_size: self.patch_size, overlap: self.val_overlap, ..Default::default() }
    }
}

/// One normalized, labeled training case.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub volume: MultiModalVolume,
    pub labels: LabelMap,
}

/// One line of the progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dice: Option<BTreeMap<Region, f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainRun {
    /// Receives `best.ckpt`, `last.ckpt` and `train_log.jsonl` when set.
    pub output_dir: Option<PathBuf>,
    /// Continue from this checkpoint (normally `last.ckpt`).
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<LogRecord>,
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_PATCH: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

fn stream(seed: u64, purpose: u64, epoch: u64, ordinal: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) ^ (epoch << 24) ^ ordinal);
    rng
}

/// Mean plain Dice per region (ET, TC, WT) over `cases`, binarizing sigmoid
/// probabilities at `threshold`.
pub fn validate(
    model: &dyn LogitModel,
    cases: &[TrainSample],
    mapping: &RegionMapping,
    threshold: f64,
    infer: &InferenceConfig,
) -> Result<[f64; 3]> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cut = (threshold / (1.0 - threshold)).ln();
    let mut sums = [0.0; 3];
    for c in cases {
        let logits = predict_logits(model, &c.volume, infer)?;
        let pred = threshold_logits(&logits.data, cut, c.volume.spacing)?;
        let gt = labels_to_regions(&c.labels, mapping, c.volume.spacing)?;
        for r in Region::ALL {
            sums[r.index()] += dice_score(pred.region(r), gt.region(r))?;
        }
    }
    Ok(sums.map(|s| s / cases.len() as f64))
}

/// Cuts a `patch`-sized window at `start`, zero-filling outside the volume.
fn crop(sample: &TrainSample, start: [isize; 3], patch: [usize; 3]) -> Result<(MultiModalVolume, LabelMap)> {
    let shape = sample.volume.spatial_shape();
    let mut img = Array4::<f32>::zeros((4, patch[0], patch[1], patch[2]));
    let mut lab = Array3::<i32>::zeros(patch);
    let lo: [usize; 3] = std::array::from_fn(|i| start[i].max(0) as usize);
    let hi: [usize; 3] = std::array::from_fn(|i| ((start[i] + patch[i] as isize).min(shape[i] as isize)) as usize);
    let dst: [usize; 3] = std::array::from_fn(|i| (lo[i] as isize - start[i]) as usize);
    let ext: [usize; 3] = std::array::from_fn(|i| hi[i] - lo[i]);
    img.slice_mut(s![.., dst[0]..dst[0] + ext[0], dst[1]..dst[1] + ext[1], dst[2]..dst[2] + ext[2]])
        .assign(&sample.volume.data().slice(s![.., lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]));
    lab.slice_mut(s![dst[0]..dst[0] + ext[0], dst[1]..dst[1] + ext[1], dst[2]..dst[2] + ext[2]])
        .assign(&sample.labels.data().slice(s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]));
    Ok((
        sample.volume.with_data(img)?,
        LabelMap::new(lab, sample.labels.vocabulary.iter().copied(), sample.labels.case_id.clone())?,
    ))
}

/// Random patch origin; with probability `tumor_fraction` the patch is
/// centered on a random foreground voxel. Volumes smaller than the patch
/// are centered inside it.
fn patch_origin(sample: &TrainSample, patch: [usize; 3], tumor_fraction: f64, rng: &mut ChaCha8Rng) -> [isize; 3] {
    let shape = sample.volume.spatial_shape();
    let slack: [isize; 3] = std::array::from_fn(|i| shape[i] as isize - patch[i] as isize);
    let want_tumor = rng.random_bool(tumor_fraction);
    let center = if want_tumor {
        let fg = sample.labels.data().iter().filter(|v| **v != 0).count();
        if fg > 0 {
            let pick = rng.random_range(0..fg);
            sample.labels.data().indexed_iter().filter(|(_, v)| **v != 0).nth(pick).map(|((x, y, z), _)| [x, y, z])
        } else {
            None
        }
    } else {
        None
    };
    std::array::from_fn(|i| {
        if slack[i] <= 0 {
            slack[i] / 2
        } else {
            match center {
                Some(c) => (c[i] as isize - patch[i] as isize / 2).clamp(0, slack[i]),
                None => rng.random_range(0..=slack[i] as i64) as isize,
            }
        }
    })
}

fn flatten(x: &Array4<f32>) -> Array2<f32> {
    let c = x.shape()[0];
    let n = x.len() / c;
    x.as_standard_layout().into_owned().into_shape_with_order((c, n)).expect("contiguous")
}

struct Logger {
    file: Option<BufWriter<File>>,
    history: Vec<LogRecord>,
}

impl Logger {
    fn emit(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.history.push(rec);
        Ok(())
    }
}

/// Trains one model. `val` may be empty, in which case the training cases
/// are scored for model selection.
pub fn train(cfg: &TrainConfig, train_set: &[TrainSample], val_set: &[TrainSample], mapping: &RegionMapping, run: TrainRun) -> Result<TrainOutcome> {
    cfg.validate()?;
    mapping.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in train_set.iter().chain(val_set) {
        s.labels.check_aligned(&s.volume)?;
    }
    let spec = cfg.architecture()?;
    let val_cases = if val_set.is_empty() { train_set } else { val_set };

    let (mut model, mut opt, mut progress) = match run.resume {
        Some(ck) => {
            if ck.model.spec() != &spec {
                return Err(Error::InvalidCheckpoint("resume checkpoint was trained with a different architecture".into()));
            }
            let progress = ck.progress.ok_or_else(|| Error::InvalidCheckpoint("checkpoint has no training progress".into()))?;
            if progress.rng.seed != cfg.seed {
                log::warn!("resuming with seed {} but checkpoint recorded seed {}", cfg.seed, progress.rng.seed);
            }
            let opt = ck.optimizer.unwrap_or_else(|| AdamState::new(&ck.model.params));
            (ck.model, opt, progress)
        }
        None => {
            let model = Model::build(&spec, cfg.init_seed.unwrap_or(cfg.seed))?;
            let opt = AdamState::new(&model.params);
            let progress = TrainProgress {
                epoch: 0,
                step: 0,
                best_val_dice: None,
                best_epoch: None,
                validations_since_improvement: 0,
                rng: RngState { seed: cfg.seed, next_epoch: 0 },
            };
            (model, opt, progress)
        }
    };

    let out = run.output_dir.as_deref();
    let mut logger = Logger { file: None, history: Vec::new() };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let f = OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?;
        logger.file = Some(BufWriter::new(f));
    }
    let mut best_model: Option<Model> = None;
    let infer = cfg.inference();
    let patch = cfg.patch_size;
    let aug_seed = cfg.seed ^ cfg.augmentation.seed.rotate_left(17);
    let mut stop = false;

    let mut epoch = progress.rng.next_epoch;
    while epoch < cfg.max_epochs && !stop {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, STREAM_SHUFFLE, epoch, 0));
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = model.params.zeros_like();
            let mut loss = 0.0;
            for (k, &idx) in batch.iter().enumerate() {
                let ordinal = (b * cfg.batch_size + k) as u64;
                let sample = &train_set[idx];
                let origin = patch_origin(sample, patch, cfg.tumor_patch_fraction, &mut stream(cfg.seed, STREAM_PATCH, epoch, ordinal));
                let (vol, labels) = crop(sample, origin, patch)?;
                let t = sample_transform(&cfg.augmentation, &mut stream(aug_seed, STREAM_AUGMENT, epoch, ordinal))?;
                let (vol, labels) = if t.is_identity() { (vol, labels) } else { apply_transform(&t, &vol, &labels)? };
                let targets = labels_to_regions(&labels, mapping, vol.spacing)?.to_channels();
                let mut drop_rng = stream(cfg.seed, STREAM_DROPOUT, epoch, ordinal);
                let (logits, cache) = model.forward_train(vol.data(), Some(&mut drop_rng))?;
                let (l, g) = loss_and_logit_grad(&cfg.loss, &flatten(&logits), &flatten(&targets).mapv(|v| v as f64))?;
                if !l.is_finite() {
                    return Err(Error::DivergedLoss { step: progress.step + 1, value: l });
                }
                loss += l / batch.len() as f64;
                let g = g.mapv(|v| v / batch.len() as f32).into_shape_with_order(logits.raw_dim()).expect("same size");
                model.backward(&cache, &g, &mut grads);
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::DivergedLoss { step: progress.step + 1, value: f64::NAN });
            }
            opt.update(&cfg.optimizer, &mut model.params, &grads);
            model.trained_steps += 1;
            progress.step += 1;
            logger.emit(LogRecord { step: progress.step, epoch, loss, lr: cfg.optimizer.learning_rate, val_dice: None })?;
            if cfg.max_steps.is_some_and(|m| progress.step >= m) {
                stop = true;
                break;
            }
        }
        progress.epoch = epoch;
        progress.rng.next_epoch = epoch + 1;

        let last_epoch = stop || epoch + 1 == cfg.max_epochs;
        if (epoch + 1) % cfg.val_interval == 0 || last_epoch {
            let dice = validate(&model, val_cases, mapping, cfg.val_threshold, &infer)?;
            let mean = dice.iter().sum::<f64>() / 3.0;
            log::info!("epoch {epoch} step {} validation dice {dice:?}", progress.step);
            let improved = progress.best_val_dice.is_none_or(|b| mean > b.iter().sum::<f64>() / 3.0);
            if improved {
                progress.best_val_dice = Some(dice);
                progress.best_epoch = Some(epoch);
                progress.validations_since_improvement = 0;
                best_model = Some(model.clone());
                if let Some(dir) = out {
                    Checkpoint { model: model.clone(), optimizer: None, progress: Some(progress.clone()) }.save(&dir.join("best.ckpt"))?;
                }
            } else {
                progress.validations_since_improvement += 1;
                if progress.validations_since_improvement >= cfg.patience {
                    log::info!("early stop after {} validations without improvement", cfg.patience);
                    stop = true;
                }
            }
            let record = LogRecord {
                step: progress.step,
                epoch,
                loss: logger.history.last().map_or(f64::NAN, |r| r.loss),
                lr: cfg.optimizer.learning_rate,
                val_dice: Some(Region::ALL.iter().map(|r| (*r, dice[r.index()])).collect()),
            };
            logger.emit(record)?;
            if let Some(dir) = out {
                Checkpoint { model: model.clone(), optimizer: Some(opt.clone()), progress: Some(progress.clone()) }.save(&dir.join("last.ckpt"))?;
            }
        }
        epoch += 1;
    }

    let last = Checkpoint { model: model.clone(), optimizer: Some(opt), progress: Some(progress.clone()) };
    if let Some(dir) = out {
        last.save(&dir.join("last.ckpt"))?;
    }
    let best = match best_model {
        Some(m) => Checkpoint { model: m, optimizer: None, progress: Some(progress) },
        None => match out.map(|d| d.join("best.ckpt")).filter(|p| p.exists()) {
            Some(p) => Checkpoint::load(&p)?,
            None => Checkpoint { model, optimizer: None, progress: Some(progress) },
        },
    };
    Ok(TrainOutcome { best, last, history: logger.history })
}

/// Loads the labeled `train` and `val` cases of a manifest and trains.
pub fn train_from_manifest(cfg: &TrainConfig, manifest: &DatasetManifest, mapping: &RegionMapping, run: TrainRun) -> Result<TrainOutcome> {
    let load = |split: Split| -> Result<Vec<TrainSample>> {
        manifest
            .split(split)
            .filter(|e| e.label.is_some())
            .map(|e| {
                let case = load_case(e, mapping)?;
                let labels = case.labels.expect("filtered to labeled cases");
                Ok(TrainSample { volume: case.volume, labels })
            })
            .collect()
    };
    let train_set = load(Split::Train)?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let val_set = load(Split::Val)?;
    train(cfg, &train_set, &val_set, mapping, run)
}

/// Reads a progress log back.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{phantom, PhantomConfig};
    use crate::volume::normalize_intensities;

    fn sample(n: usize, seed: u64) -> TrainSample {
        let (v, l) = phantom(&PhantomConfig { shape: [n; 3], seed, ..Default::default() }, &format!("p{seed}")).unwrap();
        TrainSample { volume: normalize_intensities(&v), labels: l }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelOverrides { depth: Some(2), base_channels: Some(2), ..Default::default() },
            patch_size: [8; 3],
            max_epochs: 3,
            augmentation: AugmentationPolicy { seed: 1, ..Default::default() },
            optimizer: OptimizerConfig { learning_rate: 1e-2, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn crop_pads_outside_volume() {
        let s = sample(8, 0);
        let (v, l) = crop(&s, [-2, 0, 4], [8, 8, 8]).unwrap();
        assert_eq!(v.spatial_shape(), [8, 8, 8]);
        assert!(v.data().slice(s![.., 0..2, .., ..]).iter().all(|x| *x == 0.0));
        assert_eq!(l.data()[[2, 0, 4]], s.labels.data()[[0, 0, 0]]);
        assert!(l.data().slice(s![.., .., 4..]).iter().all(|x| *x == 0));
    }

    #[test]
    fn rejects_empty_and_bad_configs() {
        let mapping = RegionMapping::default();
        assert!(matches!(train(&tiny_cfg(), &[], &[], &mapping, TrainRun::default()), Err(Error::EmptyDataset)));
        let cfg = TrainConfig { patch_size: [5; 3], ..tiny_cfg() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidTrainConfig(_))));
        let cfg = TrainConfig { variant_name: "vgg".into(), ..tiny_cfg() };
        assert!(matches!(cfg.validate(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn runs_are_reproducible_and_logged() {
        let data = [sample(8, 1), sample(8, 2)];
        let mapping = RegionMapping::default();
        let dir = tempfile::tempdir().unwrap();
        let a = train(&tiny_cfg(), &data, &[], &mapping, TrainRun { output_dir: Some(dir.path().into()), resume: None }).unwrap();
        let b = train(&tiny_cfg(), &data, &[], &mapping, TrainRun::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.last.model.params, b.last.model.params);
        assert_eq!(a.history.iter().filter(|r| r.val_dice.is_none()).count(), 6);
        assert_eq!(read_log(&dir.path().join("train_log.jsonl")).unwrap().len(), a.history.len());
        assert!(dir.path().join("best.ckpt").exists() && dir.path().join("last.ckpt").exists());
    }

    #[test]
    fn resume_continues_bit_identically() {
        let data = [sample(8, 3)];
        let mapping = RegionMapping::default();
        let dir = tempfile::tempdir().unwrap();
        let straight = train(&tiny_cfg(), &data, &[], &mapping, TrainRun::default()).unwrap();
        let first = TrainConfig { max_epochs: 2, ..tiny_cfg() };
        train(&first, &data, &[], &mapping, TrainRun { output_dir: Some(dir.path().into()), resume: None }).unwrap();
        let ck = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
        let resumed = train(&tiny_cfg(), &data, &[], &mapping, TrainRun { output_dir: None, resume: Some(ck) }).unwrap();
        assert_eq!(resumed.last.model.params, straight.last.model.params);
        assert_eq!(resumed.last.optimizer, straight.last.optimizer);
        let tail: Vec<_> = straight.history.iter().filter(|r| r.epoch == 2).cloned().collect();
        assert_eq!(resumed.history, tail);
    }

    #[test]
    fn validation_extremes() {
        struct Oracle(Array4<f32>);
        impl LogitModel for Oracle {
            fn name(&self) -> &str {
                "oracle"
            }
            fn divisor(&self) -> usize {
                1
            }
            fn out_channels(&self) -> usize {
                3
            }
            fn logits(&self, _: &Array4<f32>) -> Result<Array4<f32>> {
                Ok(self.0.clone())
            }
        }
        let s = sample(8, 4);
        let mapping = RegionMapping::default();
        let gt = labels_to_regions(&s.labels, &mapping, s.volume.spacing).unwrap().to_channels();
        let infer = InferenceConfig { patch_size: [8; 3], ..Default::default() };
        let perfect = Oracle(gt.mapv(|v| if v > 0.5 { 10.0 } else { -10.0 }));
        assert_eq!(validate(&perfect, std::slice::from_ref(&s), &mapping, 0.5, &infer).unwrap(), [1.0; 3]);
        let empty = Oracle(gt.mapv(|_| -10.0));
        assert_eq!(validate(&empty, std::slice::from_ref(&s), &mapping, 0.5, &infer).unwrap(), [0.0; 3]);
    }
}
