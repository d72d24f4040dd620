//! Sliding-window prediction and the two-stage ensemble: logits are summed
//! and thresholded inside each fusion group, then groups vote per voxel.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::{s, Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Feature;
use crate::volume::{Mask, MultiModalVolume, Region, RegionMaskSet};

/// Anything that maps a `(C, X, Y, Z)` patch to `(out, X, Y, Z)` logits.
pub trait LogitModel {
    fn name(&self) -> &str;
    /// Spatial dims fed to [`LogitModel::logits`] must be multiples of this.
    fn divisor(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn is_trained(&self) -> bool {
        true
    }
    fn logits(&self, x: &Feature) -> Result<Feature>;
}

impl LogitModel for Model {
    fn name(&self) -> &str {
        &self.spec().variant_name
    }

    fn divisor(&self) -> usize {
        self.spec().divisor()
    }

    fn out_channels(&self) -> usize {
        self.spec().out_channels
    }

    fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    fn logits(&self, x: &Feature) -> Result<Feature> {
        self.forward(x)
    }
}

/// Per-region logits for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsVolume {
    pub data: Array4<f32>,
    pub source_model: String,
    pub case_id: String,
    pub spacing: [f64; 3],
}

impl LogitsVolume {
    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }
}

/// Largest patch (in voxels) a single forward is allowed to process.
pub const DEFAULT_VOXEL_BUDGET: usize = 128 * 128 * 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub patch_size: [usize; 3],
    pub overlap: f64,
    pub voxel_budget: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { patch_size: [96; 3], overlap: 0.5, voxel_budget: DEFAULT_VOXEL_BUDGET }
    }
}

/// Gaussian importance map with `σ = patch / 8`, floored at the smallest
/// positive value so borders never get zero weight.
pub fn gaussian_weights(patch: [usize; 3]) -> Array3<f64> {
    let profile = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let sigma = (n as f64 / 8.0).max(1e-6);
        (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()
    };
    let (px, py, pz) = (profile(patch[0]), profile(patch[1]), profile(patch[2]));
    let mut w = Array3::from_shape_fn(patch, |(x, y, z)| px[x] * py[y] * pz[z]);
    let max = w.iter().cloned().fold(0.0, f64::max);
    w.mapv_inplace(|v| v / max);
    let min_pos = w.iter().cloned().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    w.mapv_inplace(|v| v.max(min_pos));
    w
}

fn window_starts(size: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if size <= patch {
        return vec![0];
    }
    let step = ((patch as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|s| s + patch < size).collect();
    starts.push(size - patch);
    starts
}

fn round_up(v: usize, d: usize) -> usize {
    v.div_ceil(d) * d
}

/// Sliding-window forward with Gaussian blending. The volume is zero-padded
/// to at least one patch and to the model's divisor, and the result cropped
/// back to the input shape.
pub fn predict_logits(model: &dyn LogitModel, vol: &MultiModalVolume, cfg: &InferenceConfig) -> Result<LogitsVolume> {
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::InvalidEnsemble(format!("overlap must lie in [0, 1), got {}", cfg.overlap)));
    }
    let d = model.divisor();
    if cfg.patch_size.iter().any(|p| *p == 0 || p % d != 0) {
        return Err(Error::IndivisibleShape { shape: cfg.patch_size, divisor: d });
    }
    let shape = vol.spatial_shape();
    let patch: [usize; 3] = std::array::from_fn(|i| cfg.patch_size[i].min(round_up(shape[i], d)));
    let voxels = patch.iter().product::<usize>();
    if voxels > cfg.voxel_budget {
        return Err(Error::OomShape { voxels, budget: cfg.voxel_budget });
    }
    if !model.is_trained() {
        log::warn!("model `{}` has no training steps recorded; predictions are from random weights", model.name());
    }
    let padded: [usize; 3] = std::array::from_fn(|i| round_up(shape[i].max(patch[i]), d));
    let channels = vol.data().shape()[0];
    let mut input = Array4::<f32>::zeros((channels, padded[0], padded[1], padded[2]));
    input.slice_mut(s![.., ..shape[0], ..shape[1], ..shape[2]]).assign(vol.data());

    let out_c = model.out_channels();
    let weights = gaussian_weights(patch);
    let mut acc = Array4::<f64>::zeros((out_c, padded[0], padded[1], padded[2]));
    let mut norm = Array3::<f64>::zeros(padded);
    let starts: Vec<Vec<usize>> = (0..3).map(|i| window_starts(padded[i], patch[i], cfg.overlap)).collect();
    for &x0 in &starts[0] {
        for &y0 in &starts[1] {
            for &z0 in &starts[2] {
                let win = s![x0..x0 + patch[0], y0..y0 + patch[1], z0..z0 + patch[2]];
                let x = input.slice(s![.., x0..x0 + patch[0], y0..y0 + patch[1], z0..z0 + patch[2]]).to_owned();
                let y = model.logits(&x)?;
                if y.shape() != [out_c, patch[0], patch[1], patch[2]] {
                    return Err(Error::ShapeMismatch(format!("model returned {:?} for patch {:?}", y.shape(), patch)));
                }
                for (mut a, yc) in acc.outer_iter_mut().zip(y.outer_iter()) {
                    Zip::from(a.slice_mut(win)).and(&yc).and(&weights).for_each(|a, &v, &w| *a += v as f64 * w);
                }
                Zip::from(norm.slice_mut(win)).and(&weights).for_each(|n, &w| *n += w);
            }
        }
    }
    let mut data = Array4::<f32>::zeros((out_c, shape[0], shape[1], shape[2]));
    let norm = norm.slice(s![..shape[0], ..shape[1], ..shape[2]]);
    for (mut o, a) in data.outer_iter_mut().zip(acc.outer_iter()) {
        Zip::from(&mut o)
            .and(&a.slice(s![..shape[0], ..shape[1], ..shape[2]]))
            .and(&norm)
            .for_each(|o, &a, &n| *o = (a / n) as f32);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidVolume(format!("model `{}` produced non-finite logits", model.name())));
    }
    Ok(LogitsVolume { data, source_model: model.name().to_string(), case_id: vol.case_id.clone(), spacing: vol.spacing })
}

/// Region masks where the channel exceeds `threshold`.
pub fn threshold_logits(data: &Array4<f32>, threshold: f64, spacing: [f64; 3]) -> Result<RegionMaskSet> {
    if data.shape()[0] != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 region channels, got {}", data.shape()[0])));
    }
    let m = |r: Region| data.index_axis(Axis(0), r.index()).mapv(|v| v as f64 > threshold);
    RegionMaskSet::new(m(Region::Et), m(Region::Tc), m(Region::Wt), spacing)
}

/// Sums member logits per region channel and keeps voxels with sum `> threshold`.
pub fn fuse_group(logits: &[LogitsVolume], threshold: f64) -> Result<RegionMaskSet> {
    let first = logits.first().ok_or(Error::EmptyGroup)?;
    let mut sum = first.data.mapv(|v| v as f64);
    for l in &logits[1..] {
        if l.data.shape() != first.data.shape() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", l.data.shape(), first.data.shape())));
        }
        if l.case_id != first.case_id {
            return Err(Error::ShapeMismatch(format!("case `{}` fused with case `{}`", l.case_id, first.case_id)));
        }
        sum += &l.data.mapv(|v| v as f64);
    }
    if sum.shape()[0] != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 region channels, got {}", sum.shape()[0])));
    }
    let m = |r: Region| sum.index_axis(Axis(0), r.index()).mapv(|v| v > threshold);
    RegionMaskSet::new(m(Region::Et), m(Region::Tc), m(Region::Wt), first.spacing)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    #[default]
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteRule {
    #[default]
    Majority,
}

/// Per voxel and region: on iff more than half the groups vote on; an exact
/// half is decided by `tie_break`.
pub fn majority_vote(masks: &[RegionMaskSet], tie_break: TieBreak) -> Result<RegionMaskSet> {
    let first = masks.first().ok_or(Error::EmptyGroup)?;
    if let Some(m) = masks.iter().find(|m| m.shape() != first.shape()) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", m.shape(), first.shape())));
    }
    let n = masks.len();
    let mut out = RegionMaskSet::empty(first.shape(), first.spacing);
    for r in Region::ALL {
        let mut votes = Array3::<usize>::zeros(first.shape());
        for m in masks {
            Zip::from(&mut votes).and(m.region(r)).for_each(|v, &on| *v += on as usize);
        }
        let decide = |v: usize| match (2 * v).cmp(&n) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => tie_break == TieBreak::Positive,
        };
        *out.region_mut(r) = votes.mapv(decide);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSpace {
    #[default]
    Logit,
    Probability,
}

/// Ensemble membership and fusion rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub groups: Vec<Vec<PathBuf>>,
    #[serde(default)]
    pub threshold: f64,
    #[serde(default)]
    pub threshold_space: ThresholdSpace,
    #[serde(default)]
    pub vote_rule: VoteRule,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl EnsembleConfig {
    /// One group per checkpoint.
    pub fn singletons(paths: impl IntoIterator<Item = PathBuf>) -> Self {
        Self {
            groups: paths.into_iter().map(|p| vec![p]).collect(),
            threshold: 0.0,
            threshold_space: ThresholdSpace::Logit,
            vote_rule: VoteRule::Majority,
            tie_break: TieBreak::Positive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.iter().any(Vec::is_empty) {
            return Err(Error::InvalidEnsemble("need at least one group and no empty groups".into()));
        }
        match self.threshold_space {
            ThresholdSpace::Logit if !self.threshold.is_finite() => {
                Err(Error::InvalidEnsemble(format!("logit threshold must be finite, got {}", self.threshold)))
            }
            ThresholdSpace::Probability if !(self.threshold > 0.0 && self.threshold < 1.0) => Err(
                Error::InvalidEnsemble(format!("probability threshold must lie in (0, 1), got {}", self.threshold)),
            ),
            _ => Ok(()),
        }
    }

    /// Threshold on the summed logits of a group with `members` models. A
    /// probability `p` means the members' mean logit must exceed `logit(p)`.
    pub fn group_threshold(&self, members: usize) -> f64 {
        match self.threshold_space {
            ThresholdSpace::Logit => self.threshold,
            ThresholdSpace::Probability => members as f64 * (self.threshold / (1.0 - self.threshold)).ln(),
        }
    }
}

/// Runs the ensemble over already-built models arranged in groups.
pub fn ensemble_with_models(
    groups: &[Vec<&dyn LogitModel>],
    cfg: &EnsembleConfig,
    vol: &MultiModalVolume,
    infer: &InferenceConfig,
) -> Result<RegionMaskSet> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::EmptyGroup);
    }
    if groups.len() % 2 == 0 {
        log::warn!("{} fusion groups: ties are possible and resolved by tie_break={:?}", groups.len(), cfg.tie_break);
    }
    let mut cache: HashMap<*const (), LogitsVolume> = HashMap::new();
    let mut votes = Vec::with_capacity(groups.len());
    for g in groups {
        let mut members = Vec::with_capacity(g.len());
        for m in g {
            let key = *m as *const dyn LogitModel as *const ();
            if !cache.contains_key(&key) {
                cache.insert(key, predict_logits(*m, vol, infer)?);
            }
            members.push(cache[&key].clone());
        }
        votes.push(fuse_group(&members, cfg.group_threshold(g.len()))?);
    }
    majority_vote(&votes, cfg.tie_break)
}

/// Loads every distinct checkpoint once and runs [`ensemble_with_models`].
pub struct LoadedEnsemble {
    models: Vec<Model>,
    layout: Vec<Vec<usize>>,
    pub config: EnsembleConfig,
}

impl LoadedEnsemble {
    pub fn load(cfg: &EnsembleConfig) -> Result<Self> {
        cfg.validate()?;
        let mut index: HashMap<PathBuf, usize> = HashMap::new();
        let mut models = Vec::new();
        let mut layout = Vec::new();
        for g in &cfg.groups {
            let mut ids = Vec::new();
            for p in g {
                let id = match index.get(p) {
                    Some(&i) => i,
                    None => {
                        models.push(Checkpoint::load(p)?.model);
                        index.insert(p.clone(), models.len() - 1);
                        models.len() - 1
                    }
                };
                ids.push(id);
            }
            layout.push(ids);
        }
        Ok(Self { models, layout, config: cfg.clone() })
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn predict(&self, vol: &MultiModalVolume, infer: &InferenceConfig) -> Result<RegionMaskSet> {
        let groups: Vec<Vec<&dyn LogitModel>> =
            self.layout.iter().map(|g| g.iter().map(|&i| &self.models[i] as &dyn LogitModel).collect()).collect();
        ensemble_with_models(&groups, &self.config, vol, infer)
    }
}

/// Loads the configured checkpoints and predicts raw (possibly non-nested) masks.
pub fn ensemble_predict(cfg: &EnsembleConfig, vol: &MultiModalVolume, infer: &InferenceConfig) -> Result<RegionMaskSet> {
    LoadedEnsemble::load(cfg)?.predict(vol, infer)
}

/// Fraction of on-voxels, handy for logging.
pub fn occupancy(m: &Mask) -> f64 {
    m.iter().filter(|v| **v).count() as f64 / m.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::IDENTITY_AFFINE;

    /// Emits channels 0..3 of its input, ignoring the fourth.
    struct Passthrough;

    impl LogitModel for Passthrough {
        fn name(&self) -> &str {
            "passthrough"
        }
        fn divisor(&self) -> usize {
            4
        }
        fn out_channels(&self) -> usize {
            3
        }
        fn logits(&self, x: &Feature) -> Result<Feature> {
            Ok(x.slice(s![0..3, .., .., ..]).to_owned())
        }
    }

    struct Constant(f32);

    impl LogitModel for Constant {
        fn name(&self) -> &str {
            "constant"
        }
        fn divisor(&self) -> usize {
            2
        }
        fn out_channels(&self) -> usize {
            3
        }
        fn logits(&self, x: &Feature) -> Result<Feature> {
            let s = x.shape();
            Ok(Feature::from_elem((3, s[1], s[2], s[3]), self.0))
        }
    }

    fn coord_volume(shape: [usize; 3]) -> MultiModalVolume {
        let data = Array4::from_shape_fn((4, shape[0], shape[1], shape[2]), |(c, x, y, z)| match c {
            0 => x as f32,
            1 => y as f32 - 3.0,
            2 => (x * y) as f32 * 0.1 - z as f32,
            _ => 1.0,
        });
        MultiModalVolume::new(data, [1.0; 3], IDENTITY_AFFINE, "c").unwrap()
    }

    #[test]
    fn small_volume_single_padded_window() {
        let vol = coord_volume([5, 6, 7]);
        let cfg = InferenceConfig { patch_size: [16; 3], ..Default::default() };
        let out = predict_logits(&Passthrough, &vol, &cfg).unwrap();
        assert_eq!(out.spatial_shape(), [5, 6, 7]);
        for (a, b) in out.data.iter().zip(vol.data().slice(s![0..3, .., .., ..]).iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_model_blends_to_constant() {
        let vol = coord_volume([20, 18, 12]);
        let cfg = InferenceConfig { patch_size: [8; 3], overlap: 0.5, ..Default::default() };
        let out = predict_logits(&Constant(2.5), &vol, &cfg).unwrap();
        assert!(out.data.iter().all(|v| (v - 2.5).abs() < 1e-5));
    }

    #[test]
    fn oversized_patch_and_bad_patch_rejected() {
        let vol = coord_volume([200, 200, 200]);
        let cfg = InferenceConfig { patch_size: [192; 3], ..Default::default() };
        assert!(matches!(predict_logits(&Constant(0.0), &vol, &cfg), Err(Error::OomShape { .. })));
        let cfg = InferenceConfig { patch_size: [6; 3], ..Default::default() };
        assert!(matches!(predict_logits(&Passthrough, &vol, &cfg), Err(Error::IndivisibleShape { .. })));
    }

    #[test]
    fn window_starts_cover_axis() {
        assert_eq!(window_starts(10, 16, 0.5), vec![0]);
        assert_eq!(window_starts(32, 16, 0.5), vec![0, 8, 16]);
        assert_eq!(window_starts(36, 16, 0.5), vec![0, 8, 16, 20]);
        assert_eq!(window_starts(32, 16, 0.0), vec![0, 16]);
    }

    fn lv(v: f32) -> LogitsVolume {
        LogitsVolume { data: Array4::from_elem((3, 2, 2, 2), v), source_model: "m".into(), case_id: "c".into(), spacing: [1.0; 3] }
    }

    #[test]
    fn fuse_examples() {
        assert!(fuse_group(&[lv(2.0), lv(-1.0)], 0.0).unwrap().wt.iter().all(|v| *v));
        assert!(!fuse_group(&[lv(-0.5)], 0.0).unwrap().et.iter().any(|v| *v));
        assert!(!fuse_group(&[lv(0.0)], 0.0).unwrap().et.iter().any(|v| *v));
        assert!(matches!(fuse_group(&[], 0.0), Err(Error::EmptyGroup)));
        let mut other = lv(1.0);
        other.data = Array4::zeros((3, 2, 2, 3));
        assert!(matches!(fuse_group(&[lv(1.0), other], 0.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn vote_examples() {
        let on = RegionMaskSet::new(Mask::from_elem((1, 1, 1), true), Mask::from_elem((1, 1, 1), true), Mask::from_elem((1, 1, 1), true), [1.0; 3]).unwrap();
        let off = RegionMaskSet::empty([1, 1, 1], [1.0; 3]);
        let v = |ms: &[&RegionMaskSet], t| majority_vote(&ms.iter().map(|m| (*m).clone()).collect::<Vec<_>>(), t).unwrap().et[[0, 0, 0]];
        assert!(v(&[&on, &on, &off], TieBreak::Negative));
        assert!(!v(&[&on, &off, &off], TieBreak::Positive));
        assert!(v(&[&on, &off], TieBreak::Positive));
        assert!(!v(&[&on, &off], TieBreak::Negative));
        assert!(matches!(majority_vote(&[], TieBreak::Positive), Err(Error::EmptyGroup)));
    }

    #[test]
    fn probability_threshold_maps_to_logit_sum() {
        let mut cfg = EnsembleConfig::singletons([PathBuf::from("a")]);
        assert_eq!(cfg.group_threshold(3), 0.0);
        cfg.threshold_space = ThresholdSpace::Probability;
        cfg.threshold = 0.5;
        assert!(cfg.group_threshold(2).abs() < 1e-12);
        cfg.threshold = 0.75;
        assert!((cfg.group_threshold(2) - 2.0 * 3f64.ln()).abs() < 1e-12);
        cfg.threshold = 1.0;
        assert!(cfg.validate().is_err());
        assert!(EnsembleConfig::singletons([]).validate().is_err());
    }

    #[test]
    fn ensemble_json_shape() {
        let cfg: EnsembleConfig = serde_json::from_str(r#"{"groups": [["a.ckpt"], ["b.ckpt", "c.ckpt"]], "threshold": 0.0, "tie_break": "negative"}"#).unwrap();
        assert_eq!(cfg.groups.len(), 2);
        assert_eq!(cfg.tie_break, TieBreak::Negative);
        assert!(serde_json::from_str::<EnsembleConfig>(r#"{"groups": [], "bogus": 1}"#).is_err());
    }
}
