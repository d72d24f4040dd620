//! Overlap and boundary metrics, plain and lesion-wise.
//!
//! Lesion-wise scores average over ground-truth lesions and unmatched
//! predictions; every false-positive or false-negative lesion scores Dice 0
//! and HD95 [`LESION_PENALTY_MM`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{dilate, label_components, surface_voxels, Connectivity};
use crate::volume::{Mask, Region, RegionMaskSet};

/// HD95 assigned to each unmatched lesion, in mm.
pub const LESION_PENALTY_MM: f64 = 374.0;

fn check_shapes(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both are empty.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// `(TP/(TP+FN), TN/(TN+FP))`; a ratio with an empty denominator is 1.
pub fn sensitivity_specificity(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    check_shapes(pred, gt)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
    Ok((ratio(tp, fn_), ratio(tn, fp)))
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest seed.
/// Separable lower-envelope transform; `INFINITY` where there is no seed.
fn squared_distance_field(dims: [usize; 3], seeds: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut f = vec![f64::INFINITY; nx * ny * nz];
    for p in seeds {
        f[(p[0] * ny + p[1]) * nz + p[2]] = 0.0;
    }
    let strides = [ny * nz, nz, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut env = Envelope::default();
    for axis in 0..3 {
        let n = dims[axis];
        let others: Vec<usize> = (0..3).filter(|a| *a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|k| f[base + k * strides[axis]]));
                env.transform(&line, spacing[axis], &mut out);
                for k in 0..n {
                    f[base + k * strides[axis]] = out[k];
                }
            }
        }
    }
    f
}

#[derive(Default)]
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    /// `out[q] = min_p g[p] + (s·(q−p))²`.
    fn transform(&mut self, g: &[f64], s: f64, out: &mut Vec<f64>) {
        out.clear();
        self.v.clear();
        self.z.clear();
        let pos = |q: usize| q as f64 * s;
        for (q, &gq) in g.iter().enumerate() {
            if !gq.is_finite() {
                continue;
            }
            loop {
                match self.v.last() {
                    None => {
                        self.v.push(q);
                        self.z.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let (xq, xp) = (pos(q), pos(p));
                        let inter = ((gq + xq * xq) - (g[p] + xp * xp)) / (2.0 * (xq - xp));
                        if inter <= *self.z.last().unwrap() {
                            self.v.pop();
                            self.z.pop();
                        } else {
                            self.v.push(q);
                            self.z.push(inter);
                            break;
                        }
                    }
                }
            }
        }
        if self.v.is_empty() {
            out.resize(g.len(), f64::INFINITY);
            return;
        }
        let mut k = 0;
        for q in 0..g.len() {
            let x = pos(q);
            while k + 1 < self.v.len() && self.z[k + 1] < x {
                k += 1;
            }
            let p = self.v[k];
            let d = (q as f64 - p as f64) * s;
            out.push(d * d + g[p]);
        }
    }
}

fn directed_surface_distances(
    from: &[[usize; 3]],
    to: &[[usize; 3]],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> impl Iterator<Item = f64> {
    let field = squared_distance_field(dims, to, spacing);
    let [_, ny, nz] = dims;
    from.iter()
        .map(move |p| field[(p[0] * ny + p[1]) * nz + p[2]].sqrt())
        .collect::<Vec<_>>()
        .into_iter()
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let h = q / 100.0 * (values.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    values[lo] + (h - lo as f64) * (values[hi] - values[lo])
}

/// 95th percentile of the pooled surface-to-surface nearest distances in
/// both directions, in mm.
pub fn hd95(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::EmptyMask);
    }
    let s = pred.shape();
    let dims = [s[0], s[1], s[2]];
    let mut d: Vec<f64> = directed_surface_distances(&sp, &sg, dims, spacing)
        .chain(directed_surface_distances(&sg, &sp, dims, spacing))
        .collect();
    Ok(percentile(&mut d, 95.0))
}

/// HD95 with the empty-mask conventions used in reports: 0 when both are
/// empty, the lesion penalty when exactly one is.
pub fn hd95_or_penalty(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<f64> {
    check_shapes(pred, gt)?;
    match (pred.iter().any(|v| *v), gt.iter().any(|v| *v)) {
        (false, false) => Ok(0.0),
        (true, true) => hd95(pred, gt, spacing),
        _ => Ok(LESION_PENALTY_MM),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionPair {
    pub gt: usize,
    /// Predicted components merged into this lesion.
    pub preds: Vec<usize>,
}

/// Association of predicted components with ground-truth lesions.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionMatching {
    pub shape: [usize; 3],
    pub gt_components: Vec<Vec<[usize; 3]>>,
    pub pred_components: Vec<Vec<[usize; 3]>>,
    pub pairs: Vec<LesionPair>,
    pub fp_components: Vec<usize>,
    pub fn_components: Vec<usize>,
}

impl LesionMatching {
    fn mask_of<'a>(&self, comps: impl IntoIterator<Item = &'a Vec<[usize; 3]>>) -> Mask {
        let mut m = Mask::from_elem(self.shape, false);
        for c in comps {
            for p in c {
                m[*p] = true;
            }
        }
        m
    }

    /// Ground-truth and merged prediction masks of pair `i`.
    pub fn pair_masks(&self, i: usize) -> (Mask, Mask) {
        let pair = &self.pairs[i];
        let gt = self.mask_of([&self.gt_components[pair.gt]]);
        let pred = self.mask_of(pair.preds.iter().map(|p| &self.pred_components[*p]));
        (pred, gt)
    }

    fn lesion_count(&self) -> usize {
        self.pairs.len() + self.fp_components.len() + self.fn_components.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub connectivity: Connectivity,
    pub dilation_radius: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { connectivity: Connectivity::TwentySix, dilation_radius: 1 }
    }
}

/// Each predicted component joins the ground-truth lesion whose dilation it
/// overlaps most (ties go to the lower lesion index); components overlapping
/// none are false positives, lesions receiving none are false negatives.
pub fn match_lesions(
    pred: &Mask,
    gt: &Mask,
    connectivity: Connectivity,
    dilation_radius: usize,
) -> Result<LesionMatching> {
    check_shapes(pred, gt)?;
    let s = gt.shape();
    let shape = [s[0], s[1], s[2]];
    let gt_cc = label_components(gt, connectivity);
    let pred_cc = label_components(pred, connectivity);
    let gt_components = gt_cc.voxel_lists();
    let pred_components = pred_cc.voxel_lists();

    // overlap[p][g] = |pred_p ∩ dilate(gt_g)|
    let mut overlap = vec![vec![0usize; gt_components.len()]; pred_components.len()];
    for g in 0..gt_components.len() {
        let grown = dilate(&gt_cc.mask(g as u32 + 1), connectivity, dilation_radius);
        for (p, voxels) in pred_components.iter().enumerate() {
            overlap[p][g] = voxels.iter().filter(|v| grown[**v]).count();
        }
    }

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); gt_components.len()];
    let mut fp_components = Vec::new();
    for (p, row) in overlap.iter().enumerate() {
        let best = row
            .iter()
            .enumerate()
            .filter(|(_, o)| **o > 0)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((g, _)) => assigned[g].push(p),
            None => fp_components.push(p),
        }
    }
    let mut pairs = Vec::new();
    let mut fn_components = Vec::new();
    for (g, preds) in assigned.into_iter().enumerate() {
        if preds.is_empty() {
            fn_components.push(g);
        } else {
            pairs.push(LesionPair { gt: g, preds });
        }
    }
    Ok(LesionMatching { shape, gt_components, pred_components, pairs, fp_components, fn_components })
}

/// Mean over matched-pair Dice and a 0 per unmatched lesion; 1 when neither
/// side has any lesion.
pub fn lesion_wise_dice(m: &LesionMatching) -> f64 {
    let n = m.lesion_count();
    if n == 0 {
        return 1.0;
    }
    let sum: f64 = (0..m.pairs.len())
        .map(|i| {
            let (pred, gt) = m.pair_masks(i);
            dice_score(&pred, &gt).expect("pair masks share a shape")
        })
        .fold(0.0, |a, b| a + b);
    sum / n as f64
}

/// Mean over matched-pair HD95 and [`LESION_PENALTY_MM`] per unmatched
/// lesion; 0 when neither side has any lesion.
pub fn lesion_wise_hd95(m: &LesionMatching, spacing: [f64; 3]) -> f64 {
    let n = m.lesion_count();
    if n == 0 {
        return 0.0;
    }
    let pairs: f64 = (0..m.pairs.len())
        .map(|i| {
            let (pred, gt) = m.pair_masks(i);
            hd95(&pred, &gt, spacing).expect("matched lesions are nonempty")
        })
        .fold(0.0, |a, b| a + b);
    let unmatched = (m.fp_components.len() + m.fn_components.len()) as f64;
    (pairs + unmatched * LESION_PENALTY_MM) / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionScores {
    pub lw_dice: f64,
    pub dice: f64,
    pub lw_hd95: f64,
    pub hd95: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LesionCounts {
    pub matched: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub scores: BTreeMap<Region, RegionScores>,
    pub lesions: BTreeMap<Region, LesionCounts>,
}

pub fn evaluate_case(
    case_id: &str,
    pred: &RegionMaskSet,
    gt: &RegionMaskSet,
    cfg: &MetricsConfig,
) -> Result<CaseReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!("{case_id}: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let mut scores = BTreeMap::new();
    let mut lesions = BTreeMap::new();
    for r in Region::ALL {
        let (p, g) = (pred.region(r), gt.region(r));
        let matching = match_lesions(p, g, cfg.connectivity, cfg.dilation_radius)?;
        let (sensitivity, specificity) = sensitivity_specificity(p, g)?;
        scores.insert(
            r,
            RegionScores {
                lw_dice: lesion_wise_dice(&matching),
                dice: dice_score(p, g)?,
                lw_hd95: lesion_wise_hd95(&matching, gt.spacing),
                hd95: hd95_or_penalty(p, g, gt.spacing)?,
                sensitivity,
                specificity,
            },
        );
        lesions.insert(
            r,
            LesionCounts {
                matched: matching.pairs.len(),
                fp: matching.fp_components.len(),
                fn_: matching.fn_components.len(),
            },
        );
    }
    Ok(CaseReport { case_id: case_id.to_string(), scores, lesions })
}

/// Per-case reports plus the per-region mean across cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub cases: Vec<CaseReport>,
    pub aggregate: BTreeMap<Region, RegionScores>,
}

pub const CSV_HEADER: &str = "case_id,region,lw_dice,dice,lw_hd95,hd95,sensitivity,specificity";

impl CohortReport {
    /// One row per (case, region); fixed six-decimal formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for case in &self.cases {
            for (r, s) in &case.scores {
                writeln!(
                    out,
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    case.case_id, r, s.lw_dice, s.dice, s.lw_hd95, s.hd95, s.sensitivity, s.specificity
                )
                .unwrap();
            }
        }
        out
    }

    /// Aggregate table: one row per region with the mean of every metric.
    pub fn aggregate_json(&self) -> serde_json::Value {
        let round = |v: f64| (v * 1e6).round() / 1e6;
        let regions: serde_json::Map<String, serde_json::Value> = self
            .aggregate
            .iter()
            .map(|(r, s)| {
                (
                    r.name().to_string(),
                    serde_json::json!({
                        "lw_dice": round(s.lw_dice),
                        "dice": round(s.dice),
                        "lw_hd95": round(s.lw_hd95),
                        "hd95": round(s.hd95),
                        "sensitivity": round(s.sensitivity),
                        "specificity": round(s.specificity),
                    }),
                )
            })
            .collect();
        serde_json::json!({ "num_cases": self.cases.len(), "regions": regions })
    }
}

pub fn aggregate(cases: &[CaseReport]) -> Result<BTreeMap<Region, RegionScores>> {
    if cases.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let n = cases.len() as f64;
    let mut out = BTreeMap::new();
    for r in Region::ALL {
        let mut acc = RegionScores::default();
        for c in cases {
            let s = &c.scores[&r];
            acc.lw_dice += s.lw_dice;
            acc.dice += s.dice;
            acc.lw_hd95 += s.lw_hd95;
            acc.hd95 += s.hd95;
            acc.sensitivity += s.sensitivity;
            acc.specificity += s.specificity;
        }
        out.insert(
            r,
            RegionScores {
                lw_dice: acc.lw_dice / n,
                dice: acc.dice / n,
                lw_hd95: acc.lw_hd95 / n,
                hd95: acc.hd95 / n,
                sensitivity: acc.sensitivity / n,
                specificity: acc.specificity / n,
            },
        );
    }
    Ok(out)
}

/// Scores `(case_id, prediction, ground truth)` triples.
pub fn evaluate_cohort(
    cases: &[(String, RegionMaskSet, RegionMaskSet)],
    cfg: &MetricsConfig,
) -> Result<CohortReport> {
    if cases.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let reports = cases
        .iter()
        .map(|(id, p, g)| evaluate_case(id, p, g, cfg))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&reports)?;
    Ok(CohortReport { cases: reports, aggregate })
}
