//! Multi-modal MRI volumes, label maps and the three nested tumor regions.

use std::collections::BTreeSet;

use ndarray::{Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary voxel grid indexed `(x, y, z)`.
pub type Mask = Array3<bool>;

pub type Affine = [[f64; 4]; 4];

/// Channel order of every [`MultiModalVolume`].
pub const MODALITIES: [&str; 4] = ["t1", "t1gd", "t2", "flair"];

pub const IDENTITY_AFFINE: Affine = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Affine for axis-aligned voxels of the given spacing.
pub fn scaling_affine(spacing: [f64; 3]) -> Affine {
    let mut a = IDENTITY_AFFINE;
    for (i, s) in spacing.iter().enumerate() {
        a[i][i] = *s;
    }
    a
}

/// Four co-registered modalities (T1, T1Gd, T2, FLAIR) stacked as `(channel, x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    data: Array4<f32>,
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub case_id: String,
}

impl MultiModalVolume {
    pub fn new(
        data: Array4<f32>,
        spacing: [f64; 3],
        affine: Affine,
        case_id: impl Into<String>,
    ) -> Result<Self> {
        if data.shape()[0] != MODALITIES.len() {
            return Err(Error::InvalidVolume(format!(
                "expected {} channels, got {}",
                MODALITIES.len(),
                data.shape()[0]
            )));
        }
        check_spacing(spacing)?;
        let data = data.as_standard_layout().into_owned();
        Ok(Self { data, spacing, affine, case_id: case_id.into() })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Replaces the voxel data, keeping metadata. Channel count must stay 4.
    pub fn with_data(&self, data: Array4<f32>) -> Result<Self> {
        Self::new(data, self.spacing, self.affine, self.case_id.clone())
    }
}

pub(crate) fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidVolume(format!("spacing must be strictly positive, got {spacing:?}")))
    }
}

/// Raw integer annotation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    data: Array3<i32>,
    pub vocabulary: BTreeSet<i32>,
    pub case_id: String,
}

impl LabelMap {
    /// Validates every voxel against `vocabulary`; 0 is always admitted.
    pub fn new(
        data: Array3<i32>,
        vocabulary: impl IntoIterator<Item = i32>,
        case_id: impl Into<String>,
    ) -> Result<Self> {
        let mut vocabulary: BTreeSet<i32> = vocabulary.into_iter().collect();
        vocabulary.insert(0);
        if let Some(&label) = data.iter().find(|v| !vocabulary.contains(v)) {
            return Err(Error::UnknownLabel { label });
        }
        let data = data.as_standard_layout().into_owned();
        Ok(Self { data, vocabulary, case_id: case_id.into() })
    }

    pub fn data(&self) -> &Array3<i32> {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn check_aligned(&self, vol: &MultiModalVolume) -> Result<()> {
        if self.shape() != vol.spatial_shape() {
            return Err(Error::MisalignedPair(format!(
                "labels {:?} vs image {:?}",
                self.shape(),
                vol.spatial_shape()
            )));
        }
        Ok(())
    }
}

/// ET, TC and WT binary masks. Nesting `ET ⊆ TC ⊆ WT` holds after
/// post-processing but not necessarily for raw model output.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMaskSet {
    pub et: Mask,
    pub tc: Mask,
    pub wt: Mask,
    pub spacing: [f64; 3],
}

/// The three evaluated tumor regions, innermost first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Region {
    Et,
    Tc,
    Wt,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Tc, Region::Wt];

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "ET",
            Region::Tc => "TC",
            Region::Wt => "WT",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl RegionMaskSet {
    pub fn new(et: Mask, tc: Mask, wt: Mask, spacing: [f64; 3]) -> Result<Self> {
        if et.shape() != tc.shape() || tc.shape() != wt.shape() {
            return Err(Error::ShapeMismatch(format!(
                "region masks {:?}/{:?}/{:?}",
                et.shape(),
                tc.shape(),
                wt.shape()
            )));
        }
        check_spacing(spacing)?;
        Ok(Self { et, tc, wt, spacing })
    }

    pub fn empty(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Self {
            et: Mask::from_elem(shape, false),
            tc: Mask::from_elem(shape, false),
            wt: Mask::from_elem(shape, false),
            spacing,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.wt.shape();
        [s[0], s[1], s[2]]
    }

    pub fn region(&self, r: Region) -> &Mask {
        match r {
            Region::Et => &self.et,
            Region::Tc => &self.tc,
            Region::Wt => &self.wt,
        }
    }

    pub fn region_mut(&mut self, r: Region) -> &mut Mask {
        match r {
            Region::Et => &mut self.et,
            Region::Tc => &mut self.tc,
            Region::Wt => &mut self.wt,
        }
    }

    /// First voxel breaking `ET ⊆ TC ⊆ WT`, if any.
    pub fn nesting_violation(&self) -> Option<[usize; 3]> {
        self.et.indexed_iter().find_map(|((x, y, z), &et)| {
            let tc = self.tc[[x, y, z]];
            let wt = self.wt[[x, y, z]];
            ((et && !tc) || (tc && !wt)).then_some([x, y, z])
        })
    }

    pub fn is_nested(&self) -> bool {
        self.nesting_violation().is_none()
    }

    /// Stacks the masks as a `(3, x, y, z)` 0/1 grid in ET, TC, WT order.
    pub fn to_channels(&self) -> Array4<f32> {
        let [x, y, z] = self.shape();
        let mut out = Array4::zeros((3, x, y, z));
        for r in Region::ALL {
            Zip::from(out.index_axis_mut(Axis(0), r.index()))
                .and(self.region(r))
                .for_each(|o, &m| *o = if m { 1.0 } else { 0.0 });
        }
        out
    }
}

/// Which raw labels make up each region. Configuration-supplied: the raw
/// label convention differs between datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionMapping {
    pub et_labels: BTreeSet<i32>,
    pub tc_labels: BTreeSet<i32>,
    pub wt_labels: BTreeSet<i32>,
}

impl Default for RegionMapping {
    /// Challenge convention (1 = necrotic core, 2 = edema, 3 = enhancing);
    /// verify against your data before use.
    fn default() -> Self {
        Self {
            et_labels: [3].into(),
            tc_labels: [1, 3].into(),
            wt_labels: [1, 2, 3].into(),
        }
    }
}

impl RegionMapping {
    pub fn validate(&self) -> Result<()> {
        if self.wt_labels.contains(&0) {
            return Err(Error::InvalidMapping("background label 0 cannot belong to a region".into()));
        }
        if !self.et_labels.is_subset(&self.tc_labels) {
            return Err(Error::InvalidMapping("et_labels must be a subset of tc_labels".into()));
        }
        if !self.tc_labels.is_subset(&self.wt_labels) {
            return Err(Error::InvalidMapping("tc_labels must be a subset of wt_labels".into()));
        }
        Ok(())
    }

    /// Smallest label of each shell (ET, TC∖ET, WT∖TC); written back by
    /// [`regions_to_labels`].
    pub fn canonical_labels(&self) -> Result<[i32; 3]> {
        let pick = |outer: &BTreeSet<i32>, inner: Option<&BTreeSet<i32>>, name: &str| {
            outer
                .iter()
                .find(|l| inner.is_none_or(|i| !i.contains(l)))
                .copied()
                .ok_or_else(|| Error::InvalidMapping(format!("{name} shell has no label")))
        };
        Ok([
            pick(&self.et_labels, None, "ET")?,
            pick(&self.tc_labels, Some(&self.et_labels), "TC")?,
            pick(&self.wt_labels, Some(&self.tc_labels), "WT")?,
        ])
    }

    pub fn vocabulary(&self) -> BTreeSet<i32> {
        let mut v = self.wt_labels.clone();
        v.insert(0);
        v
    }
}

/// Per-channel z-score over nonzero voxels. Background stays exactly 0 and
/// zero-variance channels become all zeros.
pub fn normalize_intensities(vol: &MultiModalVolume) -> MultiModalVolume {
    let mut data = vol.data.clone();
    for mut channel in data.axis_iter_mut(Axis(0)) {
        let (mut n, mut sum) = (0usize, 0.0f64);
        for &v in channel.iter().filter(|v| **v != 0.0) {
            n += 1;
            sum += v as f64;
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        let var = channel
            .iter()
            .filter(|v| **v != 0.0)
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        channel.mapv_inplace(|v| {
            if v == 0.0 || std <= f64::EPSILON * mean.abs().max(1.0) {
                0.0
            } else {
                ((v as f64 - mean) / std) as f32
            }
        });
    }
    MultiModalVolume { data, ..vol.clone() }
}

/// Region mask `r` is set exactly where the label belongs to `r`'s label set.
pub fn labels_to_regions(
    lm: &LabelMap,
    mapping: &RegionMapping,
    spacing: [f64; 3],
) -> Result<RegionMaskSet> {
    mapping.validate()?;
    if let Some(&label) = lm.data.iter().find(|v| !lm.vocabulary.contains(v)) {
        return Err(Error::UnknownLabel { label });
    }
    let member = |set: &BTreeSet<i32>| lm.data.mapv(|v| set.contains(&v));
    RegionMaskSet::new(
        member(&mapping.et_labels),
        member(&mapping.tc_labels),
        member(&mapping.wt_labels),
        spacing,
    )
}

/// Writes the canonical label of each shell; fails on non-nested input.
pub fn regions_to_labels(
    rm: &RegionMaskSet,
    mapping: &RegionMapping,
    case_id: impl Into<String>,
) -> Result<LabelMap> {
    mapping.validate()?;
    if let Some(at) = rm.nesting_violation() {
        return Err(Error::NestingViolation(at));
    }
    let [et_l, tc_l, wt_l] = mapping.canonical_labels()?;
    let mut data = Array3::<i32>::zeros(rm.shape());
    Zip::from(&mut data)
        .and(&rm.et)
        .and(&rm.tc)
        .and(&rm.wt)
        .for_each(|d, &et, &tc, &wt| {
            *d = if et {
                et_l
            } else if tc {
                tc_l
            } else if wt {
                wt_l
            } else {
                0
            };
        });
    LabelMap::new(data, mapping.vocabulary(), case_id)
}
