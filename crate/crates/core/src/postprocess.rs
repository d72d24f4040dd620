//! Refinement of raw ensemble masks: small-component removal, boundary
//! smoothing and ET ⊆ TC ⊆ WT repair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{closing, label_components, opening, Connectivity};
use crate::volume::{Mask, Region, RegionMaskSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    ClosingThenOpening,
}

/// Minimum surviving component size per region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinComponentSize {
    pub et: f64,
    pub tc: f64,
    pub wt: f64,
}

impl MinComponentSize {
    pub fn uniform(v: f64) -> Self {
        Self { et: v, tc: v, wt: v }
    }

    pub fn get(&self, r: Region) -> f64 {
        match r {
            Region::Et => self.et,
            Region::Tc => self.tc,
            Region::Wt => self.wt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocConfig {
    pub min_component: MinComponentSize,
    /// Interpret `min_component` in mm³ instead of voxels.
    pub min_component_in_mm3: bool,
    pub connectivity: Connectivity,
    pub smoothing: Smoothing,
    pub smoothing_radius: usize,
    pub enforce_hierarchy: bool,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            min_component: MinComponentSize::uniform(50.0),
            min_component_in_mm3: false,
            connectivity: Connectivity::TwentySix,
            smoothing: Smoothing::None,
            smoothing_radius: 1,
            enforce_hierarchy: true,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.min_component.et, self.min_component.tc, self.min_component.wt];
        if sizes.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidVolume(format!("min_component must be ≥ 0, got {sizes:?}")));
        }
        if self.smoothing != Smoothing::None && self.smoothing_radius < 1 {
            return Err(Error::InvalidVolume("smoothing_radius must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Voxel-count threshold for `region` at the given spacing.
    pub fn voxel_threshold(&self, region: Region, spacing: [f64; 3]) -> usize {
        let v = self.min_component.get(region);
        let voxels = if self.min_component_in_mm3 {
            v / (spacing[0] * spacing[1] * spacing[2])
        } else {
            v
        };
        voxels.ceil() as usize
    }
}

/// Removes connected components with fewer than `min_voxels` voxels.
pub fn size_filter(mask: &Mask, min_voxels: usize, connectivity: Connectivity) -> Mask {
    if min_voxels == 0 {
        return mask.clone();
    }
    let cc = label_components(mask, connectivity);
    cc.labels.mapv(|l| l > 0 && cc.sizes[l as usize - 1] >= min_voxels)
}

/// Upward closure: `TC ∪= ET`, `WT ∪= TC`. Never removes a voxel.
pub fn enforce_hierarchy(raw: &RegionMaskSet) -> RegionMaskSet {
    let mut out = raw.clone();
    ndarray::Zip::from(&mut out.tc).and(&raw.et).for_each(|t, &e| *t |= e);
    let tc = out.tc.clone();
    ndarray::Zip::from(&mut out.wt).and(&tc).for_each(|w, &t| *w |= t);
    out
}

/// Closing then opening with the radius-`radius` ball of `connectivity`.
pub fn smooth_boundaries(mask: &Mask, connectivity: Connectivity, radius: usize) -> Mask {
    opening(&closing(mask, connectivity, radius), connectivity, radius)
}

/// Per-region size filter, then smoothing, then hierarchy repair.
pub fn postprocess_case(raw: &RegionMaskSet, cfg: &PostprocConfig) -> Result<RegionMaskSet> {
    cfg.validate()?;
    let mut out = raw.clone();
    for r in Region::ALL {
        let threshold = cfg.voxel_threshold(r, raw.spacing);
        let mut m = size_filter(raw.region(r), threshold, cfg.connectivity);
        if cfg.smoothing == Smoothing::ClosingThenOpening {
            m = smooth_boundaries(&m, cfg.connectivity, cfg.smoothing_radius);
        }
        *out.region_mut(r) = m;
    }
    if cfg.enforce_hierarchy {
        out = enforce_hierarchy(&out);
    }
    Ok(out)
}
