//! Case manifests and on-disk volume persistence.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{
    labels_to_regions, LabelMap, MultiModalVolume, RegionMapping, RegionMaskSet, MODALITIES,
};

/// Maximum allowed difference between modality headers (spacing and affine).
pub const HEADER_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub case_id: String,
    pub t1: PathBuf,
    pub t1gd: PathBuf,
    pub t2: PathBuf,
    pub flair: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    pub split: Split,
}

impl ManifestEntry {
    pub fn modality_paths(&self) -> [&Path; 4] {
        [&self.t1, &self.t1gd, &self.t2, &self.flair]
    }
}

/// Cases with their modality paths. Relative paths are resolved against the
/// manifest's directory at load time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate case_id `{}`", e.case_id)));
            }
        }
        Ok(Self { entries })
    }

    /// Parses a manifest and checks that every listed file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let entries = entries
            .into_iter()
            .map(|e| ManifestEntry {
                t1: resolve(&e.t1),
                t1gd: resolve(&e.t1gd),
                t2: resolve(&e.t2),
                flair: resolve(&e.flair),
                label: e.label.as_ref().map(resolve),
                ..e
            })
            .collect::<Vec<_>>();
        for e in &entries {
            for p in e.modality_paths().into_iter().chain(e.label.as_deref()) {
                if !p.exists() {
                    return Err(Error::MissingFile(p.to_path_buf()));
                }
            }
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, case_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= HEADER_TOLERANCE
}

/// Loads four modality files into one volume. Spacing and affine come from
/// the first modality; the others must agree within [`HEADER_TOLERANCE`].
pub fn load_volume(paths: [&Path; 4], case_id: &str) -> Result<MultiModalVolume> {
    for p in paths {
        if !p.exists() {
            return Err(Error::MissingFile(p.to_path_buf()));
        }
    }
    let mut channels = Vec::with_capacity(4);
    let mut first: Option<nifti::Header> = None;
    for (p, name) in paths.into_iter().zip(MODALITIES) {
        let (grid, header) = nifti::read_scalar(p)?;
        if let Some(f) = &first {
            if header.dims != f.dims {
                return Err(Error::ShapeMismatch(format!(
                    "{case_id}: {name} has shape {:?}, t1 has {:?}",
                    header.dims, f.dims
                )));
            }
            let spacing_ok = header.spacing.iter().zip(&f.spacing).all(|(a, b)| close(*a, *b));
            let affine_ok = header
                .affine
                .iter()
                .flatten()
                .zip(f.affine.iter().flatten())
                .all(|(a, b)| close(*a, *b));
            if !spacing_ok || !affine_ok {
                return Err(Error::HeaderMismatch(format!(
                    "{case_id}: {name} header disagrees with t1 beyond {HEADER_TOLERANCE}"
                )));
            }
        } else {
            first = Some(header);
        }
        channels.push(grid);
    }
    let header = first.expect("four modalities");
    let views: Vec<_> = channels.iter().map(|c| c.view()).collect();
    let data: Array4<f32> = ndarray::stack(Axis(0), &views)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    MultiModalVolume::new(data, header.spacing, header.affine, case_id)
}

/// Writes the four modalities as `<dir>/<case>_<modality>.nii.gz` and returns
/// the paths in channel order.
pub fn save_volume(dir: &Path, vol: &MultiModalVolume) -> Result<[PathBuf; 4]> {
    let paths = MODALITIES.map(|m| dir.join(format!("{}_{m}.nii.gz", vol.case_id)));
    for (c, p) in paths.iter().enumerate() {
        let grid = vol.data().index_axis(Axis(0), c).to_owned();
        nifti::write_scalar(p, &grid, vol.spacing, &vol.affine)?;
    }
    Ok(paths)
}

pub fn load_label_map(path: &Path, vocabulary: impl IntoIterator<Item = i32>, case_id: &str) -> Result<LabelMap> {
    let (grid, _) = nifti::read_labels(path)?;
    LabelMap::new(grid, vocabulary, case_id)
}

pub fn save_label_map(path: &Path, lm: &LabelMap, spacing: [f64; 3], affine: &crate::volume::Affine) -> Result<()> {
    nifti::write_labels(path, lm.data(), spacing, affine)
}

/// Region mask file names used by the prediction and post-processing stages.
pub fn region_mask_paths(dir: &Path, case_id: &str) -> BTreeMap<&'static str, PathBuf> {
    ["et", "tc", "wt"]
        .into_iter()
        .map(|r| (r, dir.join(format!("{case_id}_{r}.nii.gz"))))
        .collect()
}

pub fn save_region_masks(dir: &Path, case_id: &str, rm: &RegionMaskSet, affine: &crate::volume::Affine) -> Result<()> {
    let paths = region_mask_paths(dir, case_id);
    nifti::write_mask(&paths["et"], &rm.et, rm.spacing, affine)?;
    nifti::write_mask(&paths["tc"], &rm.tc, rm.spacing, affine)?;
    nifti::write_mask(&paths["wt"], &rm.wt, rm.spacing, affine)?;
    Ok(())
}

pub fn load_region_masks(dir: &Path, case_id: &str) -> Result<(RegionMaskSet, crate::volume::Affine)> {
    let paths = region_mask_paths(dir, case_id);
    let (et, h) = nifti::read_mask(&paths["et"])?;
    let (tc, _) = nifti::read_mask(&paths["tc"])?;
    let (wt, _) = nifti::read_mask(&paths["wt"])?;
    Ok((RegionMaskSet::new(et, tc, wt, h.spacing)?, h.affine))
}

/// A loaded case: image, optional ground-truth regions.
#[derive(Debug, Clone)]
pub struct Case {
    pub volume: MultiModalVolume,
    pub labels: Option<LabelMap>,
}

impl Case {
    pub fn regions(&self, mapping: &RegionMapping) -> Result<Option<RegionMaskSet>> {
        self.labels
            .as_ref()
            .map(|lm| labels_to_regions(lm, mapping, self.volume.spacing))
            .transpose()
    }
}

/// Loads an entry's image (z-score normalized) and label map.
pub fn load_case(entry: &ManifestEntry, mapping: &RegionMapping) -> Result<Case> {
    let raw = load_volume(entry.modality_paths(), &entry.case_id)?;
    let volume = crate::volume::normalize_intensities(&raw);
    let labels = match &entry.label {
        Some(p) => {
            let lm = load_label_map(p, mapping.vocabulary(), &entry.case_id)?;
            lm.check_aligned(&volume)?;
            Some(lm)
        }
        None => None,
    };
    Ok(Case { volume, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{scaling_affine, IDENTITY_AFFINE};
    use ndarray::Array3;

    fn phantom(n: usize) -> MultiModalVolume {
        let data = Array4::from_shape_fn((4, n, n, n), |(c, x, y, z)| {
            (c as f32 + 1.0) * ((x * 7 + y * 3 + z) % 11) as f32 / 3.0
        });
        MultiModalVolume::new(data, [1.0, 1.0, 1.5], scaling_affine([1.0, 1.0, 1.5]), "p0").unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let vol = phantom(16);
        let paths = save_volume(dir.path(), &vol).unwrap();
        let refs = [paths[0].as_path(), paths[1].as_path(), paths[2].as_path(), paths[3].as_path()];
        let back = load_volume(refs, "p0").unwrap();
        assert_eq!(back.data().shape(), &[4, 16, 16, 16]);
        assert_eq!(back.data(), vol.data());
        for (a, b) in back.spacing.iter().zip(vol.spacing) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_and_header_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let a = Array3::<f32>::zeros((16, 16, 16));
        let b = Array3::<f32>::zeros((17, 17, 17));
        let aff = IDENTITY_AFFINE;
        for (i, name) in ["a", "b", "c"].iter().enumerate() {
            nifti::write_scalar(&d.join(format!("{name}.nii.gz")), &a, [1.0; 3], &aff).unwrap();
            let _ = i;
        }
        nifti::write_scalar(&d.join("big.nii.gz"), &b, [1.0; 3], &aff).unwrap();
        let mut shifted = aff;
        shifted[0][3] = 0.01;
        nifti::write_scalar(&d.join("shift.nii.gz"), &a, [1.0; 3], &shifted).unwrap();
        let p = |n: &str| d.join(format!("{n}.nii.gz"));
        let (pa, pb, pc, big, shift) = (p("a"), p("b"), p("c"), p("big"), p("shift"));
        assert!(matches!(load_volume([&pa, &pb, &pc, &big], "x"), Err(Error::ShapeMismatch(_))));
        assert!(matches!(load_volume([&pa, &pb, &pc, &shift], "x"), Err(Error::HeaderMismatch(_))));
        assert!(matches!(load_volume([&pa, &pb, &pc, &p("nope")], "x"), Err(Error::MissingFile(_))));
        assert!(load_volume([&pa, &pb, &pc, &pa], "x").is_ok());
    }

    #[test]
    fn manifest_resolves_relative_paths_and_checks_ids() {
        let dir = tempfile::tempdir().unwrap();
        let vol = phantom(4);
        save_volume(dir.path(), &vol).unwrap();
        let json = r#"[{"case_id":"p0","t1":"p0_t1.nii.gz","t1gd":"p0_t1gd.nii.gz",
            "t2":"p0_t2.nii.gz","flair":"p0_flair.nii.gz","split":"train"}]"#;
        let mpath = dir.path().join("manifest.json");
        std::fs::write(&mpath, json).unwrap();
        let m = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(m.entries[0].t1, dir.path().join("p0_t1.nii.gz"));
        let case = load_case(&m.entries[0], &RegionMapping::default()).unwrap();
        assert!(case.labels.is_none());

        let dup = vec![m.entries[0].clone(), m.entries[0].clone()];
        assert!(matches!(DatasetManifest::new(dup), Err(Error::InvalidManifest(_))));

        let bad = json.replace("p0_t2", "missing_t2");
        std::fs::write(&mpath, bad).unwrap();
        assert!(matches!(DatasetManifest::load(&mpath), Err(Error::MissingFile(_))));

        std::fs::write(&mpath, r#"[{"case_id":"p0","extra":1}]"#).unwrap();
        assert!(DatasetManifest::load(&mpath).is_err());
    }
}
