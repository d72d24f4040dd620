//! Markdown results table and slice-overlay images.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{ArrayView2, Axis};
use serde_json::Value;
use tumorseg::volume::{MultiModalVolume, Region, RegionMaskSet};

use crate::CliError;

const COLUMNS: [(&str, &str); 6] = [
    ("lw_dice", "LW Dice ↑"),
    ("dice", "Dice ↑"),
    ("lw_hd95", "LW HD95 ↓"),
    ("hd95", "HD95 ↓"),
    ("sensitivity", "Sensitivity ↑"),
    ("specificity", "Specificity ↑"),
];

/// One row per sub-region with a fixed metric column order.
pub fn markdown_table(aggregate: &Value) -> Result<String, CliError> {
    let bad = |what: &str| CliError::Schema(format!("aggregate report: {what}"));
    let regions = aggregate.get("regions").and_then(Value::as_object).ok_or_else(|| bad("missing `regions`"))?;
    let mut out = String::new();
    let n = aggregate.get("num_cases").and_then(Value::as_u64).unwrap_or(0);
    writeln!(out, "# Evaluation report\n\nMean over {n} case(s).\n").unwrap();
    out.push_str("| Sub-region |");
    for (_, title) in COLUMNS {
        write!(out, " {title} |").unwrap();
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(COLUMNS.len()));
    out.push('\n');
    for r in Region::ALL {
        let row = regions.get(r.name()).ok_or_else(|| bad(&format!("missing region {r}")))?;
        write!(out, "| {} |", r.name()).unwrap();
        for (key, _) in COLUMNS {
            let v = row.get(key).and_then(Value::as_f64).ok_or_else(|| bad(&format!("missing {r}.{key}")))?;
            write!(out, " {v:.4} |").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Plane name and the axis held fixed.
pub const PLANES: [(&str, usize); 3] = [("sagittal", 0), ("coronal", 1), ("axial", 2)];

/// The slice along `axis` holding the most whole-tumor voxels, or the middle one.
fn busiest_slice(mask: &tumorseg::Mask, axis: usize) -> usize {
    let counts: Vec<usize> = mask.axis_iter(Axis(axis)).map(|s| s.iter().filter(|v| **v).count()).collect();
    let best = counts.iter().copied().max().unwrap_or(0);
    if best == 0 {
        counts.len() / 2
    } else {
        counts.iter().position(|c| *c == best).unwrap()
    }
}

fn blend(base: u8, color: [u8; 3]) -> Rgb<u8> {
    Rgb(color.map(|c| ((base as u16 + c as u16) / 2) as u8))
}

/// Renders one plane: FLAIR in gray, WT green, TC yellow, ET red.
pub fn overlay(vol: &MultiModalVolume, masks: &RegionMaskSet, axis: usize) -> RgbImage {
    let idx = busiest_slice(&masks.wt, axis);
    let flair = vol.data().index_axis(Axis(0), 3);
    let (lo, hi) = flair.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img: ArrayView2<f32> = flair.index_axis(Axis(axis), idx);
    let pick = |m: &tumorseg::Mask| m.index_axis(Axis(axis), idx).to_owned();
    let (et, tc, wt) = (pick(&masks.et), pick(&masks.tc), pick(&masks.wt));
    let (w, h) = (img.shape()[0], img.shape()[1]);
    let scale = (256 / w.max(h)).max(1);
    // Rows run along the second in-plane axis, flipped so it points up.
    RgbImage::from_fn((w * scale) as u32, (h * scale) as u32, |px, py| {
        let (i, j) = (px as usize / scale, h - 1 - py as usize / scale);
        let g = (((img[[i, j]] - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
        if et[[i, j]] {
            blend(g, [255, 0, 0])
        } else if tc[[i, j]] {
            blend(g, [255, 220, 0])
        } else if wt[[i, j]] {
            blend(g, [0, 200, 0])
        } else {
            Rgb([g, g, g])
        }
    })
}

pub fn write_overlays(dir: &Path, vol: &MultiModalVolume, masks: &RegionMaskSet) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for (plane, axis) in PLANES {
        let name = format!("{}_{plane}.png", vol.case_id);
        overlay(vol, masks, axis)
            .save(dir.join(&name))
            .map_err(|e| CliError::Runtime(format!("writing {name}: {e}")))?;
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use tumorseg::volume::IDENTITY_AFFINE;

    #[test]
    fn table_has_one_row_per_region() {
        let row = serde_json::json!({"lw_dice": 0.5, "dice": 0.6, "lw_hd95": 3.0, "hd95": 2.0, "sensitivity": 0.7, "specificity": 0.99});
        let agg = serde_json::json!({"num_cases": 2, "regions": {"ET": row, "TC": row, "WT": row}});
        let md = markdown_table(&agg).unwrap();
        assert!(md.contains("| ET | 0.5000 | 0.6000 | 3.0000 | 2.0000 | 0.7000 | 0.9900 |"));
        assert_eq!(md.lines().filter(|l| l.starts_with("| ")).count(), 4);
        assert!(markdown_table(&serde_json::json!({"regions": {}})).is_err());
    }

    #[test]
    fn overlay_marks_regions_on_the_busiest_slice() {
        let vol = MultiModalVolume::new(Array4::from_elem((4, 4, 5, 6), 1.0), [1.0; 3], IDENTITY_AFFINE, "c").unwrap();
        let mut m = RegionMaskSet::empty([4, 5, 6], [1.0; 3]);
        m.wt[[1, 2, 3]] = true;
        m.et[[1, 2, 3]] = true;
        m.tc[[1, 2, 3]] = true;
        let img = overlay(&vol, &m, 2);
        let scale = 256 / 5;
        assert_eq!(img.dimensions(), (4 * scale as u32, 5 * scale as u32));
        let red = img.get_pixel(scale as u32, (5 - 1 - 2) as u32 * scale as u32);
        assert!(red[0] > red[1] && red[0] > red[2]);
    }
}
