//! Binary 3D morphology: connected components, dilation and erosion.
//!
//! Structuring elements are digital balls of the metric induced by a
//! [`Connectivity`]: the ball of radius `r` is everything reachable in at most
//! `r` neighbor steps (a `(2r+1)³` cube for 26-connectivity, an octahedron
//! for 6-connectivity).

use std::collections::VecDeque;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::volume::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            6 => Ok(Self::Six),
            18 => Ok(Self::Eighteen),
            26 => Ok(Self::TwentySix),
            _ => Err(format!("connectivity must be 6, 18 or 26, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbor offsets, origin excluded.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_l1 = match self {
            Self::Six => 1,
            Self::Eighteen => 2,
            Self::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dx in -1..=1isize {
            for dy in -1..=1isize {
                for dz in -1..=1isize {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    if l1 > 0 && l1 <= max_l1 {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[inline]
fn shift(p: [usize; 3], d: [isize; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = p[a] as isize + d[a];
        if v < 0 || v >= dims[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some(q)
}

fn dims_of(mask: &Mask) -> [usize; 3] {
    let s = mask.shape();
    [s[0], s[1], s[2]]
}

/// Connected-component labeling. Labels are `1..=count`, assigned in raster
/// order of each component's first voxel; background is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub labels: Array3<u32>,
    /// `sizes[k]` is the voxel count of label `k + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Mask of the component with label `label` (1-based).
    pub fn mask(&self, label: u32) -> Mask {
        self.labels.mapv(|l| l == label)
    }

    /// Voxel lists per component, in label order.
    pub fn voxel_lists(&self) -> Vec<Vec<[usize; 3]>> {
        let mut out: Vec<Vec<[usize; 3]>> = self.sizes.iter().map(|s| Vec::with_capacity(*s)).collect();
        for ((x, y, z), &l) in self.labels.indexed_iter() {
            if l > 0 {
                out[l as usize - 1].push([x, y, z]);
            }
        }
        out
    }
}

pub fn label_components(mask: &Mask, conn: Connectivity) -> Components {
    let dims = dims_of(mask);
    let offsets = conn.offsets();
    let mut labels = Array3::<u32>::zeros(dims);
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for ((x, y, z), &on) in mask.indexed_iter() {
        if !on || labels[[x, y, z]] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[[x, y, z]] = label;
        queue.push_back([x, y, z]);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for d in &offsets {
                if let Some(q) = shift(p, *d, dims) {
                    if mask[q] && labels[q] == 0 {
                        labels[q] = label;
                        queue.push_back(q);
                    }
                }
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes }
}

fn dilate_once(mask: &Mask, offsets: &[[isize; 3]]) -> Mask {
    let dims = dims_of(mask);
    let mut out = mask.clone();
    for ((x, y, z), &on) in mask.indexed_iter() {
        if on {
            for d in offsets {
                if let Some(q) = shift([x, y, z], *d, dims) {
                    out[q] = true;
                }
            }
        }
    }
    out
}

fn erode_once(mask: &Mask, offsets: &[[isize; 3]]) -> Mask {
    let dims = dims_of(mask);
    let mut out = mask.clone();
    for ((x, y, z), &on) in mask.indexed_iter() {
        if on {
            // voxels outside the grid do not erode
            let keep = offsets
                .iter()
                .all(|d| shift([x, y, z], *d, dims).is_none_or(|q| mask[q]));
            out[[x, y, z]] = keep;
        }
    }
    out
}

/// Dilation by the radius-`radius` ball of `conn`.
pub fn dilate(mask: &Mask, conn: Connectivity, radius: usize) -> Mask {
    let offsets = conn.offsets();
    (0..radius).fold(mask.clone(), |m, _| dilate_once(&m, &offsets))
}

/// Erosion by the radius-`radius` ball of `conn`; the adjoint of [`dilate`].
pub fn erode(mask: &Mask, conn: Connectivity, radius: usize) -> Mask {
    let offsets = conn.offsets();
    (0..radius).fold(mask.clone(), |m, _| erode_once(&m, &offsets))
}

pub fn closing(mask: &Mask, conn: Connectivity, radius: usize) -> Mask {
    erode(&dilate(mask, conn, radius), conn, radius)
}

pub fn opening(mask: &Mask, conn: Connectivity, radius: usize) -> Mask {
    dilate(&erode(mask, conn, radius), conn, radius)
}

/// On-voxels with at least one 6-neighbor off or outside the grid.
pub fn surface_voxels(mask: &Mask) -> Vec<[usize; 3]> {
    let dims = dims_of(mask);
    let face = Connectivity::Six.offsets();
    mask.indexed_iter()
        .filter(|(_, on)| **on)
        .map(|((x, y, z), _)| [x, y, z])
        .filter(|p| face.iter().any(|d| shift(*p, *d, dims).is_none_or(|q| !mask[q])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(n: usize, lo: usize, hi: usize) -> Mask {
        Mask::from_shape_fn((n, n, n), |(x, y, z)| {
            (lo..hi).contains(&x) && (lo..hi).contains(&y) && (lo..hi).contains(&z)
        })
    }

    #[test]
    fn offsets_counts() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }

    #[test]
    fn diagonal_voxels_depend_on_connectivity() {
        let mut m = Mask::from_elem((3, 3, 3), false);
        m[[0, 0, 0]] = true;
        m[[1, 1, 1]] = true;
        assert_eq!(label_components(&m, Connectivity::TwentySix).count(), 1);
        assert_eq!(label_components(&m, Connectivity::Eighteen).count(), 2);
        m[[1, 1, 1]] = false;
        m[[1, 1, 0]] = true;
        assert_eq!(label_components(&m, Connectivity::Eighteen).count(), 1);
        assert_eq!(label_components(&m, Connectivity::Six).count(), 2);
    }

    #[test]
    fn labels_follow_raster_order() {
        let mut m = Mask::from_elem((4, 1, 1), false);
        m[[0, 0, 0]] = true;
        m[[2, 0, 0]] = true;
        m[[3, 0, 0]] = true;
        let c = label_components(&m, Connectivity::Six);
        assert_eq!(c.sizes, vec![1, 2]);
        assert_eq!(c.labels[[3, 0, 0]], 2);
    }

    #[test]
    fn ball_shapes() {
        let mut m = Mask::from_elem((5, 5, 5), false);
        m[[2, 2, 2]] = true;
        let count = |m: &Mask| m.iter().filter(|v| **v).count();
        assert_eq!(count(&dilate(&m, Connectivity::TwentySix, 1)), 27);
        assert_eq!(count(&dilate(&m, Connectivity::Six, 1)), 7);
        assert_eq!(count(&dilate(&m, Connectivity::Six, 2)), 25);
        assert_eq!(count(&dilate(&m, Connectivity::Eighteen, 1)), 19);
    }

    #[test]
    fn cube_is_open_and_closed() {
        let c = cube(16, 5, 11);
        assert_eq!(opening(&c, Connectivity::TwentySix, 1), c);
        assert_eq!(closing(&c, Connectivity::TwentySix, 1), c);
    }

    #[test]
    fn border_touching_object_survives_erosion_at_border() {
        let c = cube(6, 0, 3);
        let e = erode(&c, Connectivity::TwentySix, 1);
        assert!(e[[0, 0, 0]] && e[[1, 1, 1]] && !e[[2, 2, 2]]);
    }

    #[test]
    fn surface_of_cube() {
        let c = cube(8, 2, 6);
        assert_eq!(surface_voxels(&c).len(), 64 - 8);
    }
}
