//! Synthetic brain phantoms: an ellipsoidal "brain" holding one or more
//! spherical tumors, each with an edema halo (label 2), an enhancing shell
//! (label 3) and a necrotic center (label 1), rendered with per-modality
//! contrasts plus Gaussian noise.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::{scaling_affine, LabelMap, MultiModalVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub lesions: usize,
    /// Noise std relative to the healthy-tissue intensity.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { shape: [32; 3], spacing: [1.0; 3], lesions: 1, noise: 0.05, seed: 0 }
    }
}

/// Intensity per tissue `[background, brain, necrosis, edema, enhancing]` for each modality.
const CONTRAST: [[f32; 5]; 4] = [
    [0.0, 1.0, 0.5, 0.9, 0.8],
    [0.0, 1.0, 0.4, 0.9, 2.0],
    [0.0, 1.0, 2.0, 1.8, 1.4],
    [0.0, 1.0, 1.2, 2.0, 1.5],
];

struct Lesion {
    center: [f64; 3],
    radii: [f64; 3],
}

/// Generates one phantom; identical configs give identical volumes.
pub fn phantom(cfg: &PhantomConfig, case_id: &str) -> Result<(MultiModalVolume, LabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [nx, ny, nz] = cfg.shape;
    let n_min = nx.min(ny).min(nz) as f64;
    let mid = cfg.shape.map(|n| (n as f64 - 1.0) / 2.0);
    let brain_r: [f64; 3] = cfg.shape.map(|n| 0.45 * n as f64);

    let scale = n_min / 32.0 / (cfg.lesions.max(1) as f64).cbrt();
    let mut lesions: Vec<Lesion> = Vec::new();
    for _ in 0..cfg.lesions {
        let outer = rng.random_range(6.0..8.0) * scale;
        let radii = [outer, outer * rng.random_range(0.55..0.65), outer * rng.random_range(0.25..0.32)];
        let mut center = mid;
        for _ in 0..100 {
            center = std::array::from_fn(|i| mid[i] + rng.random_range(-0.27..0.27) * cfg.shape[i] as f64);
            let clear = lesions.iter().all(|l| dist(&l.center, &center) > l.radii[0] + outer + 2.0);
            if clear {
                break;
            }
        }
        lesions.push(Lesion { center, radii });
    }

    let labels = Array3::from_shape_fn(cfg.shape, |(x, y, z)| {
        let p = [x as f64, y as f64, z as f64];
        let mut label = 0;
        for l in &lesions {
            let d = dist(&l.center, &p);
            let here = if d <= l.radii[2] {
                1
            } else if d <= l.radii[1] {
                3
            } else if d <= l.radii[0] {
                2
            } else {
                0
            };
            if here != 0 {
                label = here;
            }
        }
        label
    });
    let tissue = Array3::from_shape_fn(cfg.shape, |(x, y, z)| {
        let inside = (0..3).map(|i| ((([x, y, z][i] as f64) - mid[i]) / brain_r[i]).powi(2)).sum::<f64>() <= 1.0;
        match labels[[x, y, z]] {
            1 => 2usize,
            2 => 3,
            3 => 4,
            _ if inside => 1,
            _ => 0,
        }
    });
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let data = Array4::from_shape_fn((4, nx, ny, nz), |(c, x, y, z)| {
        let t = tissue[[x, y, z]];
        if t == 0 {
            0.0
        } else {
            (CONTRAST[c][t] as f64 + noise.sample(&mut rng)).max(0.01) as f32
        }
    });
    let vol = MultiModalVolume::new(data, cfg.spacing, scaling_affine(cfg.spacing), case_id)?;
    let labels = LabelMap::new(labels, [1, 2, 3], case_id)?;
    Ok((vol, labels))
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}
