//! Random spatial and intensity transforms applied jointly to an image and its
//! label map, either one at a time ("single") or chained ("composite").
//!
//! Spatial steps resample by backward mapping: each output voxel looks up its
//! source location, trilinearly for intensities and nearest-neighbor for
//! labels, with zero outside the grid. Geometry is expressed in millimetres
//! about the volume center.

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, MultiModalVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Flip,
    Affine,
    ElasticDeformation,
    Noise,
    RescaleIntensity,
    RandomBiasField,
}

/// Parameter ranges for one transform kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformParams {
    Flip {
        /// Independent flip probability per axis.
        axis_probability: [f64; 3],
    },
    Affine {
        /// Rotation about each axis drawn from `[-max, max]` degrees.
        max_rotation_deg: f64,
        scale_range: [f64; 2],
        max_translation_mm: f64,
    },
    ElasticDeformation {
        /// Control points per axis, including the fixed border points.
        control_points: usize,
        max_displacement_mm: f64,
    },
    Noise {
        /// Standard deviation as a fraction of each channel's std.
        std_range: [f64; 2],
    },
    RescaleIntensity {
        out_range: [f64; 2],
    },
    RandomBiasField {
        order: usize,
        /// Coefficients drawn from `[-max, max]`.
        max_coefficient: f64,
    },
}

impl TransformParams {
    pub fn kind(&self) -> TransformKind {
        match self {
            Self::Flip { .. } => TransformKind::Flip,
            Self::Affine { .. } => TransformKind::Affine,
            Self::ElasticDeformation { .. } => TransformKind::ElasticDeformation,
            Self::Noise { .. } => TransformKind::Noise,
            Self::RescaleIntensity { .. } => TransformKind::RescaleIntensity,
            Self::RandomBiasField { .. } => TransformKind::RandomBiasField,
        }
    }

    /// Common-practice ranges for each kind.
    pub fn default_for(kind: TransformKind) -> Self {
        match kind {
            TransformKind::Flip => Self::Flip { axis_probability: [0.5; 3] },
            TransformKind::Affine => Self::Affine { max_rotation_deg: 10.0, scale_range: [0.9, 1.1], max_translation_mm: 0.0 },
            TransformKind::ElasticDeformation => Self::ElasticDeformation { control_points: 7, max_displacement_mm: 7.5 },
            TransformKind::Noise => Self::Noise { std_range: [0.0, 0.1] },
            TransformKind::RescaleIntensity => Self::RescaleIntensity { out_range: [0.0, 1.0] },
            TransformKind::RandomBiasField => Self::RandomBiasField { order: 3, max_coefficient: 0.5 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPolicy(m));
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        match *self {
            Self::Flip { axis_probability } => {
                if axis_probability.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return bad(format!("flip probabilities must lie in [0, 1], got {axis_probability:?}"));
                }
            }
            Self::Affine { max_rotation_deg, scale_range, max_translation_mm } => {
                if !(max_rotation_deg >= 0.0 && max_translation_mm >= 0.0 && range_ok(scale_range) && scale_range[0] > 0.0) {
                    return bad("affine ranges must be non-negative with 0 < scale min ≤ scale max".into());
                }
            }
            Self::ElasticDeformation { control_points, max_displacement_mm } => {
                if control_points < 3 || !(max_displacement_mm >= 0.0) {
                    return bad("elastic deformation needs ≥ 3 control points and a non-negative displacement".into());
                }
            }
            Self::Noise { std_range } => {
                if !range_ok(std_range) || std_range[0] < 0.0 {
                    return bad(format!("noise std range must satisfy 0 ≤ min ≤ max, got {std_range:?}"));
                }
            }
            Self::RescaleIntensity { out_range } => {
                if !range_ok(out_range) {
                    return bad(format!("rescale range must satisfy min ≤ max, got {out_range:?}"));
                }
            }
            Self::RandomBiasField { max_coefficient, .. } => {
                if !(max_coefficient >= 0.0 && max_coefficient.is_finite()) {
                    return bad("bias field coefficient bound must be finite and ≥ 0".into());
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Step {
        let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let within = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..=r[1]) } else { r[0] };
        match *self {
            Self::Flip { axis_probability } => Step::Flip { axes: axis_probability.map(|p| rng.random_bool(p)) },
            Self::Affine { max_rotation_deg, scale_range, max_translation_mm } => Step::Affine {
                rotation_deg: std::array::from_fn(|_| sym(rng, max_rotation_deg)),
                scale: std::array::from_fn(|_| within(rng, scale_range)),
                translation_mm: std::array::from_fn(|_| sym(rng, max_translation_mm)),
            },
            Self::ElasticDeformation { control_points: n, max_displacement_mm } => {
                let mut displacements_mm = vec![[0.0; 3]; n * n * n];
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            let border = [i, j, k].iter().any(|&c| c == 0 || c == n - 1);
                            if !border {
                                displacements_mm[(i * n + j) * n + k] =
                                    std::array::from_fn(|_| sym(rng, max_displacement_mm));
                            }
                        }
                    }
                }
                Step::ElasticDeformation { control_points: n, displacements_mm }
            }
            Self::Noise { std_range } => Step::Noise { std_fraction: within(rng, std_range), seed: rng.random() },
            Self::RescaleIntensity { out_range } => Step::RescaleIntensity { out_range },
            Self::RandomBiasField { order, max_coefficient } => Step::RandomBiasField {
                order,
                coefficients: (0..bias_terms(order).len()).map(|_| sym(rng, max_coefficient)).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleTransform {
    pub params: TransformParams,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeTransform {
    pub steps: Vec<TransformParams>,
    pub probability: f64,
}

/// Which transforms may fire and how often. Each draw first tries the
/// composite chain; failing that, the first single whose coin comes up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub singles: Vec<SingleTransform>,
    pub composite: CompositeTransform,
    pub seed: u64,
}

const ALL_KINDS: [TransformKind; 6] = [
    TransformKind::Flip,
    TransformKind::Affine,
    TransformKind::ElasticDeformation,
    TransformKind::Noise,
    TransformKind::RescaleIntensity,
    TransformKind::RandomBiasField,
];

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            singles: ALL_KINDS
                .iter()
                .map(|&k| SingleTransform { params: TransformParams::default_for(k), probability: 0.15 })
                .collect(),
            composite: CompositeTransform {
                steps: [TransformKind::Flip, TransformKind::Affine, TransformKind::Noise, TransformKind::RandomBiasField]
                    .iter()
                    .map(|&k| TransformParams::default_for(k))
                    .collect(),
                probability: 0.2,
            },
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// Never transforms anything.
    pub fn disabled() -> Self {
        Self { singles: Vec::new(), composite: CompositeTransform { steps: Vec::new(), probability: 0.0 }, seed: 0 }
    }

    pub fn single(params: TransformParams, probability: f64, seed: u64) -> Self {
        Self { singles: vec![SingleTransform { params, probability }], seed, ..Self::disabled() }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = self.singles.iter().map(|s| s.probability).chain([self.composite.probability]);
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidPolicy(format!("probability {p} outside [0, 1]")));
            }
        }
        for t in self.singles.iter().map(|s| &s.params).chain(&self.composite.steps) {
            t.validate()?;
        }
        Ok(())
    }

    /// Deterministic stream for the `ordinal`-th case.
    pub fn stream(&self, ordinal: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(ordinal);
        rng
    }
}

/// One transform with every random parameter fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Step {
    Flip { axes: [bool; 3] },
    Affine { rotation_deg: [f64; 3], scale: [f64; 3], translation_mm: [f64; 3] },
    ElasticDeformation { control_points: usize, displacements_mm: Vec<[f64; 3]> },
    Noise { std_fraction: f64, seed: u64 },
    RescaleIntensity { out_range: [f64; 2] },
    RandomBiasField { order: usize, coefficients: Vec<f64> },
}

impl Step {
    pub fn is_spatial(&self) -> bool {
        matches!(self, Self::Flip { .. } | Self::Affine { .. } | Self::ElasticDeformation { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConcreteTransform {
    pub steps: Vec<Step>,
}

impl ConcreteTransform {
    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn sample_transform(policy: &AugmentationPolicy, rng: &mut ChaCha8Rng) -> Result<ConcreteTransform> {
    policy.validate()?;
    if !policy.composite.steps.is_empty() && rng.random_bool(policy.composite.probability) {
        return Ok(ConcreteTransform { steps: policy.composite.steps.iter().map(|p| p.sample(rng)).collect() });
    }
    for s in &policy.singles {
        if rng.random_bool(s.probability) {
            return Ok(ConcreteTransform { steps: vec![s.params.sample(rng)] });
        }
    }
    Ok(ConcreteTransform::default())
}

/// Applies every step in order; spatial steps move image and labels together.
pub fn apply_transform(t: &ConcreteTransform, vol: &MultiModalVolume, labels: &LabelMap) -> Result<(MultiModalVolume, LabelMap)> {
    labels.check_aligned(vol)?;
    let mut img = vol.data().clone();
    let mut lab = labels.data().clone();
    for step in &t.steps {
        apply_step(step, &mut img, Some(&mut lab), vol.spacing);
    }
    Ok((vol.with_data(img)?, LabelMap::new(lab, labels.vocabulary.iter().copied(), labels.case_id.clone())?))
}

/// Image-only variant, used when no annotation exists.
pub fn apply_transform_image(t: &ConcreteTransform, vol: &MultiModalVolume) -> Result<MultiModalVolume> {
    let mut img = vol.data().clone();
    for step in &t.steps {
        apply_step(step, &mut img, None, vol.spacing);
    }
    vol.with_data(img)
}

/// Draws and applies an independent transform per case from `policy.stream(ordinal)`.
pub fn augment_batch(policy: &AugmentationPolicy, cases: &[(MultiModalVolume, LabelMap)]) -> Result<Vec<(MultiModalVolume, LabelMap)>> {
    policy.validate()?;
    cases
        .iter()
        .enumerate()
        .map(|(i, (v, l))| {
            let t = sample_transform(policy, &mut policy.stream(i as u64))?;
            if t.is_identity() {
                l.check_aligned(v)?;
                Ok((v.clone(), l.clone()))
            } else {
                apply_transform(&t, v, l)
            }
        })
        .collect()
}

fn apply_step(step: &Step, img: &mut Array4<f32>, lab: Option<&mut Array3<i32>>, spacing: [f64; 3]) {
    let shape = [img.shape()[1], img.shape()[2], img.shape()[3]];
    match step {
        Step::Flip { axes } => {
            for (a, &on) in axes.iter().enumerate() {
                if on {
                    img.invert_axis(Axis(a + 1));
                    *img = img.as_standard_layout().into_owned();
                }
            }
            if let Some(lab) = lab {
                for (a, &on) in axes.iter().enumerate() {
                    if on {
                        lab.invert_axis(Axis(a));
                        *lab = lab.as_standard_layout().into_owned();
                    }
                }
            }
        }
        Step::Affine { rotation_deg, scale, translation_mm } => {
            let map = AffineMap::new(*rotation_deg, *scale, *translation_mm, shape, spacing);
            resample(img, lab, shape, |p| map.source(p));
        }
        Step::ElasticDeformation { control_points, displacements_mm } => {
            let field = Elastic { n: *control_points, disp: displacements_mm, shape, spacing };
            resample(img, lab, shape, |p| field.source(p));
        }
        Step::Noise { std_fraction, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for mut ch in img.axis_iter_mut(Axis(0)) {
                let std = channel_std(ch.iter().copied());
                let sigma = std_fraction * std;
                if sigma > 0.0 {
                    let normal = Normal::new(0.0, sigma).expect("finite sigma");
                    ch.mapv_inplace(|v| v + normal.sample(&mut rng) as f32);
                }
            }
        }
        Step::RescaleIntensity { out_range: [lo, hi] } => {
            for mut ch in img.axis_iter_mut(Axis(0)) {
                let (mn, mx) = ch.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                let span = (mx - mn) as f64;
                ch.mapv_inplace(|v| {
                    let t = if span > 0.0 { (v - mn) as f64 / span } else { 0.0 };
                    ((lo + t * (hi - lo)) as f32).clamp(*lo as f32, *hi as f32)
                });
            }
        }
        Step::RandomBiasField { order, coefficients } => {
            let field = bias_field(*order, coefficients, shape);
            for mut ch in img.axis_iter_mut(Axis(0)) {
                ch *= &field;
            }
        }
    }
}

fn channel_std(values: impl Iterator<Item = f32> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = values.clone().map(|v| v as f64).sum::<f64>() / n;
    (values.map(|v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Exponent triples `(i, j, k)` with `i + j + k ≤ order`.
fn bias_terms(order: usize) -> Vec<[i32; 3]> {
    let mut t = Vec::new();
    for i in 0..=order {
        for j in 0..=order - i {
            for k in 0..=order - i - j {
                t.push([i as i32, j as i32, k as i32]);
            }
        }
    }
    t
}

/// `exp` of a polynomial in coordinates normalized to `[-1, 1]`.
pub fn bias_field(order: usize, coefficients: &[f64], shape: [usize; 3]) -> Array3<f32> {
    let terms = bias_terms(order);
    let norm = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    Array3::from_shape_fn(shape, |(x, y, z)| {
        let c = [norm(x, shape[0]), norm(y, shape[1]), norm(z, shape[2])];
        let s: f64 = terms
            .iter()
            .zip(coefficients)
            .map(|(e, a)| a * c[0].powi(e[0]) * c[1].powi(e[1]) * c[2].powi(e[2]))
            .sum();
        s.exp() as f32
    })
}

/// Content at `src` moves to `A(src − c) + c + t` with `A = Rz·Ry·Rx·S`.
pub struct AffineMap {
    inv: [[f64; 3]; 3],
    fwd: [[f64; 3]; 3],
    center_mm: [f64; 3],
    translation_mm: [f64; 3],
    spacing: [f64; 3],
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn matvec(a: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (0..3).map(|k| a[i][k] * v[k]).sum())
}

fn rotation(deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = deg.map(f64::to_radians);
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

impl AffineMap {
    pub fn new(rotation_deg: [f64; 3], scale: [f64; 3], translation_mm: [f64; 3], shape: [usize; 3], spacing: [f64; 3]) -> Self {
        let r = rotation(rotation_deg);
        let s = [[scale[0], 0.0, 0.0], [0.0, scale[1], 0.0], [0.0, 0.0, scale[2]]];
        let s_inv = [[1.0 / scale[0], 0.0, 0.0], [0.0, 1.0 / scale[1], 0.0], [0.0, 0.0, 1.0 / scale[2]]];
        let rt: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| r[j][i]));
        Self {
            fwd: matmul(&r, &s),
            inv: matmul(&s_inv, &rt),
            center_mm: std::array::from_fn(|i| (shape[i] as f64 - 1.0) / 2.0 * spacing[i]),
            translation_mm,
            spacing,
        }
    }

    /// Voxel coordinates where content from voxel `src` ends up.
    pub fn target(&self, src: [f64; 3]) -> [f64; 3] {
        let rel: [f64; 3] = std::array::from_fn(|i| src[i] * self.spacing[i] - self.center_mm[i]);
        let moved = matvec(&self.fwd, rel);
        std::array::from_fn(|i| (moved[i] + self.center_mm[i] + self.translation_mm[i]) / self.spacing[i])
    }

    /// Voxel coordinates sampled to produce output voxel `dst`.
    pub fn source(&self, dst: [f64; 3]) -> [f64; 3] {
        let rel: [f64; 3] =
            std::array::from_fn(|i| dst[i] * self.spacing[i] - self.center_mm[i] - self.translation_mm[i]);
        let back = matvec(&self.inv, rel);
        std::array::from_fn(|i| (back[i] + self.center_mm[i]) / self.spacing[i])
    }
}

struct Elastic<'a> {
    n: usize,
    disp: &'a [[f64; 3]],
    shape: [usize; 3],
    spacing: [f64; 3],
}

impl Elastic<'_> {
    /// Output voxel `p` samples from `p + d(p)`, `d` trilinear over the control grid.
    fn source(&self, p: [f64; 3]) -> [f64; 3] {
        let n = self.n;
        let g: [f64; 3] = std::array::from_fn(|i| {
            let extent = (self.shape[i].max(2) - 1) as f64;
            (p[i] / extent * (n - 1) as f64).clamp(0.0, (n - 1) as f64)
        });
        let base: [usize; 3] = std::array::from_fn(|i| (g[i].floor() as usize).min(n - 2));
        let f: [f64; 3] = std::array::from_fn(|i| g[i] - base[i] as f64);
        let mut d = [0.0; 3];
        for corner in 0..8 {
            let o = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
            let w: f64 = (0..3).map(|i| if o[i] == 1 { f[i] } else { 1.0 - f[i] }).product();
            if w == 0.0 {
                continue;
            }
            let idx = ((base[0] + o[0]) * n + base[1] + o[1]) * n + base[2] + o[2];
            for (di, v) in d.iter_mut().zip(self.disp[idx]) {
                *di += w * v;
            }
        }
        std::array::from_fn(|i| p[i] + d[i] / self.spacing[i])
    }
}

fn resample(img: &mut Array4<f32>, lab: Option<&mut Array3<i32>>, shape: [usize; 3], source: impl Fn([f64; 3]) -> [f64; 3]) {
    let [nx, ny, nz] = shape;
    let channels = img.shape()[0];
    let mut out_img = Array4::<f32>::zeros(img.raw_dim());
    let mut out_lab = lab.as_ref().map(|l| Array3::<i32>::zeros(l.raw_dim()));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let s = source([x as f64, y as f64, z as f64]);
                trilinear_into(img, s, shape, channels, |c, v| out_img[[c, x, y, z]] = v);
                if let (Some(src), Some(dst)) = (lab.as_deref(), out_lab.as_mut()) {
                    let r: [f64; 3] = s.map(f64::round);
                    if (0..3).all(|i| r[i] >= 0.0 && r[i] <= (shape[i] - 1) as f64) {
                        dst[[x, y, z]] = src[[r[0] as usize, r[1] as usize, r[2] as usize]];
                    }
                }
            }
        }
    }
    *img = out_img;
    if let (Some(l), Some(o)) = (lab, out_lab) {
        *l = o;
    }
}

/// Zero-padded trilinear lookup; exact at integer coordinates.
fn trilinear_into(img: &Array4<f32>, s: [f64; 3], shape: [usize; 3], channels: usize, mut put: impl FnMut(usize, f32)) {
    const SNAP: f64 = 1e-9;
    let s: [f64; 3] = s.map(|v| if (v - v.round()).abs() < SNAP { v.round() } else { v });
    if (0..3).any(|i| s[i] <= -1.0 || s[i] >= shape[i] as f64) {
        return;
    }
    let base: [isize; 3] = s.map(|v| v.floor() as isize);
    let f: [f64; 3] = std::array::from_fn(|i| s[i] - base[i] as f64);
    for c in 0..channels {
        let mut acc = 0.0f64;
        for corner in 0..8 {
            let o = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
            let w: f64 = (0..3).map(|i| if o[i] == 1 { f[i] } else { 1.0 - f[i] }).product();
            let idx: [isize; 3] = std::array::from_fn(|i| base[i] + o[i] as isize);
            if w == 0.0 || (0..3).any(|i| idx[i] < 0 || idx[i] >= shape[i] as isize) {
                continue;
            }
            acc += w * img[[c, idx[0] as usize, idx[1] as usize, idx[2] as usize]] as f64;
        }
        put(c, acc as f32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::IDENTITY_AFFINE;

    fn case(n: usize, seed: u64) -> (MultiModalVolume, LabelMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array4::from_shape_simple_fn((4, n, n + 1, n + 2), || rng.random_range(0.5f32..2.0));
        let labels = Array3::from_shape_fn((n, n + 1, n + 2), |(x, y, z)| ((x + 2 * y + 3 * z) % 4) as i32);
        (
            MultiModalVolume::new(data, [1.0, 1.5, 2.0], IDENTITY_AFFINE, "c").unwrap(),
            LabelMap::new(labels, [1, 2, 3], "c").unwrap(),
        )
    }

    #[test]
    fn zero_probability_policy_is_identity() {
        let mut p = AugmentationPolicy::default();
        p.composite.probability = 0.0;
        p.singles.iter_mut().for_each(|s| s.probability = 0.0);
        let mut rng = p.stream(0);
        for _ in 0..50 {
            assert!(sample_transform(&p, &mut rng).unwrap().is_identity());
        }
    }

    #[test]
    fn same_seed_same_draw() {
        let p = AugmentationPolicy { seed: 42, ..Default::default() };
        for ordinal in 0..20 {
            let a = sample_transform(&p, &mut p.stream(ordinal)).unwrap();
            let b = sample_transform(&p, &mut p.stream(ordinal)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn invalid_policy_rejected() {
        let p = AugmentationPolicy::single(TransformParams::Noise { std_range: [0.2, 0.1] }, 1.0, 0);
        assert!(matches!(p.validate(), Err(Error::InvalidPolicy(_))));
        let p = AugmentationPolicy::single(TransformParams::default_for(TransformKind::Flip), 1.5, 0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let (v, l) = case(5, 1);
        let t = ConcreteTransform { steps: vec![Step::Flip { axes: [true, false, true] }] };
        let (v1, l1) = apply_transform(&t, &v, &l).unwrap();
        assert_ne!(v1, v);
        let (v2, l2) = apply_transform(&t, &v1, &l1).unwrap();
        assert_eq!((v2, l2), (v, l));
    }

    #[test]
    fn identity_affine_and_flat_elastic_preserve_data() {
        let (v, l) = case(6, 2);
        let n = 7;
        for step in [
            Step::Affine { rotation_deg: [0.0; 3], scale: [1.0; 3], translation_mm: [0.0; 3] },
            Step::ElasticDeformation { control_points: n, displacements_mm: vec![[0.0; 3]; n * n * n] },
        ] {
            let (v1, l1) = apply_transform(&ConcreteTransform { steps: vec![step] }, &v, &l).unwrap();
            assert_eq!(l1, l);
            for (a, b) in v1.data().iter().zip(v.data().iter()) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn intensity_steps_leave_labels() {
        let (v, l) = case(5, 3);
        for step in [
            Step::Noise { std_fraction: 0.1, seed: 9 },
            Step::RescaleIntensity { out_range: [-1.0, 1.0] },
            Step::RandomBiasField { order: 3, coefficients: vec![0.3; 20] },
        ] {
            let (v1, l1) = apply_transform(&ConcreteTransform { steps: vec![step] }, &v, &l).unwrap();
            assert_eq!(l1, l);
            assert_ne!(v1, v);
        }
    }

    #[test]
    fn rescale_hits_range_bounds() {
        let (v, l) = case(4, 4);
        let t = ConcreteTransform { steps: vec![Step::RescaleIntensity { out_range: [-2.0, 3.0] }] };
        let (v1, _) = apply_transform(&t, &v, &l).unwrap();
        for ch in v1.data().outer_iter() {
            let mn = ch.iter().cloned().fold(f32::INFINITY, f32::min);
            let mx = ch.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!((mn, mx), (-2.0, 3.0));
        }
    }

    #[test]
    fn bias_term_count() {
        assert_eq!(bias_terms(3).len(), 20);
        assert_eq!(bias_terms(0).len(), 1);
    }

    #[test]
    fn misaligned_pair_rejected() {
        let (v, _) = case(4, 5);
        let l = LabelMap::new(Array3::zeros((4, 4, 4)), [], "c").unwrap();
        assert!(matches!(apply_transform(&ConcreteTransform::default(), &v, &l), Err(Error::MisalignedPair(_))));
    }

    #[test]
    fn affine_inverse_round_trips() {
        let m = AffineMap::new([5.0, -7.0, 12.0], [0.9, 1.1, 1.05], [1.0, -2.0, 0.5], [10, 12, 14], [1.0, 1.2, 0.8]);
        let p = [3.0, 4.5, 7.25];
        let q = m.source(m.target(p));
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-9);
        }
    }
}
