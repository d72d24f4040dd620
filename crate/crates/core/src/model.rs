//! The UNet3D and ONet3D families and their eight named variants.
//!
//! Both families share an encoder of `depth` levels (channels doubling from
//! `base_channels`, 2× max-pool between levels) and a mirrored decoder
//! (2× transposed conv, skip concatenation, conv block). ONet3D additionally
//! upsamples every encoder level's output to full resolution and concatenates
//! that stack with the last decoder feature map in front of the 1×1×1 output
//! convolution. Attention variants gate each skip connection with an additive
//! attention gate driven by the upsampled decoder features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, Feature, NormCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "unet3d")]
    UNet3D,
    #[serde(rename = "onet3d")]
    ONet3D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Instance,
    None,
}

/// Declarative description of one architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub variant_name: String,
    pub family: Family,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub convs_per_block: usize,
    pub kernel_size: usize,
    pub activation: Activation,
    pub attention_gates: bool,
    pub dropout_rate: f32,
    #[serde(default)]
    pub normalization: Normalization,
}

pub const VARIANTS: [&str; 8] = [
    "unet3d",
    "unet3d_gelu",
    "unet3d_singleconv",
    "unet3d_attention",
    "unet3d_dropout",
    "onet3d_singleconv_k1",
    "onet3d_singleconv_k5",
    "onet3d_doubleconv_k1",
];

pub const DEFAULT_DEPTH: usize = 4;
pub const DEFAULT_DROPOUT: f32 = 0.2;

/// Canonical spec of a named variant.
pub fn spec_for_variant(name: &str) -> Result<ArchitectureSpec> {
    let base = ArchitectureSpec {
        variant_name: name.to_string(),
        family: Family::UNet3D,
        in_channels: 4,
        out_channels: 3,
        base_channels: 32,
        depth: DEFAULT_DEPTH,
        convs_per_block: 2,
        kernel_size: 3,
        activation: Activation::Relu,
        attention_gates: false,
        dropout_rate: 0.0,
        normalization: Normalization::Instance,
    };
    let onet = |convs, k| ArchitectureSpec { family: Family::ONet3D, convs_per_block: convs, kernel_size: k, ..base.clone() };
    let spec = match name {
        "unet3d" => base.clone(),
        "unet3d_gelu" => ArchitectureSpec { activation: Activation::Gelu, ..base.clone() },
        "unet3d_singleconv" => ArchitectureSpec { convs_per_block: 1, ..base.clone() },
        "unet3d_attention" => ArchitectureSpec { attention_gates: true, ..base.clone() },
        "unet3d_dropout" => ArchitectureSpec { dropout_rate: DEFAULT_DROPOUT, ..base.clone() },
        "onet3d_singleconv_k1" => onet(1, 1),
        "onet3d_singleconv_k5" => onet(1, 5),
        "onet3d_doubleconv_k1" => onet(2, 1),
        _ => return Err(Error::UnknownVariant(name.to_string())),
    };
    Ok(spec)
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.depth == 0 || self.depth > 8 {
            return bad(format!("depth must be in 1..=8, got {}", self.depth));
        }
        if !(1..=2).contains(&self.convs_per_block) {
            return bad(format!("convs_per_block must be 1 or 2, got {}", self.convs_per_block));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return bad(format!("kernel_size must be odd and ≥ 1, got {}", self.kernel_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Channel width of encoder level `l`.
    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Input width of the output convolution.
    pub fn head_channels(&self) -> usize {
        match self.family {
            Family::UNet3D => self.base_channels,
            Family::ONet3D => self.base_channels + (0..self.depth).map(|l| self.level_channels(l)).sum::<usize>(),
        }
    }
}

/// Named flat parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f32>>,
}

impl ParamSet {
    fn new() -> Self {
        Self { names: Vec::new(), shapes: Vec::new(), values: Vec::new() }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, values: Vec<f32>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Zeroed buffers matching every tensor.
    pub fn zeros_like(&self) -> Vec<Vec<f32>> {
        self.values.iter().map(|v| vec![0.0; v.len()]).collect()
    }
}

pub type Grads = Vec<Vec<f32>>;

struct Init<'a> {
    params: &'a mut ParamSet,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f32) -> usize {
        let n = shape.iter().product();
        let v = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.params.push(name, shape, v)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f32) -> usize {
        let n = shape.iter().product();
        self.params.push(name, shape, vec![value; n])
    }
}

#[derive(Debug, Clone)]
struct ConvUnit {
    weight: usize,
    bias: Option<usize>,
    norm: Option<(usize, usize)>,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone)]
struct Block {
    units: Vec<ConvUnit>,
}

#[derive(Debug, Clone, Copy)]
struct Conv1 {
    weight: usize,
    bias: usize,
    cout: usize,
}

#[derive(Debug, Clone)]
struct Gate {
    wx: Conv1,
    wg: Conv1,
    psi: Conv1,
}

#[derive(Debug, Clone, Copy)]
struct UpConv {
    weight: usize,
    bias: usize,
    cout: usize,
}

/// A built network: spec, parameters and layer wiring.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ArchitectureSpec,
    pub params: ParamSet,
    /// Optimizer steps applied since initialization.
    pub trained_steps: u64,
    encoder: Vec<Block>,
    ups: Vec<UpConv>,
    gates: Vec<Option<Gate>>,
    decoder: Vec<Block>,
    head: Conv1,
}

struct UnitCache {
    input: Feature,
    norm: Option<NormCache>,
    pre_act: Feature,
}

struct BlockCache {
    units: Vec<UnitCache>,
    dropout: Option<Feature>,
}

struct GateCache {
    x: Feature,
    g: Feature,
    pre_relu: Feature,
    relu: Feature,
    att: Feature,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    enc: Vec<BlockCache>,
    pool_args: Vec<Vec<u8>>,
    enc_dims: Vec<[usize; 3]>,
    up_in: Vec<Feature>,
    gates: Vec<Option<GateCache>>,
    dec: Vec<BlockCache>,
    head_in: Feature,
}

fn conv1_forward(p: &ParamSet, c: Conv1, x: &Feature) -> Feature {
    nn::conv3d(x, &p.values[c.weight], Some(&p.values[c.bias]), c.cout, 1)
}

fn conv1_backward(p: &ParamSet, c: Conv1, x: &Feature, gy: &Feature, grads: &mut Grads) -> Feature {
    let (gw, gb) = two_mut(grads, c.weight, c.bias);
    nn::conv3d_backward(x, gy, &p.values[c.weight], 1, gw, Some(gb), true).expect("input grad requested")
}

fn two_mut(v: &mut [Vec<f32>], a: usize, b: usize) -> (&mut [f32], &mut [f32]) {
    assert!(a != b);
    if a < b {
        let (l, r) = v.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = v.split_at_mut(a);
        (&mut r[0], &mut l[b])
    }
}

impl Model {
    /// Builds and initializes the network; identical `(spec, seed)` give
    /// identical parameters.
    pub fn build(spec: &ArchitectureSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init { params: &mut params, rng: ChaCha8Rng::seed_from_u64(init_seed) };
        let k = spec.kernel_size;
        let normed = spec.normalization == Normalization::Instance;

        let make_block = |init: &mut Init, prefix: String, cin: usize, cout: usize| {
            let units = (0..spec.convs_per_block)
                .map(|u| {
                    let ci = if u == 0 { cin } else { cout };
                    let fan_in = (ci * k * k * k) as f32;
                    let weight = init.uniform(format!("{prefix}.conv{u}.weight"), vec![cout, ci, k, k, k], (6.0 / fan_in).sqrt());
                    let bias = (!normed).then(|| init.constant(format!("{prefix}.conv{u}.bias"), vec![cout], 0.0));
                    let norm = normed.then(|| {
                        (
                            init.constant(format!("{prefix}.norm{u}.weight"), vec![cout], 1.0),
                            init.constant(format!("{prefix}.norm{u}.bias"), vec![cout], 0.0),
                        )
                    });
                    ConvUnit { weight, bias, norm, cout, k }
                })
                .collect();
            Block { units }
        };
        let conv1 = |init: &mut Init, prefix: String, cin: usize, cout: usize| {
            let weight = init.uniform(format!("{prefix}.weight"), vec![cout, cin, 1, 1, 1], (3.0 / cin as f32).sqrt());
            let bias = init.constant(format!("{prefix}.bias"), vec![cout], 0.0);
            Conv1 { weight, bias, cout }
        };

        let mut encoder = Vec::with_capacity(spec.depth);
        for l in 0..spec.depth {
            let cin = if l == 0 { spec.in_channels } else { spec.level_channels(l - 1) };
            encoder.push(make_block(&mut init, format!("enc{l}"), cin, spec.level_channels(l)));
        }
        let levels = spec.depth - 1;
        let mut ups = vec![None; levels];
        let mut gates = vec![None; levels];
        let mut decoder = vec![None; levels];
        for l in (0..levels).rev() {
            let (c_hi, c) = (spec.level_channels(l + 1), spec.level_channels(l));
            let weight = init.uniform(format!("up{l}.weight"), vec![c_hi, c, 2, 2, 2], (3.0 / c_hi as f32).sqrt());
            let bias = init.constant(format!("up{l}.bias"), vec![c], 0.0);
            ups[l] = Some(UpConv { weight, bias, cout: c });
            if spec.attention_gates {
                let inter = (c / 2).max(1);
                gates[l] = Some(Gate {
                    wx: conv1(&mut init, format!("gate{l}.skip"), c, inter),
                    wg: conv1(&mut init, format!("gate{l}.gating"), c, inter),
                    psi: conv1(&mut init, format!("gate{l}.psi"), inter, 1),
                });
            }
            decoder[l] = Some(make_block(&mut init, format!("dec{l}"), 2 * c, c));
        }
        let head = conv1(&mut init, "head".into(), spec.head_channels(), spec.out_channels);
        Ok(Self {
            spec: spec.clone(),
            params,
            trained_steps: 0,
            encoder,
            ups: ups.into_iter().map(Option::unwrap).collect(),
            gates,
            decoder: decoder.into_iter().map(Option::unwrap).collect(),
            head,
        })
    }

    /// Rebuilds the wiring for `spec` and installs saved parameter values.
    pub fn from_params(spec: &ArchitectureSpec, params: ParamSet) -> Result<Self> {
        let mut model = Self::build(spec, 0)?;
        if model.params.names != params.names || model.params.shapes != params.shapes {
            return Err(Error::InvalidCheckpoint(format!(
                "parameter layout does not match spec `{}`",
                spec.variant_name
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Input width of the final 1×1×1 convolution.
    pub fn head_input_channels(&self) -> usize {
        self.params.shapes[self.head.weight][1]
    }

    pub fn check_input(&self, x: &Feature) -> Result<()> {
        if x.shape()[0] != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} input channels, got {}",
                self.spec.in_channels,
                x.shape()[0]
            )));
        }
        let shape = nn::dims(x);
        let d = self.spec.divisor();
        if shape.iter().any(|s| *s == 0 || s % d != 0) {
            return Err(Error::IndivisibleShape { shape, divisor: d });
        }
        Ok(())
    }

    /// Inference forward pass (dropout disabled).
    pub fn forward(&self, x: &Feature) -> Result<Feature> {
        self.check_input(x)?;
        Ok(self.run(x, None).0)
    }

    /// Forward pass keeping activations for [`Model::backward`]. Dropout is
    /// active when `rng` is given.
    pub fn forward_train(&self, x: &Feature, rng: Option<&mut ChaCha8Rng>) -> Result<(Feature, ForwardCache)> {
        self.check_input(x)?;
        Ok(self.run(x, rng))
    }

    fn block_forward(&self, b: &Block, mut x: Feature, rng: &mut Option<&mut ChaCha8Rng>) -> (Feature, BlockCache) {
        let p = &self.params;
        let mut units = Vec::with_capacity(b.units.len());
        for u in &b.units {
            let conv = nn::conv3d(&x, &p.values[u.weight], u.bias.map(|i| p.values[i].as_slice()), u.cout, u.k);
            let (pre_act, norm) = match u.norm {
                Some((g, bt)) => {
                    let (y, c) = nn::instance_norm(&conv, &p.values[g], &p.values[bt]);
                    (y, Some(c))
                }
                None => (conv, None),
            };
            let out = self.spec.activation.forward(&pre_act);
            units.push(UnitCache { input: x, norm, pre_act });
            x = out;
        }
        let mut dropout = None;
        if self.spec.dropout_rate > 0.0 {
            if let Some(r) = rng.as_deref_mut() {
                let (y, mask) = nn::dropout(&x, self.spec.dropout_rate, r);
                x = y;
                dropout = Some(mask);
            }
        }
        (x, BlockCache { units, dropout })
    }

    fn block_backward(&self, b: &Block, cache: &BlockCache, mut g: Feature, grads: &mut Grads, need_input: bool) -> Option<Feature> {
        let p = &self.params;
        if let Some(mask) = &cache.dropout {
            g = g * mask;
        }
        for (i, (u, uc)) in b.units.iter().zip(&cache.units).enumerate().rev() {
            g = self.spec.activation.backward(&uc.pre_act, &g);
            if let (Some((gi, bi)), Some(nc)) = (u.norm, &uc.norm) {
                let (gg, gb) = two_mut(grads, gi, bi);
                g = nn::instance_norm_backward(nc, &g, &p.values[gi], gg, gb);
            }
            let need = i > 0 || need_input;
            let (gw, gb) = match u.bias {
                Some(bi) => {
                    let (a, b) = two_mut(grads, u.weight, bi);
                    (a, Some(b))
                }
                None => (grads[u.weight].as_mut_slice(), None),
            };
            match nn::conv3d_backward(&uc.input, &g, &p.values[u.weight], u.k, gw, gb, need) {
                Some(gx) => g = gx,
                None => return None,
            }
        }
        Some(g)
    }

    fn run(&self, x: &Feature, mut rng: Option<&mut ChaCha8Rng>) -> (Feature, ForwardCache) {
        let p = &self.params;
        let depth = self.spec.depth;
        let mut enc = Vec::with_capacity(depth);
        let mut enc_out: Vec<Feature> = Vec::with_capacity(depth);
        let mut pool_args = Vec::new();
        let mut enc_dims = Vec::new();
        let mut cur = x.clone();
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                let prev = enc_out.last().unwrap();
                enc_dims.push(nn::dims(prev));
                let (pooled, arg) = nn::max_pool2(prev);
                pool_args.push(arg);
                cur = pooled;
            }
            let (out, cache) = self.block_forward(block, std::mem::take(&mut cur), &mut rng);
            enc.push(cache);
            enc_out.push(out);
        }

        let levels = depth - 1;
        let mut up_in: Vec<Option<Feature>> = (0..levels).map(|_| None).collect();
        let mut gates: Vec<Option<GateCache>> = (0..levels).map(|_| None).collect();
        let mut dec: Vec<Option<BlockCache>> = (0..levels).map(|_| None).collect();
        let mut cur = enc_out[depth - 1].clone();
        for l in (0..levels).rev() {
            let up = self.ups[l];
            let upsampled = nn::conv_transpose2(&cur, &p.values[up.weight], &p.values[up.bias], up.cout);
            up_in[l] = Some(std::mem::take(&mut cur));
            let skip = match &self.gates[l] {
                Some(gate) => {
                    let (gated, gc) = self.gate_forward(gate, &enc_out[l], &upsampled);
                    gates[l] = Some(gc);
                    gated
                }
                None => enc_out[l].clone(),
            };
            let cat = nn::concat(&[&skip, &upsampled]);
            let (out, cache) = self.block_forward(&self.decoder[l], cat, &mut rng);
            dec[l] = Some(cache);
            cur = out;
        }

        let head_in = match self.spec.family {
            Family::UNet3D => cur,
            Family::ONet3D => {
                let ups: Vec<Feature> = enc_out.iter().enumerate().map(|(l, f)| nn::upsample_nearest(f, 1 << l)).collect();
                let mut parts = vec![&cur];
                parts.extend(ups.iter());
                nn::concat(&parts)
            }
        };
        let out = conv1_forward(p, self.head, &head_in);
        let cache = ForwardCache {
            enc,
            pool_args,
            enc_dims,
            up_in: up_in.into_iter().map(Option::unwrap).collect(),
            gates,
            dec: dec.into_iter().map(Option::unwrap).collect(),
            head_in,
        };
        (out, cache)
    }

    fn gate_forward(&self, gate: &Gate, x: &Feature, g: &Feature) -> (Feature, GateCache) {
        let p = &self.params;
        let pre_relu = conv1_forward(p, gate.wx, x) + conv1_forward(p, gate.wg, g);
        let relu = pre_relu.mapv(|v| v.max(0.0));
        let att = conv1_forward(p, gate.psi, &relu).mapv(nn::sigmoid32);
        let mut out = x.clone();
        for mut ch in out.outer_iter_mut() {
            ch *= &att.index_axis(ndarray::Axis(0), 0);
        }
        (out, GateCache { x: x.clone(), g: g.clone(), pre_relu, relu, att })
    }

    /// Returns gradients for `(skip input, gating input)`.
    fn gate_backward(&self, gate: &Gate, c: &GateCache, gout: &Feature, grads: &mut Grads) -> (Feature, Feature) {
        let p = &self.params;
        let att = c.att.index_axis(ndarray::Axis(0), 0);
        let mut gx = gout.clone();
        for mut ch in gx.outer_iter_mut() {
            ch *= &att;
        }
        let mut gatt = Feature::zeros(c.att.raw_dim());
        {
            let mut ga = gatt.index_axis_mut(ndarray::Axis(0), 0);
            for (go, xc) in gout.outer_iter().zip(c.x.outer_iter()) {
                ndarray::Zip::from(&mut ga).and(&go).and(&xc).for_each(|a, &g, &x| *a += g * x);
            }
        }
        let gq = ndarray::Zip::from(&gatt).and(&c.att).map_collect(|&g, &a| g * a * (1.0 - a));
        let grelu = conv1_backward(p, gate.psi, &c.relu, &gq, grads);
        let gs = ndarray::Zip::from(&grelu).and(&c.pre_relu).map_collect(|&g, &s| if s > 0.0 { g } else { 0.0 });
        gx += &conv1_backward(p, gate.wx, &c.x, &gs, grads);
        let gg = conv1_backward(p, gate.wg, &c.g, &gs, grads);
        (gx, gg)
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, gout: &Feature, grads: &mut Grads) {
        let p = &self.params;
        let depth = self.spec.depth;
        let g_head = conv1_backward(p, self.head, &cache.head_in, gout, grads);
        let mut g_enc: Vec<Option<Feature>> = (0..depth).map(|_| None).collect();
        let add = |slot: &mut Option<Feature>, g: Feature| match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        };
        let mut g_cur = match self.spec.family {
            Family::UNet3D => g_head,
            Family::ONet3D => {
                let mut widths = vec![self.spec.base_channels];
                widths.extend((0..depth).map(|l| self.spec.level_channels(l)));
                let mut parts = nn::split(&g_head, &widths).into_iter();
                let g_dec = parts.next().unwrap();
                for (l, gp) in parts.enumerate() {
                    add(&mut g_enc[l], nn::upsample_nearest_backward(&gp, 1 << l));
                }
                g_dec
            }
        };
        for l in 0..depth - 1 {
            let g_cat = self
                .block_backward(&self.decoder[l], &cache.dec[l], g_cur, grads, true)
                .expect("input grad requested");
            let c = self.spec.level_channels(l);
            let mut halves = nn::split(&g_cat, &[c, c]).into_iter();
            let g_skip = halves.next().unwrap();
            let mut g_up = halves.next().unwrap();
            let g_skip = match (&self.gates[l], &cache.gates[l]) {
                (Some(gate), Some(gc)) => {
                    let (gx, gg) = self.gate_backward(gate, gc, &g_skip, grads);
                    g_up += &gg;
                    gx
                }
                _ => g_skip,
            };
            add(&mut g_enc[l], g_skip);
            let up = self.ups[l];
            let (gw, gb) = two_mut(grads, up.weight, up.bias);
            g_cur = nn::conv_transpose2_backward(&cache.up_in[l], &g_up, &p.values[up.weight], gw, gb);
        }
        add(&mut g_enc[depth - 1], g_cur);
        for l in (0..depth).rev() {
            let g = g_enc[l].take().expect("every encoder level receives gradient");
            if let Some(gin) = self.block_backward(&self.encoder[l], &cache.enc[l], g, grads, l > 0) {
                let gx = nn::max_pool2_backward(&cache.pool_args[l - 1], &gin, cache.enc_dims[l - 1]);
                add(&mut g_enc[l - 1], gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(name: &str) -> ArchitectureSpec {
        ArchitectureSpec { base_channels: 2, depth: 2, ..spec_for_variant(name).unwrap() }
    }

    fn rand_input(c: usize, n: usize, seed: u64) -> Feature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Feature::from_shape_simple_fn((c, n, n, n), || rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn variant_table() {
        let s = spec_for_variant("unet3d").unwrap();
        assert_eq!((s.base_channels, s.in_channels, s.out_channels), (32, 4, 3));
        assert_eq!((s.convs_per_block, s.kernel_size, s.activation), (2, 3, Activation::Relu));
        let s = spec_for_variant("onet3d_singleconv_k5").unwrap();
        assert_eq!((s.family, s.kernel_size, s.convs_per_block), (Family::ONet3D, 5, 1));
        assert!(spec_for_variant("unet3d_dropout").unwrap().dropout_rate > 0.0);
        assert!(spec_for_variant("unet3d_attention").unwrap().attention_gates);
        assert!(matches!(spec_for_variant("resnet50"), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn invalid_specs() {
        let mut s = tiny("unet3d");
        s.kernel_size = 4;
        assert!(matches!(Model::build(&s, 0), Err(Error::InvalidSpec(_))));
        s.kernel_size = 3;
        s.dropout_rate = 1.0;
        assert!(Model::build(&s, 0).is_err());
    }

    #[test]
    fn indivisible_shape_rejected() {
        let m = Model::build(&tiny("unet3d"), 0).unwrap();
        let x = Feature::zeros((4, 5, 4, 4));
        assert!(matches!(m.forward(&x), Err(Error::IndivisibleShape { divisor: 2, .. })));
    }

    #[test]
    fn model_gradient_matches_finite_differences() {
        for name in ["unet3d_gelu", "unet3d", "unet3d_attention", "onet3d_doubleconv_k1"] {
            let spec = ArchitectureSpec { normalization: Normalization::None, activation: Activation::Gelu, ..tiny(name) };
            let mut model = Model::build(&spec, 3).unwrap();
            let x = rand_input(4, 4, 1);
            let probe = rand_input(3, 4, 2);
            let objective = |m: &Model| -> f64 {
                let y = m.forward(&x).unwrap();
                y.iter().zip(probe.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
            };
            let (_, cache) = model.forward_train(&x, None).unwrap();
            let mut grads = model.params.zeros_like();
            model.backward(&cache, &probe, &mut grads);
            for t in 0..model.params.len() {
                let idx = model.params.values[t].len() / 2;
                let h = 1e-2f32;
                let orig = model.params.values[t][idx];
                model.params.values[t][idx] = orig + h;
                let up = objective(&model);
                model.params.values[t][idx] = orig - h;
                let down = objective(&model);
                model.params.values[t][idx] = orig;
                let fd = (up - down) / (2.0 * h as f64);
                let a = grads[t][idx] as f64;
                assert!(
                    (fd - a).abs() <= 2e-2 * (1.0 + fd.abs().max(a.abs())),
                    "{name} {}: fd {fd} vs analytic {a}",
                    model.params.names[t]
                );
            }
        }
    }

    #[test]
    fn normalized_model_gradient_spot_check() {
        let spec = ArchitectureSpec { activation: Activation::Gelu, ..tiny("unet3d") };
        let mut model = Model::build(&spec, 5).unwrap();
        let x = rand_input(4, 4, 7);
        let probe = rand_input(3, 4, 8);
        let objective = |m: &Model| -> f64 {
            let y = m.forward(&x).unwrap();
            y.iter().zip(probe.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let (_, cache) = model.forward_train(&x, None).unwrap();
        let mut grads = model.params.zeros_like();
        model.backward(&cache, &probe, &mut grads);
        let t = model.params.names.iter().position(|n| n == "enc0.conv0.weight").unwrap();
        for idx in [0, 17, 50] {
            let h = 1e-2f32;
            let orig = model.params.values[t][idx];
            model.params.values[t][idx] = orig + h;
            let up = objective(&model);
            model.params.values[t][idx] = orig - h;
            let down = objective(&model);
            model.params.values[t][idx] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            let a = grads[t][idx] as f64;
            assert!((fd - a).abs() <= 3e-2 * (1.0 + fd.abs()), "fd {fd} vs {a}");
        }
    }
}
