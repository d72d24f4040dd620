use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorseg::model::{spec_for_variant, ArchitectureSpec, Family, Model, Normalization, VARIANTS};
use tumorseg::nn::Feature;
use tumorseg::Error;

/// Closed-form parameter count, written independently of the builder.
fn expected_params(s: &ArchitectureSpec) -> usize {
    let k3 = s.kernel_size.pow(3);
    let norm = s.normalization == Normalization::Instance;
    let conv = |cin: usize, cout: usize| cin * cout * k3 + if norm { 2 * cout } else { cout };
    let block = |cin: usize, cout: usize| conv(cin, cout) + (s.convs_per_block - 1) * conv(cout, cout);
    let c = |l: usize| s.base_channels * 2usize.pow(l as u32);
    let mut total = 0;
    for l in 0..s.depth {
        total += block(if l == 0 { s.in_channels } else { c(l - 1) }, c(l));
    }
    for l in 0..s.depth - 1 {
        total += c(l + 1) * c(l) * 8 + c(l);
        if s.attention_gates {
            let f = (c(l) / 2).max(1);
            total += 2 * (c(l) * f + f) + f + 1;
        }
        total += block(2 * c(l), c(l));
    }
    let width = match s.family {
        Family::UNet3D => c(0),
        Family::ONet3D => c(0) + (0..s.depth).map(c).sum::<usize>(),
    };
    total + width * s.out_channels + s.out_channels
}

fn small(name: &str, base: usize, depth: usize) -> ArchitectureSpec {
    ArchitectureSpec { base_channels: base, depth, ..spec_for_variant(name).unwrap() }
}

fn random_input(shape: [usize; 3], seed: u64) -> Feature {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Feature::from_shape_simple_fn((4, shape[0], shape[1], shape[2]), || rng.random_range(-1.0f32..1.0))
}

#[test]
fn parameter_counts_match_closed_form() {
    for name in VARIANTS {
        for (base, depth) in [(32, 4), (8, 3), (3, 2), (5, 1)] {
            let spec = small(name, base, depth);
            let m = Model::build(&spec, 0).unwrap();
            assert_eq!(m.parameter_count(), expected_params(&spec), "{name} base {base} depth {depth}");
            let plain = ArchitectureSpec { normalization: Normalization::None, ..spec.clone() };
            assert_eq!(Model::build(&plain, 0).unwrap().parameter_count(), expected_params(&plain));
        }
    }
}

#[test]
fn canonical_unet3d_count_is_pinned() {
    let m = Model::build(&spec_for_variant("unet3d").unwrap(), 0).unwrap();
    assert_eq!(m.parameter_count(), expected_params(m.spec()));
    assert_eq!(m.spec().base_channels, 32);
}

#[test]
fn relative_parameter_counts() {
    let count = |n: &str| Model::build(&spec_for_variant(n).unwrap(), 0).unwrap().parameter_count();
    assert_eq!(count("unet3d"), count("unet3d_gelu"));
    assert!(count("unet3d_singleconv") < count("unet3d"));
    assert_eq!(count("unet3d"), count("unet3d_dropout"));
    assert!(count("unet3d_attention") > count("unet3d"));
    assert!(count("onet3d_singleconv_k1") < count("onet3d_doubleconv_k1"));
}

#[test]
fn onet_head_is_wider_than_unet() {
    let u = Model::build(&small("unet3d", 8, 3), 0).unwrap();
    let o = Model::build(&ArchitectureSpec { family: Family::ONet3D, ..small("unet3d", 8, 3) }, 0).unwrap();
    assert!(o.head_input_channels() > u.head_input_channels());
    assert_eq!(u.head_input_channels(), 8);
    assert_eq!(o.head_input_channels(), 8 + 8 + 16 + 32);
}

#[test]
fn same_seed_same_parameters() {
    for name in VARIANTS {
        let spec = small(name, 4, 2);
        assert_eq!(Model::build(&spec, 7).unwrap().params, Model::build(&spec, 7).unwrap().params);
        assert_ne!(Model::build(&spec, 7).unwrap().params, Model::build(&spec, 8).unwrap().params);
    }
}

#[test]
fn output_shape_for_all_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for name in VARIANTS {
        let m = Model::build(&spec_for_variant(name).unwrap(), 1).unwrap();
        let y = m.forward(&random_input([8, 8, 16], 2)).unwrap();
        assert_eq!(y.shape(), &[3, 8, 8, 16], "{name}");
        assert!(y.iter().all(|v| v.is_finite()));
        let m = Model::build(&small(name, 4, 3), 1).unwrap();
        for _ in 0..3 {
            let shape = [4 * rng.random_range(1..4), 4 * rng.random_range(1..4), 4 * rng.random_range(1..4)];
            let y = m.forward(&random_input(shape, 3)).unwrap();
            assert_eq!(y.shape(), &[3, shape[0], shape[1], shape[2]], "{name} {shape:?}");
        }
    }
}

#[test]
fn indivisible_input_rejected() {
    let m = Model::build(&spec_for_variant("unet3d").unwrap(), 0).unwrap();
    let err = m.forward(&random_input([33, 32, 32], 0)).unwrap_err();
    assert!(matches!(err, Error::IndivisibleShape { divisor: 8, .. }));
}

#[test]
fn dropout_only_in_train_mode() {
    let m = Model::build(&small("unet3d_dropout", 4, 2), 0).unwrap();
    let x = random_input([8, 8, 8], 1);
    assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, _) = m.forward_train(&x, Some(&mut rng)).unwrap();
    let (b, _) = m.forward_train(&x, Some(&mut rng)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn every_parameter_receives_gradient() {
    for name in VARIANTS {
        let m = Model::build(&small(name, 4, 3), 3).unwrap();
        let x = random_input([8, 8, 8], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, cache) = m.forward_train(&x, Some(&mut rng)).unwrap();
        let g = Feature::from_elem(y.raw_dim(), 1.0 / y.len() as f32);
        let mut grads = m.params.zeros_like();
        m.backward(&cache, &g, &mut grads);
        for (name_t, gr) in m.params.names.iter().zip(&grads) {
            assert!(gr.iter().all(|v| v.is_finite()), "{name}: {name_t} non-finite");
            assert!(gr.iter().any(|v| *v != 0.0), "{name}: {name_t} has identically zero gradient");
        }
    }
}
