use ndarray::{Array4, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shuffle_histo::blocks::{channel_shuffle, BlockConfig, ChannelAttention, DraBlock, Rdab};
use shuffle_histo::nn::{Mode, Module};
use shuffle_histo::tensor::{random_feature_map, FeatureMapSpec};
use shuffle_histo::Error;

fn divisors(c: usize) -> Vec<usize> {
    (1..=c).filter(|g| c.is_multiple_of(*g)).collect()
}

fn planes(x: &Array4<f64>) -> Vec<Vec<u64>> {
    let mut out: Vec<Vec<u64>> = x
        .axis_iter(Axis(1))
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect();
    out.sort();
    out
}

fn map(spec: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let spec = FeatureMapSpec::new(spec.0, spec.1, spec.2, spec.3).unwrap();
    random_feature_map(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reference permutation written from the reshape-transpose definition.
fn shuffle_oracle(x: &Array4<f64>, g: usize) -> Array4<f64> {
    let c = x.dim().1;
    let per = c / g;
    let mut y = x.clone();
    for out in 0..c {
        let src = (out % g) * per + out / g;
        y.index_axis_mut(Axis(1), out)
            .assign(&x.index_axis(Axis(1), src));
    }
    y
}

#[test]
fn shuffle_laws_hold_for_every_divisor_pair_up_to_32() {
    for c in 1..=32 {
        for g in divisors(c) {
            let x = map((2, c, 3, 2), (c * 100 + g) as u64);
            let y = channel_shuffle(&x, g).unwrap();
            assert_eq!(y.dim(), x.dim());
            assert_eq!(planes(&y), planes(&x), "C={c} g={g}: not a permutation");
            assert_eq!(y, shuffle_oracle(&x, g), "C={c} g={g}");
            assert_eq!(
                channel_shuffle(&y, c / g).unwrap(),
                x,
                "C={c} g={g}: not inverted by C/g"
            );
        }
    }
}

#[test]
fn shuffle_rejects_non_divisors() {
    for c in 2..=32usize {
        for g in (2..c).filter(|g| c % g != 0) {
            let x = Array4::<f32>::zeros((1, c, 1, 1));
            assert!(matches!(
                channel_shuffle(&x, g),
                Err(Error::InvalidArgument(_))
            ));
        }
    }
}

#[test]
fn attention_never_amplifies_on_100_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..100u64 {
        let c = [4, 8, 16, 32][i as usize % 4];
        let att = ChannelAttention::<f64>::new(c, 4, &mut rng).unwrap();
        let x = map((2, c, 4, 3), i).mapv(|v| v * 10.0);
        let y = att.infer(&x).unwrap();
        for (o, v) in y.iter().zip(x.iter()) {
            assert!(o.abs() <= v.abs(), "tensor {i}: |{o}| > |{v}|");
        }
        let gates = att.gates(&x).unwrap();
        assert!(gates.iter().all(|&w| w > 0.0 && w < 1.0));
    }
}

#[test]
fn attention_rejects_wrong_channel_count() {
    let att = ChannelAttention::<f64>::new(8, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(
        att.infer(&map((1, 6, 2, 2), 0)),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn saturated_excitation_passes_channel_unchanged() {
    let mut att = ChannelAttention::<f64>::new(8, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    att.zero_parameters();
    att.visit_params_mut("", &mut |name, p| {
        if name == "fc2.bias" {
            p.value[[3]] = 20.0;
        }
    });
    let x = map((1, 8, 3, 3), 4);
    let w = att.gates(&x).unwrap();
    assert!((w[[0, 3]] - 1.0).abs() < 1e-8);
    let y = att.infer(&x).unwrap();
    for (o, v) in y
        .index_axis(Axis(1), 3)
        .iter()
        .zip(x.index_axis(Axis(1), 3).iter())
    {
        assert!((o - v).abs() <= 1e-8 * v.abs().max(1.0));
    }
}

#[test]
fn zeroed_dra_outputs_zero_map() {
    let mut dra =
        DraBlock::<f64>::new(BlockConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    dra.zero_parameters();
    let x = map((2, 256, 14, 14), 2);
    let y = dra.infer(&x).unwrap();
    assert_eq!(y.dim(), (2, 256, 14, 14));
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn rdab_default_shape_contract() {
    let rdab = Rdab::<f32>::new(BlockConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let x = random_feature_map::<f32, _>(
        FeatureMapSpec::new(4, 256, 14, 14).unwrap(),
        &mut ChaCha8Rng::seed_from_u64(2),
    );
    assert_eq!(rdab.infer(&x).unwrap().dim(), (4, 256, 14, 14));
}

#[test]
fn block_config_invariants_enforced() {
    let bad = [
        BlockConfig {
            channels: 10,
            groups: 4,
            ..BlockConfig::default()
        },
        BlockConfig {
            channels: 12,
            attention_reduction: 5,
            groups: 4,
            m: 1,
        },
        BlockConfig {
            m: 0,
            ..BlockConfig::default()
        },
    ];
    for cfg in bad {
        assert!(
            Rdab::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err(),
            "{cfg:?}"
        );
    }
}

fn block_cfg() -> impl Strategy<Value = BlockConfig> {
    (prop::sample::select(vec![4usize, 8, 12, 16]), 1usize..=3).prop_flat_map(|(c, m)| {
        let gs: Vec<usize> = divisors(c).into_iter().filter(|g| *g <= 4).collect();
        let rs: Vec<usize> = divisors(c).into_iter().filter(|r| *r <= 4).collect();
        (prop::sample::select(gs), prop::sample::select(rs)).prop_map(
            move |(groups, attention_reduction)| BlockConfig {
                channels: c,
                groups,
                attention_reduction,
                m,
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shuffle_is_a_permutation_and_involution(
        c in 1usize..=32, pick in any::<prop::sample::Index>(), n in 1usize..3, h in 1usize..4, w in 1usize..4, seed in any::<u64>()
    ) {
        let ds = divisors(c);
        let g = ds[pick.index(ds.len())];
        let x = map((n, c, h, w), seed);
        let y = channel_shuffle(&x, g).unwrap();
        prop_assert_eq!(planes(&y), planes(&x));
        prop_assert_eq!(channel_shuffle(&y, c / g).unwrap(), x);
    }

    #[test]
    fn attention_output_bounded(c in prop::sample::select(vec![4usize, 8, 16, 32]), scale in 0.01f64..100.0, seed in any::<u64>()) {
        let att = ChannelAttention::<f64>::new(c, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = map((1, c, 3, 3), seed ^ 1).mapv(|v| v * scale);
        let y = att.infer(&x).unwrap();
        for (o, v) in y.iter().zip(x.iter()) {
            prop_assert!(o.abs() <= v.abs());
        }
    }

    #[test]
    fn zeroed_rdab_is_bitwise_identity(cfg in block_cfg(), n in 1usize..3, hw in 1usize..6, seed in any::<u64>()) {
        let mut rdab = Rdab::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        rdab.zero_branch();
        let x = random_feature_map::<f32, _>(
            FeatureMapSpec::new(n, cfg.channels, hw, hw).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(seed ^ 7),
        );
        let y = rdab.infer(&x).unwrap();
        prop_assert!(y.iter().zip(x.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let y_train = rdab.forward(&x, Mode::Train).unwrap();
        prop_assert!(y_train.iter().zip(x.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn blocks_preserve_feature_map_spec(cfg in block_cfg(), n in 1usize..3, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = map((n, cfg.channels, h, w), seed);
        let spec = FeatureMapSpec::of(&x);
        let att = ChannelAttention::<f64>::new(cfg.channels, cfg.attention_reduction, &mut rng).unwrap();
        let dra = DraBlock::<f64>::new(cfg, &mut rng).unwrap();
        let rdab = Rdab::<f64>::new(cfg, &mut rng).unwrap();
        prop_assert_eq!(FeatureMapSpec::of(&att.infer(&x).unwrap()), spec);
        prop_assert_eq!(FeatureMapSpec::of(&dra.infer(&x).unwrap()), spec);
        prop_assert_eq!(FeatureMapSpec::of(&rdab.infer(&x).unwrap()), spec);
    }
}
