mod common;

use apnet::apconv::{self, ApConv, ApConvSpec, ApWeights, FeatureMap};
use apnet::nn::ConvShape;
use apnet::tape::ParamStore;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counts free entries of the masked dense weight, one output row at a time.
fn enumerated_params(spec: &ApConvSpec) -> u64 {
    let (kh, kw) = spec.kernel;
    (0..spec.pathway_out[0])
        .map(|o| {
            let j = owner_of_output(spec, o);
            (spec.pathway_in[j] * kh * kw) as u64 + spec.bias as u64
        })
        .sum()
}

#[test]
fn allocated_parameters_match_the_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in [2, 3, 4] {
        for _ in 0..40 {
            let spec = random_spec(k, &mut rng);
            let mut store = ParamStore::new();
            ApConv::new(spec.clone(), &mut store, "c", &mut rng).unwrap();
            let count = apconv::param_count(&spec);
            assert_eq!(count.total, store.scalar_count() as u64, "{spec:?}");
            assert_eq!(count.total, enumerated_params(&spec), "{spec:?}");
            let (kh, kw) = spec.kernel;
            let dense =
                (spec.pathway_in[0] * spec.pathway_out[0] * kh * kw + spec.bias as usize * spec.pathway_out[0]) as u64;
            assert_eq!(count.total + count.delta, dense);
        }
    }
}

#[test]
fn two_pathway_saving_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let spec = random_spec(2, &mut rng);
        let (n_in, m_in, m_out) = (spec.pathway_in[0], spec.pathway_in[1], spec.pathway_out[1]);
        let (kh, kw) = spec.kernel;
        assert_eq!(
            apconv::param_count(&spec).delta,
            ((n_in - m_in) * m_out * kh * kw) as u64
        );
    }
}

#[test]
fn half_split_keeps_three_quarters() {
    for (n, kernel) in [(2, (1, 1)), (8, (3, 3)), (64, (3, 3)), (512, (1, 1)), (10, (5, 3))] {
        let spec = ApConvSpec::basic(n, n / 2, n, n / 2, kernel, 1, 0, false).unwrap();
        let c = apconv::param_count(&spec);
        assert_eq!(c.total * 4, (c.total + c.delta) * 3, "n = {n}");
    }
}

#[test]
fn half_split_from_fractions_matches_basic() {
    let shape = ConvShape {
        in_channels: 64,
        out_channels: 128,
        kernel: (3, 3),
        stride: 2,
        padding: 1,
        bias: false,
    };
    let spec = ApConvSpec::from_split(&shape, &[0.5, 0.5]).unwrap();
    assert_eq!(spec, ApConvSpec::basic(64, 32, 128, 64, (3, 3), 2, 1, false).unwrap());
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(ApConvSpec::new(vec![4], vec![4], (1, 1), 1, 0, false).is_err());
    assert!(ApConvSpec::new(vec![4, 4], vec![4, 2], (1, 1), 1, 0, false).is_err());
    assert!(ApConvSpec::new(vec![4, 2], vec![4, 0], (1, 1), 1, 0, false).is_err());
    assert!(ApConvSpec::new(vec![4, 2, 1], vec![4, 2], (1, 1), 1, 0, false).is_err());
}

#[test]
fn every_level_matches_the_masked_dense_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..60 {
        let k = 2 + trial % 3;
        let spec = random_spec(k, &mut rng);
        let (w, b) = masked_dense(&spec, &mut rng);
        let (ws, bs) = split_masked(&spec, &w, b.as_ref());
        let mut store = ParamStore::new();
        let conv = ApConv::new(spec.clone(), &mut store, "c", &mut rng).unwrap();
        conv.load(
            &mut store,
            &ApWeights {
                weights: ws,
                biases: bs,
            },
        )
        .unwrap();
        let size = rng.random_range(spec.kernel.0.max(spec.kernel.1)..8);
        for level in 1..=k {
            let x = random_tensor(&[2, spec.pathway_in[level - 1], size, size], &mut rng);
            let got = conv.apply(&store, &FeatureMap { data: x.clone(), level }).unwrap();
            let (wl, bl) = restrict_to_level(&spec, level, &w, b.as_ref());
            let want = naive_conv(&x, &wl, bl.as_ref(), spec.stride, spec.padding);
            assert!(max_abs_diff(&got.data, &want) < 1e-9, "trial {trial} level {level}");
        }
    }
}

#[test]
fn standard_round_trip_keeps_only_allowed_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let spec = random_spec(3, &mut rng);
        let (kh, kw) = spec.kernel;
        let dense = random_tensor(&[spec.pathway_out[0], spec.pathway_in[0], kh, kw], &mut rng);
        let bias = spec.bias.then(|| random_tensor(&[spec.pathway_out[0]], &mut rng));
        let ap = apconv::from_standard(&dense, bias.as_ref(), &spec).unwrap();
        let (back, back_bias) = apconv::to_standard(&ap, &spec).unwrap();
        for ((o, i, a, c), v) in back
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .indexed_iter()
        {
            let allowed = i >= spec.pathway_in[0] - spec.pathway_in[owner_of_output(&spec, o)];
            assert_eq!(*v, if allowed { dense[[o, i, a, c]] } else { 0.0 });
        }
        assert_eq!(back_bias, bias);
    }
}

#[test]
fn level_checks() {
    let spec = ApConvSpec::basic(4, 2, 4, 2, (1, 1), 1, 0, false).unwrap();
    let mut store = ParamStore::new();
    let conv = ApConv::new(spec, &mut store, "c", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = ndarray::Array::zeros(ndarray::IxDyn(&[1, 4, 2, 2]));
    assert!(conv
        .apply(
            &store,
            &FeatureMap {
                data: x.clone(),
                level: 0
            }
        )
        .is_err());
    assert!(conv
        .apply(
            &store,
            &FeatureMap {
                data: x.clone(),
                level: 3
            }
        )
        .is_err());
    // Level 2 expects only the 2 shared channels.
    assert!(conv.apply(&store, &FeatureMap { data: x, level: 2 }).is_err());
}

proptest! {
    #[test]
    fn output_widths_follow_the_partition(seed in any::<u64>(), k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(k, &mut rng);
        let widths: usize = (0..k).map(|j| spec.sub_out(j)).sum();
        prop_assert_eq!(widths, spec.pathway_out[0]);
        for j in 0..k {
            prop_assert_eq!(spec.out_block(j).len(), spec.sub_out(j));
            prop_assert_eq!(spec.in_block(j).len(), spec.pathway_in[j]);
            prop_assert_eq!(spec.out_block(j).end, spec.pathway_out[0] - spec.pathway_out.get(j + 1).copied().unwrap_or(0));
        }
    }
}
