use apnet::augment::{apply_policy, grade_policies, make_view_batch, Image, Policy, PolicySpec};
use apnet::Error;
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>()))
}

fn one(p: Policy) -> PolicySpec {
    PolicySpec::single(p)
}

fn sorted_pixels(img: &Image) -> Vec<u64> {
    let mut v: Vec<u64> = img.data().iter().map(|x| x.to_bits()).collect();
    v.sort_unstable();
    v
}

/// All orderings of `items`.
fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.clone();
        let head = rest.remove(i);
        for mut p in permutations(rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

#[test]
fn grid_shuffle_is_one_of_the_tile_permutations() {
    let input = Image::from_vec(1, 4, 4, (0..16).map(f64::from).collect()).unwrap();
    // Tile t (row-major in a 2×2 grid) covers rows 2·(t/2).., cols 2·(t%2)..
    let tile = |img: &Image, t: usize| -> Vec<f64> {
        let (y, x) = (2 * (t / 2), 2 * (t % 2));
        vec![
            img.data()[[0, y, x]],
            img.data()[[0, y, x + 1]],
            img.data()[[0, y + 1, x]],
            img.data()[[0, y + 1, x + 1]],
        ]
    };
    let candidates: Vec<Vec<Vec<f64>>> = permutations(vec![0, 1, 2, 3])
        .into_iter()
        .map(|p| p.iter().map(|&src| tile(&input, src)).collect())
        .collect();
    assert_eq!(candidates.len(), 24);
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..200 {
        let out = apply_policy(
            &input,
            &one(Policy::GridShuffle { g: 2 }),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        let tiles: Vec<Vec<f64>> = (0..4).map(|t| tile(&out, t)).collect();
        let idx = candidates
            .iter()
            .position(|c| *c == tiles)
            .expect("output is a tile permutation");
        seen.insert(idx);
        assert_eq!(sorted_pixels(&out), sorted_pixels(&input));
    }
    // Uniform over all 24, the identity included.
    assert_eq!(seen.len(), 24);
}

#[test]
fn gray_alpha_zero_and_grid_one_are_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (c, h, w) in [(3, 7, 5), (1, 4, 4), (3, 32, 32)] {
        let img = random_image(c, h, w, &mut rng);
        for p in [
            Policy::Gray { alpha: 0.0 },
            Policy::GridShuffle { g: 1 },
            Policy::Identity,
        ] {
            let out = apply_policy(&img, &one(p), &mut rng).unwrap();
            assert_eq!(out, img);
        }
    }
}

#[test]
fn mpn_brightens_and_clips() {
    let img = Image::filled(3, 4, 4, 0.4);
    let out = apply_policy(&img, &one(Policy::Mpn { s: 1.5 }), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.4 * 1.5));
    assert!((out.data()[[0, 0, 0]] - 0.6).abs() < 1e-15);
    let out = apply_policy(
        &Image::filled(1, 2, 2, 0.8),
        &one(Policy::Mpn { s: 1.5 }),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert!(out.data().iter().all(|&v| v == 1.0));
}

#[test]
fn blur_matches_a_direct_mean_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(3, 6, 5, &mut rng);
    for k in [1, 3, 5] {
        let out = apply_policy(&img, &one(Policy::Blur { k }), &mut rng).unwrap();
        let r = (k / 2) as isize;
        for c in 0..3 {
            for y in 0..6isize {
                for x in 0..5isize {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let yy = (y + dy).clamp(0, 5) as usize;
                            let xx = (x + dx).clamp(0, 4) as usize;
                            acc += img.data()[[c, yy, xx]];
                        }
                    }
                    let want = acc / (k * k) as f64;
                    assert!((out.data()[[c, y as usize, x as usize]] - want).abs() < 1e-12);
                }
            }
        }
    }
    assert!(apply_policy(&img, &one(Policy::Blur { k: 2 }), &mut rng).is_err());
}

#[test]
fn seeded_application_is_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(3, 16, 16, &mut rng);
    let policies = [
        one(Policy::Crop { pad: 4 }),
        one(Policy::Flip),
        one(Policy::GridShuffle { g: 4 }),
        one(Policy::RandAugment { n: 3, m: 15 }),
        PolicySpec::chain(vec![
            Policy::Flip,
            Policy::Gray { alpha: 0.5 },
            Policy::RandAugment { n: 2, m: 9 },
        ]),
    ];
    for p in &policies {
        for seed in [0, 7, u64::MAX] {
            let a = apply_policy(&img, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = apply_policy(&img, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let bits = |i: &Image| i.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b), "{p}");
            assert_eq!(a.dims(), img.dims());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn grading_examples() {
    let ra = |n, m| one(Policy::RandAugment { n, m });
    let graded = grade_policies(&[ra(2, 9), PolicySpec::identity(), ra(1, 5)]).unwrap();
    assert_eq!(graded.iter().map(|p| p.level).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(graded[0].components, vec![Policy::Identity]);
    assert_eq!(graded[1].components, vec![Policy::RandAugment { n: 1, m: 5 }]);
    assert_eq!(graded[2].components, vec![Policy::RandAugment { n: 2, m: 9 }]);

    let gs = |g| one(Policy::GridShuffle { g });
    let graded = grade_policies(&[gs(7), gs(2), gs(4)]).unwrap();
    let order: Vec<_> = graded.iter().map(|p| p.components[0].clone()).collect();
    assert_eq!(
        order,
        vec![
            Policy::GridShuffle { g: 2 },
            Policy::GridShuffle { g: 4 },
            Policy::GridShuffle { g: 7 }
        ]
    );

    let err = grade_policies(&[one(Policy::Gray { alpha: 0.5 }), one(Policy::Blur { k: 3 })]).unwrap_err();
    assert!(matches!(err, Error::IncomparablePolicies(..)), "{err}");

    // Proper superset with an equal shared component is heavier.
    let graded = grade_policies(&[
        PolicySpec::chain(vec![Policy::Gray { alpha: 0.5 }, Policy::Blur { k: 3 }]),
        one(Policy::Gray { alpha: 0.5 }),
    ])
    .unwrap();
    assert_eq!(graded[0].components.len(), 1);

    // Mixed hyperparameter directions are not ordered.
    assert!(grade_policies(&[ra(2, 5), ra(1, 9)]).is_err());
}

#[test]
fn grading_is_idempotent_and_order_free() {
    let set = vec![
        one(Policy::RandAugment { n: 2, m: 9 }),
        PolicySpec::identity(),
        one(Policy::RandAugment { n: 1, m: 5 }),
        one(Policy::RandAugment { n: 3, m: 9 }),
    ];
    let want = grade_policies(&set).unwrap();
    assert_eq!(grade_policies(&want).unwrap(), want);
    for p in permutations((0..set.len()).collect()) {
        let shuffled: Vec<_> = p.iter().map(|&i| set[i].clone()).collect();
        assert_eq!(grade_policies(&shuffled).unwrap(), want);
    }
}

#[test]
fn heavy_views_are_built_on_the_light_view() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images: Vec<Image> = (0..5).map(|_| random_image(3, 8, 8, &mut rng)).collect();
    let before = images.clone();
    let labels = vec![3, 1, 4, 1, 5];
    let graded = grade_policies(&[PolicySpec::identity(), one(Policy::Gray { alpha: 1.0 })]).unwrap();
    let light = [one(Policy::Crop { pad: 2 }), one(Policy::Flip)];
    let batch = make_view_batch(&images, &labels, &graded, &light, 11).unwrap();
    assert_eq!(images, before);
    assert_eq!(batch.levels(), 2);
    assert_eq!(batch.labels, labels);
    for (light, heavy) in batch.views[0].iter().zip(&batch.views[1]) {
        let d = light.data();
        for y in 0..8 {
            for x in 0..8 {
                let luma = 0.299 * d[[0, y, x]] + 0.587 * d[[1, y, x]] + 0.114 * d[[2, y, x]];
                for c in 0..3 {
                    assert!((heavy.data()[[c, y, x]] - luma).abs() < 1e-15);
                }
            }
        }
    }
    let again = make_view_batch(&images, &labels, &graded, &light, 11).unwrap();
    assert_eq!(again.views, batch.views);

    let single = make_view_batch(&images, &labels, &[PolicySpec::identity()], &light, 11).unwrap();
    assert_eq!(single.levels(), 1);
    assert_eq!(single.views[0], batch.views[0]);

    assert!(make_view_batch(&images, &labels[..4], &graded, &light, 11).is_err());
}

proptest! {
    #[test]
    fn grid_shuffle_conserves_pixels(seed in any::<u64>(), g in 1usize..5, th in 1usize..4, tw in 1usize..4, c in prop::sample::select(vec![1usize, 3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(c, g * th, g * tw, &mut rng);
        let out = apply_policy(&img, &one(Policy::GridShuffle { g }), &mut rng).unwrap();
        prop_assert_eq!(sorted_pixels(&out), sorted_pixels(&img));
    }

    #[test]
    fn full_gray_equalises_channels(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(3, 5, 6, &mut rng);
        let out = apply_policy(&img, &one(Policy::Gray { alpha: 1.0 }), &mut rng).unwrap();
        let d = out.data();
        for y in 0..5 {
            for x in 0..6 {
                prop_assert_eq!(d[[0, y, x]], d[[1, y, x]]);
                prop_assert_eq!(d[[1, y, x]], d[[2, y, x]]);
            }
        }
    }
}
