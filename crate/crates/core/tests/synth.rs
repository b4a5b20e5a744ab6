use l3f::lf::{crop_central_grid, write_lf4, LightField, ViewIndex};
use l3f::synth::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_lf(u: usize, v: usize, h: usize, w: usize, seed: u64) -> LightField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..u * v * 3 * h * w).map(|_| rng.random::<f32>()).collect();
    LightField::new(u, v, h, w, data).unwrap()
}

fn constant(value: f32, n: usize) -> LightField {
    LightField::from_fn(1, 1, n, n, |_, _, _, _, _| value)
}

#[test]
fn noiseless_exposure_is_exact_division() {
    let gt = random_lf(2, 2, 8, 8, 1);
    let low = synth_lowlight(&gt, &LowLightSpec::noiseless(20.0)).unwrap();
    for (y, x) in low.data().iter().zip(gt.data()) {
        assert_eq!(*y, x / 20.0);
    }
    assert_eq!(synth_lowlight(&gt, &LowLightSpec::noiseless(1.0)).unwrap(), gt);
}

#[test]
fn invalid_specs() {
    let gt = constant(0.5, 2);
    assert!(synth_lowlight(&gt, &LowLightSpec::noiseless(0.5)).is_err());
    let bad = LowLightSpec {
        read_noise_sigma: -1.0,
        ..LowLightSpec::noiseless(2.0)
    };
    assert!(synth_lowlight(&gt, &bad).is_err());
}

const NOISY: LowLightSpec = LowLightSpec {
    exposure_divisor: 2.0,
    read_noise_sigma: 0.02,
    shot_noise_scale: 0.01,
    rng_seed: 5,
};

#[test]
fn sample_variance_matches_noise_model() {
    // 3 * 183^2 > 10^5 samples at x/d = 0.25, far from the clamp
    let low = synth_lowlight(&constant(0.5, 183), &NOISY).unwrap();
    let n = low.data().len() as f64;
    let mean = low.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = low.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let want = 0.01 * 0.25 + 0.02 * 0.02;
    assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
}

#[test]
fn repeated_draws_converge_to_the_scaled_mean() {
    let gt = random_lf(1, 1, 4, 4, 6);
    let draws = 4000;
    let mut sum = vec![0.0f64; gt.data().len()];
    for s in 0..draws {
        let low = synth_lowlight(&gt, &LowLightSpec { rng_seed: s, ..NOISY }).unwrap();
        sum.iter_mut().zip(low.data()).for_each(|(a, &b)| *a += b as f64);
    }
    // pooled z statistic over pixels whose mean is well inside (0, 1), where
    // the clamp has no effect
    let (mut dev, mut var) = (0.0, 0.0);
    for (i, &x) in gt.data().iter().enumerate() {
        let m = x as f64 / 2.0;
        let v = 0.01 * m + 0.0004;
        if m - 5.0 * v.sqrt() > 0.0 {
            dev += sum[i] / draws as f64 - m;
            var += v / draws as f64;
        }
    }
    let z = dev / var.sqrt();
    assert!(z.abs() < 2.576, "z = {z}");
}

#[test]
fn noise_is_seeded() {
    let gt = random_lf(1, 2, 6, 6, 7);
    let a = synth_lowlight(&gt, &NOISY).unwrap();
    assert_eq!(a, synth_lowlight(&gt, &NOISY).unwrap());
    assert_ne!(a, synth_lowlight(&gt, &LowLightSpec { rng_seed: 6, ..NOISY }).unwrap());
    assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn flips_are_involutions_and_mirror_the_grid() {
    let lf = random_lf(3, 4, 5, 6, 8);
    let h = Augmentation { hflip: true, ..Augmentation::IDENTITY };
    let v = Augmentation { vflip: true, ..Augmentation::IDENTITY };
    assert_eq!(h.apply(&h.apply(&lf)), lf);
    assert_eq!(v.apply(&v.apply(&lf)), lf);
    let f = h.apply(&lf);
    assert_eq!(f.at(0, 0, 1, 2, 0), lf.at(0, 3, 1, 2, 5));
    let f = v.apply(&lf);
    assert_eq!(f.at(0, 1, 2, 0, 3), lf.at(2, 1, 2, 4, 3));
}

#[test]
fn channel_permutation_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut counts = [0usize; 6];
    let n = 6000;
    for _ in 0..n {
        let a = Augmentation::random(&mut rng);
        counts[CHANNEL_PERMS.iter().position(|p| *p == a.perm).unwrap()] += 1;
    }
    let e = n as f64 / 6.0;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    // 99th percentile of chi-square with 5 degrees of freedom
    assert!(chi2 < 15.086, "{chi2} {counts:?}");
}

#[test]
fn pair_receives_the_same_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gt = random_lf(3, 3, 4, 4, 11);
    let low = gt.map(|x| x / 10.0);
    for _ in 0..20 {
        let (l, g, a) = augment(&low, &gt, &mut rng).unwrap();
        assert_eq!(g, a.apply(&gt));
        assert_eq!(l, g.map(|x| x / 10.0));
    }
    assert!(augment(&low, &random_lf(3, 3, 4, 5, 0), &mut rng).is_err());
}

#[test]
fn histogram_follows_the_permutation() {
    let lf = random_lf(2, 2, 6, 6, 12);
    let a = Augmentation { hflip: true, vflip: true, perm: [2, 0, 1] };
    let direct = l3f::model::rgb_histogram(&a.apply(&lf), 8).unwrap();
    let moved = a.apply_hist(&l3f::model::rgb_histogram(&lf, 8).unwrap());
    assert_eq!(direct, moved);
}

proptest! {
    #[test]
    fn flips_preserve_channel_multisets(seed in any::<u64>(), hf in any::<bool>(), vf in any::<bool>()) {
        let lf = random_lf(2, 3, 3, 4, seed);
        let f = Augmentation { hflip: hf, vflip: vf, perm: [0, 1, 2] }.apply(&lf);
        for c in 0..3 {
            let collect = |l: &LightField| {
                let mut v: Vec<u32> = Vec::new();
                for u in 0..2 { for w in 0..3 { for y in 0..3 { for x in 0..4 {
                    v.push(l.at(u, w, c, y, x).to_bits());
                }}}}
                v.sort();
                v
            };
            prop_assert_eq!(collect(&lf), collect(&f));
        }
    }
}

fn dataset(grid: usize, size: usize, seed: u64) -> Dataset {
    let gt = random_lf(grid + 2, grid + 2, size, size, seed);
    let low = synth_lowlight(&gt, &LowLightSpec::noiseless(20.0)).unwrap();
    let (gw, lw) = (crop_central_grid(&gt, grid).unwrap(), crop_central_grid(&low, grid).unwrap());
    Dataset {
        examples: vec![Example::new(lw, gw, 20.0, 10).unwrap()],
    }
}

#[test]
fn batch_view_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = SampleConfig { patch: 8, views: 12, augment: true };
    let b = sample_batch(&dataset(8, 10, 1), &cfg, &mut rng).unwrap();
    assert_eq!(b.views.len(), 12);
    let mut d = b.views.clone();
    d.dedup();
    assert_eq!(d.len(), 12);
    assert!(b.views.iter().all(|v| v.u < 8 && v.v < 8));
    assert_eq!(b.low.height(), 8);
    assert_eq!(b.low.grid(), (8, 8));

    let b = sample_batch(&dataset(3, 10, 2), &cfg, &mut rng).unwrap();
    let all: Vec<ViewIndex> = (0..3).flat_map(|u| (0..3).map(move |v| ViewIndex::new(u, v))).collect();
    assert_eq!(b.views, all);
}

#[test]
fn batch_is_reproducible_and_paired() {
    let ds = dataset(3, 12, 3);
    let cfg = SampleConfig { patch: 6, views: 4, augment: true };
    let draw = |s| sample_batch(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
    let (a, b) = (draw(4), draw(4));
    assert_eq!(a.low, b.low);
    assert_eq!(a.views, b.views);
    assert_eq!(a.window, b.window);
    assert_eq!(a.augmentation, b.augmentation);
    // the dark patch is still the ground truth over 20 after augmentation
    let expect = a.gt.ringed().map(|x| x / 20.0);
    assert_eq!(a.low.ringed(), &expect);
    let ex = &ds.examples[0];
    let crop = ex.gt.crop_spatial(a.window).unwrap();
    assert_eq!(a.gt.ringed(), &a.augmentation.apply(crop.ringed()));
}

#[test]
fn batch_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = SampleConfig { patch: 8, views: 12, augment: false };
    assert!(matches!(sample_batch(&Dataset::default(), &cfg, &mut rng), Err(l3f::Error::EmptyDataset)));
    let odd = SampleConfig { patch: 7, ..cfg };
    assert!(sample_batch(&dataset(3, 10, 0), &odd, &mut rng).is_err());
    let big = SampleConfig { patch: 12, ..cfg };
    assert!(sample_batch(&dataset(3, 10, 0), &big, &mut rng).is_err());
}

#[test]
fn manifest_roundtrip_and_dataset_loading() {
    let dir = tempfile::tempdir().unwrap();
    let gt = synth_scene(&SceneSpec {
        views_u: 5,
        views_v: 5,
        height: 16,
        width: 16,
        max_disparity: 1.0,
        seed: 15,
    })
    .unwrap();
    write_lf4(&gt, dir.path().join("a.lf4")).unwrap();
    let noise = NoiseSpec { read_noise_sigma: 0.001, shot_noise_scale: 0.0 };
    let m = DatasetManifest {
        entries: vec![
            ManifestEntry { gt: "a.lf4".into(), divisors: vec![20.0, 50.0], noise, split: "train".into() },
            ManifestEntry { gt: "a.lf4".into(), divisors: vec![100.0], noise, split: "test".into() },
        ],
    };
    let path = dir.path().join("manifest.json");
    m.save(&path).unwrap();
    let loaded = DatasetManifest::load(&path).unwrap();
    assert_eq!(loaded.entries[0].gt, dir.path().join("a.lf4"));
    assert_eq!(loaded.entries[1].divisors, [100.0]);

    let train = Dataset::from_manifest(&loaded, Some("train"), 3, 10, 1).unwrap();
    assert_eq!(train.examples.len(), 2);
    assert_eq!(train.examples[1].divisor, 50.0);
    assert_eq!(train.examples[0].gt.grid(), (3, 3));
    assert_ne!(train.examples[0].low, train.examples[1].low);
    let again = Dataset::from_manifest(&loaded, Some("train"), 3, 10, 1).unwrap();
    assert_eq!(again.examples[0].low, train.examples[0].low);
    let all = Dataset::from_manifest(&loaded, None, 3, 10, 1).unwrap();
    assert_eq!(all.examples.len(), 3);
    assert!(matches!(
        Dataset::from_manifest(&loaded, Some("val"), 3, 10, 1),
        Err(l3f::Error::EmptyDataset)
    ));
}

#[test]
fn scene_geometry() {
    let spec = SceneSpec { views_u: 3, views_v: 3, height: 24, width: 24, max_disparity: 0.0, seed: 16 };
    let lf = synth_scene(&spec).unwrap();
    let c = lf.view(ViewIndex::new(1, 1)).unwrap();
    assert_eq!(lf.view(ViewIndex::new(0, 2)).unwrap(), c);
    assert!(lf.data().iter().all(|&v| (0.05..=0.95).contains(&v)));

    let lf = synth_scene(&SceneSpec { max_disparity: 2.0, ..spec }).unwrap();
    assert_ne!(lf.view(ViewIndex::new(1, 0)).unwrap(), lf.view(ViewIndex::new(1, 1)).unwrap());
    assert_eq!(lf, synth_scene(&SceneSpec { max_disparity: 2.0, ..spec }).unwrap());
    assert!(synth_scene(&SceneSpec { height: 0, ..spec }).is_err());
}
