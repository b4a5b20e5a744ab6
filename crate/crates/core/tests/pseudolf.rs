use l3f::lf::{Image, ViewIndex};
use l3f::pseudolf::*;
use nnkit::{Conv2d, LayerSpec, ParamSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    Tensor::from_fn([h, w, 3], |_| rng.random::<f32>())
}

#[test]
fn codec_is_bit_exact_for_several_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for b in [1, 2, 3, 5, 10] {
        for _ in 0..10 {
            let (h, w) = (b * rng.random_range(1..8), b * rng.random_range(1..8));
            let img = random_image(h, w, &mut rng);
            let p = pack(&img, b).unwrap();
            assert_eq!(p.block(), b);
            assert_eq!(p.source_dims(), (h, w));
            let back = unpack(&p).unwrap();
            let bits = |t: &Image| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&img));
        }
    }
}

#[test]
fn block_one_is_the_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(5, 7, &mut rng);
    let p = pack(&img, 1).unwrap();
    assert_eq!(p.light_field().view(ViewIndex::new(0, 0)).unwrap(), img);
    assert_eq!(unpack(&p).unwrap(), img);
}

#[test]
fn block_two_enumeration() {
    let img: Image = Tensor::from_fn([4, 4, 3], |i| i as f32);
    let p = pack(&img, 2).unwrap();
    let px = |y: usize, x: usize, c: usize| ((y * 4 + x) * 3 + c) as f32;
    for r in 0..2 {
        for c in 0..2 {
            let view = p.light_field().view(ViewIndex::new(r, c)).unwrap();
            for (vy, sy) in [(0, r), (1, r + 2)] {
                for (vx, sx) in [(0, c), (1, c + 2)] {
                    for ch in 0..3 {
                        assert_eq!(view.data()[(vy * 2 + vx) * 3 + ch], px(sy, sx, ch));
                    }
                }
            }
        }
    }
    // view 0 holds rows {0, 2} x cols {0, 2}
    let v0 = p.light_field().view(ViewIndex::new(0, 0)).unwrap();
    let reds: Vec<f32> = v0.data().iter().step_by(3).copied().collect();
    assert_eq!(reds, [px(0, 0, 0), px(0, 2, 0), px(2, 0, 0), px(2, 2, 0)]);
}

#[test]
fn constant_views_unpack_to_a_periodic_mosaic() {
    let b = 3;
    let views: Vec<Image> = (0..b * b).map(|k| Tensor::from_fn([2, 4, 3], move |_| k as f32)).collect();
    let lf = l3f::lf::LightField::from_views(b, b, &views).unwrap();
    let img = unpack(&PseudoLf::from_light_field(lf).unwrap()).unwrap();
    assert_eq!(img.shape(), &[6, 12, 3]);
    for y in 0..6 {
        for x in 0..12 {
            assert_eq!(img.data()[(y * 12 + x) * 3], ((y % b) * b + x % b) as f32);
        }
    }
}

#[test]
fn invalid_inputs() {
    let img: Image = Tensor::zeros([10, 9, 3]);
    assert!(matches!(pack(&img, 2), Err(l3f::Error::Precondition(_))));
    assert!(pack(&img, 0).is_err());
    let c = crop_to_multiple(&img, 4).unwrap();
    assert_eq!(c.shape(), &[8, 8, 3]);
    assert!(pack(&c, 4).is_ok());
    let lf = l3f::lf::LightField::zeros(2, 3, 2, 2);
    assert!(PseudoLf::from_light_field(lf).is_err());
}

#[test]
fn crop_keeps_top_left_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(11, 13, &mut rng);
    let c = crop_to_multiple(&img, 5).unwrap();
    assert_eq!(c.shape(), &[10, 10, 3]);
    for y in 0..10 {
        assert_eq!(&c.data()[y * 30..(y + 1) * 30], &img.data()[y * 39..y * 39 + 30]);
    }
}

#[test]
fn analytic_receptive_field_examples() {
    assert_eq!(receptive_field_analytic(10, 3, 1), (30, 10));
    assert_eq!(receptive_field_analytic(1, 5, 2), (5, 2));
    assert_eq!(receptive_field_analytic(4, 7, 2), (28, 8));
}

fn single_conv_field(block: usize, kernel: usize, stride: usize) -> ReceptiveField {
    let mut ps = ParamSet::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = 3 * block * block;
    let conv = Conv2d::new(LayerSpec::conv("probe", kernel, stride, c, 2), &mut ps, &mut rng).unwrap();
    let probe = 16 * block;
    measure_receptive_field(block, probe, 11, true, &ps, |g, x| Ok(conv.forward(g, &ps, x)?)).unwrap()
}

#[test]
fn probe_matches_formula_for_single_layers() {
    for block in [1, 2, 4] {
        for kernel in [1, 3, 5, 7] {
            for stride in [1, 2] {
                let (extent, step) = receptive_field_analytic(block, kernel, stride);
                let f = single_conv_field(block, kernel, stride);
                assert_eq!(f.extent, (extent, extent), "B={block} k={kernel} s={stride}");
                assert_eq!(f.stride, Some(step), "B={block} k={kernel} s={stride}");
                assert!(!f.lower_bound);
            }
        }
    }
    assert_eq!(single_conv_field(1, 3, 1).extent, (3, 3));
    assert_eq!(single_conv_field(2, 3, 1).extent, (6, 6));
}

#[test]
fn probe_flags_fields_wider_than_the_probe() {
    let mut ps = ParamSet::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let conv = Conv2d::new(LayerSpec::conv("wide", 7, 1, 12, 1), &mut ps, &mut rng).unwrap();
    let f = measure_receptive_field(2, 8, 0, false, &ps, |g, x| Ok(conv.forward(g, &ps, x)?)).unwrap();
    assert!(f.lower_bound);
    assert!(f.extent.0 <= 8);
}

#[test]
fn probe_rejects_constant_outputs() {
    let mut ps = ParamSet::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let conv = Conv2d::new(LayerSpec::conv("z", 3, 1, 3, 1), &mut ps, &mut rng).unwrap();
    ps.value_mut(conv.weight).data_mut().fill(0.0);
    assert!(measure_receptive_field(1, 8, 0, false, &ps, |g, x| Ok(conv.forward(g, &ps, x)?)).is_err());
}

#[test]
fn tiny_model_field_grows_with_depth() {
    use l3f::model::{L3fnet, ModelConfig};
    let field = |s1, s2| {
        let cfg = ModelConfig {
            s1_blocks: s1,
            s2_blocks: s2,
            channels: 4,
            transpose_channels: 4,
            grid: 2,
            hist_bins: 10,
        };
        let mut m: L3fnet<f32> = L3fnet::new(cfg, 1).unwrap();
        m.randomize_output(2);
        measure_model_receptive_field(&m, 96, 3).unwrap()
    };
    let (a, b) = (field(0, 1), field(1, 2));
    assert!(!a.lower_bound && !b.lower_bound);
    assert!(b.extent.0 > a.extent.0, "{a:?} {b:?}");
    assert_eq!(a.extent.0 % 2, 0);
}

proptest! {
    #[test]
    fn pack_permutes_pixels(b in 1usize..5, hb in 1usize..5, wb in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(b * hb, b * wb, &mut rng);
        let p = pack(&img, b).unwrap();
        let mut a: Vec<u32> = img.data().iter().map(|x| x.to_bits()).collect();
        let mut c: Vec<u32> = p.light_field().data().iter().map(|x| x.to_bits()).collect();
        a.sort();
        c.sort();
        prop_assert_eq!(a, c);
        prop_assert_eq!(unpack(&p).unwrap(), img);
    }
}
