use l3f::lf::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_lf(u: usize, v: usize, h: usize, w: usize, seed: u64) -> LightField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..u * v * 3 * h * w).map(|_| rng.random::<f32>()).collect();
    LightField::new(u, v, h, w, data).unwrap()
}

fn views(u: usize, v: usize) -> impl Iterator<Item = ViewIndex> {
    (0..u).flat_map(move |a| (0..v).map(move |b| ViewIndex::new(a, b)))
}

#[test]
fn zero_lf_roundtrips_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("z.lf4");
    let lf = LightField::zeros(2, 2, 4, 4);
    write_lf4(&lf, &p).unwrap();
    assert_eq!(read_lf4(&p).unwrap(), lf);
}

#[test]
fn random_lf_roundtrips_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.lf4");
    let lf = random_lf(8, 8, 32, 32, 1);
    write_lf4(&lf, &p).unwrap();
    let back = read_lf4(&p).unwrap();
    assert_eq!(back.dims(), lf.dims());
    let bits = |l: &LightField| l.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&lf));
    // the payload is the planar data, little endian, after an 18-byte header
    let bytes = std::fs::read(&p).unwrap();
    let expected: Vec<u8> = lf.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    assert_eq!(&bytes[18..], &expected[..]);
}

#[test]
fn bad_magic_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.lf4");
    let mut b = encode_lf4(&LightField::zeros(1, 1, 2, 2)).unwrap();
    b[..4].copy_from_slice(b"XXXX");
    std::fs::write(&p, b).unwrap();
    assert_eq!(read_lf4(&p).unwrap_err().to_string(), "bad magic");
}

#[test]
fn stack_matches_index_oracle() {
    let lf = random_lf(2, 2, 4, 4, 2);
    let s = stack_views(&lf);
    assert_eq!(s.shape(), &[4, 4, 12]);
    for y in 0..4 {
        for x in 0..4 {
            for k in 0..4 {
                for c in 0..3 {
                    assert_eq!(s.data()[(y * 4 + x) * 12 + 3 * k + c], lf.at(k / 2, k % 2, c, y, x));
                }
            }
        }
    }
}

#[test]
fn stack_of_full_working_grid_has_192_channels() {
    let lf = LightField::zeros(8, 8, 180, 180);
    assert_eq!(stack_views(&lf).shape(), &[180, 180, 192]);
}

/// Indices of the ringed grid used by a neighbour stack, read back from the
/// stack itself through a light field whose values encode the view index.
fn stacked_view_ids(s: &nnkit::Tensor<f32>, vv: usize) -> Vec<(usize, usize)> {
    (0..5)
        .map(|k| {
            let id = s.data()[3 * k] as usize;
            (id / vv, id % vv)
        })
        .collect()
}

fn id_lf(u: usize, v: usize) -> LightField {
    LightField::from_fn(u, v, 3, 3, |a, b, _, _, _| (a * v + b) as f32)
}

#[test]
fn interior_neighbors_follow_center_left_up_right_down() {
    let wl = WorkingLf::from_ringed(id_lf(10, 10)).unwrap();
    let s = wl.neighbor_stack(ViewIndex::new(3, 3)).unwrap();
    // working (3,3) is ringed (4,4)
    let got = stacked_view_ids(&s, 10);
    let expect: Vec<_> = [(3, 3), (3, 2), (2, 3), (3, 4), (4, 3)].iter().map(|&(a, b)| (a + 1, b + 1)).collect();
    assert_eq!(got, expect);
}

#[test]
fn corner_neighbors_come_from_the_ring() {
    let wl = WorkingLf::from_ringed(id_lf(10, 10)).unwrap();
    for at in views(8, 8) {
        let got = stacked_view_ids(&wl.neighbor_stack(at).unwrap(), 10);
        let (ru, rv) = (at.u + 1, at.v + 1);
        assert_eq!(got, vec![(ru, rv), (ru, rv - 1), (ru - 1, rv), (ru, rv + 1), (ru + 1, rv)]);
    }
    let s = wl.neighbor_stack(ViewIndex::new(0, 0)).unwrap();
    assert_eq!(stacked_view_ids(&s, 10)[1], (1, 0));
    assert_eq!(stacked_view_ids(&s, 10)[2], (0, 1));
}

#[test]
fn constant_lf_gives_constant_neighbors() {
    let wl = WorkingLf::from_ringed(LightField::from_fn(4, 4, 5, 5, |_, _, _, _, _| 0.25)).unwrap();
    let s = wl.neighbor_stack(ViewIndex::new(0, 1)).unwrap();
    assert_eq!(s.shape(), &[5, 5, 15]);
    assert!(s.data().iter().all(|&x| x == 0.25));
}

#[test]
fn crop_matches_slicing_oracle() {
    let lf = random_lf(7, 6, 3, 4, 3);
    let wl = crop_central_grid(&lf, 3).unwrap();
    let (ou, ov) = (2usize, 2usize);
    assert_eq!(wl.grid(), (3, 3));
    for at in views(5, 5) {
        for c in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(wl.ringed().at(at.u, at.v, c, y, x), lf.at(at.u + ou - 1, at.v + ov - 1, c, y, x));
                }
            }
        }
    }
}

#[test]
fn crop_to_u_minus_two_drops_only_the_outer_ring() {
    let lf = random_lf(6, 6, 2, 2, 4);
    let wl = crop_central_grid(&lf, 4).unwrap();
    assert_eq!(wl.ringed(), &lf);
    assert_eq!(wl.working(), lf.sub_grid(1, 1, 4, 4).unwrap());
}

#[test]
fn constant_and_degenerate_epis() {
    let lf = LightField::from_fn(3, 4, 5, 6, |_, _, _, _, _| 0.5);
    let e = extract_epi(&lf, Orientation::Horizontal, 1, 2).unwrap();
    assert_eq!(e.image.shape(), &[4, 6, 3]);
    assert!(e.image.data().iter().all(|&x| x == 0.5));
    let e = extract_epi(&lf, Orientation::Vertical, 1, 2).unwrap();
    assert_eq!(e.image.shape(), &[3, 5, 3]);

    let one = random_lf(1, 1, 4, 5, 5);
    let e = extract_epi(&one, Orientation::Horizontal, 0, 2).unwrap();
    let view = one.view(ViewIndex::new(0, 0)).unwrap();
    assert_eq!(e.image.data(), &view.data()[2 * 5 * 3..3 * 5 * 3]);
}

#[test]
fn zero_disparity_epi_rows_are_equal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tex: Vec<f32> = (0..3 * 8 * 9).map(|_| rng.random()).collect();
    let lf = LightField::from_fn(3, 5, 8, 9, |_, _, c, y, x| tex[(c * 8 + y) * 9 + x]);
    let e = extract_epi(&lf, Orientation::Horizontal, 2, 4).unwrap();
    let row = &e.image.data()[..27];
    assert!(e.image.data().chunks(27).all(|r| r == row));
}

#[test]
fn shifted_texture_gives_unit_slope_epi() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (v, w) = (7, 64);
    let tex: Vec<f32> = (0..w + v).map(|_| rng.random()).collect();
    // view j sees the texture moved one pixel per view
    let lf = LightField::from_fn(1, v, 4, w, |_, j, _, _, x| tex[x + j]);
    let e = extract_epi(&lf, Orientation::Horizontal, 0, 1).unwrap();
    let row = |j: usize| -> Vec<f32> { (0..w).map(|x| e.image.data()[(j * w + x) * 3]).collect() };
    for j in 0..v - 1 {
        let (a, b) = (row(j), row(j + 1));
        let score = |s: isize| -> f32 {
            (8..w - 8)
                .map(|x| {
                    let xs = (x as isize + s) as usize;
                    (a[xs] - 0.5) * (b[x] - 0.5)
                })
                .sum()
        };
        let best = (-3..=3).max_by(|&p, &q| score(p).total_cmp(&score(q))).unwrap();
        assert_eq!(best, 1);
    }
}

#[test]
fn patch_coordinates_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 10_000;
    let mut ys = [0usize; 33];
    let mut xs = [0usize; 33];
    for _ in 0..n {
        let p = sample_patch(64, 64, 32, &mut rng).unwrap();
        ys[p.y] += 1;
        xs[p.x] += 1;
    }
    let e = n as f64 / 33.0;
    let chi2 = |c: &[usize]| c.iter().map(|&o| (o as f64 - e).powi(2) / e).sum::<f64>();
    // 99th percentile of chi-square with 32 degrees of freedom
    let crit = 53.486;
    assert!(chi2(&ys) < crit && chi2(&xs) < crit, "{} {}", chi2(&ys), chi2(&xs));
}

#[test]
fn full_resolution_patch_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut my, mut mx) = (0, 0);
    for _ in 0..20_000 {
        let p = sample_patch(434, 625, 180, &mut rng).unwrap();
        assert!(p.y <= 254 && p.x <= 445);
        my = my.max(p.y);
        mx = mx.max(p.x);
    }
    assert!(my > 240 && mx > 430);
}

#[test]
fn png_directory_roundtrip_quantizes_to_eight_bits() {
    let dir = tempfile::tempdir().unwrap();
    let lf = random_lf(2, 3, 5, 4, 10);
    export_views(&lf, dir.path()).unwrap();
    assert!(dir.path().join("view_01_02.png").exists());
    let back = import_views(dir.path()).unwrap();
    assert_eq!(back.dims(), lf.dims());
    for (a, b) in back.data().iter().zip(lf.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

proptest! {
    #[test]
    fn unstacking_channel_slices_restores_views(u in 1usize..4, v in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let lf = random_lf(u, v, h, w, seed);
        let s = stack_views(&lf);
        let c = 3 * u * v;
        for (k, at) in views(u, v).enumerate() {
            let view = lf.view(at).unwrap();
            for i in 0..h * w {
                prop_assert_eq!(&s.data()[i * c + 3 * k..i * c + 3 * k + 3], &view.data()[3 * i..3 * i + 3]);
            }
        }
    }

    #[test]
    fn neighbor_center_is_the_view(nu in 1usize..4, nv in 1usize..4, seed in any::<u64>()) {
        let wl = WorkingLf::from_ringed(random_lf(nu + 2, nv + 2, 3, 2, seed)).unwrap();
        for at in views(nu, nv) {
            let s = wl.neighbor_stack(at).unwrap();
            let view = wl.view(at).unwrap();
            for i in 0..6 {
                prop_assert_eq!(&s.data()[15 * i..15 * i + 3], &view.data()[3 * i..3 * i + 3]);
            }
        }
    }

    #[test]
    fn patches_stay_inside(h in 2usize..100, w in 2usize..100, half in 1usize..50, seed in any::<u64>()) {
        let size = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_patch(h, w, size, &mut rng) {
            Ok(p) => prop_assert!(p.y + size <= h && p.x + size <= w),
            Err(_) => prop_assert!(size > h.min(w)),
        }
    }
}
