use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use l3f::lf::{crop_central_grid, read_lf4, write_image, write_lf4, LightField, ViewIndex};
use l3f::model::{L3fnet, ModelConfig};
use l3f::synth::{synth_scene, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn l3f(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l3f"))
        .args(args)
        .env_remove("L3F_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = l3f(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn random_lf(u: usize, h: usize, w: usize, seed: u64) -> LightField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LightField::from_fn(u, u, h, w, |_, _, _, _, _| rng.random_range(0.0..0.3))
}

fn small_model(grid: usize) -> ModelConfig {
    ModelConfig {
        s1_blocks: 1,
        s2_blocks: 1,
        channels: 4,
        transpose_channels: 4,
        grid,
        hist_bins: 10,
    }
}

fn save_model(dir: &Path, grid: usize, trained: bool) -> PathBuf {
    let mut m: L3fnet<f32> = L3fnet::new(small_model(grid), 5).unwrap();
    if trained {
        m.randomize_output(6);
    }
    let p = dir.join(format!("m{grid}{trained}.ckpt"));
    m.save(&p).unwrap();
    p
}

#[test]
fn metrics_report_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.lf4");
    let lf = LightField::from_fn(1, 2, 16, 16, |_, v, c, y, x| ((v + c + y * x) % 7) as f32 / 7.0);
    write_lf4(&lf, &a).unwrap();
    let out = ok(&["metrics", s(&a), s(&a)]);
    let golden = include_str!("golden/metrics_identical.json");
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden);

    let (f1, f2) = (dir.path().join("r1.json"), dir.path().join("r2.json"));
    let b = dir.path().join("b.lf4");
    write_lf4(&lf.map(|x| x * 0.5), &b).unwrap();
    ok(&["metrics", s(&a), s(&b), "--out", s(&f1)]);
    ok(&["metrics", s(&a), s(&b), "--out", s(&f2)]);
    assert_eq!(std::fs::read(&f1).unwrap(), std::fs::read(&f2).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&f1).unwrap()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["mean_psnr", "mean_ssim", "views"]);
}

#[test]
fn metrics_of_an_offset_pair_is_twenty_db() {
    let dir = tempfile::tempdir().unwrap();
    let lf = LightField::from_fn(2, 2, 16, 16, |u, v, c, y, x| ((u + v + c + y + x) % 5) as f32 * 0.1);
    let (a, b) = (dir.path().join("a.lf4"), dir.path().join("b.lf4"));
    write_lf4(&lf, &a).unwrap();
    write_lf4(&lf.map(|x| x + 0.1), &b).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&ok(&["metrics", s(&a), s(&b)]).stdout).unwrap();
    assert!((v["mean_psnr"].as_f64().unwrap() - 20.0).abs() < 1e-3, "{v}");
    assert_eq!(v["views"].as_array().unwrap().len(), 4);
}

#[test]
fn metrics_rejects_mismatched_dims() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.lf4"), dir.path().join("b.lf4"));
    write_lf4(&random_lf(2, 16, 16, 1), &a).unwrap();
    write_lf4(&random_lf(2, 16, 14, 1), &b).unwrap();
    assert_eq!(code(&l3f(&["metrics", s(&a), s(&b)])), 2);
}

#[test]
fn untrained_restore_without_histogram_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_model(dir.path(), 2, false);
    let lf = random_lf(4, 8, 8, 2);
    let (inp, out) = (dir.path().join("in.lf4"), dir.path().join("out.lf4"));
    write_lf4(&lf, &inp).unwrap();
    ok(&["restore", "--checkpoint", s(&ckpt), "--input", s(&inp), "--output", s(&out), "--no-hist"]);
    let want = crop_central_grid(&lf, 2).unwrap().working();
    let got = read_lf4(&out).unwrap();
    let bits = |l: &LightField| l.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&got), bits(&want));

    // an exact working grid gets a replicated ring
    let exact = dir.path().join("exact.lf4");
    write_lf4(&want, &exact).unwrap();
    ok(&["restore", "--checkpoint", s(&ckpt), "--input", s(&exact), "--output", s(&out), "--no-hist"]);
    assert_eq!(bits(&read_lf4(&out).unwrap()), bits(&want));
}

#[test]
fn restore_of_one_view() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_model(dir.path(), 4, true);
    let (inp, out, png) = (dir.path().join("in.lf4"), dir.path().join("out.lf4"), dir.path().join("png"));
    write_lf4(&random_lf(6, 8, 8, 3), &inp).unwrap();
    ok(&["restore", "--checkpoint", s(&ckpt), "--input", s(&inp), "--output", s(&out), "--views", "3,3", "--png-dir", s(&png)]);
    let got = read_lf4(&out).unwrap();
    assert_eq!(got.dims(), (1, 1, 8, 8));
    assert_eq!(std::fs::read_dir(&png).unwrap().count(), 1);

    ok(&["restore", "--checkpoint", s(&ckpt), "--input", s(&inp), "--output", s(&out), "--views", "0,1;2,3"]);
    assert_eq!(read_lf4(&out).unwrap().dims(), (1, 2, 8, 8));
    let bad = l3f(&["restore", "--checkpoint", s(&ckpt), "--input", s(&inp), "--output", s(&out), "--views", "4,0"]);
    assert_eq!(code(&bad), 2);
    let bad = l3f(&["restore", "--checkpoint", s(&ckpt), "--input", s(&inp), "--output", s(&out), "--views", "x"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn restore_is_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_model(dir.path(), 2, true);
    let inp = dir.path().join("in.lf4");
    write_lf4(&random_lf(4, 8, 10, 4), &inp).unwrap();
    let mut outs = Vec::new();
    for w in ["1", "8"] {
        let out = dir.path().join(format!("out{w}.lf4"));
        ok(&["restore", "--checkpoint", s(&ckpt), "--input", s(&inp), "--output", s(&out), "--workers", w]);
        outs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    let input = std::fs::read(&inp).unwrap();
    assert_ne!(outs[0].len(), input.len());
}

#[test]
fn restore_shape_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_model(dir.path(), 4, false);
    let (inp, out) = (dir.path().join("in.lf4"), dir.path().join("out.lf4"));
    write_lf4(&random_lf(3, 8, 8, 5), &inp).unwrap();
    let r = l3f(&["restore", "--checkpoint", s(&ckpt), "--input", s(&inp), "--output", s(&out)]);
    assert_eq!(code(&r), 2);
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains("4x4") && msg.contains("3x3"), "{msg}");

    write_lf4(&random_lf(6, 8, 9, 5), &inp).unwrap();
    let r = l3f(&["restore", "--checkpoint", s(&ckpt), "--input", s(&inp), "--output", s(&out)]);
    assert_eq!(code(&r), 2);
    ok(&["restore", "--checkpoint", s(&ckpt), "--input", s(&inp), "--output", s(&out), "--crop-even"]);
    assert_eq!(read_lf4(&out).unwrap().dims(), (4, 4, 8, 8));
}

#[test]
fn io_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.lf4");
    assert_eq!(code(&l3f(&["metrics", s(&missing), s(&missing)])), 3);
    let junk = dir.path().join("junk.lf4");
    std::fs::write(&junk, b"not a light field").unwrap();
    assert_eq!(code(&l3f(&["metrics", s(&junk), s(&junk)])), 3);
    assert_eq!(code(&l3f(&["metrics"])), 2);
}

#[test]
fn synth_requires_a_seed_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |d: &Path| vec!["synth".to_string(), "--out".into(), s(d).into(), "--scenes".into(), "2".into(), "--views".into(), "4".into(), "--height".into(), "16".into(), "--width".into(), "16".into(), "--dark".into()];
    let r = Command::new(env!("CARGO_BIN_EXE_l3f")).args(args(&a)).env_remove("L3F_SEED").output().unwrap();
    assert_eq!(code(&r), 2);
    let r = Command::new(env!("CARGO_BIN_EXE_l3f")).args(args(&a)).env("L3F_SEED", "9").output().unwrap();
    assert!(r.status.success());
    let mut bv = args(&b);
    bv.extend(["--seed".into(), "9".into()]);
    let r = Command::new(env!("CARGO_BIN_EXE_l3f")).args(&bv).env("L3F_SEED", "1").output().unwrap();
    assert!(r.status.success());
    for name in ["scene_000.lf4", "scene_001.lf4", "scene_001_d50.lf4", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let r = Command::new(env!("CARGO_BIN_EXE_l3f")).args(args(&a)).env("L3F_SEED", "nine").output().unwrap();
    assert_eq!(code(&r), 2);
}

#[test]
fn train_from_config_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", s(d), "--views", "4", "--height", "16", "--width", "16", "--divisors", "20,50", "--seed", "1"]);
    let cfg = d.join("run.cfg");
    std::fs::write(
        &cfg,
        "s1_blocks = 1\ns2_blocks = 1\nchannels = 4\ntranspose_channels = 4\ngrid = 2\nhist_bins = 10\n\
         patch = 8\nviews = 2\ncx_stride = 2\niterations = 50\nlr = 0.001\nseed = 4\n",
    )
    .unwrap();
    let (ck, log) = (d.join("m.ckpt"), d.join("loss.csv"));
    let manifest = d.join("manifest.json");
    let args = ["train", "--config", s(&cfg), "--manifest", s(&manifest), "--checkpoint", s(&ck), "--log", s(&log), "--iterations", "3"];
    ok(&args);
    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");
    assert_eq!(L3fnet::<f32>::load(&ck).unwrap().config(), &small_model(2));
    ok(&args);
    assert_eq!(std::fs::read_to_string(&log).unwrap(), text);

    let r = l3f(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--checkpoint", s(&ck), "--log", s(&log), "--iterations", "3", "--set", "bogus=1"]);
    assert_eq!(code(&r), 2);
    let r = l3f(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--checkpoint", s(&ck), "--log", s(&log), "--split", "test"]);
    assert_eq!(code(&r), 2);
    let r = l3f(&["train", "--config", s(&cfg), "--checkpoint", s(&ck), "--log", s(&log)]);
    assert_eq!(code(&r), 2);
    let r = l3f(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--checkpoint", s(&ck), "--log", s(&log), "--iterations", "20", "--lr", "1e30"]);
    assert_eq!(code(&r), 4);
}

#[test]
fn pseudo_pack_unpack_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = nnkit::Tensor::from_fn([21, 30, 3], |_| rng.random_range(0..=255u8) as f32 / 255.0);
    let (png, lf, back) = (dir.path().join("a.png"), dir.path().join("p.lf4"), dir.path().join("b.png"));
    write_image(&img, &png).unwrap();
    assert_eq!(code(&l3f(&["pseudo", "pack", "--input", s(&png), "--block", "2", "--output", s(&lf)])), 2);
    ok(&["pseudo", "pack", "--input", s(&png), "--block", "3", "--output", s(&lf)]);
    assert_eq!(read_lf4(&lf).unwrap().dims(), (3, 3, 7, 10));
    ok(&["pseudo", "unpack", "--input", s(&lf), "--output", s(&back)]);
    assert_eq!(l3f::lf::read_image(&back).unwrap(), img);
    ok(&["pseudo", "pack", "--input", s(&png), "--block", "2", "--output", s(&lf), "--crop"]);
    assert_eq!(read_lf4(&lf).unwrap().dims(), (2, 2, 10, 15));
}

#[test]
fn gradcheck_reports_and_fails_on_zero_tolerance() {
    let out = ok(&["gradcheck", "--channels", "4", "--s1-blocks", "1", "--s2-blocks", "1", "--size", "8", "--max-per-block", "3"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-4);
    let r = l3f(&["gradcheck", "--channels", "4", "--s1-blocks", "1", "--s2-blocks", "1", "--size", "8", "--max-per-block", "3", "--tol", "0"]);
    assert_eq!(code(&r), 4);
}

#[test]
fn epi_and_align_commands() {
    let dir = tempfile::tempdir().unwrap();
    let lf = synth_scene(&SceneSpec {
        views_u: 5,
        views_v: 5,
        height: 64,
        width: 80,
        max_disparity: 1.0,
        seed: 2,
    })
    .unwrap();
    let (inp, epi) = (dir.path().join("s.lf4"), dir.path().join("epi.png"));
    write_lf4(&lf, &inp).unwrap();
    ok(&["epi", "--input", s(&inp), "--orientation", "horizontal", "--view", "2", "--coord", "30", "--output", s(&epi)]);
    assert_eq!(l3f::lf::read_image(&epi).unwrap().shape(), &[5, 80, 3]);
    assert_eq!(code(&l3f(&["epi", "--input", s(&inp), "--orientation", "vertical", "--view", "5", "--coord", "0", "--output", s(&epi)])), 2);

    let (gt, dark) = (dir.path().join("gt.png"), dir.path().join("dark.png"));
    let center = lf.view(ViewIndex::new(2, 2)).unwrap();
    write_image(&center, &gt).unwrap();
    write_image(&center.map(|x| x / 4.0), &dark).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&ok(&["align", "--gt", s(&gt), "--dark", s(&dark), "--preamp", "4"]).stdout).unwrap();
    for k in ["tx", "ty", "theta_deg", "inliers", "matches"] {
        assert!(v.get(k).is_some(), "{k} missing in {v}");
    }
    assert!(v["tx"].as_f64().unwrap() < 0.1 && v["ty"].as_f64().unwrap() < 0.1, "{v}");

    let flat = dir.path().join("flat.png");
    write_image(&nnkit::Tensor::from_fn([32, 32, 3], |_| 0.5), &flat).unwrap();
    assert_eq!(code(&l3f(&["align", "--gt", s(&flat), "--dark", s(&flat), "--preamp", "1"])), 4);
}
