use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use l3f::align::{estimate_misalignment, AlignConfig};
use l3f::config::KvMap;
use l3f::lf::{
    crop_central_grid, export_views, extract_epi, read_image, read_lf4, write_image, write_lf4, LightField, Orientation,
    ViewIndex, WorkingLf,
};
use l3f::model::{gradient_check, restore_lf, AmpMode, L3fnet, ModelConfig, RestoreOptions};
use l3f::pseudolf::{crop_to_multiple, measure_model_receptive_field, pack, unpack, PseudoLf};
use l3f::synth::{
    split_seed, synth_lowlight, synth_scene, Dataset, DatasetManifest, LowLightSpec, ManifestEntry, NoiseSpec, SceneSpec,
};
use l3f::train::{run_train, TrainConfig, TrainOutputs};
use l3f::{Error, Result};
use nnkit::{GradcheckOptions, NnError};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "l3f", version, about = "Low-light light-field restoration toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic ground-truth light fields and a dataset manifest.
    Synth(SynthArgs),
    /// Train a restoration model.
    Train(TrainArgs),
    /// Restore a dark light field with a trained checkpoint.
    Restore(RestoreArgs),
    /// Per-view and mean PSNR/SSIM between two light fields.
    Metrics(MetricsArgs),
    /// Estimate the rigid misalignment between a bright and a dark view.
    Align(AlignArgs),
    /// Pseudo light-field codec and receptive-field probe.
    #[command(subcommand)]
    Pseudo(PseudoCmd),
    /// Finite-difference check of the full network.
    Gradcheck(GradcheckArgs),
    /// Extract an epipolar-plane image.
    Epi(EpiArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    /// Scenes (taken from the end) assigned to the "test" split.
    #[arg(long, default_value_t = 0)]
    test: usize,
    /// Angular grid side.
    #[arg(long, default_value_t = 5)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 1.0)]
    disparity: f32,
    /// Exposure divisors, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [20.0, 50.0, 100.0])]
    divisors: Vec<f64>,
    #[arg(long, default_value_t = 0.002)]
    read_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    shot_noise: f64,
    /// Also write the dark exposures next to the scenes.
    #[arg(long)]
    dark: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value file; flags and --set win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_hist: bool,
}

#[derive(Args)]
struct RestoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Working views `u,v`; repeat the flag or separate with `;`.
    #[arg(long = "views", value_name = "U,V")]
    views: Vec<String>,
    #[arg(long)]
    no_hist: bool,
    #[arg(long, default_value = "linear")]
    amp_mode: AmpMode,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Also write every restored view as PNG into this directory.
    #[arg(long)]
    png_dir: Option<PathBuf>,
    /// Drop the last row/column of odd-sized views.
    #[arg(long)]
    crop_even: bool,
}

#[derive(Args)]
struct MetricsArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    dark: PathBuf,
    #[arg(long)]
    preamp: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.7)]
    ratio: f64,
}

#[derive(Subcommand)]
enum PseudoCmd {
    /// Pack an image into a B×B pseudo light field.
    Pack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        block: usize,
        #[arg(long)]
        output: PathBuf,
        /// Crop to a multiple of the block instead of failing.
        #[arg(long)]
        crop: bool,
    },
    /// Unpack a pseudo light field back into an image.
    Unpack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Measure a model's source-pixel receptive field.
    Field {
        #[arg(long)]
        block: usize,
        #[arg(long, default_value_t = 1000)]
        probe: usize,
        /// Trained weights; a default model with a random output layer otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    s1_blocks: usize,
    #[arg(long, default_value_t = 3)]
    s2_blocks: usize,
    #[arg(long, default_value_t = 2)]
    grid: usize,
    #[arg(long, default_value_t = 8)]
    max_per_block: usize,
}

#[derive(Args)]
struct EpiArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_orientation)]
    orientation: Orientation,
    /// Fixed angular index (u for horizontal, v for vertical).
    #[arg(long)]
    view: usize,
    /// Fixed image row (horizontal) or column (vertical).
    #[arg(long)]
    coord: usize,
    #[arg(long)]
    output: PathBuf,
}

fn parse_orientation(s: &str) -> std::result::Result<Orientation, String> {
    match s {
        "horizontal" | "h" => Ok(Orientation::Horizontal),
        "vertical" | "v" => Ok(Orientation::Vertical),
        _ => Err(format!("expected horizontal or vertical, got `{s}`")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::Align { .. } => EXIT_NUMERIC,
        Error::Nn(NnError::NonFiniteGradient(_)) => EXIT_NUMERIC,
        Error::Nn(NnError::Shape { .. } | NnError::Unsupported { .. } | NnError::NonScalarRoot(_)) => EXIT_CONFIG,
        Error::Config(_)
        | Error::Precondition(_)
        | Error::Shape(_)
        | Error::OutOfRange(_)
        | Error::InvalidLightField(_)
        | Error::EmptyDataset => EXIT_CONFIG,
        _ => EXIT_IO,
    }
}

/// Flag, then config value, then `L3F_SEED`.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var("L3F_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("L3F_SEED=`{v}` is not an unsigned integer"))),
        Err(_) => Err(Error::Config("a seed is required (--seed, config `seed`, or L3F_SEED)".into())),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, None)?;
    if a.scenes == 0 || a.test > a.scenes {
        return Err(Error::Config(format!("{} scenes with {} in test", a.scenes, a.test)));
    }
    std::fs::create_dir_all(&a.out)?;
    let noise = NoiseSpec {
        read_noise_sigma: a.read_noise,
        shot_noise_scale: a.shot_noise,
    };
    let mut manifest = DatasetManifest::default();
    for i in 0..a.scenes {
        let spec = SceneSpec {
            views_u: a.views,
            views_v: a.views,
            height: a.height,
            width: a.width,
            max_disparity: a.disparity,
            seed: split_seed(seed, i, usize::MAX),
        };
        let gt = synth_scene(&spec)?;
        let name = format!("scene_{i:03}.lf4");
        write_lf4(&gt, a.out.join(&name))?;
        if a.dark {
            for (k, &d) in a.divisors.iter().enumerate() {
                let low = synth_lowlight(
                    &gt,
                    &LowLightSpec {
                        exposure_divisor: d,
                        read_noise_sigma: a.read_noise,
                        shot_noise_scale: a.shot_noise,
                        rng_seed: split_seed(seed, i, k),
                    },
                )?;
                write_lf4(&low, a.out.join(format!("scene_{i:03}_d{d}.lf4")))?;
            }
        }
        manifest.entries.push(ManifestEntry {
            gt: name.into(),
            divisors: a.divisors.clone(),
            noise,
            split: if i >= a.scenes - a.test { "test" } else { "train" }.into(),
        });
    }
    manifest.save(a.out.join("manifest.json"))?;
    eprintln!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

const RUN_KEYS: [&str; 5] = ["manifest", "split", "checkpoint", "log", "checkpoint_every"];

fn train(a: TrainArgs) -> Result<()> {
    let mut kv = match &a.config {
        Some(p) => KvMap::load(p)?,
        None => KvMap::default(),
    };
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(v) = &a.manifest {
        kv.set("manifest", v.display());
    }
    if let Some(v) = &a.split {
        kv.set("split", v);
    }
    if let Some(v) = &a.checkpoint {
        kv.set("checkpoint", v.display());
    }
    if let Some(v) = &a.log {
        kv.set("log", v.display());
    }
    if let Some(v) = a.checkpoint_every {
        kv.set("checkpoint_every", v);
    }
    if let Some(v) = a.iterations {
        kv.set("iterations", v);
    }
    if let Some(v) = a.lr {
        kv.set("lr", v);
    }
    if a.no_hist {
        kv.set("use_hist", false);
    }

    let config_seed: Option<u64> = kv.get("seed")?;
    kv.set("seed", resolve_seed(a.seed, config_seed)?);

    let mut model_kv = KvMap::default();
    for (k, v) in kv.iter().filter(|(k, _)| !RUN_KEYS.contains(k)) {
        model_kv.set(k, v);
    }
    let mut cfg = TrainConfig::default();
    cfg.apply_kv(&model_kv)?;
    cfg.validate()?;

    let manifest_path: PathBuf = kv
        .get("manifest")?
        .ok_or_else(|| Error::Config("a dataset manifest is required (--manifest or `manifest`)".into()))?;
    let split: String = kv.get("split")?.unwrap_or_else(|| "train".into());
    let checkpoint: PathBuf = kv.get("checkpoint")?.unwrap_or_else(|| "model.ckpt".into());
    let log: PathBuf = kv.get("log")?.unwrap_or_else(|| "loss.csv".into());
    let every: u64 = kv.get("checkpoint_every")?.unwrap_or(0);

    let manifest = DatasetManifest::load(&manifest_path)?;
    for e in &manifest.entries {
        if !e.gt.exists() {
            return Err(Error::Config(format!("manifest references missing {}", e.gt.display())));
        }
    }
    let ds = Dataset::from_manifest(&manifest, Some(&split), cfg.model.grid, cfg.model.hist_bins, cfg.seed)?;
    eprintln!(
        "training on {} examples for {} iterations (seed {})",
        ds.examples.len(),
        cfg.iterations,
        cfg.seed
    );
    let out = TrainOutputs {
        checkpoint,
        log_csv: log,
        checkpoint_every: every,
    };
    let summary = run_train(cfg, &ds, &out)?;
    if let Some(last) = &summary.last {
        eprintln!(
            "done: {} iterations, last total {:.6} (l1 {:.6})",
            summary.iterations, last.total, last.l1
        );
    }
    Ok(())
}

fn parse_views(specs: &[String]) -> Result<Option<Vec<ViewIndex>>> {
    let mut out = Vec::new();
    for part in specs.iter().flat_map(|s| s.split(';')).map(str::trim).filter(|s| !s.is_empty()) {
        let parsed = part
            .split_once(',')
            .and_then(|(u, v)| Some(ViewIndex::new(u.trim().parse().ok()?, v.trim().parse().ok()?)));
        out.push(parsed.ok_or_else(|| Error::Config(format!("bad view `{part}`, expected U,V")))?);
    }
    Ok((!out.is_empty()).then_some(out))
}

fn crop_even(lf: &LightField) -> LightField {
    let (u, v, h, w) = lf.dims();
    LightField::from_fn(u, v, h & !1, w & !1, |uu, vv, c, y, x| lf.at(uu, vv, c, y, x))
}

/// Fits `lf` to a model's working grid: an exact working grid gets a
/// replicated ring, a larger grid is cropped around its centre.
fn to_working(lf: &LightField, grid: usize) -> Result<WorkingLf> {
    let (u, v, _, _) = lf.dims();
    if u == grid && v == grid {
        Ok(WorkingLf::replicate_ring(lf))
    } else if u >= grid + 2 && v >= grid + 2 {
        crop_central_grid(lf, grid)
    } else {
        Err(Error::Shape(format!(
            "checkpoint expects a {grid}x{grid} working grid (or at least {0}x{0} views), input has {u}x{v}",
            grid + 2
        )))
    }
}

fn restore(a: RestoreArgs) -> Result<()> {
    let model: L3fnet<f32> = L3fnet::load(&a.checkpoint)?;
    let mut lf = read_lf4(&a.input)?;
    if a.crop_even {
        lf = crop_even(&lf);
    } else if lf.height() % 2 == 1 || lf.width() % 2 == 1 {
        return Err(Error::Shape(format!(
            "views are {}x{}; the model needs even sizes (use --crop-even)",
            lf.height(),
            lf.width()
        )));
    }
    let dark = to_working(&lf, model.config().grid)?;
    let opts = RestoreOptions {
        views: parse_views(&a.views)?,
        use_hist: !a.no_hist,
        mode: a.amp_mode,
        workers: a.workers,
    };
    let restored = restore_lf(&model, &dark, &opts)?;
    let out = restored.to_light_field()?;
    write_lf4(&out, &a.output)?;
    if let Some(dir) = &a.png_dir {
        export_views(&out, dir)?;
    }
    if let Some(g) = restored.gamma {
        eprintln!("predicted gamma {g:.4}");
    }
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let report = l3f::metrics::evaluate(&read_lf4(&a.a)?, &read_lf4(&a.b)?)?;
    let json = report.to_json();
    match &a.out {
        Some(p) => std::fs::write(p, format!("{json}\n"))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn align(a: AlignArgs) -> Result<()> {
    let cfg = AlignConfig {
        ratio: a.ratio,
        seed: a.seed,
        ..AlignConfig::default()
    };
    let report = estimate_misalignment(&read_image(&a.gt)?, &read_image(&a.dark)?, a.preamp, &cfg)?;
    print_json(&report)
}

fn pseudo(cmd: PseudoCmd) -> Result<()> {
    match cmd {
        PseudoCmd::Pack {
            input,
            block,
            output,
            crop,
        } => {
            let mut img = read_image(&input)?;
            if crop {
                img = crop_to_multiple(&img, block)?;
            }
            write_lf4(pack(&img, block)?.light_field(), output)
        }
        PseudoCmd::Unpack { input, output } => {
            let p = PseudoLf::from_light_field(read_lf4(&input)?)?;
            write_image(&unpack(&p)?, output)
        }
        PseudoCmd::Field {
            block,
            probe,
            checkpoint,
            seed,
        } => {
            let model = match checkpoint {
                Some(p) => {
                    let m: L3fnet<f32> = L3fnet::load(p)?;
                    if m.config().grid != block {
                        return Err(Error::Shape(format!(
                            "checkpoint grid {} differs from block {block}",
                            m.config().grid
                        )));
                    }
                    m
                }
                None => {
                    let cfg = ModelConfig {
                        grid: block,
                        ..ModelConfig::default()
                    };
                    let mut m = L3fnet::new(cfg, seed)?;
                    m.randomize_output(seed.wrapping_add(1));
                    m
                }
            };
            print_json(&measure_model_receptive_field(&model, probe, seed)?)
        }
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = ModelConfig {
        s1_blocks: a.s1_blocks,
        s2_blocks: a.s2_blocks,
        channels: a.channels,
        transpose_channels: a.channels,
        grid: a.grid,
        hist_bins: 10,
    };
    let opts = GradcheckOptions {
        max_per_block: a.max_per_block,
        seed: a.seed,
        ..GradcheckOptions::default()
    };
    let report = gradient_check(cfg, a.size, a.seed, &opts)?;
    let blocks: Vec<_> = report
        .blocks
        .iter()
        .map(|b| {
            serde_json::json!({
                "name": b.name,
                "checked": b.checked,
                "skipped": b.skipped,
                "max_rel_err": b.max_rel_err,
            })
        })
        .collect();
    let passed = report.passed(a.tol);
    print_json(&serde_json::json!({
        "max_rel_err": report.max_rel_err(),
        "checked": report.checked(),
        "tolerance": a.tol,
        "passed": passed,
        "blocks": blocks,
    }))?;
    if passed {
        Ok(())
    } else {
        Err(Error::Nn(NnError::NonFiniteGradient(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err(),
            a.tol
        ))))
    }
}

fn epi(a: EpiArgs) -> Result<()> {
    let lf = read_lf4(&a.input)?;
    let e = extract_epi(&lf, a.orientation, a.view, a.coord)?;
    write_image(&e.image, &a.output)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => train(a),
        Cmd::Restore(a) => restore(a),
        Cmd::Metrics(a) => metrics(a),
        Cmd::Align(a) => align(a),
        Cmd::Pseudo(c) => pseudo(c),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Epi(a) => epi(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
