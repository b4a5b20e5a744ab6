//! Training loop: sample → amplify → restore a subset of views → weighted
//! L1 + contextual + weight penalty → Adam.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nnkit::{Adam, AdamConfig, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::lf::ViewIndex;
use crate::loss::{contextual_loss_graph, loss_schedule, CxConfig, LossWeights};
use crate::model::{AmpMode, L3fnet, ModelConfig};
use crate::synth::{sample_batch, Batch, Dataset, SampleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub cx: CxConfig,
    pub adam: AdamConfig,
    pub sample: SampleConfig,
    pub iterations: u64,
    pub seed: u64,
    /// Train the histogram module and amplify inputs with its γ.
    pub use_hist: bool,
    pub amp_mode: AmpMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            cx: CxConfig::default(),
            adam: AdamConfig::default(),
            sample: SampleConfig::default(),
            iterations: 100_000,
            seed: 0,
            use_hist: true,
            amp_mode: AmpMode::Linear,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "s1_blocks",
        "s2_blocks",
        "channels",
        "transpose_channels",
        "grid",
        "hist_bins",
        "alpha1",
        "alpha1_late",
        "alpha2",
        "lambda",
        "switch_iter",
        "cx_patch",
        "cx_stride",
        "cx_bandwidth",
        "lr",
        "patch",
        "views",
        "iterations",
        "seed",
    ];
    pub const EXTRA_KEYS: [&'static str; 6] = ["beta1", "beta2", "adam_eps", "augment", "use_hist", "amp_mode"];

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        let known: Vec<&str> = Self::KEYS.iter().chain(&Self::EXTRA_KEYS).copied().collect();
        kv.check_known(&known)?;
        self.model.apply_kv(kv)?;
        kv.update("alpha1", &mut self.loss.alpha1)?;
        kv.update("alpha1_late", &mut self.loss.alpha1_late)?;
        kv.update("alpha2", &mut self.loss.alpha2)?;
        kv.update("lambda", &mut self.loss.lambda)?;
        kv.update("switch_iter", &mut self.loss.switch_iter)?;
        kv.update("cx_patch", &mut self.cx.patch)?;
        kv.update("cx_stride", &mut self.cx.grid_stride)?;
        kv.update("cx_bandwidth", &mut self.cx.bandwidth)?;
        kv.update("lr", &mut self.adam.lr)?;
        kv.update("beta1", &mut self.adam.beta1)?;
        kv.update("beta2", &mut self.adam.beta2)?;
        kv.update("adam_eps", &mut self.adam.eps)?;
        kv.update("patch", &mut self.sample.patch)?;
        kv.update("views", &mut self.sample.views)?;
        kv.update("augment", &mut self.sample.augment)?;
        kv.update("iterations", &mut self.iterations)?;
        kv.update("seed", &mut self.seed)?;
        kv.update("use_hist", &mut self.use_hist)?;
        kv.update("amp_mode", &mut self.amp_mode)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.cx.validate()?;
        if self.sample.patch == 0 || self.sample.patch % 2 != 0 {
            return Err(Error::Config(format!("patch {} must be even and positive", self.sample.patch)));
        }
        if self.sample.views == 0 {
            return Err(Error::Config("views per step must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        Ok(())
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub l1: f64,
    pub cx: f64,
    pub penalty: f64,
    pub total: f64,
    /// γ of this step's example; NaN when the histogram module is off.
    pub gamma_mean: f64,
}

pub const CSV_HEADER: &str = "iteration,alpha1,alpha2,l1,cx,penalty,total,gamma_mean";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration, self.alpha1, self.alpha2, self.l1, self.cx, self.penalty, self.total, self.gamma_mean
        )
    }
}

/// Objective terms for one example, built on a graph.
pub struct StepGraph {
    pub graph: Graph<f32>,
    pub total: Var,
    pub l1: f64,
    pub cx: f64,
    pub penalty: f64,
    pub gamma: Option<f64>,
}

/// Builds the loss graph of `batch` at iteration `iter`.
pub fn build_step(
    model: &L3fnet<f32>,
    cfg: &TrainConfig,
    batch: &Batch,
    iter: u64,
) -> Result<StepGraph> {
    let (a1, a2) = loss_schedule(iter, &cfg.loss);
    let mut g = Graph::new();
    let dark = Arc::new(batch.low.full_stack());
    let (full, gamma) = if cfg.use_hist {
        let (s, gm) = model.amplified_stack(&mut g, dark, &batch.hist, cfg.amp_mode)?;
        (s, Some(gm))
    } else {
        (g.constant_arc(dark), None)
    };
    let layout = batch.low.layout();
    let outs = model.forward_views(&mut g, full, layout, &batch.views)?;
    let k = outs.len() as f32;

    let mut l1_terms = Vec::with_capacity(outs.len());
    let mut cx_terms = Vec::with_capacity(outs.len());
    for (&out, &at) in outs.iter().zip(&batch.views) {
        let target = Arc::new(batch.gt.view(at)?);
        l1_terms.push(g.l1_mean(out, target.clone())?);
        if a2 > 0.0 {
            cx_terms.push(contextual_loss_graph(&mut g, out, target, &cfg.cx)?);
        }
    }
    let sum = |g: &mut Graph<f32>, xs: &[Var]| -> Result<Var> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = g.add(acc, x)?;
        }
        Ok(g.mul_const(acc, 1.0 / k))
    };
    let l1 = sum(&mut g, &l1_terms)?;
    let mut total = g.mul_const(l1, a1 as f32);
    let mut cx_val = 0.0;
    if !cx_terms.is_empty() {
        let cx = sum(&mut g, &cx_terms)?;
        cx_val = g.value(cx).item() as f64;
        let t = g.mul_const(cx, a2 as f32);
        total = g.add(total, t)?;
    }
    let mut penalty = 0.0;
    if cfg.loss.lambda > 0.0 {
        let p = model.weight_penalty(&mut g)?;
        penalty = g.value(p).item() as f64;
        let t = g.mul_const(p, cfg.loss.lambda as f32);
        total = g.add(total, t)?;
    }
    Ok(StepGraph {
        l1: g.value(l1).item() as f64,
        cx: cx_val,
        penalty,
        gamma: gamma.map(|v| g.value(v).item() as f64),
        total,
        graph: g,
    })
}

pub struct Trainer {
    pub cfg: TrainConfig,
    model: L3fnet<f32>,
    adam: Adam,
    rng: ChaCha8Rng,
    iteration: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = L3fnet::new(cfg.model, cfg.seed)?;
        Ok(Self::with_model(cfg, model))
    }

    /// Continues from existing weights with fresh optimizer state.
    pub fn with_model(cfg: TrainConfig, model: L3fnet<f32>) -> Self {
        Trainer {
            adam: Adam::new(cfg.adam),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed),
            iteration: 0,
            model,
            cfg,
        }
    }

    pub fn model(&self) -> &L3fnet<f32> {
        &self.model
    }

    pub fn into_model(self) -> L3fnet<f32> {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// One optimizer step on a freshly sampled example. Parameters are left
    /// untouched when the loss or any gradient is non-finite.
    pub fn step(&mut self, ds: &Dataset) -> Result<LogRow> {
        let batch = sample_batch(ds, &self.cfg.sample, &mut self.rng)?;
        self.step_on(&batch)
    }

    pub fn step_on(&mut self, batch: &Batch) -> Result<LogRow> {
        let it = self.iteration;
        let (a1, a2) = loss_schedule(it, &self.cfg.loss);
        let sg = build_step(&self.model, &self.cfg, batch, it)?;
        let total = sg.graph.value(sg.total).item() as f64;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss {total} at iteration {it}")));
        }
        self.model.params_mut().zero_grads();
        sg.graph.backward(sg.total, self.model.params_mut())?;
        drop(sg.graph);
        self.adam
            .step(self.model.params_mut())
            .map_err(|e| Error::NonFinite(format!("iteration {it}: {e}")))?;
        self.iteration += 1;
        Ok(LogRow {
            iteration: it,
            alpha1: a1,
            alpha2: a2,
            l1: sg.l1,
            cx: sg.cx,
            penalty: sg.penalty,
            total,
            gamma_mean: sg.gamma.unwrap_or(f64::NAN),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log_csv: PathBuf,
    /// Also checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: u64,
    pub last: Option<LogRow>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::file(path, e)
}

/// Runs `cfg.iterations` steps, appending each to the CSV log and writing the
/// checkpoint at the end. On a non-finite loss the last good weights are
/// checkpointed before the error is returned.
pub fn run_train(cfg: TrainConfig, ds: &Dataset, out: &TrainOutputs) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(cfg)?;
    let file = std::fs::File::create(&out.log_csv).map_err(io_err(&out.log_csv))?;
    let mut log = std::io::BufWriter::new(file);
    writeln!(log, "{CSV_HEADER}").map_err(io_err(&out.log_csv))?;
    let mut last = None;
    while trainer.iteration() < trainer.cfg.iterations {
        match trainer.step(ds) {
            Ok(row) => {
                writeln!(log, "{}", row.to_csv()).map_err(io_err(&out.log_csv))?;
                last = Some(row);
                let n = trainer.iteration();
                if out.checkpoint_every > 0 && n % out.checkpoint_every == 0 {
                    trainer.model().save(&out.checkpoint)?;
                }
            }
            Err(e @ Error::NonFinite(_)) => {
                log.flush().map_err(io_err(&out.log_csv))?;
                trainer.model().save(&out.checkpoint)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    log.flush().map_err(io_err(&out.log_csv))?;
    trainer.model().save(&out.checkpoint)?;
    Ok(TrainSummary {
        iterations: trainer.iteration(),
        last,
    })
}

/// Restores `views` of a batch's working grid with the current weights.
pub fn predict_views(model: &L3fnet<f32>, cfg: &TrainConfig, batch: &Batch, views: &[ViewIndex]) -> Result<Vec<Tensor<f32>>> {
    let mut g = Graph::new();
    let dark = Arc::new(batch.low.full_stack());
    let full = if cfg.use_hist {
        model.amplified_stack(&mut g, dark, &batch.hist, cfg.amp_mode)?.0
    } else {
        g.constant_arc(dark)
    };
    let outs = model.forward_views(&mut g, full, batch.low.layout(), views)?;
    Ok(outs.iter().map(|&v| g.value(v).clone()).collect())
}
