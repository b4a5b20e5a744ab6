//! The two-stage restoration network and its histogram-driven amplifier.
//!
//! Stage I (global representation block) sees every working view at once and
//! produces a half-resolution latent. Stage II (view reconstruction block)
//! restores one view from its four neighbours and that latent, adding the
//! result to the (amplified) input view through a long skip.

use std::sync::Arc;

use nnkit::{
    gradcheck, Checkpoint, Conv2d, ConvTranspose2x2, GradReport, GradcheckOptions, Graph, LayerSpec,
    Linear, ParamId, ParamKind, ParamSet, ResBlock, Scalar, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::lf::{Image, LightField, RingLayout, ViewIndex, WorkingLf, CHANNELS};

/// Widths of the histogram MLP after its `3L` input.
pub const HIST_WIDTHS: [usize; 4] = [200, 100, 50, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Residual blocks in stage I (M).
    pub s1_blocks: usize,
    /// Residual blocks in stage II (N).
    pub s2_blocks: usize,
    /// Residual width C, split evenly between the view features and the latent.
    pub channels: usize,
    /// Output width of the transposed convolution (CT).
    pub transpose_channels: usize,
    /// Working grid is `grid × grid` views.
    pub grid: usize,
    /// Histogram bins per colour channel (L).
    pub hist_bins: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            s1_blocks: 4,
            s2_blocks: 6,
            channels: 128,
            transpose_channels: 128,
            grid: 8,
            hist_bins: 100,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 6] = [
        "s1_blocks",
        "s2_blocks",
        "channels",
        "transpose_channels",
        "grid",
        "hist_bins",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.s2_blocks == 0 {
            return bad("s2_blocks must be at least 1".into());
        }
        if self.channels < 2 || self.channels % 2 != 0 {
            return bad(format!("channels = {} must be even and >= 2", self.channels));
        }
        if self.transpose_channels == 0 || self.grid == 0 {
            return bad("transpose_channels and grid must be positive".into());
        }
        if self.hist_bins < 2 {
            return bad(format!("hist_bins = {} must be >= 2", self.hist_bins));
        }
        Ok(())
    }

    /// Width of the stage I latent and of the stage II view features.
    pub fn half_channels(&self) -> usize {
        self.channels / 2
    }

    /// Channels of the stacked working grid.
    pub fn input_channels(&self) -> usize {
        CHANNELS * self.grid * self.grid
    }

    /// Applies any of [`Self::KEYS`] found in `kv`.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.update("s1_blocks", &mut self.s1_blocks)?;
        kv.update("s2_blocks", &mut self.s2_blocks)?;
        kv.update("channels", &mut self.channels)?;
        kv.update("transpose_channels", &mut self.transpose_channels)?;
        kv.update("grid", &mut self.grid)?;
        kv.update("hist_bins", &mut self.hist_bins)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("s1_blocks", self.s1_blocks);
        kv.set("s2_blocks", self.s2_blocks);
        kv.set("channels", self.channels);
        kv.set("transpose_channels", self.transpose_channels);
        kv.set("grid", self.grid);
        kv.set("hist_bins", self.hist_bins);
        kv
    }
}

/// How the predicted factor is applied to the dark input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmpMode {
    /// `γ · L`
    #[default]
    Linear,
    /// `L^γ`
    Gamma,
}

impl std::str::FromStr for AmpMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(AmpMode::Linear),
            "gamma" => Ok(AmpMode::Gamma),
            _ => Err(format!("unknown amplification mode `{s}` (linear | gamma)")),
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    grb_head: [Conv2d; 2],
    grb_blocks: Vec<ResBlock>,
    grb_tail: Conv2d,
    vrb_head: [Conv2d; 2],
    vrb_blocks: Vec<ResBlock>,
    vrb_up: ConvTranspose2x2,
    vrb_out: Conv2d,
    hist: Vec<Linear>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    layers: Vec<LayerSpec>,
}

/// Network parameters plus the layer wiring.
#[derive(Clone, Debug)]
pub struct L3fnet<T: Scalar> {
    config: ModelConfig,
    params: ParamSet<T>,
    layers: Layers,
}

impl<T: Scalar> L3fnet<T> {
    /// Fan-in normal initialization from `seed`; the last stage II convolution
    /// starts at zero so the untrained network passes the input view through.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let (c, c2) = (config.channels, config.half_channels());
        let conv = |name: &str, k, s, cin, cout, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng| {
            Conv2d::new(LayerSpec::conv(name, k, s, cin, cout), ps, rng)
        };

        let grb_head = [
            conv("grb.head1", 7, 1, config.input_channels(), c2, &mut ps, &mut rng)?,
            conv("grb.head2", 3, 2, c2, c, &mut ps, &mut rng)?,
        ];
        let grb_blocks = (0..config.s1_blocks)
            .map(|i| ResBlock::new(format!("grb.block{i}"), c, &mut ps, &mut rng))
            .collect::<nnkit::Result<Vec<_>>>()?;
        let grb_tail = conv("grb.tail", 1, 1, c, c2, &mut ps, &mut rng)?;

        let n = 5 * CHANNELS;
        let vrb_head = [
            conv("vrb.head1", 7, 1, n, n, &mut ps, &mut rng)?,
            conv("vrb.head2", 3, 2, n, c2, &mut ps, &mut rng)?,
        ];
        let vrb_blocks = (0..config.s2_blocks)
            .map(|i| ResBlock::new(format!("vrb.block{i}"), c, &mut ps, &mut rng))
            .collect::<nnkit::Result<Vec<_>>>()?;
        let vrb_up = ConvTranspose2x2::new("vrb.up", c, config.transpose_channels, &mut ps, &mut rng)?;
        let vrb_out = conv("vrb.out", 3, 1, config.transpose_channels, CHANNELS, &mut ps, &mut rng)?;
        let w = ps.value_mut(vrb_out.weight);
        w.data_mut().fill(T::zero());

        let mut hist = Vec::new();
        let mut width = CHANNELS * config.hist_bins;
        for (i, &out) in HIST_WIDTHS.iter().enumerate() {
            hist.push(Linear::new(format!("hist.fc{}", i + 1), width, out, &mut ps, &mut rng)?);
            width = out;
        }

        Ok(L3fnet {
            config,
            params: ps,
            layers: Layers {
                grb_head,
                grb_blocks,
                grb_tail,
                vrb_head,
                vrb_blocks,
                vrb_up,
                vrb_out,
                hist,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Weight of the final stage II convolution (zero at initialization).
    pub fn output_weight(&self) -> ParamId {
        self.layers.vrb_out.weight
    }

    /// Re-draws the final stage II convolution from a fan-in normal, for
    /// probes that need every path through the network to be live.
    pub fn randomize_output(&mut self, seed: u64) {
        let spec = &self.layers.vrb_out.spec;
        let fan_in = spec.kernel * spec.kernel * spec.in_channels;
        let mut tmp = ParamSet::<T>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = tmp.add_fan_in_normal("w", self.params.value(self.output_weight()).shape().to_vec(), fan_in, &mut rng);
        self.params.set_value(self.output_weight(), tmp.value(id).clone());
    }

    /// Every layer in parameter order; residual blocks are listed as a unit.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let l = &self.layers;
        let mut out: Vec<LayerSpec> = l.grb_head.iter().map(|c| c.spec.clone()).collect();
        out.extend(l.grb_blocks.iter().map(|b| b.spec.clone()));
        out.push(l.grb_tail.spec.clone());
        out.extend(l.vrb_head.iter().map(|c| c.spec.clone()));
        out.extend(l.vrb_blocks.iter().map(|b| b.spec.clone()));
        out.push(l.vrb_up.spec.clone());
        out.push(l.vrb_out.spec.clone());
        out.extend(l.hist.iter().map(|f| f.spec.clone()));
        out
    }

    /// Same wiring over another set of values for the same parameters.
    pub fn with_params(&self, params: ParamSet<T>) -> Result<Self> {
        let same = params.len() == self.params.len()
            && params
                .iter()
                .zip(self.params.iter())
                .all(|((_, a), (_, b))| a.name == b.name && a.value.shape() == b.value.shape());
        if !same {
            return Err(Error::Shape("parameter set does not match the network".into()));
        }
        Ok(L3fnet {
            config: self.config,
            params,
            layers: self.layers.clone(),
        })
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> L3fnet<U> {
        let mut ps = ParamSet::new();
        for (_, p) in self.params.iter() {
            ps.add(p.name.clone(), p.kind, p.value.cast());
        }
        L3fnet {
            config: self.config,
            params: ps,
            layers: self.layers.clone(),
        }
    }

    /// Stage I: `[h, w, 3n²]` working stack → `[h/2, w/2, C/2]` latent.
    pub fn grb(&self, g: &mut Graph<T>, stacked: Var) -> Result<Var> {
        let (h, w, c) = g.value(stacked).hwc()?;
        check_even(h, w)?;
        if c != self.config.input_channels() {
            return Err(Error::Shape(format!(
                "stage I expects {} channels, got {c}",
                self.config.input_channels()
            )));
        }
        let ps = &self.params;
        let l = &self.layers;
        let mut x = l.grb_head[0].forward(g, ps, stacked)?;
        x = g.relu(x);
        x = l.grb_head[1].forward(g, ps, x)?;
        x = g.relu(x);
        for b in &l.grb_blocks {
            x = b.forward(g, ps, x)?;
        }
        Ok(l.grb_tail.forward(g, ps, x)?)
    }

    /// Stage II: restores the view whose `[center, left, up, right, down]`
    /// stack is `neighbors`, adding the residual to `center`.
    pub fn vrb(&self, g: &mut Graph<T>, neighbors: Var, latent: Var, center: Var) -> Result<Var> {
        let (h, w, c) = g.value(neighbors).hwc()?;
        check_even(h, w)?;
        if c != 5 * CHANNELS {
            return Err(Error::Shape(format!("neighbour stack has {c} channels, expected 15")));
        }
        if g.shape(center) != [h, w, CHANNELS] {
            return Err(Error::Shape(format!(
                "center view {:?} vs neighbour stack {h}x{w}",
                g.shape(center)
            )));
        }
        let lat = g.value(latent).hwc()?;
        if lat != (h / 2, w / 2, self.config.half_channels()) {
            return Err(Error::Shape(format!(
                "latent {lat:?} does not match a {h}x{w} view (expected {}x{}x{})",
                h / 2,
                w / 2,
                self.config.half_channels()
            )));
        }
        let ps = &self.params;
        let l = &self.layers;
        let mut x = l.vrb_head[0].forward(g, ps, neighbors)?;
        x = g.relu(x);
        x = l.vrb_head[1].forward(g, ps, x)?;
        x = g.relu(x);
        x = g.concat_channels(&[x, latent])?;
        for b in &l.vrb_blocks {
            x = b.forward(g, ps, x)?;
        }
        x = l.vrb_up.forward(g, ps, x)?;
        x = g.relu(x);
        x = l.vrb_out.forward(g, ps, x)?;
        Ok(g.add(x, center)?)
    }

    /// Histogram MLP: `[3L]` → one-element γ > 0.
    pub fn gamma(&self, g: &mut Graph<T>, hist: Var) -> Result<Var> {
        let want = CHANNELS * self.config.hist_bins;
        if g.value(hist).len() != want {
            return Err(Error::Shape(format!(
                "histogram has {} entries, expected {want}",
                g.value(hist).len()
            )));
        }
        let last = self.layers.hist.len() - 1;
        let mut x = hist;
        for (i, fc) in self.layers.hist.iter().enumerate() {
            x = fc.forward(g, &self.params, x)?;
            x = if i < last { g.relu(x) } else { g.softplus(x) };
        }
        Ok(x)
    }

    /// `Σ|w|` over all weight blocks (biases excluded).
    pub fn weight_penalty(&self, g: &mut Graph<T>) -> Result<Var> {
        let ids: Vec<ParamId> = self
            .params
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Weight)
            .map(|(id, _)| id)
            .collect();
        let mut total: Option<Var> = None;
        for id in ids {
            let w = g.param(&self.params, id);
            let s = g.abs_sum(w);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        Ok(total.expect("network has weights"))
    }

    /// Amplified full stack as a graph node: the dark stack times (or raised
    /// to) the γ predicted from `hist`. Returns `(stack, γ)`.
    pub fn amplified_stack(
        &self,
        g: &mut Graph<T>,
        dark_stack: Arc<Tensor<T>>,
        hist: &[T],
        mode: AmpMode,
    ) -> Result<(Var, Var)> {
        let h = g.constant(Tensor::new([hist.len()], hist.to_vec())?);
        let gamma = self.gamma(g, h)?;
        let stack = match mode {
            AmpMode::Linear => {
                let x = g.constant_arc(dark_stack);
                g.scale(x, gamma)?
            }
            AmpMode::Gamma => g.pow_by(dark_stack, gamma)?,
        };
        Ok((stack, gamma))
    }

    /// Restores `views` of the working grid from the full ringed stack `full`.
    pub fn forward_views(
        &self,
        g: &mut Graph<T>,
        full: Var,
        layout: RingLayout,
        views: &[ViewIndex],
    ) -> Result<Vec<Var>> {
        let working = g.select_channels(full, &layout.working_channels())?;
        let latent = self.grb(g, working)?;
        views
            .iter()
            .map(|&at| {
                let nb = g.select_channels(full, &layout.neighbor_channels(at)?)?;
                let center = g.select_channels(nb, &[0, 1, 2])?;
                self.vrb(g, nb, latent, center)
            })
            .collect()
    }

    /// Stage I on a plain tensor.
    pub fn grb_forward(&self, stacked: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(stacked.clone());
        let y = self.grb(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Stage II on plain tensors.
    pub fn vrb_forward(&self, neighbors: &Tensor<T>, latent: &Tensor<T>, center: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let nb = g.constant(neighbors.clone());
        let lat = g.constant(latent.clone());
        let c = g.constant(center.clone());
        let y = self.vrb(&mut g, nb, lat, c)?;
        Ok(g.value(y).clone())
    }

    pub fn predict_gamma(&self, hist: &[T]) -> Result<T> {
        let mut g = Graph::new();
        let h = g.constant(Tensor::new([hist.len()], hist.to_vec())?);
        let y = self.gamma(&mut g, h)?;
        Ok(g.value(y).item())
    }
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Precondition(format!(
            "spatial extent {h}x{w} must be even and non-empty"
        )));
    }
    Ok(())
}

impl L3fnet<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let manifest = Manifest {
            config: self.config,
            layers: self.layer_specs(),
        };
        Checkpoint::from_params(
            serde_json::to_string(&manifest).expect("manifest serializes"),
            &self.params,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&ck.manifest)?;
        let mut model = L3fnet::new(manifest.config, 0)?;
        if model.layer_specs() != manifest.layers {
            return Err(Error::Config("checkpoint layer list does not match its configuration".into()));
        }
        ck.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Normalized `L`-bin histogram of each colour channel over every view,
/// concatenated R, G, B. Values are clamped into `[0, 1]`; bin `i` covers
/// `[i/L, (i+1)/L)` with 1.0 in the last bin.
pub fn rgb_histogram(lf: &LightField, bins: usize) -> Result<Vec<f32>> {
    if bins < 2 {
        return Err(Error::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let (u, v, h, w) = lf.dims();
    let hw = h * w;
    let mut counts = vec![0u64; CHANNELS * bins];
    for view in lf.data().chunks_exact(CHANNELS * hw) {
        for c in 0..CHANNELS {
            for &x in &view[c * hw..][..hw] {
                let b = ((x.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1);
                counts[c * bins + b] += 1;
            }
        }
    }
    let total = (u * v * hw).max(1) as f64;
    Ok(counts.iter().map(|&n| (n as f64 / total) as f32).collect())
}

fn check_gamma(gamma: f32) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Precondition(format!("amplification factor {gamma} must be positive")));
    }
    Ok(())
}

/// `γ · L`, unclamped.
pub fn amplify(lf: &LightField, gamma: f32) -> Result<LightField> {
    check_gamma(gamma)?;
    Ok(lf.map(|x| gamma * x))
}

/// `L^γ`.
pub fn gamma_correct(lf: &LightField, gamma: f32) -> Result<LightField> {
    check_gamma(gamma)?;
    Ok(lf.map(|x| if x > 0.0 { x.powf(gamma) } else { 0.0 }))
}

pub fn apply_amp(lf: &LightField, gamma: f32, mode: AmpMode) -> Result<LightField> {
    match mode {
        AmpMode::Linear => amplify(lf, gamma),
        AmpMode::Gamma => gamma_correct(lf, gamma),
    }
}

#[derive(Clone, Debug)]
pub struct RestoreOptions {
    /// Working-grid views to restore; `None` restores all of them.
    pub views: Option<Vec<ViewIndex>>,
    /// Amplify with the predicted γ before restoring.
    pub use_hist: bool,
    pub mode: AmpMode,
    /// Threads for per-view restoration; 0 uses the global pool.
    pub workers: usize,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        RestoreOptions {
            views: None,
            use_hist: true,
            mode: AmpMode::Linear,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Restored {
    pub gamma: Option<f32>,
    /// Working grid size of the source.
    pub grid: (usize, usize),
    pub views: Vec<(ViewIndex, Image)>,
}

impl Restored {
    pub fn get(&self, at: ViewIndex) -> Option<&Image> {
        self.views.iter().find(|(i, _)| *i == at).map(|(_, img)| img)
    }

    /// The full working grid when every view was restored, otherwise a
    /// `1 × k` strip in request order.
    pub fn to_light_field(&self) -> Result<LightField> {
        let (nu, nv) = self.grid;
        let full = self.views.len() == nu * nv
            && self
                .views
                .iter()
                .enumerate()
                .all(|(k, (at, _))| *at == ViewIndex::new(k / nv, k % nv));
        let imgs: Vec<Image> = self.views.iter().map(|(_, i)| i.clone()).collect();
        if full {
            LightField::from_views(nu, nv, &imgs)
        } else {
            LightField::from_views(1, imgs.len(), &imgs)
        }
    }
}

/// Restores working views of `dark`: optional histogram amplification, one
/// stage I pass, then stage II per view. Views run concurrently and the
/// result does not depend on the thread count.
pub fn restore_lf(model: &L3fnet<f32>, dark: &WorkingLf, opts: &RestoreOptions) -> Result<Restored> {
    let layout = dark.layout();
    let views = match &opts.views {
        Some(v) => v.clone(),
        None => layout.working_views(),
    };
    for &at in &views {
        if at.u >= layout.nu || at.v >= layout.nv {
            return Err(Error::OutOfRange(format!(
                "view {at} outside the {}x{} working grid",
                layout.nu, layout.nv
            )));
        }
    }
    if layout.nu != model.config.grid || layout.nv != model.config.grid {
        return Err(Error::Shape(format!(
            "model expects a {0}x{0} working grid, input has {1}x{2}",
            model.config.grid, layout.nu, layout.nv
        )));
    }

    let mut gamma = None;
    let input = if opts.use_hist {
        let hist = rgb_histogram(dark.ringed(), model.config.hist_bins)?;
        let g = model.predict_gamma(&hist)?;
        gamma = Some(g);
        WorkingLf::from_ringed(apply_amp(dark.ringed(), g, opts.mode)?)?
    } else {
        dark.clone()
    };
    let full = Arc::new(input.full_stack());

    let latent = {
        let mut g = Graph::new();
        let f = g.constant_arc(full.clone());
        let w = g.select_channels(f, &layout.working_channels())?;
        let lat = model.grb(&mut g, w)?;
        Arc::new(g.value(lat).clone())
    };

    let one = |at: ViewIndex| -> Result<(ViewIndex, Image)> {
        let mut g = Graph::new();
        let f = g.constant_arc(full.clone());
        let lat = g.constant_arc(latent.clone());
        let nb = g.select_channels(f, &layout.neighbor_channels(at)?)?;
        let center = g.select_channels(nb, &[0, 1, 2])?;
        let y = model.vrb(&mut g, nb, lat, center)?;
        Ok((at, g.value(y).clone()))
    };
    let run = || views.par_iter().map(|&at| one(at)).collect::<Result<Vec<_>>>();
    let restored = if opts.workers == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?
    };
    Ok(Restored {
        gamma,
        grid: (layout.nu, layout.nv),
        views: restored,
    })
}

/// Finite-difference check of the whole network on random data in 64-bit
/// arithmetic: histogram module, γ amplification, both stages over every
/// working view, L1 to a random target plus a small weight penalty. The
/// output convolution and all biases are drawn non-zero so every block
/// receives gradient.
pub fn gradient_check(config: ModelConfig, size: usize, seed: u64, opts: &GradcheckOptions) -> Result<GradReport> {
    let mut base: L3fnet<f32> = L3fnet::new(config, seed)?;
    base.randomize_output(seed.wrapping_add(1));
    let mut model = base.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let biases: Vec<ParamId> = model
        .params
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Bias)
        .map(|(id, _)| id)
        .collect();
    for id in biases {
        let shape = model.params.value(id).shape().to_vec();
        model.params.set_value(id, Tensor::from_fn(shape, |_| rng.random_range(-0.05..0.05)));
    }

    let n = config.grid + 2;
    let mut lf = |scale: f32| -> Result<WorkingLf> {
        let data = (0..n * n * CHANNELS * size * size).map(|_| scale * rng.random::<f32>()).collect();
        WorkingLf::from_ringed(LightField::new(n, n, size, size, data)?)
    };
    let dark = lf(0.2)?;
    let gt = lf(1.0)?;
    let stack = Arc::new(dark.full_stack().cast::<f64>());
    let hist: Vec<f64> = rgb_histogram(dark.ringed(), config.hist_bins)?
        .iter()
        .map(|&v| v as f64)
        .collect();
    let views = dark.working_views();
    let targets = views
        .iter()
        .map(|&at| Ok(Arc::new(gt.view(at)?.cast::<f64>())))
        .collect::<Result<Vec<_>>>()?;
    let layout = dark.layout();

    let mut ps = model.params.clone();
    let failure = std::cell::RefCell::new(None);
    let report = gradcheck(&mut ps, opts, |g, ps| {
        let mut run = || -> Result<Var> {
            let net = model.with_params(ps.clone())?;
            let (full, _) = net.amplified_stack(g, stack.clone(), &hist, AmpMode::Linear)?;
            let outs = net.forward_views(g, full, layout, &views)?;
            let p = net.weight_penalty(g)?;
            let mut total = g.mul_const(p, 1e-3);
            for (&o, t) in outs.iter().zip(&targets) {
                let l = g.l1_mean(o, t.clone())?;
                total = g.add(total, l)?;
            }
            Ok(total)
        };
        run().map_err(|e| {
            let detail = e.to_string();
            *failure.borrow_mut() = Some(e);
            nnkit::NnError::Unsupported { op: "l3fnet", detail }
        })
    });
    match (report, failure.into_inner()) {
        (Ok(r), _) => Ok(r),
        (Err(_), Some(e)) => Err(e),
        (Err(e), None) => Err(e.into()),
    }
}
