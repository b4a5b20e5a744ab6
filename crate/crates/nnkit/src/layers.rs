use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamKind, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    TransposedConv,
    FullyConnected,
    Resblock,
}

/// Static description of one layer, stored in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: usize,
}

impl LayerSpec {
    /// Stride-1 layers use "same" padding `⌊k/2⌋`; stride-2 layers too, so
    /// even extents halve exactly.
    pub fn conv(name: impl Into<String>, kernel: usize, stride: usize, cin: usize, cout: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv,
            kernel,
            stride,
            in_channels: cin,
            out_channels: cout,
            padding: kernel / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| {
            Err(NnError::Unsupported {
                op: "layer spec",
                detail: format!("{}: {detail}", self.name),
            })
        };
        if self.kernel == 0 {
            return bad("kernel must be >= 1".into());
        }
        if !(1..=2).contains(&self.stride) {
            return bad(format!("stride {} not in {{1, 2}}", self.stride));
        }
        if self.kind == LayerKind::TransposedConv && (self.kernel != 2 || self.stride != 2) {
            return bad("transposed conv supports only k=2, s=2".into());
        }
        if self.kind == LayerKind::Resblock && self.in_channels != self.out_channels {
            return bad("resblock needs equal in/out channels".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: LayerSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<T: Scalar>(spec: LayerSpec, ps: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let weight = ps.add_fan_in_normal(
            format!("{}.weight", spec.name),
            [k, k, spec.in_channels, spec.out_channels],
            k * k * spec.in_channels,
            rng,
        );
        let bias = ps.add(
            format!("{}.bias", spec.name),
            ParamKind::Bias,
            Tensor::zeros([spec.out_channels]),
        );
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.conv2d(x, w, b, self.spec.stride, self.spec.padding)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub spec: LayerSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2x2 {
    pub fn new<T: Scalar>(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spec = LayerSpec {
            name: name.into(),
            kind: LayerKind::TransposedConv,
            kernel: 2,
            stride: 2,
            in_channels: cin,
            out_channels: cout,
            padding: 0,
        };
        spec.validate()?;
        let weight = ps.add_fan_in_normal(format!("{}.weight", spec.name), [cin, 2, 2, cout], cin, rng);
        let bias = ps.add(format!("{}.bias", spec.name), ParamKind::Bias, Tensor::zeros([cout]));
        Ok(ConvTranspose2x2 { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.conv_transpose2x2(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub spec: LayerSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        name: impl Into<String>,
        n_in: usize,
        n_out: usize,
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spec = LayerSpec {
            name: name.into(),
            kind: LayerKind::FullyConnected,
            kernel: 1,
            stride: 1,
            in_channels: n_in,
            out_channels: n_out,
            padding: 0,
        };
        let weight = ps.add_fan_in_normal(format!("{}.weight", spec.name), [n_out, n_in], n_in, rng);
        let bias = ps.add(format!("{}.bias", spec.name), ParamKind::Bias, Tensor::zeros([n_out]));
        Ok(Linear { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.linear(x, w, b)
    }
}

/// `x + conv3×3(relu(conv3×3(x)))`, stride 1, no normalization.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub spec: LayerSpec,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        name: impl Into<String>,
        channels: usize,
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let name = name.into();
        let spec = LayerSpec {
            name: name.clone(),
            kind: LayerKind::Resblock,
            kernel: 3,
            stride: 1,
            in_channels: channels,
            out_channels: channels,
            padding: 1,
        };
        spec.validate()?;
        let conv1 = Conv2d::new(LayerSpec::conv(format!("{name}.conv1"), 3, 1, channels, channels), ps, rng)?;
        let conv2 = Conv2d::new(LayerSpec::conv(format!("{name}.conv2"), 3, 1, channels, channels), ps, rng)?;
        Ok(ResBlock { spec, conv1, conv2 })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).get(2).copied().unwrap_or(0);
        if c != self.spec.in_channels {
            return Err(crate::error::shape_err(
                "resblock",
                format!("input has {c} channels, block expects {}", self.spec.in_channels),
            ));
        }
        let h = self.conv1.forward(g, ps, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, ps, h)?;
        g.add(x, h)
    }
}
