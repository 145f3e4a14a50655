//! Efficient incremental module.
//!
//! An [`EimLayer`] produces `n = s·m` output channels from `m` "intrinsic"
//! channels computed by a dense convolution. The remaining `m·(s-1)`
//! channels come from a frozen 3×3 depthwise "cheap" operation over the
//! intrinsic features, plus (during an incremental phase) a trainable 1×1
//! depthwise adapter summed into the same channels:
//!
//! ```text
//! f'      = conv(x; ω) + b                       [m, h', w']
//! cheap   = dw3x3(f'; φ) + b_φ  (+ dw1x1(f'; Δφ) + b')
//! output  = concat(f', cheap)                    [s·m, h', w']
//! ```
//!
//! Because both depthwise branches read the same input with same padding,
//! the adapter folds exactly into the cheap kernel by adding its 1×1 weight
//! at the centre tap ([`EimLayer::fuse`]).

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::Rng;

pub const CHEAP_KERNEL: usize = 3;
pub const ADAPTER_KERNEL: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EimLayer {
    ratio: usize,
    stride: usize,
    pub intrinsic_kernel: Tensor,
    pub intrinsic_bias: Tensor,
    pub cheap_kernel: Tensor,
    pub cheap_bias: Tensor,
    adapter: Option<Adapter>,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct EimVars {
    pub intrinsic_kernel: Var,
    pub intrinsic_bias: Var,
    pub cheap_kernel: Var,
    pub cheap_bias: Var,
    pub adapter: Option<(Var, Var)>,
}

impl EimVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut v = vec![
            self.intrinsic_kernel,
            self.intrinsic_bias,
            self.cheap_kernel,
            self.cheap_bias,
        ];
        if let Some((k, b)) = self.adapter {
            v.extend([k, b]);
        }
        v
    }
}

pub(crate) fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("finite normal samples")
}

impl EimLayer {
    /// He-initialised layer with `out_channels = s·m` outputs and all
    /// groups trainable.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if ratio < 2 {
            return Err(Error::InvalidArgument(format!(
                "EIM ratio s must be >= 2, got {ratio}"
            )));
        }
        if out_channels == 0 || !out_channels.is_multiple_of(ratio) {
            return Err(Error::InvalidArgument(format!(
                "output channels {out_channels} not divisible by s={ratio}"
            )));
        }
        if kernel.is_multiple_of(2) || in_channels == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid EIM geometry: c={in_channels}, k={kernel}, stride={stride}"
            )));
        }
        let m = out_channels / ratio;
        let cheap = m * (ratio - 1);
        let fan_in = in_channels * kernel * kernel;
        Self::from_parts(
            he_normal(&[m, in_channels, kernel, kernel], fan_in, rng),
            Tensor::zeros(&[m]),
            he_normal(
                &[cheap, CHEAP_KERNEL, CHEAP_KERNEL],
                CHEAP_KERNEL * CHEAP_KERNEL,
                rng,
            ),
            Tensor::zeros(&[cheap]),
            None,
            ratio,
            stride,
        )
        .map(|mut layer| {
            layer.set_base_trainable(true);
            layer
        })
    }

    /// Assembles a layer from explicit tensors, validating every shape.
    pub fn from_parts(
        intrinsic_kernel: Tensor,
        intrinsic_bias: Tensor,
        cheap_kernel: Tensor,
        cheap_bias: Tensor,
        adapter: Option<Adapter>,
        ratio: usize,
        stride: usize,
    ) -> Result<Self> {
        let bad = |detail: String| Err(Error::shape("eim", detail));
        let &[m, _c, k, k2] = intrinsic_kernel.shape() else {
            return bad(format!("intrinsic kernel {:?}", intrinsic_kernel.shape()));
        };
        if k != k2 || k % 2 == 0 {
            return bad(format!("intrinsic kernel must be square and odd, got {k}x{k2}"));
        }
        if ratio < 2 || stride == 0 {
            return Err(Error::InvalidArgument(format!("ratio {ratio}, stride {stride}")));
        }
        if intrinsic_bias.shape() != [m] {
            return bad(format!("intrinsic bias {:?}", intrinsic_bias.shape()));
        }
        let cheap = m * (ratio - 1);
        if cheap_kernel.shape() != [cheap, CHEAP_KERNEL, CHEAP_KERNEL] {
            return bad(format!(
                "cheap kernel {:?}, expected [{cheap},3,3]",
                cheap_kernel.shape()
            ));
        }
        if cheap_bias.shape() != [cheap] {
            return bad(format!("cheap bias {:?}", cheap_bias.shape()));
        }
        if let Some(a) = &adapter {
            if a.kernel.shape() != [cheap, ADAPTER_KERNEL, ADAPTER_KERNEL] || a.bias.shape() != [cheap] {
                return bad(format!(
                    "adapter kernel {:?} / bias {:?}",
                    a.kernel.shape(),
                    a.bias.shape()
                ));
            }
        }
        Ok(Self {
            ratio,
            stride,
            intrinsic_kernel,
            intrinsic_bias,
            cheap_kernel,
            cheap_bias,
            adapter,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.intrinsic_kernel.shape()[1]
    }

    /// `m`, the number of intrinsic channels.
    pub fn intrinsic_channels(&self) -> usize {
        self.intrinsic_kernel.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.ratio * self.intrinsic_channels()
    }

    pub fn kernel_size(&self) -> usize {
        self.intrinsic_kernel.shape()[2]
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut Adapter> {
        self.adapter.as_mut()
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    fn cheap_channels(&self) -> usize {
        self.intrinsic_channels() * (self.ratio - 1)
    }

    /// Installs a zero adapter and freezes every other group.
    pub fn spawn_adapter(&mut self) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::Adapter("layer already has a live adapter".into()));
        }
        let cheap = self.cheap_channels();
        self.adapter = Some(Adapter {
            kernel: Tensor::zeros(&[cheap, ADAPTER_KERNEL, ADAPTER_KERNEL]).trainable(true),
            bias: Tensor::zeros(&[cheap]).trainable(true),
        });
        self.set_base_trainable(false);
        Ok(())
    }

    /// Folds the adapter into the cheap branch and removes it.
    ///
    /// The 1×1 weight lands on the centre tap of each 3×3 kernel and the
    /// adapter bias adds to the cheap bias, so the fused layer computes the
    /// same function as the unfused one with adapters enabled.
    pub fn fuse(&mut self) -> Result<()> {
        let adapter = self
            .adapter
            .take()
            .ok_or_else(|| Error::Adapter("no adapter to fuse".into()))?;
        let taps = CHEAP_KERNEL * CHEAP_KERNEL;
        let centre = (CHEAP_KERNEL / 2) * CHEAP_KERNEL + CHEAP_KERNEL / 2;
        let cheap = self.cheap_kernel.data_mut();
        for (j, delta) in adapter.kernel.data().iter().enumerate() {
            cheap[j * taps + centre] += delta;
        }
        for (b, delta) in self.cheap_bias.data_mut().iter_mut().zip(adapter.bias.data()) {
            *b += delta;
        }
        Ok(())
    }

    /// Sets `requires_grad` on ω, b, φ and the cheap bias.
    pub fn set_base_trainable(&mut self, on: bool) {
        for t in [
            &mut self.intrinsic_kernel,
            &mut self.intrinsic_bias,
            &mut self.cheap_kernel,
            &mut self.cheap_bias,
        ] {
            t.requires_grad = on;
        }
    }

    /// Parameters in a fixed order (adapter last, when present).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.intrinsic_kernel,
            &self.intrinsic_bias,
            &self.cheap_kernel,
            &self.cheap_bias,
        ];
        if let Some(a) = &self.adapter {
            v.extend([&a.kernel, &a.bias]);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.intrinsic_kernel,
            &mut self.intrinsic_bias,
            &mut self.cheap_kernel,
            &mut self.cheap_bias,
        ];
        if let Some(a) = &mut self.adapter {
            v.extend([&mut a.kernel, &mut a.bias]);
        }
        v
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("intrinsic_kernel", &self.intrinsic_kernel),
            ("intrinsic_bias", &self.intrinsic_bias),
            ("cheap_kernel", &self.cheap_kernel),
            ("cheap_bias", &self.cheap_bias),
        ];
        if let Some(a) = &self.adapter {
            v.extend([("adapter_kernel", &a.kernel), ("adapter_bias", &a.bias)]);
        }
        v
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Result<EimVars> {
        Ok(EimVars {
            intrinsic_kernel: tape.param(&self.intrinsic_kernel)?,
            intrinsic_bias: tape.param(&self.intrinsic_bias)?,
            cheap_kernel: tape.param(&self.cheap_kernel)?,
            cheap_bias: tape.param(&self.cheap_bias)?,
            adapter: match &self.adapter {
                Some(a) => Some((tape.param(&a.kernel)?, tape.param(&a.bias)?)),
                None => None,
            },
        })
    }

    /// Records the layer on `tape`. No activation is applied.
    pub fn forward_on(
        &self,
        tape: &mut Tape<'_>,
        vars: &EimVars,
        input: Var,
        adapters_enabled: bool,
    ) -> Result<Var> {
        let c = tape.value(input).shape().first().copied();
        if c != Some(self.in_channels()) {
            return Err(Error::shape(
                "eim_forward",
                format!(
                    "input {:?} for a layer with {} input channels",
                    tape.value(input).shape(),
                    self.in_channels()
                ),
            ));
        }
        let mult = self.ratio - 1;
        let pad = self.kernel_size() / 2;
        let intrinsic = tape.conv2d(
            input,
            vars.intrinsic_kernel,
            vars.intrinsic_bias,
            self.stride,
            pad,
        )?;
        let mut cheap = tape.depthwise_conv2d(intrinsic, vars.cheap_kernel, vars.cheap_bias, mult)?;
        if adapters_enabled {
            let (k, b) = vars
                .adapter
                .ok_or_else(|| Error::Adapter("adapters enabled but layer has none".into()))?;
            let incremental = tape.depthwise_conv2d(intrinsic, k, b, mult)?;
            cheap = tape.add(cheap, incremental)?;
        }
        tape.concat(&[intrinsic, cheap])
    }

    /// Tape-free forward pass.
    pub fn forward(&self, input: &Tensor, adapters_enabled: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let x = tape.constant(input.clone())?;
        let y = self.forward_on(&mut tape, &vars, x, adapters_enabled)?;
        Ok(tape.value(y).clone())
    }

    /// Output spatial size for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel_size();
        let pad = k / 2;
        (
            (h + 2 * pad - k) / self.stride + 1,
            (w + 2 * pad - k) / self.stride + 1,
        )
    }

    /// `m·c·k² + m + m(s-1)·9 + m(s-1)`, plus `2·m(s-1)` with a live adapter.
    pub fn param_count(&self) -> usize {
        let (m, c, k) = (self.intrinsic_channels(), self.in_channels(), self.kernel_size());
        let cheap = self.cheap_channels();
        let adapter = if self.has_adapter() { 2 * cheap } else { 0 };
        m * c * k * k + m + cheap * CHEAP_KERNEL * CHEAP_KERNEL + cheap + adapter
    }

    /// Multiply-accumulates for one `h×w` input (biases excluded).
    pub fn mac_count(&self, h: usize, w: usize) -> usize {
        let (oh, ow) = self.output_hw(h, w);
        let plane = oh * ow;
        let (m, c, k) = (self.intrinsic_channels(), self.in_channels(), self.kernel_size());
        let cheap = self.cheap_channels();
        let adapter = if self.has_adapter() { cheap * plane } else { 0 };
        m * c * k * k * plane + cheap * CHEAP_KERNEL * CHEAP_KERNEL * plane + adapter
    }
}

/// Parameters of a dense `k×k` convolution with bias.
pub fn plain_conv_params(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
    out_channels * in_channels * kernel * kernel + out_channels
}

pub fn plain_conv_macs(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    out_h: usize,
    out_w: usize,
) -> usize {
    out_channels * in_channels * kernel * kernel * out_h * out_w
}
