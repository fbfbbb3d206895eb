//! Layer building blocks over the autodiff tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Seeded parameter factory writing into a [`ParamStore`].
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).expect("finite positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(normal.sample(rng)));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store
            .add(name, Tensor::full(shape.to_vec(), T::from_f64_lossy(value)))
    }
}

/// Square-kernel convolution with "same" padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        (c_in, c_out): (usize, usize),
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = init.gaussian(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            (2.0 / fan_in).sqrt(),
        )?;
        let bias = if bias {
            Some(init.constant(&format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.kernel / 2)
    }
}

/// Group normalisation with at most eight channels per group.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Largest group size `≤ 8` dividing `channels`, expressed as a group count.
pub fn group_count(channels: usize) -> usize {
    let size = (1..=channels.min(8)).rev().find(|s| channels % s == 0).unwrap_or(1);
    channels / size
}

impl GroupNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            groups: group_count(channels),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// `C×H×W → (H·W)×C`: one token per spatial position.
pub fn to_tokens<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, [s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var, (h, w): (usize, usize)) -> Result<Var> {
    let c = g.shape(tokens)[1];
    let t = g.transpose(tokens)?;
    g.reshape(t, [c, h, w])
}

/// Softmax across the channel axis at every pixel of a `C×H×W` map.
pub fn softmax_channels<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let tokens = to_tokens(g, x)?;
    let p = g.softmax_rows(tokens)?;
    from_tokens(g, p, (s[1], s[2]))
}

/// `(H, W)` of a `C×H×W` node.
pub fn spatial<T: Scalar>(g: &Graph<'_, T>, x: Var) -> (usize, usize) {
    let s = g.shape(x);
    (s[1], s[2])
}
