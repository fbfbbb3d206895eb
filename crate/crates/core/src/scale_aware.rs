//! Cross-scale channel gating of difference maps.
//!
//! For target level `n`, a gate `U_n = sigmoid(conv1×1(GAP(D_n)))` reweights
//! the channels of every level's difference map after it has been resized
//! to level `n` and projected to `C_n` channels:
//! `D_m^n = U_n ⊙ conv1×1(resize(D_m))`. The `m = n` case uses an identity
//! resize so every level receives four maps.

use crate::error::{Error, Result};
use crate::nn::{spatial, Conv2d, Init};
use crate::tensor::{Graph, Scalar, Var};

/// `|a − b|` elementwise.
pub fn difference<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape("difference", g.shape(a), g.shape(b)));
    }
    let d = g.sub(a, b)?;
    Ok(g.abs(d))
}

#[derive(Debug, Clone)]
pub struct ScaleAware {
    /// Per-level gate convolution `C_n → C_n` with bias.
    pub gates: Option<Vec<Conv2d>>,
    /// `proj[n][m]`: bias-free `C_m → C_n` projection after resizing.
    pub proj: Vec<Vec<Conv2d>>,
}

impl ScaleAware {
    /// With `gated = false` only the resize projections are built.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, widths: [usize; 4], gated: bool) -> Result<Self> {
        let gates = if gated {
            Some(
                (0..4)
                    .map(|n| Conv2d::new(init, &format!("scale.gate{}", n + 1), (widths[n], widths[n]), 1, 1, true))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let proj = (0..4)
            .map(|n| {
                (0..4)
                    .map(|m| {
                        Conv2d::new(
                            init,
                            &format!("scale.proj{}_{}", n + 1, m + 1),
                            (widths[m], widths[n]),
                            1,
                            1,
                            false,
                        )
                    })
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self { gates, proj })
    }

    /// `U_n` for a `C_n×H×W` difference map, shape `[C_n]`.
    pub fn channel_gate<T: Scalar>(&self, g: &mut Graph<'_, T>, level: usize, d: Var) -> Result<Var> {
        let gates = self
            .gates
            .as_ref()
            .ok_or_else(|| Error::Contract("scale-aware gating is disabled".into()))?;
        channel_gate(g, &gates[level], d)
    }

    /// `D_m^n`, optionally gated.
    pub fn reweight<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        (n, m): (usize, usize),
        d_m: Var,
        size_n: (usize, usize),
        gate: Option<Var>,
    ) -> Result<Var> {
        reweight(g, &self.proj[n][m], d_m, size_n, gate)
    }

    /// All `D_m^n`, indexed `[n][m]`. Also returns the gates when enabled.
    #[allow(clippy::type_complexity)]
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, diffs: &[Var; 4]) -> Result<([[Var; 4]; 4], Option<[Var; 4]>)> {
        let gates = match &self.gates {
            Some(convs) => {
                let mut u = [diffs[0]; 4];
                for n in 0..4 {
                    u[n] = channel_gate(g, &convs[n], diffs[n])?;
                }
                Some(u)
            }
            None => None,
        };
        let mut out = [[diffs[0]; 4]; 4];
        for n in 0..4 {
            let size_n = spatial(g, diffs[n]);
            for m in 0..4 {
                out[n][m] = self.reweight(g, (n, m), diffs[m], size_n, gates.map(|u| u[n]))?;
            }
        }
        Ok((out, gates))
    }
}

/// `sigmoid(conv1×1(GAP(d)))` with a `C→C` convolution.
pub fn channel_gate<T: Scalar>(g: &mut Graph<'_, T>, conv: &Conv2d, d: Var) -> Result<Var> {
    let c = g.shape(d)[0];
    let pooled = g.global_avg_pool(d)?;
    let col = g.reshape(pooled, [c, 1, 1])?;
    let z = conv.forward(g, col)?;
    let z = g.reshape(z, [conv.c_out])?;
    Ok(g.sigmoid(z))
}

/// `gate ⊙ conv1×1(resize(d_m, size))`.
pub fn reweight<T: Scalar>(g: &mut Graph<'_, T>, conv: &Conv2d, d_m: Var, size: (usize, usize), gate: Option<Var>) -> Result<Var> {
    let resized = g.resize(d_m, size)?;
    let projected = conv.forward(g, resized)?;
    match gate {
        Some(u) => g.mul_channel(projected, u),
        None => Ok(projected),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};

    #[test]
    fn difference_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.input(&Tensor::from_f64(vec![2], &[1.0, -2.0]).unwrap());
        let b = g.input(&Tensor::from_f64(vec![2], &[-1.0, 1.0]).unwrap());
        let d = difference(&mut g, a, b).unwrap();
        assert_eq!(g.value(d), &[2.0, 3.0]);
        let e = difference(&mut g, b, a).unwrap();
        assert_eq!(g.value(e), g.value(d));
        let z = difference(&mut g, a, a).unwrap();
        assert!(g.value(z).iter().all(|&v| v == 0.0));
    }

    fn identity_conv(store: &mut ParamStore<f64>, c: usize) -> Conv2d {
        let name = format!("id{}", store.len());
        let conv = Conv2d::new(&mut Init::new(store, 0), &name, (c, c), 1, 1, true).unwrap();
        let w = store.get_mut(conv.weight).tensor.data_mut();
        w.fill(0.0);
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        conv
    }

    #[test]
    fn zero_map_gives_half_gate() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut Init::new(&mut store, 9), "g", (3, 3), 1, 1, true).unwrap();
        let mut g = Graph::with_params(&store);
        let d = g.input(&Tensor::zeros(vec![3, 4, 4]));
        let u = channel_gate(&mut g, &conv, d).unwrap();
        assert_eq!(g.value(u), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn constant_map_with_identity_conv() {
        let mut store = ParamStore::<f64>::new();
        let conv = identity_conv(&mut store, 2);
        let mut g = Graph::with_params(&store);
        let d = g.input(&Tensor::from_fn(vec![2, 3, 3], |i| if i < 9 { 0.7 } else { 2.0 }));
        let u = channel_gate(&mut g, &conv, d).unwrap();
        let want = [1.0 / (1.0 + (-0.7f64).exp()), 1.0 / (1.0 + (-2.0f64).exp())];
        for (a, b) in g.value(u).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_half_gate_halves_same_level_map() {
        let mut store = ParamStore::<f64>::new();
        let conv = identity_conv(&mut store, 2);
        let dm = Tensor::from_fn(vec![2, 2, 2], |i| i as f64 * 0.3);
        let mut g = Graph::with_params(&store);
        let d = g.input(&dm);
        let u = g.input(&Tensor::full(vec![2], 0.5));
        let out = reweight(&mut g, &conv, d, (2, 2), Some(u)).unwrap();
        for (o, x) in g.value(out).iter().zip(dm.data()) {
            assert_eq!(*o, x / 2.0);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut Init::new(&mut store, 2), "p", (4, 2), 1, 1, false).unwrap();
        let mut g = Graph::with_params(&store);
        let d = g.input(&Tensor::zeros(vec![4, 2, 2]));
        let u = g.input(&Tensor::from_f64(vec![2], &[0.3, 0.9]).unwrap());
        let out = reweight(&mut g, &conv, d, (4, 4), Some(u)).unwrap();
        assert_eq!(g.shape(out), &[2, 4, 4]);
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }
}
