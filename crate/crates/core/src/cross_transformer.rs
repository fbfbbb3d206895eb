//! Scalar cross-scale attention and the change classifier.
//!
//! For anchor `D_a` and the other three reweighted maps `D_b, D_c, D_d`:
//!
//! ```text
//! s_m = Σ (Q_a ⊙ K_m)          β_m = s_m / (Σ_m s_m + ε)
//! S_a = D_a + Σ_m β_m V_m
//! ```
//!
//! When `|Σ_m s_m| ≤ ε` the weights fall back to a uniform `1/4`.

use crate::error::{Error, Result};
use crate::nn::{softmax_channels, spatial, Conv2d, Init};
use crate::tensor::{Graph, Scalar, Var};

/// Denominator guard for the score ratio.
pub const CTB_EPS: f64 = 1e-8;

/// Bias-free 1×1 projections for one level. Slot 0 is the anchor.
#[derive(Debug, Clone)]
pub struct CtbProjections {
    pub w_q: Conv2d,
    pub w_k: [Conv2d; 4],
    pub w_v: [Conv2d; 4],
}

impl CtbProjections {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mk = |init: &mut Init<'_, T>, what: &str| {
            Conv2d::new(init, &format!("{name}.{what}"), (channels, channels), 1, 1, false)
        };
        let w_q = mk(init, "w_q")?;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for m in 0..4 {
            keys.push(mk(init, &format!("w_k{m}"))?);
            values.push(mk(init, &format!("w_v{m}"))?);
        }
        Ok(Self {
            w_q,
            w_k: keys.try_into().expect("four keys"),
            w_v: values.try_into().expect("four values"),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CtbOutput {
    pub fused: Var,
    /// The four `β_m` as one-element nodes.
    pub betas: [Var; 4],
    /// Whether the uniform fallback fired.
    pub fallback: bool,
}

/// Fuses `inputs = [D_a, D_b, D_c, D_d]` (anchor first) into `S_a`.
pub fn ctb<T: Scalar>(g: &mut Graph<'_, T>, inputs: [Var; 4], proj: &CtbProjections) -> Result<CtbOutput> {
    let anchor = inputs[0];
    for &d in &inputs[1..] {
        if g.shape(d) != g.shape(anchor) {
            return Err(Error::shape("ctb", g.shape(anchor), g.shape(d)));
        }
    }
    let q = proj.w_q.forward(g, anchor)?;
    let mut scores = [anchor; 4];
    let mut values = [anchor; 4];
    for m in 0..4 {
        let k = proj.w_k[m].forward(g, inputs[m])?;
        values[m] = proj.w_v[m].forward(g, inputs[m])?;
        let qk = g.mul(q, k)?;
        scores[m] = g.sum(qk);
    }
    let mut total = scores[0];
    for &s in &scores[1..] {
        total = g.add(total, s)?;
    }
    let eps = T::from_f64_lossy(CTB_EPS);
    let fallback = g.scalar_value(total).abs() <= eps;
    let mut betas = [anchor; 4];
    if fallback {
        for b in &mut betas {
            *b = g.constant(vec![1], vec![T::from_f64_lossy(0.25)])?;
        }
    } else {
        let denom = g.add_const(total, eps);
        for m in 0..4 {
            betas[m] = g.div(scores[m], denom)?;
        }
    }
    let mut fused = anchor;
    for m in 0..4 {
        let term = g.scale_by(values[m], betas[m])?;
        fused = g.add(fused, term)?;
    }
    Ok(CtbOutput { fused, betas, fallback })
}

/// `G`: concatenation of the four fused maps at level-1 resolution, a 3×3
/// convolution to two logits, per-pixel softmax, then a bilinear upsample to
/// the input resolution.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub conv: Conv2d,
}

impl ClassifierHead {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, widths: [usize; 4]) -> Result<Self> {
        let c_in = widths.iter().sum();
        Ok(Self {
            conv: Conv2d::new(init, "head.conv", (c_in, 2), 3, 1, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, fused: [Var; 4], out_size: (usize, usize)) -> Result<Var> {
        let size = spatial(g, fused[0]);
        let mut parts = [fused[0]; 4];
        for n in 1..4 {
            parts[n] = g.resize(fused[n], size)?;
        }
        let cat = g.concat_channels(&parts)?;
        let logits = self.conv.forward(g, cat)?;
        let p = softmax_channels(g, logits)?;
        g.resize(p, out_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};

    fn setup(c: usize) -> (ParamStore<f64>, CtbProjections) {
        let mut store = ParamStore::new();
        let p = CtbProjections::new(&mut Init::new(&mut store, 11), "ctb", c).unwrap();
        (store, p)
    }

    #[test]
    fn zero_values_leave_anchor() {
        let (mut store, p) = setup(2);
        for v in &p.w_v {
            store.get_mut(v.weight).tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::with_params(&store);
        let d: Vec<_> = (0..4)
            .map(|m| g.input(&Tensor::from_fn(vec![2, 2, 2], |i| (i + m) as f64 * 0.1)))
            .collect();
        let out = ctb(&mut g, [d[0], d[1], d[2], d[3]], &p).unwrap();
        assert_eq!(g.value(out.fused), g.value(d[0]));
    }

    #[test]
    fn identical_inputs_and_keys_give_uniform_weights() {
        let (mut store, p) = setup(2);
        let kw = store.get(p.w_k[0].weight).tensor.data().to_vec();
        let vw = store.get(p.w_v[0].weight).tensor.data().to_vec();
        for m in 1..4 {
            store.get_mut(p.w_k[m].weight).tensor.data_mut().copy_from_slice(&kw);
            store.get_mut(p.w_v[m].weight).tensor.data_mut().copy_from_slice(&vw);
        }
        let dt = Tensor::from_fn(vec![2, 3, 3], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::with_params(&store);
        let d = g.input(&dt);
        let out = ctb(&mut g, [d; 4], &p).unwrap();
        // exact up to the ε guard in the denominator
        for b in out.betas {
            assert!((g.scalar_value(b) - 0.25).abs() < 1e-6);
        }
        let v = p.w_v[0].forward(&mut g, d).unwrap();
        for ((s, x), vv) in g.value(out.fused).iter().zip(dt.data()).zip(g.value(v)) {
            assert!((s - (x + vv)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_inputs_trigger_fallback() {
        let (store, p) = setup(2);
        let mut g = Graph::with_params(&store);
        let d = g.input(&Tensor::zeros(vec![2, 2, 2]));
        let out = ctb(&mut g, [d; 4], &p).unwrap();
        assert!(out.fallback);
        assert!(g.value(out.fused).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_on_zero_inputs_is_uniform() {
        let mut store = ParamStore::<f64>::new();
        let head = ClassifierHead::new(&mut Init::new(&mut store, 1), [2, 2, 2, 2]).unwrap();
        let mut g = Graph::with_params(&store);
        let s1 = g.input(&Tensor::zeros(vec![2, 4, 4]));
        let s2 = g.input(&Tensor::zeros(vec![2, 2, 2]));
        let p = head.forward(&mut g, [s1, s2, s2, s2], (16, 16)).unwrap();
        assert_eq!(g.shape(p), &[2, 16, 16]);
        assert!(g.value(p).iter().all(|&v| v == 0.5));
    }
}
