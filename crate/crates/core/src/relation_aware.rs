//! Pre-subtraction enhancement by cross-attention and cross-self-attention.
//!
//! Features are flattened into one token per spatial position. A fuse block
//! computes
//!
//! ```text
//! F_ij = F_i + A(Q_i, K_i, V_i) + A(Q_i, K_j, V_j),   A(Q, K, V) = softmax(Q Kᵀ) V
//! ```
//!
//! then maps the tokens back to `C×H×W` and applies a 3×3 convolution and
//! group normalisation. The first block attends across the two images; the
//! second takes the first block's output as `F_i` and the image's original
//! features as `F_j`. Both directions (X→Y, Y→X) run the same weights, so
//! swapping the inputs swaps the outputs exactly.

use crate::error::{Error, Result};
use crate::nn::{from_tokens, spatial, to_tokens, Conv2d, GroupNorm, Init};
use crate::tensor::{Graph, ParamId, Scalar, Var};

/// `softmax(Q Kᵀ · scale) V` over `T×C` token matrices.
pub fn attention<T: Scalar>(g: &mut Graph<'_, T>, q: Var, k: Var, v: Var, scale: Option<T>) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    for other in [k, v] {
        if g.shape(other) != qs.as_slice() {
            return Err(Error::shape("attention", &qs, g.shape(other)));
        }
    }
    if qs.len() != 2 {
        return Err(Error::dim("attention", format!("expected T×C tokens, got {qs:?}")));
    }
    let kt = g.transpose(k)?;
    let mut logits = g.matmul(q, kt)?;
    if let Some(s) = scale {
        logits = g.scale(logits, s);
    }
    let weights = g.softmax_rows(logits)?;
    g.matmul(weights, v)
}

/// Square `C×C` query/key/value projections applied to `T×C` tokens.
#[derive(Debug, Clone)]
pub struct AttentionProjections {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub channels: usize,
}

impl AttentionProjections {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let std = (1.0 / channels as f64).sqrt();
        Ok(Self {
            w_q: init.gaussian(&format!("{name}.w_q"), &[channels, channels], std)?,
            w_k: init.gaussian(&format!("{name}.w_k"), &[channels, channels], std)?,
            w_v: init.gaussian(&format!("{name}.w_v"), &[channels, channels], std)?,
            channels,
        })
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var, w: ParamId) -> Result<Var> {
        let w = g.param(w);
        g.matmul(tokens, w)
    }

    pub fn query<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        self.apply(g, tokens, self.w_q)
    }

    pub fn key<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        self.apply(g, tokens, self.w_k)
    }

    pub fn value<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        self.apply(g, tokens, self.w_v)
    }
}

/// Token-level fusion `F_i + A(Q_i, K_i, V_i) + A(Q_i, K_j, V_j)`, where the
/// `i` terms use `proj_i` and the `j` terms use `proj_j`.
pub fn fuse<T: Scalar>(
    g: &mut Graph<'_, T>,
    f_i: Var,
    f_j: Var,
    proj_i: &AttentionProjections,
    proj_j: &AttentionProjections,
    scale: Option<T>,
) -> Result<Var> {
    if g.shape(f_i) != g.shape(f_j) {
        return Err(Error::shape("fuse", g.shape(f_i), g.shape(f_j)));
    }
    let q_i = proj_i.query(g, f_i)?;
    let k_i = proj_i.key(g, f_i)?;
    let v_i = proj_i.value(g, f_i)?;
    let k_j = proj_j.key(g, f_j)?;
    let v_j = proj_j.value(g, f_j)?;
    let own = attention(g, q_i, k_i, v_i, scale)?;
    let cross = attention(g, q_i, k_j, v_j, scale)?;
    let sum = g.add(f_i, own)?;
    g.add(sum, cross)
}

/// One encoder layer: token fusion followed by 3×3 conv and normalisation.
#[derive(Debug, Clone)]
pub struct FuseBlock {
    pub proj: AttentionProjections,
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl FuseBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: AttentionProjections::new(init, &format!("{name}.proj"), channels)?,
            conv: Conv2d::new(init, &format!("{name}.conv"), (channels, channels), 3, 1, true)?,
            norm: GroupNorm::new(init, &format!("{name}.norm"), channels)?,
        })
    }

    /// Fuses `C×H×W` maps `f_i` (query side) and `f_j`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f_i: Var, f_j: Var, scale: Option<T>) -> Result<Var> {
        if g.shape(f_i) != g.shape(f_j) {
            return Err(Error::shape("fuse block", g.shape(f_i), g.shape(f_j)));
        }
        let hw = spatial(g, f_i);
        let ti = to_tokens(g, f_i)?;
        let tj = to_tokens(g, f_j)?;
        let fused = fuse(g, ti, tj, &self.proj, &self.proj, scale)?;
        let map = from_tokens(g, fused, hw)?;
        let h = self.conv.forward(g, map)?;
        self.norm.forward(g, h)
    }
}

/// The two-stage module for one pyramid level.
#[derive(Debug, Clone)]
pub struct RelationAwareLevel {
    pub cross: FuseBlock,
    pub cross_self: FuseBlock,
    pub scaled: bool,
}

impl RelationAwareLevel {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, scaled: bool) -> Result<Self> {
        Ok(Self {
            cross: FuseBlock::new(init, &format!("{name}.cross"), channels)?,
            cross_self: FuseBlock::new(init, &format!("{name}.cross_self"), channels)?,
            scaled,
        })
    }

    /// Enhanced `(F̄_X, F̄_Y)` from same-level features of the two images.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, fx: Var, fy: Var) -> Result<(Var, Var)> {
        if g.shape(fx) != g.shape(fy) {
            return Err(Error::shape("relation_aware", g.shape(fx), g.shape(fy)));
        }
        let scale = self
            .scaled
            .then(|| T::one() / T::from_usize(g.shape(fx)[0]).unwrap().sqrt());
        let cx = self.cross.forward(g, fx, fy, scale)?;
        let cy = self.cross.forward(g, fy, fx, scale)?;
        let ex = self.cross_self.forward(g, cx, fx, scale)?;
        let ey = self.cross_self.forward(g, cy, fy, scale)?;
        Ok((ex, ey))
    }
}

#[derive(Debug, Clone)]
pub struct RelationAware {
    pub levels: Vec<RelationAwareLevel>,
}

impl RelationAware {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, widths: [usize; 4], scaled: bool) -> Result<Self> {
        let levels = widths
            .iter()
            .enumerate()
            .map(|(n, &c)| RelationAwareLevel::new(init, &format!("relation.level{}", n + 1), c, scaled))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};

    fn tokens(t: usize, c: usize, seed: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![t, c], |i| (((i + seed) * 37 % 11) as f64 - 5.0) / 7.0)
    }

    #[test]
    fn zero_values_give_zero_output() {
        let mut g = Graph::<f64>::new();
        let q = g.input(&tokens(3, 2, 1));
        let k = g.input(&tokens(3, 2, 2));
        let v = g.input(&Tensor::zeros(vec![3, 2]));
        let a = attention(&mut g, q, k, v, None).unwrap();
        assert!(g.value(a).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_returns_values() {
        let mut g = Graph::<f64>::new();
        let q = g.input(&tokens(1, 3, 1));
        let k = g.input(&tokens(1, 3, 5));
        let vt = tokens(1, 3, 9);
        let v = g.input(&vt);
        let a = attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(a), vt.data());
    }

    #[test]
    fn attention_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let q = g.input(&tokens(2, 2, 1));
        let k = g.input(&tokens(3, 2, 1));
        assert!(matches!(attention(&mut g, q, k, k, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_value_projection_leaves_input() {
        let mut store = ParamStore::<f64>::new();
        let p = AttentionProjections::new(&mut Init::new(&mut store, 4), "p", 2).unwrap();
        store.get_mut(p.w_v).tensor.data_mut().fill(0.0);
        let fi = tokens(4, 2, 3);
        let mut g = Graph::with_params(&store);
        let a = g.input(&fi);
        let b = g.input(&tokens(4, 2, 8));
        let out = fuse(&mut g, a, b, &p, &p, None).unwrap();
        assert_eq!(g.value(out), fi.data());
    }

    #[test]
    fn equal_inputs_collapse_to_double_self_attention() {
        let mut store = ParamStore::<f64>::new();
        let p = AttentionProjections::new(&mut Init::new(&mut store, 5), "p", 3).unwrap();
        let fi = tokens(4, 3, 2);
        let mut g = Graph::with_params(&store);
        let a = g.input(&fi);
        let out = fuse(&mut g, a, a, &p, &p, None).unwrap();
        let q = p.query(&mut g, a).unwrap();
        let k = p.key(&mut g, a).unwrap();
        let v = p.value(&mut g, a).unwrap();
        let att = attention(&mut g, q, k, v, None).unwrap();
        for ((o, f), s) in g.value(out).iter().zip(fi.data()).zip(g.value(att)) {
            assert!((o - (f + 2.0 * s)).abs() < 1e-12);
        }
    }

    #[test]
    fn level_is_swap_equivariant_and_collapses_on_equal_inputs() {
        let mut store = ParamStore::<f64>::new();
        let level = RelationAwareLevel::new(&mut Init::new(&mut store, 6), "ra", 4, false).unwrap();
        let a = Tensor::from_fn(vec![4, 2, 3], |i| ((i * 13 % 7) as f64 - 3.0) / 3.0);
        let b = Tensor::from_fn(vec![4, 2, 3], |i| ((i * 5 % 11) as f64 - 5.0) / 4.0);
        let mut g = Graph::with_params(&store);
        let (va, vb) = (g.input(&a), g.input(&b));
        let (x1, y1) = level.forward(&mut g, va, vb).unwrap();
        let (x2, y2) = level.forward(&mut g, vb, va).unwrap();
        assert_eq!(g.value(x1), g.value(y2));
        assert_eq!(g.value(y1), g.value(x2));
        let (x3, y3) = level.forward(&mut g, va, va).unwrap();
        assert_eq!(g.value(x3), g.value(y3));
    }
}
