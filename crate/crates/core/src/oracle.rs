//! Plain-loop reference implementations in `f64`.
//!
//! These share no code with the tape: no GEMM, no im2col, no lerp-form
//! interpolation. They are slow and only meant for checking small cases.

/// Dense `C×H×W` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "map data length");
        Self { c, h, w, data }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// `(H·W)×C` token matrix, row-major.
    pub fn tokens(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.c {
            for p in 0..self.h * self.w {
                out[p * self.c + c] = self.data[c * self.h * self.w + p];
            }
        }
        out
    }

    pub fn from_tokens(tokens: &[f64], c: usize, h: usize, w: usize) -> Self {
        let mut data = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                data[ch * h * w + p] = tokens[p * c + ch];
            }
        }
        Self::new(c, h, w, data)
    }
}

/// `A (m×k) · B (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax of a `rows × cols` matrix, computed as
/// `exp(x − max) / Σ exp(x − max)`.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Direct convolution; `weight` is `C_out×C_in×K×K`, zero padding `pad`.
pub fn conv2d(x: &Map, weight: &[f64], bias: Option<&[f64]>, c_out: usize, k: usize, stride: usize, pad: usize) -> Map {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut data = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for i in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= x.h as isize || xx >= x.w as isize {
                                continue;
                            }
                            acc += weight[((o * x.c + i) * k + ky) * k + kx] * x.at(i, y as usize, xx as usize);
                        }
                    }
                }
                data[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Map::new(c_out, oh, ow, data)
}

/// Bilinear resize with half-pixel centres and edge clamping, written with
/// the explicit four-weight formula.
pub fn bilinear(x: &Map, oh: usize, ow: usize) -> Map {
    let coord = |o: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, src - lo as f64)
    };
    let mut data = Vec::with_capacity(x.c * oh * ow);
    for c in 0..x.c {
        for oy in 0..oh {
            let (y0, y1, ty) = coord(oy, x.h, oh);
            for ox in 0..ow {
                let (x0, x1, tx) = coord(ox, x.w, ow);
                let v = (1.0 - ty) * (1.0 - tx) * x.at(c, y0, x0)
                    + (1.0 - ty) * tx * x.at(c, y0, x1)
                    + ty * (1.0 - tx) * x.at(c, y1, x0)
                    + ty * tx * x.at(c, y1, x1);
                data.push(v);
            }
        }
    }
    Map::new(x.c, oh, ow, data)
}

pub fn global_avg_pool(x: &Map) -> Vec<f64> {
    (0..x.c)
        .map(|c| {
            let plane = &x.data[c * x.h * x.w..(c + 1) * x.h * x.w];
            plane.iter().sum::<f64>() / plane.len() as f64
        })
        .collect()
}

/// Group normalisation with biased variance.
pub fn group_norm(x: &Map, gamma: &[f64], beta: &[f64], groups: usize, eps: f64) -> Map {
    let per = x.c / groups;
    let hw = x.h * x.w;
    let mut data = vec![0.0; x.data.len()];
    for grp in 0..groups {
        let range = grp * per * hw..(grp + 1) * per * hw;
        let vals = &x.data[range.clone()];
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        for idx in range {
            let c = idx / hw;
            data[idx] = gamma[c] * (x.data[idx] - mean) / (var + eps).sqrt() + beta[c];
        }
    }
    Map::new(x.c, x.h, x.w, data)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `softmax(Q Kᵀ · scale) V` for `T×C` matrices, every entry written out
/// as an explicit sum.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], t: usize, c: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; t * c];
    for i in 0..t {
        let logits: Vec<f64> = (0..t)
            .map(|j| (0..c).map(|d| q[i * c + d] * k[j * c + d]).sum::<f64>() * scale)
            .collect();
        let weights = softmax_rows(&logits, t);
        for d in 0..c {
            out[i * c + d] = (0..t).map(|j| weights[j] * v[j * c + d]).sum();
        }
    }
    out
}

/// Square token projections shared by both roles of a fuse block.
#[derive(Debug, Clone)]
pub struct Projections {
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
}

/// `F_i + A(F_i W_Q, F_i W_K, F_i W_V) + A(F_i W_Q, F_j W_K, F_j W_V)`.
pub fn fuse(f_i: &[f64], f_j: &[f64], p: &Projections, t: usize, c: usize, scale: f64) -> Vec<f64> {
    let q = matmul(f_i, &p.w_q, t, c, c);
    let own = attention(&q, &matmul(f_i, &p.w_k, t, c, c), &matmul(f_i, &p.w_v, t, c, c), t, c, scale);
    let cross = attention(&q, &matmul(f_j, &p.w_k, t, c, c), &matmul(f_j, &p.w_v, t, c, c), t, c, scale);
    (0..t * c).map(|i| f_i[i] + own[i] + cross[i]).collect()
}

/// Weights of one fuse block: projections, 3×3 conv with bias, group norm.
#[derive(Debug, Clone)]
pub struct FuseBlockWeights {
    pub proj: Projections,
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub groups: usize,
}

pub fn fuse_block(f_i: &Map, f_j: &Map, wts: &FuseBlockWeights, scale: f64, eps: f64) -> Map {
    let (c, h, w) = (f_i.c, f_i.h, f_i.w);
    let tokens = fuse(&f_i.tokens(), &f_j.tokens(), &wts.proj, h * w, c, scale);
    let map = Map::from_tokens(&tokens, c, h, w);
    let conv = conv2d(&map, &wts.conv_w, Some(&wts.conv_b), c, 3, 1, 1);
    group_norm(&conv, &wts.gamma, &wts.beta, wts.groups, eps)
}

/// Both stages for both images.
pub fn relation_aware(fx: &Map, fy: &Map, cross: &FuseBlockWeights, cross_self: &FuseBlockWeights, scale: f64, eps: f64) -> (Map, Map) {
    let cx = fuse_block(fx, fy, cross, scale, eps);
    let cy = fuse_block(fy, fx, cross, scale, eps);
    (
        fuse_block(&cx, fx, cross_self, scale, eps),
        fuse_block(&cy, fy, cross_self, scale, eps),
    )
}

/// `U = sigmoid(W · GAP(d) + b)` with `W` a `C×C` matrix.
pub fn channel_gate(d: &Map, w: &[f64], b: &[f64]) -> Vec<f64> {
    let pooled = global_avg_pool(d);
    (0..d.c)
        .map(|o| sigmoid(b[o] + (0..d.c).map(|i| w[o * d.c + i] * pooled[i]).sum::<f64>()))
        .collect()
}

/// `U ⊙ (W · resize(d))` with `W` a bias-free `C_out×C_in` projection.
pub fn reweight(d: &Map, w: &[f64], c_out: usize, (h, wd): (usize, usize), gate: Option<&[f64]>) -> Map {
    let r = if (d.h, d.w) == (h, wd) { d.clone() } else { bilinear(d, h, wd) };
    let mut p = conv2d(&r, w, None, c_out, 1, 1, 0);
    if let Some(u) = gate {
        for (i, v) in p.data.iter_mut().enumerate() {
            *v *= u[i / (h * wd)];
        }
    }
    p
}

/// Weights of one cross-transformer block; every matrix is `C×C`.
#[derive(Debug, Clone)]
pub struct CtbWeights {
    pub w_q: Vec<f64>,
    pub w_k: [Vec<f64>; 4],
    pub w_v: [Vec<f64>; 4],
}

/// Per-pixel channel mixing `out[o] = Σ_i W[o,i] x[i]`.
fn mix(x: &Map, w: &[f64]) -> Map {
    let hw = x.h * x.w;
    let mut data = vec![0.0; x.data.len()];
    for o in 0..x.c {
        for p in 0..hw {
            data[o * hw + p] = (0..x.c).map(|i| w[o * x.c + i] * x.data[i * hw + p]).sum();
        }
    }
    Map::new(x.c, x.h, x.w, data)
}

#[derive(Debug, Clone)]
pub struct CtbResult {
    pub fused: Map,
    pub scores: [f64; 4],
    pub betas: [f64; 4],
    pub fallback: bool,
}

/// Scalar-score cross-scale fusion, anchor in slot 0.
pub fn ctb(inputs: &[Map; 4], wts: &CtbWeights, eps: f64) -> CtbResult {
    let q = mix(&inputs[0], &wts.w_q);
    let mut scores = [0.0; 4];
    for m in 0..4 {
        let k = mix(&inputs[m], &wts.w_k[m]);
        scores[m] = q.data.iter().zip(&k.data).map(|(a, b)| a * b).sum();
    }
    let total: f64 = scores.iter().sum();
    let fallback = total.abs() <= eps;
    let betas = if fallback { [0.25; 4] } else { scores.map(|s| s / (total + eps)) };
    let mut fused = inputs[0].clone();
    for m in 0..4 {
        let v = mix(&inputs[m], &wts.w_v[m]);
        for (f, x) in fused.data.iter_mut().zip(&v.data) {
            *f += betas[m] * x;
        }
    }
    CtbResult { fused, scores, betas, fallback }
}

/// Resize to the first map, concatenate, 3×3 conv, channel softmax, resize
/// to `out`.
pub fn classifier_head(fused: &[Map; 4], conv_w: &[f64], conv_b: &[f64], out: (usize, usize)) -> Map {
    let (h, w) = (fused[0].h, fused[0].w);
    let mut data = Vec::new();
    let mut c = 0;
    for f in fused {
        let r = if (f.h, f.w) == (h, w) { f.clone() } else { bilinear(f, h, w) };
        data.extend_from_slice(&r.data);
        c += f.c;
    }
    let logits = conv2d(&Map::new(c, h, w, data), conv_w, Some(conv_b), 2, 3, 1, 1);
    let hw = h * w;
    let mut p = vec![0.0; 2 * hw];
    for i in 0..hw {
        let (a, b) = (logits.data[i], logits.data[hw + i]);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        p[i] = ea / (ea + eb);
        p[hw + i] = eb / (ea + eb);
    }
    let p = Map::new(2, h, w, p);
    if (h, w) == out {
        p
    } else {
        bilinear(&p, out.0, out.1)
    }
}

/// Mean clamped binary cross-entropy.
pub fn bce(p_change: &[f64], label: &[f64], clamp: f64) -> f64 {
    let n = p_change.len() as f64;
    p_change
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_hand_case() {
        // 1×3×3 ones, 3×3 ones kernel, pad 1: corner sees 4, edge 6, centre 9.
        let x = Map::new(1, 3, 3, vec![1.0; 9]);
        let y = conv2d(&x, &[1.0; 9], None, 1, 3, 1, 1);
        assert_eq!(y.data, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn bilinear_hand_case() {
        // 1×2 → 1×4 along x: sources −0.25, 0.25, 0.75, 1.25 clamp to [0, 1].
        let x = Map::new(1, 1, 2, vec![0.0, 4.0]);
        assert_eq!(bilinear(&x, 1, 4).data, vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn uniform_attention_averages_values() {
        let v = vec![1.0, 2.0, 3.0, 4.0];
        let out = attention(&[0.0; 4], &[0.0; 4], &v, 2, 2, 1.0);
        assert_eq!(out, vec![2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce(&[0.5; 4], &[0.0, 1.0, 1.0, 0.0], 1e-7) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce(&[0.0, 1.0], &[1.0, 0.0], 1e-7) + (1e-7f64).ln()).abs() < 1e-6);
    }
}
