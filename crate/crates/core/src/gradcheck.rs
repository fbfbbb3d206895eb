//! Central finite-difference gradient checking in 64-bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub step: f64,
    /// Check at most this many coordinates, sampled with `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-6)`
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub coords: usize,
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    Input(usize, usize),
    Param(ParamId, usize),
}

/// Compares the tape gradient of `f` against central differences over every
/// input entry and every parameter entry of `store` (or a random subset).
pub fn check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |st: &ParamStore<f64>, ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::with_params(st);
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar_value(out))
    };

    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|j| Coord::Input(i, j)));
    }
    for (id, p) in store.iter() {
        coords.extend((0..p.tensor.len()).map(|j| Coord::Param(id, j)));
    }
    if let Some(n) = opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        coords.shuffle(&mut rng);
        coords.truncate(n);
    }

    let mut st = store.clone();
    let mut ins = inputs.to_vec();
    let h = opts.step;
    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &c in &coords {
        let analytic = match c {
            Coord::Input(i, j) => grads.wrt(vars[i]).map_or(0.0, |g| g[j]),
            Coord::Param(id, j) => grads.param(id).map_or(0.0, |g| g[j]),
        };
        let orig = match c {
            Coord::Input(i, j) => ins[i].data()[j],
            Coord::Param(id, j) => st.get(id).tensor.data()[j],
        };
        set(&mut st, &mut ins, c, orig + h);
        let up = eval(&st, &ins)?;
        set(&mut st, &mut ins, c, orig - h);
        let down = eval(&st, &ins)?;
        set(&mut st, &mut ins, c, orig);
        let numeric = (up - down) / (2.0 * h);
        let d = analytic - numeric;
        diff2 += d * d;
        a2 += analytic * analytic;
        n2 += numeric * numeric;
        max_abs = max_abs.max(d.abs());
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-6);
    Ok(FdReport {
        rel_err: diff2.sqrt() / denom,
        max_abs_err: max_abs,
        coords: coords.len(),
    })
}

fn set(st: &mut ParamStore<f64>, ins: &mut [Tensor<f64>], c: Coord, v: f64) {
    match c {
        Coord::Input(i, j) => ins[i].data_mut()[j] = v,
        Coord::Param(id, j) => st.get_mut(id).tensor.data_mut()[j] = v,
    }
}

/// `Σ r ⊙ y` for a fixed random `r`, turning any output into a scalar whose
/// gradient exercises the full Jacobian.
pub fn random_projection(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = g.shape(y).to_vec();
    let n = g.value(y).len();
    let r = g.constant(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Random tensor whose entries all satisfy `|x| ≥ margin`, for ops with a
/// kink at zero.
pub fn random_tensor_away_from_zero(shape: &[usize], margin: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agrees_on_smooth_composite() {
        let store = ParamStore::<f64>::new();
        let x = Tensor::from_f64(vec![3], &[0.5, -0.7, 1.2]).unwrap();
        let ok = check(
            &store,
            &[x],
            |g, v| {
                let a = g.abs(v[0]);
                let s = g.sigmoid(a);
                random_projection(g, s, 1)
            },
            &FdOptions::default(),
        )
        .unwrap();
        assert!(ok.rel_err < 1e-8, "{ok:?}");
        assert_eq!(ok.coords, 3);
    }
}
