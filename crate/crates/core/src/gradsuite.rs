//! Finite-difference checks of every differentiable op and module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::NetworkConfig;
use crate::cross_transformer::{ctb, ClassifierHead, CtbProjections};
use crate::error::{Error, Result};
use crate::gradcheck::{check, random_projection, random_tensor, random_tensor_away_from_zero, FdOptions, FdReport};
use crate::model::ChangeDetector;
use crate::nn::{Conv2d, GroupNorm, Init};
use crate::relation_aware::{attention, fuse, AttentionProjections, RelationAwareLevel};
use crate::scale_aware::{channel_gate, reweight};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Worst result over all seeds of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub coords: usize,
}

type Rng8 = ChaCha8Rng;
type Built = (ParamStore<f64>, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>, FdOptions);

struct Case {
    name: &'static str,
    build: fn(&mut Rng8, u64) -> Result<Built>,
}

fn opts(seed: u64) -> FdOptions {
    FdOptions { seed, ..FdOptions::default() }
}

fn plain(inputs: Vec<Tensor<f64>>, seed: u64, f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'static) -> Result<Built> {
    Ok((ParamStore::new(), inputs, Box::new(f), opts(seed)))
}

fn r(shape: &[usize], rng: &mut Rng8) -> Tensor<f64> {
    random_tensor(shape, -1.0, 1.0, rng)
}

fn away(shape: &[usize], rng: &mut Rng8) -> Tensor<f64> {
    random_tensor_away_from_zero(shape, 0.05, rng)
}

fn positive(shape: &[usize], rng: &mut Rng8) -> Tensor<f64> {
    random_tensor(shape, 0.1, 1.0, rng)
}

macro_rules! unary {
    ($name:literal, $gen:ident, |$g:ident, $x:ident| $body:expr) => {
        Case {
            name: $name,
            build: |rng, seed| {
                let t = $gen(&[2, 3, 3], rng);
                plain(vec![t], seed, move |$g, v| {
                    let $x = v[0];
                    let y = $body;
                    random_projection($g, y, seed)
                })
            },
        }
    };
}

macro_rules! binary {
    ($name:literal, $gen_b:ident, $method:ident) => {
        Case {
            name: $name,
            build: |rng, seed| {
                let a = r(&[2, 3, 3], rng);
                let b = $gen_b(&[2, 3, 3], rng);
                plain(vec![a, b], seed, move |g, v| {
                    let y = g.$method(v[0], v[1])?;
                    random_projection(g, y, seed)
                })
            },
        }
    };
}

fn cases() -> Vec<Case> {
    vec![
        binary!("add", r, add),
        binary!("sub", r, sub),
        binary!("mul", r, mul),
        binary!("div", away, div),
        unary!("add_const", r, |g, x| g.add_const(x, 0.3)),
        unary!("scale", r, |g, x| g.scale(x, -1.7)),
        unary!("abs", away, |g, x| g.abs(x)),
        unary!("relu", away, |g, x| g.relu(x)),
        unary!("sigmoid", r, |g, x| g.sigmoid(x)),
        unary!("sum", r, |g, x| {
            let s = g.sum(x);
            g.mul(s, s)?
        }),
        unary!("mean", r, |g, x| {
            let s = g.mean(x);
            g.mul(s, s)?
        }),
        unary!("global_avg_pool", r, |g, x| g.global_avg_pool(x)?),
        unary!("reshape", r, |g, x| {
            let y = g.reshape(x, [3, 6])?;
            let z = g.mul(y, y)?;
            g.reshape(z, [18])?
        }),
        unary!("transpose", r, |g, x| {
            let y = g.reshape(x, [3, 6])?;
            g.transpose(y)?
        }),
        unary!("softmax_rows", r, |g, x| {
            let y = g.reshape(x, [6, 3])?;
            g.softmax_rows(y)?
        }),
        unary!("resize_up", r, |g, x| g.resize(x, (5, 7))?),
        unary!("resize_down", r, |g, x| g.resize(x, (2, 2))?),
        Case {
            name: "scale_by",
            build: |rng, seed| {
                let x = r(&[2, 3, 3], rng);
                let s = r(&[1], rng);
                plain(vec![x, s], seed, move |g, v| {
                    let y = g.scale_by(v[0], v[1])?;
                    random_projection(g, y, seed)
                })
            },
        },
        Case {
            name: "mul_channel",
            build: |rng, seed| {
                let x = r(&[3, 2, 2], rng);
                let u = r(&[3], rng);
                plain(vec![x, u], seed, move |g, v| {
                    let y = g.mul_channel(v[0], v[1])?;
                    random_projection(g, y, seed)
                })
            },
        },
        Case {
            name: "concat_channels",
            build: |rng, seed| {
                let a = r(&[1, 2, 3], rng);
                let b = r(&[2, 2, 3], rng);
                plain(vec![a, b], seed, move |g, v| {
                    let y = g.concat_channels(&[v[0], v[1]])?;
                    let y = g.mul(y, y)?;
                    random_projection(g, y, seed)
                })
            },
        },
        Case {
            name: "matmul",
            build: |rng, seed| {
                let a = r(&[3, 4], rng);
                let b = r(&[4, 2], rng);
                plain(vec![a, b], seed, move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    random_projection(g, y, seed)
                })
            },
        },
        Case {
            name: "conv2d_3x3",
            build: |rng, seed| conv_case(rng, seed, 3, 1, true),
        },
        Case {
            name: "conv2d_strided",
            build: |rng, seed| conv_case(rng, seed, 3, 2, false),
        },
        Case {
            name: "conv2d_1x1",
            build: |rng, seed| conv_case(rng, seed, 1, 1, true),
        },
        Case {
            name: "group_norm",
            build: |rng, seed| {
                let x = r(&[4, 3, 3], rng);
                let gamma = r(&[4], rng);
                let beta = r(&[4], rng);
                plain(vec![x, gamma, beta], seed, move |g, v| {
                    let y = g.group_norm(v[0], v[1], v[2], 2)?;
                    random_projection(g, y, seed)
                })
            },
        },
        Case {
            name: "binary_cross_entropy",
            build: |rng, seed| {
                let p = random_tensor(&[2, 3, 3], 0.05, 0.95, rng);
                let label = Tensor::from_fn(vec![3, 3], |_| f64::from(u8::from(rng.gen_bool(0.5))));
                plain(vec![p], seed, move |g, v| g.binary_cross_entropy(v[0], &label))
            },
        },
        Case {
            name: "attention",
            build: |rng, seed| {
                let (q, k, v) = (r(&[4, 3], rng), r(&[4, 3], rng), r(&[4, 3], rng));
                plain(vec![q, k, v], seed, move |g, x| {
                    let y = attention(g, x[0], x[1], x[2], None)?;
                    random_projection(g, y, seed)
                })
            },
        },
        Case {
            name: "relation_fuse",
            build: |rng, seed| {
                let mut store = ParamStore::new();
                let proj = AttentionProjections::new(&mut Init::new(&mut store, seed), "p", 3)?;
                let (fi, fj) = (r(&[4, 3], rng), r(&[4, 3], rng));
                Ok((
                    store,
                    vec![fi, fj],
                    Box::new(move |g, x| {
                        let y = fuse(g, x[0], x[1], &proj, &proj, None)?;
                        random_projection(g, y, seed)
                    }),
                    opts(seed),
                ))
            },
        },
        Case {
            name: "relation_aware_level",
            build: |rng, seed| {
                let mut store = ParamStore::new();
                let level = RelationAwareLevel::new(&mut Init::new(&mut store, seed), "ra", 4, false)?;
                let (fx, fy) = (r(&[4, 2, 2], rng), r(&[4, 2, 2], rng));
                Ok((
                    store,
                    vec![fx, fy],
                    Box::new(move |g, x| {
                        let (ex, ey) = level.forward(g, x[0], x[1])?;
                        let both = g.concat_channels(&[ex, ey])?;
                        random_projection(g, both, seed)
                    }),
                    opts(seed),
                ))
            },
        },
        Case {
            name: "scale_gate",
            build: |rng, seed| {
                let mut store = ParamStore::new();
                let conv = Conv2d::new(&mut Init::new(&mut store, seed), "gate", (3, 3), 1, 1, true)?;
                let d = positive(&[3, 2, 2], rng);
                Ok((
                    store,
                    vec![d],
                    Box::new(move |g, x| {
                        let u = channel_gate(g, &conv, x[0])?;
                        random_projection(g, u, seed)
                    }),
                    opts(seed),
                ))
            },
        },
        Case {
            name: "scale_reweight",
            build: |rng, seed| {
                let mut store = ParamStore::new();
                let mut init = Init::new(&mut store, seed);
                let gate = Conv2d::new(&mut init, "gate", (3, 3), 1, 1, true)?;
                let proj = Conv2d::new(&mut init, "proj", (2, 3), 1, 1, false)?;
                let d_n = positive(&[3, 4, 4], rng);
                let d_m = positive(&[2, 2, 2], rng);
                Ok((
                    store,
                    vec![d_n, d_m],
                    Box::new(move |g, x| {
                        let u = channel_gate(g, &gate, x[0])?;
                        let y = reweight(g, &proj, x[1], (4, 4), Some(u))?;
                        random_projection(g, y, seed)
                    }),
                    opts(seed),
                ))
            },
        },
        Case {
            name: "ctb_1x1",
            build: |rng, seed| ctb_case(rng, seed, 1),
        },
        Case {
            name: "ctb",
            build: |rng, seed| ctb_case(rng, seed, 2),
        },
        Case {
            name: "classifier_head",
            build: |rng, seed| {
                let mut store = ParamStore::new();
                let head = ClassifierHead::new(&mut Init::new(&mut store, seed), [2, 2, 3, 3])?;
                let maps = vec![r(&[2, 4, 4], rng), r(&[2, 2, 2], rng), r(&[3, 2, 2], rng), r(&[3, 2, 2], rng)];
                Ok((
                    store,
                    maps,
                    Box::new(move |g, x| {
                        let p = head.forward(g, [x[0], x[1], x[2], x[3]], (8, 8))?;
                        random_projection(g, p, seed)
                    }),
                    opts(seed),
                ))
            },
        },
        Case {
            name: "group_norm_module",
            build: |rng, seed| {
                let mut store = ParamStore::new();
                let gn = GroupNorm::new(&mut Init::new(&mut store, seed), "gn", 6)?;
                for p in store.iter_mut() {
                    let n = p.tensor.len();
                    p.tensor.data_mut().copy_from_slice(r(&[n], rng).data());
                }
                let x = r(&[6, 2, 2], rng);
                Ok((
                    store,
                    vec![x],
                    Box::new(move |g, v| {
                        let y = gn.forward(g, v[0])?;
                        random_projection(g, y, seed)
                    }),
                    opts(seed),
                ))
            },
        },
        Case {
            name: "model_end_to_end",
            build: |rng, seed| {
                let cfg = NetworkConfig {
                    width_factor: 1.0 / 16.0,
                    ..NetworkConfig::default()
                };
                let mut store = ParamStore::new();
                let model = ChangeDetector::new(&cfg, &mut store, seed)?;
                let (x, y) = (random_tensor(&[3, 16, 16], 0.0, 1.0, rng), random_tensor(&[3, 16, 16], 0.0, 1.0, rng));
                let label = Tensor::from_fn(vec![16, 16], |_| f64::from(u8::from(rng.gen_bool(0.3))));
                // Inputs are constants here; only parameters are perturbed.
                let (xc, yc) = (x.clone(), y.clone());
                Ok((
                    store,
                    Vec::new(),
                    Box::new(move |g, _| {
                        let (vx, vy) = (g.input(&xc), g.input(&yc));
                        let trace = model.forward(g, vx, vy)?;
                        g.binary_cross_entropy(trace.prob, &label)
                    }),
                    FdOptions {
                        max_coords: Some(10),
                        seed,
                        ..FdOptions::default()
                    },
                ))
            },
        },
    ]
}

fn conv_case(rng: &mut Rng8, seed: u64, k: usize, stride: usize, bias: bool) -> Result<Built> {
    let x = r(&[2, 5, 5], rng);
    let w = r(&[3, 2, k, k], rng);
    let mut inputs = vec![x, w];
    if bias {
        inputs.push(r(&[3], rng));
    }
    plain(inputs, seed, move |g, v| {
        let y = g.conv2d(v[0], v[1], v.get(2).copied(), stride, k / 2)?;
        random_projection(g, y, seed)
    })
}

/// Draws until the score sum is well away from zero; near-cancelling sums
/// make the ratio arbitrarily steep and central differences meaningless.
fn ctb_case(rng: &mut Rng8, seed: u64, size: usize) -> Result<Built> {
    for attempt in 0..100u64 {
        let mut store = ParamStore::new();
        let proj = CtbProjections::new(&mut Init::new(&mut store, seed.wrapping_add(attempt << 32)), "ctb", 2)?;
        let maps: Vec<Tensor<f64>> = (0..4).map(|_| r(&[2, size, size], rng)).collect();
        let mut g = Graph::with_params(&store);
        let v: Vec<Var> = maps.iter().map(|m| g.input(m)).collect();
        let out = ctb(&mut g, [v[0], v[1], v[2], v[3]], &proj)?;
        let betas: Vec<f64> = out.betas.iter().map(|&b| g.value(b)[0]).collect();
        if betas.iter().all(|b| b.abs() < 4.0) {
            return Ok((
                store,
                maps,
                Box::new(move |g, x| {
                    let out = ctb(g, [x[0], x[1], x[2], x[3]], &proj)?;
                    random_projection(g, out.fused, seed)
                }),
                opts(seed),
            ));
        }
    }
    Err(Error::Contract("could not draw a well-conditioned CTB instance".into()))
}

/// Names of all cases, in run order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every case whose name contains `filter` for seeds `0..seeds`.
pub fn run(seeds: usize, filter: Option<&str>, mut on_case: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for case in cases() {
        if filter.is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        let mut res = CaseResult {
            name: case.name,
            seeds,
            max_rel_err: 0.0,
            worst_seed: 0,
            coords: 0,
        };
        for seed in 0..seeds as u64 {
            let mut rng = Rng8::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ case.name.len() as u64);
            let (store, inputs, f, o) = (case.build)(&mut rng, seed)?;
            let FdReport { rel_err, coords, .. } = check(&store, &inputs, |g, v| f(g, v), &o)?;
            res.coords += coords;
            if !(rel_err <= res.max_rel_err) {
                res.max_rel_err = rel_err;
                res.worst_seed = seed;
            }
        }
        on_case(&res);
        out.push(res);
    }
    Ok(out)
}
