//! Full change-detection network.
//!
//! 1. Extract a feature pyramid from each image with the shared backbone.
//! 2. Enhance each level with the relation-aware module and take `D_n = |F̄_X − F̄_Y|`.
//! 3. Gate and resize every `D_m` onto every level `n`, then fuse each level
//!    with the cross-transformer block.
//! 4. Classify the concatenated fused maps into a 2-channel probability map.

use crate::backbone::{Backbone, FeaturePyramid};
use crate::config::{NetworkConfig, Toggles};
use crate::cross_transformer::{ctb, ClassifierHead, CtbOutput, CtbProjections};
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::relation_aware::RelationAware;
use crate::scale_aware::{difference, ScaleAware};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone)]
pub struct ChangeDetector {
    pub config: NetworkConfig,
    pub backbone: Backbone,
    pub relation: Option<RelationAware>,
    pub scale: ScaleAware,
    pub ctb: Option<Vec<CtbProjections>>,
    pub head: ClassifierHead,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub features_x: FeaturePyramid,
    pub features_y: FeaturePyramid,
    pub enhanced_x: FeaturePyramid,
    pub enhanced_y: FeaturePyramid,
    pub diffs: [Var; 4],
    pub gates: Option<[Var; 4]>,
    /// `reweighted[n][m] = D_m^n`.
    pub reweighted: [[Var; 4]; 4],
    pub ctb: Option<[CtbOutput; 4]>,
    pub fused: [Var; 4],
    /// `2×H×W`, channel 1 is the change probability.
    pub prob: Var,
}

impl ChangeDetector {
    /// Builds the network, registering all parameters in `store`.
    pub fn new<T: Scalar>(config: &NetworkConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(store, seed);
        let backbone = Backbone::new(&mut init, config)?;
        let widths = backbone.widths();
        let toggles = config.toggles();
        let relation = if toggles.relation_aware {
            Some(RelationAware::new(&mut init, widths, config.attention_scaling)?)
        } else {
            None
        };
        let scale = ScaleAware::new(&mut init, widths, toggles.scale_aware)?;
        let ctb = if toggles.cross_transformer {
            Some(
                (0..4)
                    .map(|n| CtbProjections::new(&mut init, &format!("ctb.level{}", n + 1), widths[n]))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let head = ClassifierHead::new(&mut init, widths)?;
        Ok(Self {
            config: config.clone(),
            backbone,
            relation,
            scale,
            ctb,
            head,
        })
    }

    pub fn toggles(&self) -> Toggles {
        self.config.toggles()
    }

    pub fn check_pair(&self, x: &[usize], y: &[usize]) -> Result<()> {
        if x != y {
            return Err(Error::shape("forward", x, y));
        }
        self.backbone.check_input(x)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, y: Var) -> Result<Trace> {
        self.check_pair(g.shape(x), g.shape(y))?;
        let out_size = (g.shape(x)[1], g.shape(x)[2]);

        let features_x = self.backbone.extract(g, x)?;
        let features_y = self.backbone.extract(g, y)?;

        let (mut enhanced_x, mut enhanced_y) = (features_x, features_y);
        if let Some(ra) = &self.relation {
            for n in 0..4 {
                let (ex, ey) = ra.levels[n].forward(g, features_x[n], features_y[n])?;
                enhanced_x[n] = ex;
                enhanced_y[n] = ey;
            }
        }
        let mut diffs = [x; 4];
        for n in 0..4 {
            diffs[n] = difference(g, enhanced_x[n], enhanced_y[n])?;
        }

        let (reweighted, gates) = self.scale.forward(g, &diffs)?;

        let mut fused = [x; 4];
        let ctb_out = match &self.ctb {
            Some(projs) => {
                let mut outs = Vec::with_capacity(4);
                for n in 0..4 {
                    let o = ctb(g, anchor_first(&reweighted[n], n), &projs[n])?;
                    fused[n] = o.fused;
                    outs.push(o);
                }
                Some(outs.try_into().expect("four levels"))
            }
            None => {
                for n in 0..4 {
                    fused[n] = reweighted[n][n];
                }
                None
            }
        };

        let prob = self.head.forward(g, fused, out_size)?;
        if g.value(prob).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "forward",
                msg: "non-finite change probability".into(),
            });
        }
        Ok(Trace {
            features_x,
            features_y,
            enhanced_x,
            enhanced_y,
            diffs,
            gates,
            reweighted,
            ctb: ctb_out,
            fused,
            prob,
        })
    }

    /// Change probability map for one image pair.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(store);
        let (vx, vy) = (g.input(x), g.input(y));
        let trace = self.forward(&mut g, vx, vy)?;
        Ok(g.tensor(trace.prob))
    }
}

/// `[D_n^n, D_m^n for m ≠ n in level order]`.
pub fn anchor_first(level: &[Var; 4], n: usize) -> [Var; 4] {
    let mut out = [level[n]; 4];
    let mut slot = 1;
    for (m, &v) in level.iter().enumerate() {
        if m != n {
            out[slot] = v;
            slot += 1;
        }
    }
    out
}

/// Argmax over the two channels; ties go to "unchanged".
pub fn change_map<T: Scalar>(prob: &Tensor<T>) -> Vec<u8> {
    let plane = prob.len() / 2;
    let (p0, p1) = prob.data().split_at(plane);
    p0.iter().zip(p1).map(|(a, b)| u8::from(b > a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(t: Toggles) -> NetworkConfig {
        let mut c = NetworkConfig {
            width_factor: 1.0 / 16.0,
            ..NetworkConfig::default()
        };
        c.set_toggles(t);
        c
    }

    fn image(seed: usize, size: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![3, size, size], |i| (((i + seed) * 2654435761) % 1000) as f64 / 1000.0)
    }

    #[test]
    fn output_is_a_distribution_at_input_resolution() {
        let mut store = ParamStore::<f64>::new();
        let net = ChangeDetector::new(&tiny_config(Toggles::all()), &mut store, 1).unwrap();
        let p = net.predict(&store, &image(1, 16), &image(2, 16)).unwrap();
        assert_eq!(p.shape(), &[2, 16, 16]);
        let (a, b) = p.data().split_at(256);
        for (x, y) in a.iter().zip(b) {
            assert!((x + y - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_images_collapse() {
        let mut store = ParamStore::<f64>::new();
        let net = ChangeDetector::new(&tiny_config(Toggles::all()), &mut store, 4).unwrap();
        let img = image(7, 16);
        let mut g = Graph::with_params(&store);
        let (x, y) = (g.input(&img), g.input(&img));
        let tr = net.forward(&mut g, x, y).unwrap();
        for d in tr.diffs {
            assert!(g.value(d).iter().all(|&v| v == 0.0));
        }
        let p = g.value(tr.prob);
        assert!(p[..256].iter().all(|&v| v == p[0]));
    }

    #[test]
    fn toggles_change_wiring() {
        let mut store = ParamStore::<f64>::new();
        let net = ChangeDetector::new(&tiny_config(Toggles::none()), &mut store, 4).unwrap();
        let mut g = Graph::with_params(&store);
        let (x, y) = (g.input(&image(1, 16)), g.input(&image(5, 16)));
        let tr = net.forward(&mut g, x, y).unwrap();
        assert!(tr.gates.is_none() && tr.ctb.is_none());
        assert_eq!(tr.enhanced_x, tr.features_x);
        for n in 0..4 {
            assert_eq!(tr.fused[n], tr.reweighted[n][n]);
        }
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let net = ChangeDetector::new(&tiny_config(Toggles::all()), &mut store, 4).unwrap();
        assert!(net.predict(&store, &image(1, 16), &image(1, 24)).is_err());
        assert!(matches!(net.predict(&store, &image(1, 12), &image(1, 12)), Err(Error::Config(_))));
    }

    #[test]
    fn anchor_ordering() {
        let mut g = Graph::<f64>::new();
        let v: Vec<Var> = (0..4).map(|i| g.input(&Tensor::scalar(i as f64))).collect();
        let lvl = [v[0], v[1], v[2], v[3]];
        assert_eq!(anchor_first(&lvl, 2), [v[2], v[0], v[1], v[3]]);
        assert_eq!(anchor_first(&lvl, 0), lvl);
    }

    #[test]
    fn argmax_ties_go_to_unchanged() {
        let p = Tensor::<f32>::from_f64(vec![2, 1, 3], &[0.5, 0.2, 0.9, 0.5, 0.8, 0.1]).unwrap();
        assert_eq!(change_map(&p), vec![0, 1, 0]);
    }
}
