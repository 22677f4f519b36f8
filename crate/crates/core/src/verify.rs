//! Gradient checks over every differentiable op and the composed model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::heads::{loss_cls, loss_hm, smoothed_target, total_loss, HeadConfig};
use crate::heatmap::HeatmapSet;
use crate::model::{forward, ModelConfig, ModelVars, Params};
use crate::tensor::Tensor;
use crate::videotok::ClipSpec;

/// Threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NamedReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl NamedReport {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-scale..scale))
}

/// Reduce `x` to a scalar with fixed random weights so no gradient is
/// trivially symmetric.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.dims(x), 1.0);
    g.weighted_sum(x, w)
}

type OpFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        }),
        ("transpose", vec![vec![3, 4]], |g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, 2)
        }),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 3)
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, 4)
        }),
        ("scale", vec![vec![2, 3]], |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, 5)
        }),
        ("gelu", vec![vec![4, 5]], |g, v| {
            let y = g.gelu(v[0]);
            project(g, y, 6)
        }),
        ("softmax_rows", vec![vec![3, 6]], |g, v| {
            let y = g.softmax_rows(v[0])?;
            project(g, y, 7)
        }),
        ("layernorm", vec![vec![3, 6], vec![6], vec![6]], |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
            project(g, y, 8)
        }),
        ("conv_transpose2d", vec![vec![3, 2, 3], vec![3, 2, 4, 4]], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], 2, 1)?;
            project(g, y, 9)
        }),
        ("conv1x1", vec![vec![3, 2, 2], vec![4, 3], vec![4]], |g, v| {
            let y = g.conv1x1(v[0], v[1], v[2])?;
            project(g, y, 10)
        }),
        ("gather_rows", vec![vec![4, 3]], |g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
            project(g, y, 11)
        }),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            project(g, y, 12)
        }),
        ("slice_cols", vec![vec![3, 5]], |g, v| {
            let y = g.slice_cols(v[0], 1, 4)?;
            project(g, y, 13)
        }),
        ("concat_cols", vec![vec![3, 2], vec![3, 3]], |g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            project(g, y, 14)
        }),
        ("reshape", vec![vec![2, 6]], |g, v| {
            let y = g.reshape(v[0], &[3, 2, 2])?;
            project(g, y, 15)
        }),
        ("sum", vec![vec![2, 3]], |g, v| {
            let y = g.gelu(v[0]);
            Ok(g.sum(y))
        }),
        ("mean", vec![vec![2, 3]], |g, v| {
            let y = g.gelu(v[0]);
            Ok(g.mean(y))
        }),
        ("soft_cross_entropy", vec![vec![1, 5]], |g, v| g.soft_cross_entropy(v[0], smoothed_target(2, 5, 0.1))),
        ("log_mse", vec![vec![3, 4, 4]], |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(16);
            let t = Tensor::from_fn(&[3, 4, 4], |_| rng.random_range(0.0..1.0));
            let out = g.log_mse(v[0], t, vec![true, false, true], 1000.0)?;
            Ok(out.expect("two channels flagged"))
        }),
    ]
}

/// Check each op on random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let params: Vec<Tensor<f64>> = shapes.iter().map(|d| rand_tensor(&mut rng, d, 1.0)).collect();
            Ok(NamedReport { name, report: grad_check(&params, f)? })
        })
        .collect()
}

/// Smallest complete model: one 2×16×16 cube, two blocks of width 8, both
/// heads and the weighted total loss.
pub fn composed_config() -> ModelConfig {
    ModelConfig {
        clip: ClipSpec { frames: 2, channels: 1, height: 16, width: 16 },
        encoder: EncoderConfig { depth: 2, dim: 4, heads: 2, mlp_ratio: 2, selection_stages: vec![] },
        head: HeadConfig {
            num_classes: 3,
            landmarks: 2,
            decoder_channels: Some(2),
            w_hm: 0.5,
            ..HeadConfig::default()
        },
        pose_tokens: true,
        selection: None,
    }
}

/// Tokenizer → blocks → both heads → total loss.
pub fn model_check(seed: u64) -> Result<ModelReport> {
    let cfg = composed_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // wider init than training so every path carries signal
    let init = Params::<f64>::init(&cfg, seed)?;
    let tensors: Vec<Tensor<f64>> = init
        .names()
        .iter()
        .zip(init.tensors())
        .map(|(n, t)| {
            if n.ends_with(".g") {
                Tensor::from_fn(t.dims(), |_| rng.random_range(0.5..1.5))
            } else {
                rand_tensor(&mut rng, t.dims(), 0.6)
            }
        })
        .collect();
    // central differences lose about 1e-11 to rounding, so the instance keeps
    // every gradient well above that: pixels are bounded away from zero and
    // the heatmap target sits close to the prediction, where ln(1 + s·MSE)
    // is steep
    let clip = Tensor::from_fn(&cfg.clip.dims(), |_| {
        let m = rng.random_range(0.5..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    });
    let pred = {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let mv = ModelVars::assemble(&cfg, &vars)?;
        let out = forward(&mut g, &mv, &clip, &cfg)?;
        g.value(out.heatmaps.expect("pose tokens")).clone()
    };
    let target = HeatmapSet {
        maps: Tensor::new(
            pred.dims().to_vec(),
            pred.data().iter().map(|&v| v + rng.random_range(-0.03..0.03)).collect(),
        )?,
        valid: vec![true, false],
    };
    // Key biases shift every score of a query row equally, so softmax makes
    // their gradient exactly zero. Central differences only see rounding
    // there, which the relative metric cannot tell apart from a wrong
    // gradient, so they are held constant here and checked by `key_bias_grad`.
    let is_free: Vec<bool> = init.names().iter().map(|n| !n.ends_with("attn.bk")).collect();
    let free: Vec<Tensor<f64>> = tensors.iter().zip(&is_free).filter(|(_, &f)| f).map(|(t, _)| t.clone()).collect();
    let build = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let mut it = vars.iter().copied();
        let all: Vec<Var> = tensors
            .iter()
            .zip(&is_free)
            .map(|(t, &f)| if f { it.next().expect("one var per free tensor") } else { g.constant(t.clone()) })
            .collect();
        let mv = ModelVars::assemble(&cfg, &all)?;
        let out = forward(g, &mv, &clip, &cfg)?;
        let lc = loss_cls(g, out.logits, 1, cfg.head.label_smoothing)?;
        let lh = loss_hm(g, out.heatmaps.expect("pose tokens"), &target, cfg.head.mse_scale)?;
        total_loss(g, lc, Some(lh), &cfg.head)
    };
    let report = grad_check(&free, build)?;

    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
    let mv = ModelVars::assemble(&cfg, &vars)?;
    let out = forward(&mut g, &mv, &clip, &cfg)?;
    let lc = loss_cls(&mut g, out.logits, 1, cfg.head.label_smoothing)?;
    let lh = loss_hm(&mut g, out.heatmaps.expect("pose tokens"), &target, cfg.head.mse_scale)?;
    let loss = total_loss(&mut g, lc, Some(lh), &cfg.head)?;
    let grads = g.backward(loss)?;
    let key_bias_grad = vars
        .iter()
        .zip(&is_free)
        .filter(|(_, &f)| !f)
        .filter_map(|(&v, _)| grads.get(v))
        .flat_map(|t| t.data().iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    Ok(ModelReport { report, key_bias_grad })
}

/// Bound on the analytic key-bias gradient, which is zero up to rounding.
pub const KEY_BIAS_BOUND: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ModelReport {
    /// Finite-difference check over every parameter except the key biases.
    pub report: GradCheckReport,
    /// Largest analytic key-bias gradient.
    pub key_bias_grad: f64,
}

impl ModelReport {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < TOLERANCE && self.key_bias_grad < KEY_BIAS_BOUND
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for r in op_suite(0).unwrap() {
            assert!(r.passed(), "{}: {:?}", r.name, r.report);
        }
    }

    #[test]
    fn composed_model_passes() {
        let r = model_check(0).unwrap();
        assert!(r.report.elements > 2000);
        assert!(r.passed(), "{r:?}");
    }
}
