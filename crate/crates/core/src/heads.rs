//! Classification head, heatmap decoder, and the two task losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::linear;
use crate::error::{Error, Result};
use crate::heatmap::HeatmapSet;
use crate::tensor::{Scalar, Tensor};

pub const DECODER_KERNEL: usize = 4;
pub const DECODER_STRIDE: usize = 2;
pub const DECODER_PAD: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub landmarks: usize,
    /// `s` in `ln(1 + s·MSE)`.
    pub mse_scale: f64,
    pub label_smoothing: f64,
    pub w_cls: f64,
    pub w_hm: f64,
    /// Decoder hidden width; `min(256, D)` when unset.
    #[serde(default)]
    pub decoder_channels: Option<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            landmarks: 5,
            mse_scale: 1000.0,
            label_smoothing: 0.1,
            w_cls: 1.0,
            w_hm: 1.0,
            decoder_channels: None,
        }
    }
}

impl HeadConfig {
    pub fn decoder_width(&self, dim: usize) -> usize {
        self.decoder_channels.unwrap_or_else(|| dim.min(256))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.landmarks == 0 {
            return Err(Error::config("need at least one class and one landmark"));
        }
        if !(self.mse_scale > 0.0) {
            return Err(Error::config(format!("mse_scale must be positive, got {}", self.mse_scale)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing)));
        }
        if !(self.w_cls > 0.0 && self.w_hm > 0.0) {
            return Err(Error::config("task weights must be positive"));
        }
        if self.decoder_channels == Some(0) {
            return Err(Error::config("decoder_channels must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    /// `D×Dd×4×4`
    pub deconv1: Var,
    /// `Dd×Dd×4×4`
    pub deconv2: Var,
    /// `L×Dd`
    pub conv_w: Var,
    /// `L`
    pub conv_b: Var,
}

/// Logits `1×C` from the `1×D` class token: `D→D` GELU layer, then `D→C`.
pub fn classify<F: Scalar>(g: &mut Graph<F>, class_token: Var, vars: &ClassifierVars) -> Result<Var> {
    let h = linear(g, class_token, vars.fc1_w, vars.fc1_b)?;
    let h = g.gelu(h);
    linear(g, h, vars.fc2_w, vars.fc2_b)
}

/// Heatmaps `L×4h×4w` from `N_p×D` pose tokens laid out on the `h×w` grid.
pub fn decode_heatmaps<F: Scalar>(
    g: &mut Graph<F>,
    pose_tokens: Var,
    h: usize,
    w: usize,
    vars: &DecoderVars,
) -> Result<Var> {
    let (np, d) = g.value(pose_tokens).shape2()?;
    if np != h * w {
        return Err(Error::shape(format!("{np} pose tokens do not tile a {h}×{w} grid")));
    }
    let x = g.transpose(pose_tokens)?;
    let x = g.reshape(x, &[d, h, w])?;
    let x = g.conv_transpose2d(x, vars.deconv1, DECODER_STRIDE, DECODER_PAD)?;
    let x = g.gelu(x);
    let x = g.conv_transpose2d(x, vars.deconv2, DECODER_STRIDE, DECODER_PAD)?;
    let x = g.gelu(x);
    g.conv1x1(x, vars.conv_w, vars.conv_b)
}

/// Label-smoothed target distribution.
pub fn smoothed_target<F: Scalar>(target: usize, classes: usize, eps: f64) -> Vec<F> {
    (0..classes)
        .map(|c| {
            let on = if c == target { 1.0 - eps } else { 0.0 };
            F::lit(on + eps / classes as f64)
        })
        .collect()
}

/// Cross-entropy against `(1-ε)·onehot + ε/C`.
pub fn loss_cls<F: Scalar>(g: &mut Graph<F>, logits: Var, target: usize, eps: f64) -> Result<Var> {
    let classes = g.value(logits).len();
    if target >= classes {
        return Err(Error::shape(format!("label {target} out of range for {classes} classes")));
    }
    g.soft_cross_entropy(logits, smoothed_target(target, classes, eps))
}

/// `ln(1 + s·MSE)` over the valid landmarks of `gt`. With no valid landmark
/// the loss is a constant zero.
pub fn loss_hm<F: Scalar>(g: &mut Graph<F>, pred: Var, gt: &HeatmapSet<F>, scale: f64) -> Result<Var> {
    match g.log_mse(pred, gt.maps.clone(), gt.valid.clone(), F::lit(scale))? {
        Some(v) => Ok(v),
        None => {
            log::warn!("heatmap target has no valid landmark; heatmap loss is zero");
            Ok(g.constant(Tensor::scalar(F::zero())))
        }
    }
}

/// `w_cls·loss_cls + w_hm·loss_hm`.
pub fn total_loss<F: Scalar>(g: &mut Graph<F>, cls: Var, hm: Option<Var>, cfg: &HeadConfig) -> Result<Var> {
    let c = g.scale(cls, F::lit(cfg.w_cls));
    match hm {
        Some(h) => {
            let h = g.scale(h, F::lit(cfg.w_hm));
            g.add(c, h)
        }
        None => Ok(c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        for eps in [0.0, 0.1, 0.5] {
            let mut g = Graph::<f64>::new();
            let z = g.param(Tensor::zeros(&[1, 7]));
            let l = loss_cls(&mut g, z, 3, eps).unwrap();
            assert!((g.scalar(l) - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_prediction_has_vanishing_loss() {
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::new(vec![1, 3], vec![0.0, 60.0, 0.0]).unwrap());
        let l = loss_cls(&mut g, z, 1, 0.0).unwrap();
        assert!(g.scalar(l) < 1e-20);
        assert!(loss_cls(&mut g, z, 3, 0.0).is_err());
    }

    #[test]
    fn smoothed_cross_entropy_matches_formula() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::new(vec![1, 4], logits.to_vec()).unwrap());
        let l = loss_cls(&mut g, z, 2, 0.1).unwrap();
        let lse = logits.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        let expect: f64 = (0..4)
            .map(|c| {
                let q = if c == 2 { 0.9 } else { 0.0 } + 0.1 / 4.0;
                -q * (logits[c] - lse)
            })
            .sum();
        assert!((g.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn log_mse_values() {
        let gt = HeatmapSet { maps: Tensor::zeros(&[1, 10, 10]), valid: vec![true] };
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::zeros(&[1, 10, 10]));
        let l = loss_hm(&mut g, p, &gt, 1000.0).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        // MSE = 1e-3 when every cell is off by sqrt(1e-3)
        let p = g.param(Tensor::full(&[1, 10, 10], 1e-3f64.sqrt()));
        let l = loss_hm(&mut g, p, &gt, 1000.0).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-9);
        let none = HeatmapSet { maps: Tensor::zeros(&[1, 10, 10]), valid: vec![false] };
        let l = loss_hm(&mut g, p, &none, 1000.0).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut g = Graph::<f64>::new();
        let d = 8;
        let vars = ClassifierVars {
            fc1_w: g.param(Tensor::zeros(&[d, d])),
            fc1_b: g.param(Tensor::zeros(&[d])),
            fc2_w: g.param(Tensor::zeros(&[d, 5])),
            fc2_b: g.param(Tensor::zeros(&[5])),
        };
        let x = g.constant(Tensor::full(&[1, d], 3.0));
        let z = classify(&mut g, x, &vars).unwrap();
        assert_eq!(g.value(z).data(), &[0.0; 5]);
    }

    #[test]
    fn decoder_output_sizes() {
        for (h, d, dd, l) in [(2usize, 4usize, 6usize, 5usize), (14, 2, 2, 3)] {
            let mut g = Graph::<f64>::new();
            let vars = DecoderVars {
                deconv1: g.param(Tensor::full(&[d, dd, 4, 4], 0.01)),
                deconv2: g.param(Tensor::full(&[dd, dd, 4, 4], 0.01)),
                conv_w: g.param(Tensor::full(&[l, dd], 0.1)),
                conv_b: g.param(Tensor::zeros(&[l])),
            };
            let p = g.constant(Tensor::full(&[h * h, d], 1.0));
            let out = decode_heatmaps(&mut g, p, h, h, &vars).unwrap();
            assert_eq!(g.dims(out), &[l, 4 * h, 4 * h]);
            let bad = g.constant(Tensor::full(&[h * h + 1, d], 1.0));
            assert!(decode_heatmaps(&mut g, bad, h, h, &vars).is_err());
        }
    }

    #[test]
    fn default_decoder_width() {
        let c = HeadConfig::default();
        assert_eq!(c.decoder_width(64), 64);
        assert_eq!(c.decoder_width(768), 256);
    }
}
