//! Analytic FLOP model of the whole network.
//!
//! Convention: one multiply-accumulate is 2 FLOPs. Normalisation, softmax and
//! activation costs are excluded. Transposed convolutions are counted as the
//! dense convolution over their zero-upsampled input (every output cell
//! accumulates `Cin·k·k` products).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{DECODER_KERNEL, DECODER_PAD, DECODER_STRIDE};
use crate::selection::{MergePolicy, ScorePolicy, SelectionConfig};
use crate::tensor::conv_transpose_out;
use crate::videotok::ClipSpec;

/// Everything the cost of one forward pass depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub clip: ClipSpec,
    pub encoder: EncoderConfig,
    pub pose_tokens: bool,
    /// `None` disables selection.
    pub selection: Option<SelectionConfig>,
    pub num_classes: usize,
    pub landmarks: usize,
    pub decoder_channels: usize,
}

impl CostConfig {
    /// ViT-base on 16×224×224 grayscale clips, no pose tokens, no selection.
    pub fn reference() -> Self {
        Self {
            clip: ClipSpec::REFERENCE,
            encoder: EncoderConfig::base(),
            pose_tokens: false,
            selection: None,
            num_classes: 34,
            landmarks: 13,
            decoder_channels: 256,
        }
    }

    pub fn with_pose_tokens(mut self) -> Self {
        self.pose_tokens = true;
        self
    }

    pub fn with_selection(mut self, sel: SelectionConfig) -> Self {
        self.selection = Some(sel);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.clip.validate().map_err(|e| Error::config(e.to_string()))?;
        self.encoder.validate()?;
        if let Some(sel) = &self.selection {
            sel.validate()?;
            if sel.score_policy == ScorePolicy::ClassPose && !self.pose_tokens {
                return Err(Error::config("class+pose scoring requires pose tokens"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    /// 1-based layer index.
    pub layer: usize,
    pub tokens: usize,
    pub visual: usize,
    pub attention_flops: u64,
    pub mlp_flops: u64,
}

impl LayerCost {
    pub fn flops(&self) -> u64 {
        self.attention_flops + self.mlp_flops
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub embed_flops: u64,
    pub classifier_flops: u64,
    pub decoder_flops: u64,
    pub selection_flops: u64,
    pub total_flops: u64,
    pub total_gflops: f64,
}

impl CostReport {
    /// Per-layer CSV: `layer,tokens,visual,attention_flops,mlp_flops,flops`.
    pub fn layers_csv(&self) -> String {
        let mut out = String::from("layer,tokens,visual,attention_flops,mlp_flops,flops\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                l.layer,
                l.tokens,
                l.visual,
                l.attention_flops,
                l.mlp_flops,
                l.flops()
            );
        }
        out
    }

    pub fn parts_sum(&self) -> u64 {
        self.layers.iter().map(LayerCost::flops).sum::<u64>()
            + self.embed_flops
            + self.classifier_flops
            + self.decoder_flops
            + self.selection_flops
    }
}

/// Cost of one ViT block with MLP ratio 4 on `n` tokens of width `d`:
/// `2·(12·n·d² + 2·n²·d)`.
pub fn layer_flops(n: u64, d: u64) -> u64 {
    2 * (12 * n * d * d + 2 * n * n * d)
}

fn attention_flops(n: u64, d: u64) -> u64 {
    2 * (4 * n * d * d + 2 * n * n * d)
}

fn mlp_flops(n: u64, d: u64, ratio: u64) -> u64 {
    2 * (2 * ratio * n * d * d)
}

/// Dense-equivalent cost of a stride-2 decoder stage.
fn deconv_flops(h_in: usize, w_in: usize, c_in: usize, c_out: usize) -> Result<u64> {
    let h = conv_transpose_out(h_in, DECODER_KERNEL, DECODER_STRIDE, DECODER_PAD)?;
    let w = conv_transpose_out(w_in, DECODER_KERNEL, DECODER_STRIDE, DECODER_PAD)?;
    let k2 = (DECODER_KERNEL * DECODER_KERNEL) as u64;
    Ok(2 * (h * w) as u64 * c_in as u64 * c_out as u64 * k2)
}

pub fn model_flops(cfg: &CostConfig) -> Result<CostReport> {
    cfg.validate()?;
    let d = cfg.encoder.dim as u64;
    let ratio = cfg.encoder.mlp_ratio as u64;
    let layout = cfg.clip.layout(cfg.pose_tokens);
    let fixed = layout.visual_start();
    let mut visual = layout.visual;
    let mut layers = Vec::with_capacity(cfg.encoder.depth);
    let mut selection_flops = 0u64;
    for layer in 1..=cfg.encoder.depth {
        let n = (fixed + visual) as u64;
        layers.push(LayerCost {
            layer,
            tokens: fixed + visual,
            visual,
            attention_flops: attention_flops(n, d),
            mlp_flops: mlp_flops(n, d, ratio),
        });
        if let (Some(sel), true) = (&cfg.selection, cfg.encoder.is_stage(layer)) {
            let counts = sel.stage_counts(visual);
            if counts.merged > 0 {
                let nd = counts.discarded as u64;
                let fd = match sel.similarity_feature {
                    crate::selection::SimilarityFeature::Attn => n,
                    _ => d,
                };
                selection_flops += match sel.merge_policy {
                    MergePolicy::Bipartite => 2 * nd.div_ceil(2) * (nd / 2) * fd,
                    _ => 2 * nd * nd * fd,
                };
            }
            visual = counts.survivors();
        }
    }

    let embed_flops = 2 * layout.visual as u64 * cfg.clip.cube_len() as u64 * d;
    let classifier_flops = 2 * (d * d + d * cfg.num_classes as u64);
    let decoder_flops = if cfg.pose_tokens {
        let (_, h, w) = cfg.clip.grid();
        let dd = cfg.decoder_channels;
        let (h2, w2) = (2 * h, 2 * w);
        let (h4, w4) = (4 * h, 4 * w);
        deconv_flops(h, w, cfg.encoder.dim, dd)?
            + deconv_flops(h2, w2, dd, dd)?
            + 2 * (h4 * w4 * dd * cfg.landmarks) as u64
    } else {
        0
    };
    let mut report = CostReport {
        layers,
        embed_flops,
        classifier_flops,
        decoder_flops,
        selection_flops,
        total_flops: 0,
        total_gflops: 0.0,
    };
    report.total_flops = report.parts_sum();
    report.total_gflops = report.total_flops as f64 / 1e9;
    Ok(report)
}

/// Relative tolerance of [`solve_keep_rate`].
pub const KEEP_RATE_TOLERANCE: f64 = 0.005;

/// Keep rate at which `cfg` costs `target_gflops`, found by bisection over
/// `(0, 1]`. Targets at or above the unpruned cost give 1.
pub fn solve_keep_rate(target_gflops: f64, cfg: &CostConfig) -> Result<f64> {
    let base_sel = cfg.selection.ok_or_else(|| Error::config("solve_keep_rate needs a selection config"))?;
    let cost = |rho: f64| -> Result<f64> {
        let c = CostConfig { selection: Some(SelectionConfig { rho, ..base_sel }), ..cfg.clone() };
        Ok(model_flops(&c)?.total_gflops)
    };
    let full = cost(1.0)?;
    if target_gflops >= full * (1.0 - KEEP_RATE_TOLERANCE) {
        return Ok(1.0);
    }
    // smallest rho whose cost reaches the target
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mid <= 0.0 {
            break;
        }
        if cost(mid)? >= target_gflops {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let best = [hi, lo.max(f64::MIN_POSITIVE)]
        .into_iter()
        .map(|r| Ok((r, cost(r)?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min_by(|a, b| (a.1 - target_gflops).abs().total_cmp(&(b.1 - target_gflops).abs()))
        .expect("two candidates");
    if (best.1 - target_gflops).abs() / target_gflops > KEEP_RATE_TOLERANCE {
        return Err(Error::config(format!(
            "no keep rate reaches {target_gflops} GFLOPs within {}%: closest is {:.3} at rho = {:.4}",
            KEEP_RATE_TOLERANCE * 100.0,
            best.1,
            best.0
        )));
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_layer() {
        assert_eq!(layer_flops(1, 1), 28);
        assert_eq!(attention_flops(5, 8) + mlp_flops(5, 8, 4), layer_flops(5, 8));
    }

    #[test]
    fn doubling_width_quadruples_projection_terms() {
        let n = 100;
        let proj = |d: u64| 2 * 12 * n * d * d;
        assert_eq!(proj(128), 4 * proj(64));
        let ratio = layer_flops(n, 128) as f64 / layer_flops(n, 64) as f64;
        assert!(ratio > 2.0 && ratio < 4.0);
    }

    #[test]
    fn parts_sum_to_total() {
        let cfg = CostConfig::reference().with_pose_tokens().with_selection(SelectionConfig::default());
        let r = model_flops(&cfg).unwrap();
        assert_eq!(r.parts_sum(), r.total_flops);
        assert!(r.decoder_flops > 11_000_000_000 && r.decoder_flops < 12_500_000_000);
    }

    #[test]
    fn disabled_selection_equals_no_selection() {
        let cfg = CostConfig::reference().with_pose_tokens();
        let none = model_flops(&cfg).unwrap();
        let off = model_flops(&cfg.clone().with_selection(SelectionConfig::disabled())).unwrap();
        assert_eq!(none, off);
    }

    #[test]
    fn layer_counts_follow_the_schedule() {
        let cfg = CostConfig::reference().with_pose_tokens().with_selection(SelectionConfig::default());
        let r = model_flops(&cfg).unwrap();
        let visual: Vec<usize> = r.layers.iter().map(|l| l.visual).collect();
        assert_eq!(visual, vec![1568, 1568, 1568, 1129, 1129, 813, 813, 585, 585, 585, 585, 585]);
        assert_eq!(r.layers[0].tokens, 1765);
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let cfg = CostConfig::reference().with_selection(SelectionConfig::default());
        assert!(matches!(model_flops(&cfg), Err(Error::Config(_))));
        let mut cfg = CostConfig::reference();
        cfg.encoder.selection_stages = vec![13];
        assert!(model_flops(&cfg).is_err());
    }

    #[test]
    fn keep_rate_fixed_point_and_order() {
        let cfg = CostConfig::reference().with_selection(SelectionConfig::class_only(1.0));
        let full = model_flops(&cfg).unwrap().total_gflops;
        assert_eq!(solve_keep_rate(full, &cfg).unwrap(), 1.0);
        let a = solve_keep_rate(200.0, &cfg).unwrap();
        let b = solve_keep_rate(250.0, &cfg).unwrap();
        assert!(a < b);
    }

    proptest! {
        #[test]
        fn cost_is_monotone_in_rates(r1 in 0.05f64..1.0, r2 in 0.05f64..1.0, l1 in 0.05f64..1.0, l2 in 0.05f64..1.0) {
            // the similarity term shrinks as more tokens are kept, so only the
            // encoder part is monotone once merging is on
            let cost = |rho: f64, lambda: f64| {
                let sel = SelectionConfig { rho, lambda, ..Default::default() };
                let r = model_flops(&CostConfig::reference().with_pose_tokens().with_selection(sel)).unwrap();
                r.layers.iter().map(LayerCost::flops).sum::<u64>()
            };
            let total = |rho: f64| {
                let sel = SelectionConfig { rho, merge_policy: MergePolicy::None, ..Default::default() };
                model_flops(&CostConfig::reference().with_pose_tokens().with_selection(sel)).unwrap().total_flops
            };
            let (rlo, rhi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let (llo, lhi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            prop_assert!(cost(rlo, llo) <= cost(rhi, llo));
            prop_assert!(cost(rlo, llo) <= cost(rlo, lhi));
            prop_assert!(total(rlo) <= total(rhi));
        }
    }
}
