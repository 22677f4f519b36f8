//! AdamW training, temporal-view evaluation and the keep-rate sweep.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::{OptimConfig, RunConfig};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::heads::{loss_cls, loss_hm, total_loss};
use crate::heatmap::{clip_target, heatmap_mae, Grid, HeatmapSet, DEFAULT_SIGMA};
use crate::metrics::{argmax, ConfusionMatrix};
use crate::model::{forward, ModelConfig, Params};
use crate::par::{self, Execution};
use crate::selection::SelectionOutcome;
use crate::tensor::Tensor;

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t/t_max))`, constant `lr_max` when
/// `t_max` is 0.
pub fn cosine_lr(lr_max: f64, lr_min: f64, t: usize, t_max: usize) -> f64 {
    if t_max == 0 {
        return lr_max;
    }
    let frac = t.min(t_max) as f64 / t_max as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Decoupled weight decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(params: &Params<f32>, cfg: &OptimConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0f32; t.len()]).collect();
        Self { m: zeros(), v: zeros(), step: 0, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps }
    }

    /// One update. `lrs[i]` and `decay[i]` apply to parameter `i`.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &[Tensor<f32>], lrs: &[f64], decay: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let lr = lrs[i];
            if lr == 0.0 {
                continue;
            }
            let shrink = (1.0 - lr * decay[i]) as f32;
            let step_size = (lr / bc1) as f32;
            let denom_scale = (1.0 / bc2.sqrt()) as f32;
            let eps = self.eps as f32;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w *= shrink;
                *w -= step_size * *m / ((*v).sqrt() * denom_scale + eps);
            }
        }
    }
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|t| t.data()).map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|g| *g *= s));
    }
    norm
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

fn decays(name: &str, t: &Tensor<f32>) -> bool {
    t.rank() >= 2 && !name.starts_with("embed.pos") && name != "embed.cls" && name != "embed.pose"
}

/// Uniformly spaced start frames of `views` windows of `window` frames.
pub fn view_offsets(total: usize, window: usize, views: usize) -> Vec<usize> {
    if total <= window || views <= 1 {
        return vec![(total.saturating_sub(window)) / 2];
    }
    let span = (total - window) as f64;
    (0..views).map(|i| (span * i as f64 / (views - 1) as f64).round() as usize).collect()
}

/// Frames `[offset, offset+T)` of `clip`, resized to the model's frame size by
/// nearest neighbour.
pub fn clip_view(clip: &Tensor<f32>, model: &ModelConfig, offset: usize) -> Result<Tensor<f32>> {
    let dims = clip.dims();
    let spec = model.clip;
    if dims.len() != 4 || dims[1] != spec.channels {
        return Err(Error::shape(format!("clip {dims:?} does not have {} channels", spec.channels)));
    }
    let (total, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    if offset + spec.frames > total {
        return Err(Error::shape(format!("view [{offset}, {}) runs past a {total}-frame clip", offset + spec.frames)));
    }
    let (oh, ow) = (spec.height, spec.width);
    let src = clip.data();
    let mut out = Vec::with_capacity(spec.frames * c * oh * ow);
    for f in offset..offset + spec.frames {
        for ch in 0..c {
            let plane = &src[(f * c + ch) * h * w..(f * c + ch + 1) * h * w];
            for y in 0..oh {
                let sy = y * h / oh;
                for x in 0..ow {
                    out.push(plane[sy * w + x * w / ow]);
                }
            }
        }
    }
    Tensor::new(vec![spec.frames, c, oh, ow], out)
}

/// Heatmap target of one view of `sample`.
pub fn view_target(sample: &Sample, model: &ModelConfig, offset: usize) -> Result<HeatmapSet<f32>> {
    let (_, h, w) = model.clip.grid();
    let dims = sample.clip.dims();
    let refs: Vec<_> = sample.annotations.iter().collect();
    clip_target(
        &refs,
        offset..offset + model.clip.frames,
        model.head.landmarks,
        dims[3],
        dims[2],
        Grid::for_tokens(h, w),
        DEFAULT_SIGMA,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_hm: f64,
    pub train_acc: f64,
    /// Running mean over the epoch's training clips.
    pub heatmap_mae: Option<f64>,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub grad_norm: f64,
}

struct ClipResult {
    grads: Vec<Tensor<f32>>,
    loss: f64,
    loss_cls: f64,
    loss_hm: f64,
    correct: bool,
    mae: Option<f64>,
}

fn clip_step(
    params: &Params<f32>,
    model: &ModelConfig,
    clip: &Tensor<f32>,
    label: usize,
    target: Option<&HeatmapSet<f32>>,
) -> Result<ClipResult> {
    let mut g = Graph::new();
    let (vars, pv) = params.bind(&mut g, model)?;
    let out = forward(&mut g, &vars, clip, model)?;
    let lc = loss_cls(&mut g, out.logits, label, model.head.label_smoothing)?;
    let (lh, mae) = match (out.heatmaps, target) {
        (Some(hm), Some(t)) => {
            let pred = HeatmapSet::from_prediction(g.value(hm))?;
            let mae = heatmap_mae(&pred, t)? as f64;
            (Some(loss_hm(&mut g, hm, t, model.head.mse_scale)?), Some(mae))
        }
        _ => (None, None),
    };
    let loss = total_loss(&mut g, lc, lh, &model.head)?;
    let mut grads = g.backward(loss)?;
    Ok(ClipResult {
        grads: params.collect_grads(&mut grads, &pv),
        loss: g.scalar(loss) as f64,
        loss_cls: g.scalar(lc) as f64,
        loss_hm: lh.map_or(0.0, |v| g.scalar(v) as f64),
        correct: argmax(g.value(out.logits).data()) == label,
        mae,
    })
}

pub struct TrainOutput {
    pub params: Params<f32>,
    pub log: Vec<EpochLog>,
}

/// Train on the train split of `ds`. Per-clip gradients of a batch are
/// computed with `exec` and summed in batch order, so the result does not
/// depend on the execution mode.
pub fn train(cfg: &RunConfig, ds: &Dataset, exec: Execution) -> Result<TrainOutput> {
    train_with(cfg, ds, exec, |_| {})
}

pub fn train_with(
    cfg: &RunConfig,
    ds: &Dataset,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let model = cfg.model();
    if ds.num_classes() != model.head.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, head expects {}",
            ds.num_classes(),
            model.head.num_classes
        )));
    }
    let train: Vec<&Sample> = ds.split(crate::data::Split::Train);
    if train.is_empty() {
        return Err(Error::config("dataset has no training clips"));
    }
    let frames = train[0].clip.dims()[0];
    if train.iter().any(|s| s.clip.dims()[0] != frames) {
        return Err(Error::shape("training clips differ in length"));
    }
    if frames < model.clip.frames {
        return Err(Error::shape(format!("clips have {frames} frames, model needs {}", model.clip.frames)));
    }
    let n_offsets = frames - model.clip.frames + 1;
    // targets for every (clip, offset)
    let targets: Vec<Vec<HeatmapSet<f32>>> = if model.pose_tokens {
        par::map(exec, &train, |s| (0..n_offsets).map(|o| view_target(s, &model, o)).collect())
            .into_iter()
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let o = &cfg.optim;
    let mut params = Params::<f32>::init(&model, cfg.seed)?;
    let mut opt = AdamW::new(&params, o);
    let decay: Vec<f64> = params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(n, t)| if decays(n, t) { o.weight_decay } else { 0.0 })
        .collect();
    let heads: Vec<bool> = params.names().iter().map(|n| is_head(n)).collect();
    let batches_per_epoch = train.len().div_ceil(o.batch_size);
    let steps_per_epoch = batches_per_epoch.div_ceil(o.accumulate);
    let total_steps = steps_per_epoch * o.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_0DE7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut log = Vec::with_capacity(o.epochs);

    for epoch in 1..=o.epochs {
        order.shuffle(&mut rng);
        let offsets: Vec<usize> = order.iter().map(|_| rng.random_range(0..n_offsets)).collect();
        let (mut loss, mut lcls, mut lhm, mut correct) = (0.0, 0.0, 0.0, 0usize);
        let (mut mae_sum, mut mae_n) = (0.0, 0usize);
        let mut acc: Option<Vec<Tensor<f32>>> = None;
        let mut acc_clips = 0usize;
        let mut last_norm = 0.0;
        let (mut lr_b, mut lr_h) = (o.lr_backbone, o.lr_heads);
        for (b, chunk) in order.chunks(o.batch_size).enumerate() {
            let jobs: Vec<(usize, usize)> =
                chunk.iter().enumerate().map(|(k, &i)| (i, offsets[b * o.batch_size + k])).collect();
            let results = par::map(exec, &jobs, |&(i, off)| {
                let s = train[i];
                let view = clip_view(&s.clip, &model, off)?;
                let target = targets.get(i).map(|t| &t[off]);
                clip_step(&params, &model, &view, s.label, target)
            });
            for (r, &(i, _)) in results.into_iter().zip(&jobs) {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became {} at epoch {epoch}, batch {b}, clip {}; \
                         lower the learning rate or check the data",
                        r.loss, train[i].id
                    )));
                }
                loss += r.loss;
                lcls += r.loss_cls;
                lhm += r.loss_hm;
                correct += r.correct as usize;
                if let Some(m) = r.mae {
                    mae_sum += m;
                    mae_n += 1;
                }
                match acc.as_mut() {
                    None => acc = Some(r.grads),
                    Some(a) => a.iter_mut().zip(&r.grads).for_each(|(a, g)| a.add_assign(g)),
                }
                acc_clips += 1;
            }
            let boundary = (b + 1) % o.accumulate == 0 || b + 1 == batches_per_epoch;
            if boundary {
                let mut grads = acc.take().expect("at least one clip per batch");
                let inv = 1.0 / acc_clips as f32;
                grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|g| *g *= inv));
                acc_clips = 0;
                last_norm = clip_grad_norm(&mut grads, o.grad_clip);
                lr_b = cosine_lr(o.lr_backbone, o.lr_min.min(o.lr_backbone), step, total_steps);
                lr_h = cosine_lr(o.lr_heads, o.lr_min.min(o.lr_heads), step, total_steps);
                let lrs: Vec<f64> = heads.iter().map(|&h| if h { lr_h } else { lr_b }).collect();
                opt.step(&mut params, &grads, &lrs, &decay);
                step += 1;
            }
        }
        let n = train.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: loss / n,
            loss_cls: lcls / n,
            loss_hm: lhm / n,
            train_acc: correct as f64 / n,
            heatmap_mae: (mae_n > 0).then(|| mae_sum / mae_n as f64),
            lr_backbone: lr_b,
            lr_heads: lr_h,
            grad_norm: last_norm,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}, hm {:.4}) acc {:.3} mae {:?}",
            entry.loss,
            entry.loss_cls,
            entry.loss_hm,
            entry.train_acc,
            entry.heatmap_mae
        );
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutput { params, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub id: String,
    pub label: usize,
    pub pred: usize,
    /// Mean over views.
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: usize,
    pub micro: f64,
    #[serde(rename = "macro")]
    pub macro_acc: f64,
    pub confusion: ConfusionMatrix,
    pub heatmap_mae: Option<f64>,
    pub views: usize,
    pub predictions: Vec<ClipPrediction>,
}

/// Logits of one clip averaged over `views` temporal views, plus the mean
/// heatmap MAE of those views.
pub fn predict_clip(
    params: &Params<f32>,
    model: &ModelConfig,
    sample: &Sample,
    views: usize,
) -> Result<(Vec<f32>, Option<f64>, Vec<SelectionOutcome>)> {
    let offsets = view_offsets(sample.clip.dims()[0], model.clip.frames, views);
    let mut sum = vec![0f32; model.head.num_classes];
    let (mut mae, mut mae_n) = (0.0, 0usize);
    let mut outcomes = Vec::new();
    for &off in &offsets {
        let mut g = Graph::new();
        let (vars, _) = params.bind(&mut g, model)?;
        let view = clip_view(&sample.clip, model, off)?;
        let out = forward(&mut g, &vars, &view, model)?;
        sum.iter_mut().zip(g.value(out.logits).data()).for_each(|(s, &v)| *s += v);
        if let Some(hm) = out.heatmaps {
            if !sample.annotations.is_empty() {
                let t = view_target(sample, model, off)?;
                mae += heatmap_mae(&HeatmapSet::from_prediction(g.value(hm))?, &t)? as f64;
                mae_n += 1;
            }
        }
        if outcomes.is_empty() {
            outcomes = out.outcomes;
        }
    }
    let inv = 1.0 / offsets.len() as f32;
    sum.iter_mut().for_each(|v| *v *= inv);
    Ok((sum, (mae_n > 0).then(|| mae / mae_n as f64), outcomes))
}

pub fn evaluate(
    params: &Params<f32>,
    model: &ModelConfig,
    samples: &[&Sample],
    views: usize,
    exec: Execution,
) -> Result<EvalReport> {
    evaluate_detailed(params, model, samples, views, exec).map(|(r, _)| r)
}

/// Like [`evaluate`], also returning each clip's selection outcomes from its
/// first temporal view.
pub fn evaluate_detailed(
    params: &Params<f32>,
    model: &ModelConfig,
    samples: &[&Sample],
    views: usize,
    exec: Execution,
) -> Result<(EvalReport, Vec<Vec<SelectionOutcome>>)> {
    let results = par::map(exec, samples, |s| predict_clip(params, model, s, views));
    let mut all_outcomes = Vec::with_capacity(samples.len());
    let mut confusion = ConfusionMatrix::new(model.head.num_classes);
    let mut predictions = Vec::with_capacity(samples.len());
    let (mut mae, mut mae_n) = (0.0, 0usize);
    for (r, s) in results.into_iter().zip(samples) {
        let (logits, m, outcomes) = r?;
        all_outcomes.push(outcomes);
        let pred = argmax(&logits);
        confusion.add(s.label, pred)?;
        if let Some(m) = m {
            mae += m;
            mae_n += 1;
        }
        predictions.push(ClipPrediction { id: s.id.clone(), label: s.label, pred, logits });
    }
    let report = EvalReport {
        clips: samples.len(),
        micro: confusion.micro(),
        macro_acc: confusion.macro_acc(),
        confusion,
        heatmap_mae: (mae_n > 0).then(|| mae / mae_n as f64),
        views,
        predictions,
    };
    Ok((report, all_outcomes))
}
