//! Pre-norm ViT blocks that expose their head-averaged attention.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::videotok::TokenBatch;

pub const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based layer indices after which token selection runs.
    pub selection_stages: Vec<usize>,
}

impl EncoderConfig {
    /// ViT-base: selection after layer 3 and then every two layers.
    pub fn base() -> Self {
        Self { depth: 12, dim: 768, heads: 12, mlp_ratio: 4, selection_stages: vec![3, 5, 7] }
    }

    /// Desk-scale model; stages keep the "quarter depth, then every two" spacing.
    pub fn toy() -> Self {
        Self { depth: 6, dim: 64, heads: 4, mlp_ratio: 4, selection_stages: vec![2, 4] }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("encoder sizes must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("embedding dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        let mut prev = 0;
        for &s in &self.selection_stages {
            if s <= prev || s > self.depth {
                return Err(Error::config(format!(
                    "selection stages {:?} must be increasing layer indices in 1..={}",
                    self.selection_stages, self.depth
                )));
            }
            prev = s;
        }
        Ok(())
    }

    pub fn is_stage(&self, layer: usize) -> bool {
        self.selection_stages.contains(&layer)
    }
}

/// Attention captured from one layer.
#[derive(Debug, Clone)]
pub struct AttentionRecord<F> {
    /// `N×N`, mean over heads of the post-softmax attention.
    pub attn: Tensor<F>,
    /// `N×D` queries (heads side by side), kept only at selection stages.
    pub queries: Option<Tensor<F>>,
    /// `N×D` keys, kept only at selection stages.
    pub keys: Option<Tensor<F>>,
    pub layer: usize,
}

/// Graph handles of one block's parameters. Linear weights are `in×out`.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

pub fn linear<F: Scalar>(g: &mut Graph<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Multi-head self-attention over all rows of `x` (no residual).
pub fn attention<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    vars: &BlockVars,
    heads: usize,
    layer: usize,
    keep_qk: bool,
) -> Result<(Var, AttentionRecord<F>)> {
    let (n, d) = g.value(x).shape2()?;
    if d % heads != 0 {
        return Err(Error::shape(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = linear(g, x, vars.wq, vars.bq)?;
    let k = linear(g, x, vars.wk, vars.bk)?;
    let v = linear(g, x, vars.wv, vars.bv)?;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut mean = Tensor::zeros(&[n, n]);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores)?;
        mean.add_assign(g.value(a));
        outs.push(g.matmul(a, vh)?);
    }
    let inv = F::one() / F::lit(heads as f64);
    mean.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let out = linear(g, merged, vars.wo, vars.bo)?;
    let record = AttentionRecord {
        attn: mean,
        queries: keep_qk.then(|| g.value(q).clone()),
        keys: keep_qk.then(|| g.value(k).clone()),
        layer,
    };
    Ok((out, record))
}

/// Attention plus residual on the raw tokens.
pub fn mhsa<F: Scalar>(
    g: &mut Graph<F>,
    batch: TokenBatch,
    vars: &BlockVars,
    heads: usize,
    layer: usize,
    keep_qk: bool,
) -> Result<(TokenBatch, AttentionRecord<F>)> {
    let (a, rec) = attention(g, batch.tokens, vars, heads, layer, keep_qk)?;
    let tokens = g.add(batch.tokens, a)?;
    Ok((TokenBatch { tokens, ..batch }, rec))
}

/// `x + attn(LN(x))`, then `+ MLP(LN(·))` with a GELU hidden layer.
pub fn vit_block<F: Scalar>(
    g: &mut Graph<F>,
    batch: TokenBatch,
    vars: &BlockVars,
    heads: usize,
    layer: usize,
    keep_qk: bool,
) -> Result<(TokenBatch, AttentionRecord<F>)> {
    let eps = F::lit(LAYERNORM_EPS);
    let x = batch.tokens;
    let n1 = g.layernorm(x, vars.ln1_g, vars.ln1_b, eps)?;
    let (a, rec) = attention(g, n1, vars, heads, layer, keep_qk)?;
    let h = g.add(x, a)?;
    let n2 = g.layernorm(h, vars.ln2_g, vars.ln2_b, eps)?;
    let f1 = linear(g, n2, vars.fc1_w, vars.fc1_b)?;
    let f1 = g.gelu(f1);
    let f2 = linear(g, f1, vars.fc2_w, vars.fc2_b)?;
    let tokens = g.add(h, f2)?;
    Ok((TokenBatch { tokens, ..batch }, rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videotok::TokenLayout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_block(g: &mut Graph<f64>, d: usize, hidden: usize, seed: u64) -> BlockVars {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = |dims: &[usize], s: f64| {
            let t = Tensor::from_fn(dims, |_| rng.random_range(-s..s));
            g.param(t)
        };
        BlockVars {
            ln1_g: p(&[d], 1.5),
            ln1_b: p(&[d], 0.3),
            wq: p(&[d, d], 0.5),
            bq: p(&[d], 0.1),
            wk: p(&[d, d], 0.5),
            bk: p(&[d], 0.1),
            wv: p(&[d, d], 0.5),
            bv: p(&[d], 0.1),
            wo: p(&[d, d], 0.5),
            bo: p(&[d], 0.1),
            ln2_g: p(&[d], 1.5),
            ln2_b: p(&[d], 0.3),
            fc1_w: p(&[d, hidden], 0.5),
            fc1_b: p(&[hidden], 0.1),
            fc2_w: p(&[hidden, d], 0.5),
            fc2_b: p(&[d], 0.1),
        }
    }

    fn batch_of(g: &mut Graph<f64>, x: Tensor<f64>) -> TokenBatch {
        let n = x.dims()[0];
        let tokens = g.constant(x);
        TokenBatch {
            tokens,
            layout: TokenLayout { pose: 0, visual: n - 1 },
            visual_origin: vec![],
            alive_mask: vec![],
            grid: (1, 1, n - 1),
        }
    }

    /// Direct O(N²) attention with explicit loops.
    fn naive_mhsa(x: &Tensor<f64>, g: &Graph<f64>, v: &BlockVars, heads: usize) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = x.shape2().unwrap();
        let dh = d / heads;
        let lin = |w: Var, b: Var| {
            let (w, b) = (g.value(w), g.value(b));
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for o in 0..d {
                    let mut s = b.data()[o];
                    for k in 0..d {
                        s += x.data()[i * d + k] * w.data()[k * d + o];
                    }
                    out[i * d + o] = s;
                }
            }
            out
        };
        let (q, k, val) = (lin(v.wq, v.bq), lin(v.wk, v.bk), lin(v.wv, v.bv));
        let mut cat = vec![0.0; n * d];
        let mut avg = vec![0.0; n * n];
        for h in 0..heads {
            for i in 0..n {
                let mut s: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                s.iter_mut().for_each(|e| *e = (*e - m).exp());
                let z: f64 = s.iter().sum();
                for j in 0..n {
                    let a = s[j] / z;
                    avg[i * n + j] += a / heads as f64;
                    for c in 0..dh {
                        cat[i * d + h * dh + c] += a * val[j * d + h * dh + c];
                    }
                }
            }
        }
        let (wo, bo) = (g.value(v.wo), g.value(v.bo));
        let mut out = x.data().to_vec();
        for i in 0..n {
            for o in 0..d {
                let mut s = bo.data()[o];
                for k in 0..d {
                    s += cat[i * d + k] * wo.data()[k * d + o];
                }
                out[i * d + o] += s;
            }
        }
        (out, avg)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut g = Graph::new();
        let v = random_block(&mut g, 4, 8, 1);
        let x = Tensor::from_fn(&[1, 4], |i| i as f64 * 0.3);
        let b = batch_of(&mut g, x.clone());
        let (out, rec) = mhsa(&mut g, b, &v, 2, 1, false).unwrap();
        assert_eq!(rec.attn.data(), &[1.0]);
        // output = x + (x·Wv + bv)·Wo + bo
        let xv = g.constant(x.clone());
        let val = linear(&mut g, xv, v.wv, v.bv).unwrap();
        let proj = linear(&mut g, val, v.wo, v.bo).unwrap();
        for i in 0..4 {
            let expect = x.data()[i] + g.value(proj).data()[i];
            assert!((g.value(out.tokens).data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn head_average_of_one_hot_rows() {
        // Head 0 attends to token 0, head 1 to token 1: queries and keys are
        // arranged so each head's scores are dominated by one column.
        let mut g = Graph::new();
        let d = 2;
        let mut v = random_block(&mut g, d, 4, 3);
        v.wq = g.param(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]));
        v.bq = g.param(Tensor::zeros(&[d]));
        v.wk = g.param(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        v.bk = g.param(Tensor::zeros(&[d]));
        let x = Tensor::from_rows(&[&[60.0, -60.0], &[-60.0, 60.0]]);
        let b = batch_of(&mut g, x);
        let (_, rec) = mhsa(&mut g, b, &v, 2, 1, false).unwrap();
        // row 0: head 0 picks token 0, head 1 picks token 1
        let r0 = rec.attn.row(0);
        assert!((r0[0] - 0.5).abs() < 1e-12 && (r0[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_reference() {
        let mut g = Graph::new();
        let v = random_block(&mut g, 8, 16, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[8, 8], |_| rng.random_range(-1.0..1.0));
        let (expect, avg) = naive_mhsa(&x, &g, &v, 2);
        let b = batch_of(&mut g, x);
        let (out, rec) = mhsa(&mut g, b, &v, 2, 1, true).unwrap();
        for (a, e) in g.value(out.tokens).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-10);
        }
        for (a, e) in rec.attn.data().iter().zip(&avg) {
            assert!((a - e).abs() < 1e-10);
        }
        for i in 0..8 {
            assert!((rec.attn.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(rec.keys.is_some() && rec.queries.is_some());
    }

    #[test]
    fn zero_mlp_reduces_to_attention_sub_block() {
        let mut g = Graph::new();
        let mut v = random_block(&mut g, 8, 32, 5);
        v.fc2_w = g.param(Tensor::zeros(&[32, 8]));
        v.fc2_b = g.param(Tensor::zeros(&[8]));
        let x = Tensor::from_fn(&[13, 8], |i| (i as f64 * 0.17).sin());
        let b = batch_of(&mut g, x);
        let (out, _) = vit_block(&mut g, b.clone(), &v, 2, 1, false).unwrap();
        let n1 = g.layernorm(b.tokens, v.ln1_g, v.ln1_b, LAYERNORM_EPS).unwrap();
        let (a, _) = attention(&mut g, n1, &v, 2, 1, false).unwrap();
        let h = g.add(b.tokens, a).unwrap();
        assert_eq!(g.value(out.tokens), g.value(h));
        assert_eq!(g.dims(out.tokens), &[13, 8]);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::base().validate().is_ok());
        assert!(EncoderConfig::toy().validate().is_ok());
        let mut c = EncoderConfig::toy();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = EncoderConfig::toy();
        c.selection_stages = vec![4, 2];
        assert!(c.validate().is_err());
    }
}
