//! Full network: named parameter store, forward pass and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::encoder::{vit_block, AttentionRecord, BlockVars, EncoderConfig, LAYERNORM_EPS};
use crate::error::{Error, Result};
use crate::flops::CostConfig;
use crate::heads::{classify, decode_heatmaps, ClassifierVars, DecoderVars, HeadConfig, DECODER_KERNEL};
use crate::ptnsr;
use crate::selection::{apply_selection, MergePolicy, SelectionConfig, SelectionOutcome, SimilarityFeature};
use crate::tensor::{Scalar, Tensor};
use crate::videotok::{cube_embed, ClipSpec, EmbedVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Toy,
    Base,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Scale::Toy),
            "base" => Ok(Scale::Base),
            other => Err(Error::config(format!("unknown scale {other:?}, expected toy or base"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub clip: ClipSpec,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub pose_tokens: bool,
    #[serde(default)]
    pub selection: Option<SelectionConfig>,
}

impl ModelConfig {
    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Toy => Self {
                clip: ClipSpec::TOY,
                encoder: EncoderConfig::toy(),
                head: HeadConfig::default(),
                pose_tokens: true,
                selection: None,
            },
            Scale::Base => Self {
                clip: ClipSpec::REFERENCE,
                encoder: EncoderConfig::base(),
                head: HeadConfig { num_classes: 34, landmarks: 13, ..HeadConfig::default() },
                pose_tokens: true,
                selection: None,
            },
        }
    }

    pub fn toy() -> Self {
        Self::for_scale(Scale::Toy)
    }

    pub fn with_selection(mut self, sel: SelectionConfig) -> Self {
        self.selection = Some(sel);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        self.encoder.validate()?;
        self.head.validate()?;
        if let Some(sel) = &self.selection {
            sel.validate()?;
        }
        self.cost_config().validate()
    }

    pub fn decoder_width(&self) -> usize {
        self.head.decoder_width(self.encoder.dim)
    }

    /// The matching input of the FLOP model.
    pub fn cost_config(&self) -> CostConfig {
        CostConfig {
            clip: self.clip,
            encoder: self.encoder.clone(),
            pose_tokens: self.pose_tokens,
            selection: self.selection,
            num_classes: self.head.num_classes,
            landmarks: self.head.landmarks,
            decoder_channels: self.decoder_width(),
        }
    }

    /// Whether a selection stage needs the Q or K features of its layer.
    fn keep_qk(&self) -> bool {
        self.selection
            .is_some_and(|s| s.merge_policy != MergePolicy::None && s.similarity_feature != SimilarityFeature::Attn)
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.encoder.dim;
        let hidden = d * self.encoder.mlp_ratio;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embed.proj.w".into(), vec![self.clip.cube_len(), d]),
            ("embed.proj.b".into(), vec![d]),
            ("embed.pos".into(), vec![self.clip.num_visual(), d]),
            ("embed.cls".into(), vec![1, d]),
        ];
        if self.pose_tokens {
            out.push(("embed.pose".into(), vec![self.clip.num_pose(), d]));
        }
        for i in 0..self.encoder.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.fc1.w"), vec![d, hidden]),
                (p("mlp.fc1.b"), vec![hidden]),
                (p("mlp.fc2.w"), vec![hidden, d]),
                (p("mlp.fc2.b"), vec![d]),
            ]);
        }
        let c = self.head.num_classes;
        out.extend([
            ("norm.g".into(), vec![d]),
            ("norm.b".into(), vec![d]),
            ("head.cls.fc1.w".into(), vec![d, d]),
            ("head.cls.fc1.b".into(), vec![d]),
            ("head.cls.fc2.w".into(), vec![d, c]),
            ("head.cls.fc2.b".into(), vec![c]),
        ]);
        if self.pose_tokens {
            let dd = self.decoder_width();
            let k = DECODER_KERNEL;
            out.extend([
                ("head.hm.deconv1.w".into(), vec![d, dd, k, k]),
                ("head.hm.deconv2.w".into(), vec![dd, dd, k, k]),
                ("head.hm.conv.w".into(), vec![self.head.landmarks, dd]),
                ("head.hm.conv.b".into(), vec![self.head.landmarks]),
            ]);
        }
        out
    }
}

/// Named tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

fn init_std(name: &str, dims: &[usize]) -> Option<f64> {
    let last = name.rsplit('.').next().unwrap_or("");
    if name.ends_with(".g") {
        return None;
    }
    if matches!(last, "b" | "bq" | "bk" | "bv" | "bo") {
        return Some(0.0);
    }
    if name.starts_with("head.hm.deconv") {
        // effective fan-in of a stride-2 4×4 transposed conv is Cin·4
        return Some((1.0 / (dims[0] as f64 * 4.0)).sqrt());
    }
    if name == "head.hm.conv.w" {
        return Some((1.0 / dims[1] as f64).sqrt());
    }
    Some(0.02)
}

impl<F: Scalar> Params<F> {
    /// Truncated-free normal init: weights N(0, 0.02²), biases 0, norm gains 1,
    /// decoder convs scaled by fan-in.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, dims) in cfg.param_shapes() {
            let t = match init_std(&name, &dims) {
                None => Tensor::full(&dims, F::one()),
                Some(s) if s == 0.0 => Tensor::zeros(&dims),
                Some(s) => {
                    let normal = Normal::new(0.0, s).expect("positive std");
                    Tensor::from_fn(&dims, |_| F::lit(normal.sample(&mut rng)))
                }
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<F>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::shape("one tensor per parameter name"));
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Check names and shapes against `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = cfg.param_shapes();
        if expect.len() != self.len() {
            return Err(Error::shape(format!("config needs {} parameters, store has {}", expect.len(), self.len())));
        }
        for ((name, dims), (have, t)) in expect.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != have || dims.as_slice() != t.dims() {
                return Err(Error::shape(format!(
                    "parameter {have} {:?} does not match expected {name} {dims:?}",
                    t.dims()
                )));
            }
        }
        Ok(())
    }

    /// Put every tensor on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<F>, cfg: &ModelConfig) -> Result<(ModelVars, Vec<Var>)> {
        self.check(cfg)?;
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        Ok((ModelVars::assemble(cfg, &vars)?, vars))
    }

    /// Gradients for every parameter in order; unused parameters get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients<F>, vars: &[Var]) -> Vec<Tensor<F>> {
        vars.iter().zip(&self.tensors).map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.dims()))).collect()
    }
}

/// Graph handles of a bound [`Params`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embed: EmbedVars,
    pub blocks: Vec<BlockVars>,
    pub norm: (Var, Var),
    pub classifier: ClassifierVars,
    pub decoder: Option<DecoderVars>,
}

impl ModelVars {
    /// Group leaves given in [`ModelConfig::param_shapes`] order.
    pub fn assemble(cfg: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let expect = cfg.param_shapes().len();
        if vars.len() != expect {
            return Err(Error::shape(format!("config needs {expect} parameters, got {}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("checked length");
        let embed = EmbedVars { proj_w: next(), proj_b: next(), pos: next(), cls: next(), pose: None };
        let embed = EmbedVars { pose: cfg.pose_tokens.then(&mut next), ..embed };
        let blocks = (0..cfg.encoder.depth)
            .map(|_| BlockVars {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_g: next(),
                ln2_b: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        let norm = (next(), next());
        let classifier = ClassifierVars { fc1_w: next(), fc1_b: next(), fc2_w: next(), fc2_b: next() };
        let decoder =
            cfg.pose_tokens.then(|| DecoderVars { deconv1: next(), deconv2: next(), conv_w: next(), conv_b: next() });
        Ok(ModelVars { embed, blocks, norm, classifier, decoder })
    }
}

/// Token counts entering one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTokens {
    pub layer: usize,
    pub tokens: usize,
    pub visual: usize,
}

pub struct ForwardOutput<F> {
    /// `1×C`
    pub logits: Var,
    /// `L×4h×4w` raw decoder output.
    pub heatmaps: Option<Var>,
    /// Attention of every selection stage.
    pub records: Vec<AttentionRecord<F>>,
    pub outcomes: Vec<SelectionOutcome>,
    pub layer_tokens: Vec<LayerTokens>,
}

/// Run the network on one `T×C×H×W` clip.
pub fn forward<F: Scalar>(
    g: &mut Graph<F>,
    vars: &ModelVars,
    clip: &Tensor<F>,
    cfg: &ModelConfig,
) -> Result<ForwardOutput<F>> {
    let mut batch = cube_embed(g, clip, &cfg.clip, &vars.embed)?;
    let keep_qk = cfg.keep_qk();
    let mut records = Vec::new();
    let mut outcomes = Vec::new();
    let mut layer_tokens = Vec::with_capacity(cfg.encoder.depth);
    for (i, block) in vars.blocks.iter().enumerate() {
        let layer = i + 1;
        layer_tokens.push(LayerTokens { layer, tokens: batch.layout.total(), visual: batch.layout.visual });
        let stage = cfg.selection.is_some() && cfg.encoder.is_stage(layer);
        let (next, record) = vit_block(g, batch, block, cfg.encoder.heads, layer, stage && keep_qk)?;
        batch = next;
        if let (true, Some(sel)) = (stage, &cfg.selection) {
            let (next, outcome) = apply_selection(g, batch, &record, sel)?;
            batch = next;
            outcomes.push(outcome);
            records.push(record);
        }
    }
    let x = g.layernorm(batch.tokens, vars.norm.0, vars.norm.1, F::lit(LAYERNORM_EPS))?;
    let cls = g.gather_rows(x, &[0])?;
    let logits = classify(g, cls, &vars.classifier)?;
    let heatmaps = match (&vars.decoder, cfg.pose_tokens) {
        (Some(dec), true) => {
            let rows: Vec<usize> = (1..=batch.layout.pose).collect();
            let pose = g.gather_rows(x, &rows)?;
            let (_, h, w) = cfg.clip.grid();
            Some(decode_heatmaps(g, pose, h, w, dec)?)
        }
        _ => None,
    };
    Ok(ForwardOutput { logits, heatmaps, records, outcomes, layer_tokens })
}

const MANIFEST: &str = "manifest.txt";
const CONFIG: &str = "config.json";

/// Write `params` as one PTNSR file per tensor plus a manifest and the config.
pub fn save_checkpoint<F: Scalar>(dir: &Path, cfg: &ModelConfig, params: &Params<F>) -> Result<()> {
    params.check(cfg)?;
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, t) in params.names.iter().zip(&params.tensors) {
        let file = format!("{name}.ptnsr");
        ptnsr::write(dir.join(&file), t)?;
        let dims: Vec<String> = t.dims().iter().map(ToString::to_string).collect();
        let _ = writeln!(manifest, "{name} {file} {}", dims.join("x"));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::write(dir.join(CONFIG), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(dir: &Path) -> Result<(ModelConfig, Params<F>)> {
    let cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG))?)?;
    cfg.validate()?;
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (i, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, file, dims] = fields[..] else {
            return Err(Error::format(format!("manifest line {}: expected `name file dims`", i + 1)));
        };
        let t: Tensor<F> = ptnsr::read(dir.join(file))?;
        let want: Vec<String> = t.dims().iter().map(ToString::to_string).collect();
        if want.join("x") != dims {
            return Err(Error::format(format!("{file} has dims {:?}, manifest says {dims}", t.dims())));
        }
        names.push(name.to_string());
        tensors.push(t);
    }
    let params = Params { names, tensors };
    params.check(&cfg)?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.encoder = EncoderConfig { depth: 2, dim: 16, heads: 2, mlp_ratio: 4, selection_stages: vec![1] };
        cfg.head.decoder_channels = Some(8);
        cfg
    }

    fn clip(spec: &ClipSpec) -> Tensor<f64> {
        Tensor::from_fn(&spec.dims(), |i| ((i * 37 % 101) as f64) / 101.0)
    }

    #[test]
    fn shapes_of_outputs() {
        let cfg = tiny();
        let p = Params::<f64>::init(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let (vars, _) = p.bind(&mut g, &cfg).unwrap();
        let out = forward(&mut g, &vars, &clip(&cfg.clip), &cfg).unwrap();
        assert_eq!(g.dims(out.logits), &[1, 4]);
        assert_eq!(g.dims(out.heatmaps.unwrap()), &[5, 8, 8]);
        assert_eq!(out.layer_tokens[0], LayerTokens { layer: 1, tokens: 21, visual: 16 });
        assert!(out.outcomes.is_empty());
    }

    #[test]
    fn layer_tokens_match_cost_model() {
        let cfg = tiny().with_selection(SelectionConfig::default());
        let p = Params::<f64>::init(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let (vars, _) = p.bind(&mut g, &cfg).unwrap();
        let out = forward(&mut g, &vars, &clip(&cfg.clip), &cfg).unwrap();
        let cost = crate::flops::model_flops(&cfg.cost_config()).unwrap();
        let a: Vec<(usize, usize)> = out.layer_tokens.iter().map(|l| (l.tokens, l.visual)).collect();
        let b: Vec<(usize, usize)> = cost.layers.iter().map(|l| (l.tokens, l.visual)).collect();
        assert_eq!(a, b);
        assert_eq!(out.outcomes.len(), 1);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny();
        let a = Params::<f32>::init(&cfg, 9).unwrap();
        assert_eq!(a, Params::<f32>::init(&cfg, 9).unwrap());
        assert_ne!(a, Params::<f32>::init(&cfg, 10).unwrap());
        assert_eq!(a.get("norm.g").unwrap().data(), &[1.0; 16]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let p = Params::<f32>::init(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &p).unwrap();
        let (cfg2, q) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p, q);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.starts_with("embed.proj.w embed.proj.w.ptnsr 512x16\n"));
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let cfg = tiny();
        let p = Params::<f32>::init(&cfg, 3).unwrap();
        let mut other = cfg.clone();
        other.pose_tokens = false;
        assert!(p.check(&other).is_err());
    }
}
