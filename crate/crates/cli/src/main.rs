//! `poguise` command-line front end.
//!
//! Exit codes: 0 on success, 1 for bad input (usage, config, missing or
//! malformed files), 2 for internal failures (numeric divergence, failed
//! verification).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use poguise_core::data::{self, Dataset, Sample, Split, SyntheticSpec};
use poguise_core::flops::{model_flops, solve_keep_rate, CostConfig, CostReport};
use poguise_core::model::{load_checkpoint, save_checkpoint};
use poguise_core::selection::selection_csv;
use poguise_core::train::{self, evaluate, evaluate_detailed, predict_clip};
use poguise_core::verify::{self, TOLERANCE};
use poguise_core::{
    Error, Execution, MergePolicy, ModelConfig, Params, RunConfig, Scale, ScorePolicy, SelectionConfig,
    SimilarityFeature,
};

#[derive(Parser, Debug)]
#[command(name = "poguise", version, about = "Pose-guided token selection for video transformers")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic stick-actor dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus the epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Analytic FLOP count of one forward pass.
    Flops(FlopsArgs),
    /// Finite-difference gradient checks of every op and the composed model.
    Gradcheck(GradcheckArgs),
    /// Per-token selection status of one clip as CSV.
    DemoSelect(DemoSelectArgs),
    /// Sweep keep and merge rates on a checkpoint: GFLOPs against accuracy.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    clips_per_class: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    persons: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    imbalance: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Class,
    MidFrame,
    ClassPose,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MergeArg {
    None,
    Poguise,
    Bipartite,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeatureArg {
    Q,
    K,
    Attn,
}

/// Overrides applied on top of whatever selection a config or checkpoint
/// carries. Any of them enables selection.
#[derive(Args, Debug, Default, Clone)]
struct SelectionArgs {
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long = "lambda")]
    lambda: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long, value_enum)]
    merge: Option<MergeArg>,
    #[arg(long, value_enum)]
    feature: Option<FeatureArg>,
    /// Turn selection off regardless of the other flags.
    #[arg(long, conflicts_with_all = ["rho", "lambda", "kappa", "policy", "merge", "feature"])]
    no_selection: bool,
}

impl SelectionArgs {
    fn any(&self) -> bool {
        self.rho.is_some()
            || self.lambda.is_some()
            || self.kappa.is_some()
            || self.policy.is_some()
            || self.merge.is_some()
            || self.feature.is_some()
    }

    fn apply(&self, base: Option<SelectionConfig>) -> Option<SelectionConfig> {
        if self.no_selection {
            return None;
        }
        if !self.any() {
            return base;
        }
        let mut s = base.unwrap_or_default();
        if let Some(v) = self.rho {
            s.rho = v;
        }
        if let Some(v) = self.lambda {
            s.lambda = v;
        }
        if let Some(v) = self.kappa {
            s.kappa = v;
        }
        if let Some(p) = self.policy {
            s.score_policy = match p {
                PolicyArg::Class => ScorePolicy::Class,
                PolicyArg::MidFrame => ScorePolicy::MidFrame,
                PolicyArg::ClassPose => ScorePolicy::ClassPose,
            };
        }
        if let Some(m) = self.merge {
            s.merge_policy = match m {
                MergeArg::None => MergePolicy::None,
                MergeArg::Poguise => MergePolicy::Poguise,
                MergeArg::Bipartite => MergePolicy::Bipartite,
            };
        }
        if let Some(f) = self.feature {
            s.similarity_feature = match f {
                FeatureArg::Q => SimilarityFeature::Q,
                FeatureArg::K => SimilarityFeature::K,
                FeatureArg::Attn => SimilarityFeature::Attn,
            };
        }
        Some(s)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for `checkpoint/`, `train_log.jsonl` and `run_config.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_scale)]
    scale: Option<Scale>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    lr_heads: Option<f64>,
    #[arg(long)]
    views: Option<usize>,
    /// Drop the pose tokens and the heatmap head.
    #[arg(long)]
    no_pose_tokens: bool,
    #[command(flatten)]
    selection: SelectionArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 3)]
    views: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-clip, per-stage token status CSV.
    #[arg(long)]
    dump_selection: Option<PathBuf>,
    #[command(flatten)]
    selection: SelectionArgs,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long, value_parser = parse_scale, default_value = "base")]
    scale: Scale,
    #[arg(long)]
    pose_tokens: bool,
    /// Comma-separated 1-based layers after which selection runs.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<usize>>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    landmarks: Option<usize>,
    #[arg(long)]
    decoder_channels: Option<usize>,
    /// Solve for the keep rate that meets this budget instead of counting.
    #[arg(long)]
    target_gflops: Option<f64>,
    /// Per-layer CSV output.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    selection: SelectionArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DemoSelectArgs {
    /// Trained weights; a fresh toy initialisation is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset to take the clip from; a clip is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    clip: Option<String>,
    /// Class of the generated clip.
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    selection: SelectionArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    rhos: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.3")]
    lambdas: Vec<f64>,
    #[arg(long, value_enum, default_value_t = MergeArg::Poguise)]
    merge: MergeArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 3)]
    views: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::User(format!("i/o error: {e}"))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::available() };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, exec),
        Command::Train(a) => run_train(a, exec),
        Command::Eval(a) => run_eval(a, exec),
        Command::Flops(a) => run_flops(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::DemoSelect(a) => demo_select(a),
        Command::Bench(a) => bench(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}

fn gen_data(a: GenDataArgs, exec: Execution) -> CliResult {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        num_classes: a.classes.unwrap_or(d.num_classes),
        clips_per_class: a.clips_per_class.unwrap_or(d.clips_per_class),
        frames: a.frames.unwrap_or(d.frames),
        size: a.size.unwrap_or(d.size),
        persons: a.persons.unwrap_or(d.persons),
        noise: a.noise.unwrap_or(d.noise),
        imbalance: a.imbalance.unwrap_or(d.imbalance),
        test_fraction: a.test_fraction.unwrap_or(d.test_fraction),
        seed: a.seed,
    };
    let ds = data::generate_dataset(&spec, exec)?;
    data::write_dataset(&a.out, &ds)?;
    let n_test = ds.split(Split::Test).len();
    println!(
        "wrote {} clips ({} train, {} test) to {}",
        ds.samples.len(),
        ds.samples.len() - n_test,
        n_test,
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs, exec: Execution) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.data {
        cfg.data = Some(v);
    }
    if let Some(v) = a.out {
        cfg.out = Some(v);
    }
    if let Some(v) = a.scale {
        cfg.scale = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.optim.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.optim.batch_size = v;
    }
    if let Some(v) = a.lr_backbone {
        cfg.optim.lr_backbone = v;
    }
    if let Some(v) = a.lr_heads {
        cfg.optim.lr_heads = v;
    }
    if let Some(v) = a.views {
        cfg.views = v;
    }
    if a.no_pose_tokens {
        cfg.pose_tokens = false;
    }
    cfg.selection = a.selection.apply(cfg.selection);
    cfg.validate()?;
    let data_dir = cfg.data.clone().ok_or_else(|| Failure::User("no dataset: pass --data or set \"data\"".into()))?;
    let out = cfg.out.clone().ok_or_else(|| Failure::User("no output directory: pass --out or set \"out\"".into()))?;

    let ds = data::read_dataset(&data_dir)?;
    fs::create_dir_all(&out)?;
    write_text(&out.join("run_config.json"), &to_json(&cfg))?;
    let mut log_text = String::new();
    let result = train::train_with(&cfg, &ds, exec, |e| {
        let _ = writeln!(log_text, "{}", serde_json::to_string(e).expect("epoch log serializes"));
    })?;
    write_text(&out.join("train_log.jsonl"), &log_text)?;
    let model = cfg.model();
    save_checkpoint(&out.join("checkpoint"), &model, &result.params)?;

    let test: Vec<&Sample> = ds.split(Split::Test);
    let report = evaluate(&result.params, &model, &test, cfg.views, exec)?;
    write_text(&out.join("eval_test.json"), &to_json(&report))?;
    let last = result.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs: train acc {:.3}, test micro {:.3}, test macro {:.3}; checkpoint in {}",
        result.log.len(),
        last.train_acc,
        report.micro,
        report.macro_acc,
        out.join("checkpoint").display()
    );
    Ok(())
}

fn load_model(dir: &Path, sel: &SelectionArgs) -> CliResult<(ModelConfig, Params<f32>)> {
    let (mut model, params) = load_checkpoint::<f32>(dir)?;
    model.selection = sel.apply(model.selection);
    if let Some(s) = &mut model.selection {
        if !model.pose_tokens && sel.policy.is_none() {
            s.score_policy = ScorePolicy::Class;
        }
    }
    model.validate()?;
    Ok((model, params))
}

fn run_eval(a: EvalArgs, exec: Execution) -> CliResult {
    let (model, params) = load_model(&a.checkpoint, &a.selection)?;
    let ds = data::read_dataset(&a.data)?;
    let samples: Vec<&Sample> = ds.split(a.split.into());
    if samples.is_empty() {
        return Err(Failure::User(format!("split {:?} of {} is empty", a.split, a.data.display())));
    }
    let (report, outcomes) = evaluate_detailed(&params, &model, &samples, a.views, exec)?;
    if let Some(path) = &a.dump_selection {
        let mut csv = String::from("clip,stage,t,row,col,status\n");
        for (s, o) in samples.iter().zip(&outcomes) {
            for line in selection_csv(o).lines().skip(1) {
                let _ = writeln!(csv, "{},{line}", s.id);
            }
        }
        write_text(path, &csv)?;
    }
    let json = to_json(&report);
    match &a.report {
        Some(p) => {
            write_text(p, &json)?;
            println!("micro {:.4} macro {:.4} over {} clips", report.micro, report.macro_acc, report.clips);
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn flops_config(a: &FlopsArgs) -> CliResult<CostConfig> {
    let mut cfg = match a.scale {
        Scale::Base => CostConfig::reference(),
        Scale::Toy => ModelConfig::toy().cost_config(),
    };
    cfg.pose_tokens = a.pose_tokens;
    if let Some(s) = &a.stages {
        cfg.encoder.selection_stages = s.clone();
    }
    if let Some(v) = a.classes {
        cfg.num_classes = v;
    }
    if let Some(v) = a.landmarks {
        cfg.landmarks = v;
    }
    if let Some(v) = a.decoder_channels {
        cfg.decoder_channels = v;
    }
    let mut sel = a.selection.apply(None);
    // without pose tokens the class/pose score has nothing to read
    if let Some(s) = &mut sel {
        if !a.pose_tokens && a.selection.policy.is_none() {
            s.score_policy = ScorePolicy::Class;
        }
        if a.selection.merge.is_none() && a.selection.lambda.is_none() {
            s.merge_policy = MergePolicy::None;
        }
    }
    cfg.selection = sel;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(serde::Serialize)]
struct FlopsOutput<'a> {
    config: &'a CostConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    solved_rho: Option<f64>,
    report: &'a CostReport,
}

fn run_flops(a: FlopsArgs) -> CliResult {
    let mut cfg = flops_config(&a)?;
    let mut solved = None;
    if let Some(target) = a.target_gflops {
        if cfg.selection.is_none() {
            cfg.selection = Some(SelectionConfig {
                score_policy: if cfg.pose_tokens { ScorePolicy::ClassPose } else { ScorePolicy::Class },
                merge_policy: MergePolicy::None,
                ..SelectionConfig::default()
            });
        }
        let rho = solve_keep_rate(target, &cfg)?;
        if let Some(s) = &mut cfg.selection {
            s.rho = rho;
        }
        solved = Some(rho);
    }
    let report = model_flops(&cfg)?;
    if let Some(p) = &a.csv {
        write_text(p, &report.layers_csv())?;
    }
    println!("{}", to_json(&FlopsOutput { config: &cfg, solved_rho: solved, report: &report }));
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> CliResult {
    let mut failed = Vec::new();
    let mut out = std::io::stdout().lock();
    for r in verify::op_suite(a.seed)? {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<20} elements {:>5}  max rel-err {:.3e}  {verdict}",
            r.name, r.report.elements, r.report.max_rel_err
        );
        if !r.passed() {
            failed.push(r.name.to_string());
        }
    }
    let m = verify::model_check(a.seed)?;
    let verdict = if m.passed() { "ok" } else { "FAIL" };
    let _ = writeln!(
        out,
        "{:<20} elements {:>5}  max rel-err {:.3e}  key-bias grad {:.1e}  {verdict}",
        "composed model", m.report.elements, m.report.max_rel_err, m.key_bias_grad
    );
    if !m.passed() {
        failed.push("composed model".into());
    }
    if failed.is_empty() {
        let _ = writeln!(out, "all checks below {TOLERANCE:e}");
        Ok(())
    } else {
        Err(Failure::Internal(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn demo_select(a: DemoSelectArgs) -> CliResult {
    let (mut model, params) = match &a.checkpoint {
        Some(dir) => load_model(dir, &a.selection)?,
        None => {
            let model = ModelConfig::toy();
            let params = Params::init(&model, a.seed)?;
            (model, params)
        }
    };
    if a.checkpoint.is_none() {
        model.selection = a.selection.apply(Some(SelectionConfig::default()));
        model.validate()?;
    }
    if model.selection.is_none() {
        return Err(Failure::User(
            "selection is disabled; pass --rho/--lambda or use a checkpoint with selection".into(),
        ));
    }
    let sample = match &a.data {
        Some(dir) => {
            let ds = data::read_dataset(dir)?;
            pick_sample(ds, a.clip.as_deref())?
        }
        None => {
            let spec = SyntheticSpec { seed: a.seed, ..SyntheticSpec::default() };
            if a.class >= spec.num_classes {
                return Err(Failure::User(format!("class {} out of range 0..{}", a.class, spec.num_classes)));
            }
            let c = data::generate_clip(&spec, a.class, a.seed)?;
            Sample {
                id: "generated".into(),
                clip: c.clip,
                label: c.label,
                split: Split::Test,
                annotations: c.annotations,
            }
        }
    };
    let (_, _, outcomes) = predict_clip(&params, &model, &sample, 1)?;
    let csv = selection_csv(&outcomes);
    match &a.out {
        Some(p) => {
            write_text(p, &csv)?;
            println!("{} stages for clip {} written to {}", outcomes.len(), sample.id, p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn pick_sample(ds: Dataset, id: Option<&str>) -> CliResult<Sample> {
    let mut samples = ds.samples.into_iter();
    match id {
        Some(id) => samples.find(|s| s.id == id).ok_or_else(|| Failure::User(format!("no clip with id {id:?}"))),
        None => {
            samples.find(|s| s.split == Split::Test).ok_or_else(|| Failure::User("dataset has no test clips".into()))
        }
    }
}

fn bench(a: BenchArgs, exec: Execution) -> CliResult {
    let (base, params) = load_checkpoint::<f32>(&a.checkpoint)?;
    let ds = data::read_dataset(&a.data)?;
    let samples: Vec<&Sample> = ds.split(a.split.into());
    if samples.is_empty() {
        return Err(Failure::User("selected split is empty".into()));
    }
    let mut rhos = a.rhos.clone();
    rhos.sort_by(f64::total_cmp);
    let mut csv = String::from("rho,lambda,gflops,reference_gflops,micro,macro\n");
    for &lambda in &a.lambdas {
        for &rho in &rhos {
            let merge = match a.merge {
                MergeArg::None => MergePolicy::None,
                MergeArg::Poguise => MergePolicy::Poguise,
                MergeArg::Bipartite => MergePolicy::Bipartite,
            };
            let sel = SelectionConfig {
                rho,
                lambda,
                merge_policy: merge,
                score_policy: if base.pose_tokens { ScorePolicy::ClassPose } else { ScorePolicy::Class },
                ..base.selection.unwrap_or_default()
            };
            let model = ModelConfig { selection: Some(sel), ..base.clone() };
            model.validate()?;
            let gflops = model_flops(&model.cost_config())?.total_gflops;
            let mut reference = CostConfig::reference().with_selection(sel);
            reference.pose_tokens = base.pose_tokens;
            let reference_gflops = model_flops(&reference)?.total_gflops;
            let r = evaluate(&params, &model, &samples, a.views, exec)?;
            info!("rho {rho} lambda {lambda}: {gflops:.4} GFLOPs, macro {:.3}", r.macro_acc);
            let _ = writeln!(csv, "{rho},{lambda},{gflops:.6},{reference_gflops:.3},{:.6},{:.6}", r.micro, r.macro_acc);
        }
    }
    write_text(&a.out, &csv)?;
    println!("wrote {} rows to {}", rhos.len() * a.lambdas.len(), a.out.display());
    Ok(())
}
