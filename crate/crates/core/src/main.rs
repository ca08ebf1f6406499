use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use nodepfn::baselines::{closed_form_classify, label_propagation, ClosedFormConfig, FilterMatrix, Solver};
use nodepfn::harness::{
    eval_accuracy, fit_exponent, majority_predict, measure_scaling, sweep_homophily, HarnessError, Method,
    ScalingBranch, Settings,
};
use nodepfn::inference::{predict, GraphInput};
use nodepfn::io::{write_atomic, Checkpoint, DatasetFile, PredictionBlock};
use nodepfn::linalg::Matrix;
use nodepfn::model::ModelParams;
use nodepfn::prior::stats::collect_prior_stats;
use nodepfn::prior::assemble_task_with_info;
use nodepfn::rng::{derive_seed, rng_from_seed};
use nodepfn::training::{StepRecord, Trainer};

#[derive(Parser)]
#[command(name = "nodepfn", version, about = "Prior-fitted networks for node classification")]
struct Cli {
    /// TOML file overriding built-in defaults; flags override the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the small single-CPU presets instead of the full-size ones.
    #[arg(long, global = true)]
    desk: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample tasks from the prior and write them as dataset files.
    GeneratePriors(GenerateArgs),
    /// Pre-train on freshly sampled tasks.
    Train(TrainArgs),
    /// Predict test-node labels for a dataset.
    Predict(PredictArgs),
    /// Accuracy over several ensemble seeds.
    Eval(EvalArgs),
    /// Run a training-free baseline on a dataset.
    Baseline(BaselineArgs),
    /// Accuracy across cSBM homophily levels.
    SweepHomophily(SweepArgs),
    /// Time one branch of the first layer at increasing sizes.
    MeasureScaling(ScalingArgs),
    /// Print a checkpoint summary as JSON.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    nodes: Option<usize>,
    /// Tasks summarized in the statistics report (defaults to `count`).
    #[arg(long)]
    stats_tasks: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    steps_per_epoch: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many steps even if the schedule continues.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct InferenceFlags {
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    smoothing: Option<usize>,
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    inference: InferenceFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    inference: InferenceFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMethod {
    Labelprop,
    Linear,
    Sgc,
    Hgc,
    Majority,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    method: BaselineMethod,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    ridge: Option<f64>,
    /// Propagation depth of the low-pass filter.
    #[arg(long)]
    k: Option<usize>,
    /// Solve with the exact pseudo-inverse instead of a Cholesky solve.
    #[arg(long)]
    pinv: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[arg(long)]
    graphs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated subset of nodepfn, labelprop, linear, sgc, hgc, majority.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Attention,
    Mpnn,
}

#[derive(Args)]
struct ScalingArgs {
    /// Uses freshly initialized weights of the configured model when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    branch: BranchArg,
    /// Node counts (attention) or edge counts (mpnn), strictly increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    /// Fixed node count for the mpnn branch.
    #[arg(long, default_value_t = 8192)]
    nodes: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn settings(cli: &Cli) -> Result<Settings, HarnessError> {
    let base = if cli.desk { Settings::desk() } else { Settings::default() };
    match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Validation(format!("cannot read {}: {e}", path.display())))?;
            base.overlay_toml(&text)
        }
        None => Ok(base),
    }
}

fn apply_inference(s: &mut Settings, f: &InferenceFlags) {
    if let Some(k) = f.components {
        s.inference.n_components = Some(k);
    }
    if let Some(k) = f.smoothing {
        s.inference.smoothing_steps = k;
    }
    if let Some(k) = f.ensemble {
        s.inference.ensemble_size = k;
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("json");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| HarnessError::Validation(format!("cannot create {}: {e}", dir.display())))
}

fn input_of<'a>(ds: &'a DatasetFile, train_labels: &'a [usize]) -> GraphInput<'a> {
    GraphInput { x: &ds.x, edges: &ds.edges, train_ids: &ds.train_ids, train_labels, test_ids: &ds.test_ids }
}

fn prediction_block(classes: &[usize], probs: Matrix, labels: &[usize]) -> PredictionBlock {
    PredictionBlock {
        classes: classes.iter().map(|&c| c as u32).collect(),
        probs,
        labels: labels.iter().map(|&l| l as i32).collect(),
    }
}

fn one_hot_block(classes: &[usize], labels: &[usize]) -> PredictionBlock {
    let probs = Matrix::from_fn(labels.len(), classes.len(), |r, c| if classes[c] == labels[r] { 1.0 } else { 0.0 });
    prediction_block(classes, probs, labels)
}

fn generate(s: Settings, a: &GenerateArgs) -> Result<(), HarnessError> {
    let mut prior = s.prior.clone();
    if let Some(n) = a.nodes {
        prior.n_nodes = n;
    }
    prior.validate()?;
    create_dir(&a.out_dir)?;
    let config = json!({ "prior": prior, "seed": a.seed, "count": a.count });
    for i in 0..a.count {
        let mut rng = rng_from_seed(derive_seed(&[a.seed, i as u64]));
        let (task, info) = assemble_task_with_info(&prior, &mut rng)?;
        let mut ds = DatasetFile::from_task(&task);
        ds.meta = Some(json!({ "config": config, "index": i, "task": info }));
        ds.save(&a.out_dir.join(format!("task_{i:05}.npfn")))?;
    }
    let stats = collect_prior_stats(&prior, a.stats_tasks.unwrap_or(a.count).max(1), a.seed)?;
    write_json(&a.out_dir.join("stats.json"), &json!({ "config": config, "stats": stats }))?;
    println!("{}", serde_json::to_string(&stats).expect("json"));
    Ok(())
}

fn metrics_line(rec: &StepRecord) -> String {
    // wall-clock time goes to stderr only so metrics files stay reproducible
    let mut v = serde_json::to_value(rec).expect("json");
    if let Some(o) = v.as_object_mut() {
        o.remove("wallclock");
    }
    serde_json::to_string(&v).expect("json")
}

fn train(mut s: Settings, a: &TrainArgs) -> Result<(), HarnessError> {
    let t = &mut s.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.steps_per_epoch {
        t.steps_per_epoch = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            s.model = ckpt.model_config.clone();
            Trainer::resume(&ckpt, s.train.clone(), s.prior.clone())?
        }
        None => Trainer::new(s.model.clone(), s.train.clone(), s.prior.clone())?,
    };
    let meta = json!({ "config": s.to_json() });
    let mut lines = vec![serde_json::to_string(&json!({ "config": s.to_json() })).expect("json")];
    let every = s.train.checkpoint_every;
    let (out, metrics) = (a.out.clone(), a.metrics.clone());
    let flush = |lines: &[String]| -> Result<(), HarnessError> {
        if let Some(m) = &metrics {
            write_text(m, &(lines.join("\n") + "\n"))?;
        }
        Ok(())
    };
    let mut failure: Option<HarnessError> = None;
    let result = trainer.run(a.max_steps, |tr, rec| {
        lines.push(metrics_line(rec));
        eprintln!(
            "step {} epoch {} loss {:.5} running {:.5} lr {:.3e}{} [{:.1}s]",
            rec.step,
            rec.epoch,
            rec.loss,
            rec.running_loss,
            rec.lr,
            rec.val_loss.map(|v| format!(" val {v:.5}")).unwrap_or_default(),
            rec.wallclock
        );
        if every > 0 && rec.step % every == 0 {
            if let Err(e) = tr.checkpoint(meta.clone()).save(&out).map_err(HarnessError::from).and_then(|_| flush(&lines)) {
                failure = Some(e);
                return Err(nodepfn::training::TrainError::Checkpoint("write failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result?;
    trainer.checkpoint(meta).save(&a.out)?;
    flush(&lines)?;
    Ok(())
}

fn predict_cmd(mut s: Settings, a: &PredictArgs) -> Result<(), HarnessError> {
    apply_inference(&mut s, &a.inference);
    if let Some(seed) = a.seed {
        s.inference.seed = seed;
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut ds = DatasetFile::load(&a.dataset)?;
    let labels = ds.train_labels();
    let ppd = predict(&input_of(&ds, &labels), &ckpt.params, &ckpt.model_config, &s.inference)?;
    let block = prediction_block(&ppd.classes, ppd.probs.clone(), &ppd.argmax_labels());
    let accuracy = ds.test_labels().map(|t| ppd.accuracy(&t));
    ds.predictions = Some(block);
    ds.meta = Some(json!({ "command": "predict", "inference": s.inference, "checkpoint_config": ckpt.model_config }));
    ds.save(&a.out)?;
    println!("{}", json!({ "test_nodes": ds.test_ids.len(), "classes": ppd.classes, "accuracy": accuracy }));
    Ok(())
}

fn eval_cmd(mut s: Settings, a: &EvalArgs) -> Result<(), HarnessError> {
    apply_inference(&mut s, &a.inference);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = DatasetFile::load(&a.dataset)?;
    let truth = ds.test_labels().ok_or_else(|| HarnessError::Validation("dataset has unlabeled test nodes".into()))?;
    let labels = ds.train_labels();
    let summary = eval_accuracy(&input_of(&ds, &labels), &truth, &ckpt.params, &ckpt.model_config, &s.inference, &a.seeds)?;
    let record = json!({ "command": "eval", "inference": s.inference, "result": summary });
    println!("{}", serde_json::to_string(&record).expect("json"));
    if let Some(out) = &a.out {
        write_json(out, &record)?;
    }
    Ok(())
}

fn baseline_cmd(mut s: Settings, a: &BaselineArgs) -> Result<(), HarnessError> {
    if let Some(v) = a.alpha {
        s.label_prop.alpha = v;
    }
    if let Some(v) = a.iters {
        s.label_prop.iters = v;
    }
    if let Some(v) = a.ridge {
        s.closed_form.ridge = v;
    }
    if a.pinv {
        s.closed_form.solver = Solver::PseudoInverse;
    }
    let k = a.k.unwrap_or(match s.closed_form.filter {
        FilterMatrix::LowPass { k } => k,
        _ => 2,
    });
    let mut ds = DatasetFile::load(&a.dataset)?;
    let labels = ds.train_labels();
    let input = input_of(&ds, &labels);
    let closed = |filter| closed_form_classify(&input, &ClosedFormConfig { filter, ..s.closed_form.clone() });
    let (block, method_cfg) = match a.method {
        BaselineMethod::Labelprop => {
            let ppd = label_propagation(&input, &s.label_prop)?;
            (prediction_block(&ppd.classes, ppd.probs.clone(), &ppd.argmax_labels()), json!(s.label_prop))
        }
        BaselineMethod::Linear | BaselineMethod::Sgc | BaselineMethod::Hgc => {
            let filter = match a.method {
                BaselineMethod::Linear => FilterMatrix::Identity,
                BaselineMethod::Sgc => FilterMatrix::LowPass { k },
                _ => FilterMatrix::HighPass,
            };
            let out = closed(filter)?;
            (one_hot_block(&out.classes, &out.labels), json!(ClosedFormConfig { filter, ..s.closed_form.clone() }))
        }
        BaselineMethod::Majority => {
            let pred = majority_predict(&labels, ds.test_ids.len());
            let mut classes = labels.clone();
            classes.sort_unstable();
            classes.dedup();
            (one_hot_block(&classes, &pred), json!(null))
        }
    };
    let accuracy = ds.test_labels().map(|t| nodepfn::harness::accuracy(&block.labels.iter().map(|&l| l as usize).collect::<Vec<_>>(), &t));
    ds.predictions = Some(block);
    ds.meta = Some(json!({ "command": "baseline", "method": method_name(a.method), "config": method_cfg }));
    ds.save(&a.out)?;
    println!("{}", json!({ "method": method_name(a.method), "accuracy": accuracy }));
    Ok(())
}

fn method_name(m: BaselineMethod) -> &'static str {
    match m {
        BaselineMethod::Labelprop => "labelprop",
        BaselineMethod::Linear => "linear",
        BaselineMethod::Sgc => "sgc",
        BaselineMethod::Hgc => "hgc",
        BaselineMethod::Majority => "majority",
    }
}

fn sweep_cmd(mut s: Settings, a: &SweepArgs) -> Result<(), HarnessError> {
    let cfg = &mut s.sweep;
    if let Some(v) = &a.levels {
        cfg.h_levels = v.clone();
    }
    if let Some(v) = a.graphs {
        cfg.graphs_per_level = v;
    }
    if let Some(v) = &a.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(v) = &a.methods {
        cfg.methods = v
            .iter()
            .map(|m| Method::parse(m).ok_or_else(|| HarnessError::Validation(format!("unknown method `{m}`"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = a.ensemble {
        cfg.inference.ensemble_size = v;
    }
    let ckpt = a.checkpoint.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    let model = ckpt.as_ref().map(|c| (&c.params, &c.model_config));
    let report = sweep_homophily(model, &s.sweep)?;
    create_dir(&a.out_dir)?;
    write_json(&a.out_dir.join("report.json"), &json!({ "config": s.sweep, "rows": report.rows }))?;
    write_text(&a.out_dir.join("plot.tsv"), &report.plot_table())?;
    write_text(&a.out_dir.join("graphs.tsv"), &report.graph_table())?;
    print!("{}", report.plot_table());
    for &m in &s.sweep.methods {
        println!("gap\t{}\t{}", m.name(), report.gap(m));
    }
    Ok(())
}

fn scaling_cmd(s: Settings, a: &ScalingArgs) -> Result<(), HarnessError> {
    let (params, model) = match &a.checkpoint {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            (c.params, c.model_config)
        }
        None => (ModelParams::init(&s.model)?, s.model.clone()),
    };
    let branch = match a.branch {
        BranchArg::Attention => ScalingBranch::Attention,
        BranchArg::Mpnn => ScalingBranch::Mpnn { n_nodes: a.nodes },
    };
    let rows = measure_scaling(&params, &model, branch, &a.sizes, a.repeats, a.seed)?;
    let mut table = String::from("size\tmedian_seconds\n");
    for r in &rows {
        table.push_str(&format!("{}\t{}\n", r.size, r.median_seconds));
    }
    let exponent = (rows.len() > 1).then(|| fit_exponent(&rows));
    print!("{table}");
    if let Some(e) = exponent {
        println!("exponent\t{e}");
    }
    if let Some(out) = &a.out {
        write_json(out, &json!({ "branch": branch, "model": model, "rows": rows, "exponent": exponent }))?;
    }
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<(), HarnessError> {
    let c = Checkpoint::load(&a.checkpoint)?;
    let mut tensors = Vec::new();
    c.params.for_each(|name, t| tensors.push(json!({ "name": name, "shape": t.shape() })));
    let summary = json!({
        "model_config": c.model_config,
        "parameters": c.params.num_scalars(),
        "params_sha256": c.params_sha256(),
        "tensors": tensors,
        "optimizer_step": c.optimizer.as_ref().map(|o| o.step),
        "position": c.position,
        "meta": c.meta,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let s = settings(cli)?;
    match &cli.command {
        Command::GeneratePriors(a) => generate(s, a),
        Command::Train(a) => train(s, a),
        Command::Predict(a) => predict_cmd(s, a),
        Command::Eval(a) => eval_cmd(s, a),
        Command::Baseline(a) => baseline_cmd(s, a),
        Command::SweepHomophily(a) => sweep_cmd(s, a),
        Command::MeasureScaling(a) => scaling_cmd(s, a),
        Command::InspectCheckpoint(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
