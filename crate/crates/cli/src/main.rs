use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use gsclip::config::{Ablation, ExperimentConfig, Stream};
use gsclip::dataset::{write_ply_with_quality, Dataset, Split};
use gsclip::losses::Stage;
use gsclip::model::{read_checkpoint, EvalMode, Model, Prepared};
use gsclip::projection::save_heatmap;
use gsclip::training::{evaluate, format_grid, run_grid, run_stage1, run_stage2, EpochLog, PreparedSplits};
use gsclip::GsError;

#[derive(Parser)]
#[command(name = "gsclip", version, about = "Zero-shot 3D anomaly detection on point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config, or write it to --out (JSON or TOML by extension).
    Config {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train stage 1, stage 2, or both.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint to start stage 2 from (default: OUT/checkpoints/stage1.safetensors).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Defaults to full for stage-2 checkpoints and render-only for stage-1 ones.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Where to write metrics.json (default: the checkpoint's run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-view heatmaps and a scored point cloud for selected objects.
    RenderMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Object ids (default: the first normal and first anomalous test object).
        #[arg(long = "id")]
        ids: Vec<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Default: the checkpoint's run directory plus maps/.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the module ablation grid and optional hyperparameter sweeps.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sweeps to run after the grid.
        #[arg(long, value_enum)]
        sweep: Vec<SweepArg>,
        /// Skip the module grid.
        #[arg(long)]
        no_grid: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    RenderOnly,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    /// Defect prompt length k.
    K,
    /// Learnable prompt length l.
    L,
    /// Number of views v.
    V,
}

#[derive(Clone, Copy, ValueEnum)]
enum StreamArg {
    Render,
    Depth,
    Both,
}

/// Overrides applied on top of the config file, which overrides defaults.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML or JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of views v.
    #[arg(long)]
    views: Option<usize>,
    /// Defect prompt length k.
    #[arg(long)]
    top_k: Option<usize>,
    /// Learnable prompt length l.
    #[arg(long)]
    learnable_tokens: Option<usize>,
    /// Prototype bank size q.
    #[arg(long)]
    prototypes: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lora_alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Image side for both projection and vision encoder.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    stage1_lr: Option<f64>,
    #[arg(long)]
    stage2_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    stream: Option<StreamArg>,
    #[arg(long)]
    no_srm: bool,
    #[arg(long)]
    no_shape_prompt: bool,
    #[arg(long)]
    no_defect_prompt: bool,
    #[arg(long)]
    no_con_loss: bool,
    /// Any config field as dotted.path=value (JSON value or bare string), e.g. scoring.sigma=2.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag {
                    c.$($field)+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(views => projection.views);
        set!(top_k => prompts.top_k);
        set!(learnable_tokens => prompts.learnable_tokens);
        set!(prototypes => prompts.prototypes);
        set!(lora_rank => lora.rank);
        set!(lora_alpha => lora.alpha);
        set!(temperature => scoring.temperature);
        set!(sigma => scoring.sigma);
        set!(stage1_epochs => stage1.epochs);
        set!(stage2_epochs => stage2.epochs);
        set!(stage1_lr => stage1.learning_rate);
        set!(stage2_lr => stage2.learning_rate);
        if let Some(b) = self.batch_size {
            c.stage1.batch_size = b;
            c.stage2.batch_size = b;
        }
        if let Some(r) = self.resolution {
            c.encoder.image = r;
            c.projection.height = r;
            c.projection.width = r;
        }
        if let Some(s) = self.stream {
            c.ablation.stream = match s {
                StreamArg::Render => Stream::Render,
                StreamArg::Depth => Stream::Depth,
                StreamArg::Both => Stream::Both,
            };
        }
        c.ablation.use_srm &= !self.no_srm;
        c.ablation.use_shape_prompt &= !self.no_shape_prompt;
        c.ablation.use_defect_prompt &= !self.no_defect_prompt;
        c.ablation.use_con_loss &= !self.no_con_loss;
        if !self.set.is_empty() {
            let mut v = serde_json::to_value(&c)?;
            for kv in &self.set {
                apply_override(&mut v, kv)?;
            }
            c = serde_json::from_value(v).map_err(|e| GsError::config(format!("bad --set override: {e}")))?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn apply_override(root: &mut Value, kv: &str) -> Result<()> {
    let (path, raw) = kv.split_once('=').ok_or_else(|| GsError::config(format!("--set expects PATH=VALUE, got '{kv}'")))?;
    let mut node = root;
    for key in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| GsError::config(format!("unknown config field '{path}'")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// run/{config.json, checkpoints/, logs/metrics.jsonl, maps/}
struct RunDir(PathBuf);

impl RunDir {
    fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "logs", "maps"] {
            fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.display()))?;
        }
        Ok(RunDir(root.to_path_buf()))
    }

    /// The run directory a checkpoint lives in.
    fn of_checkpoint(path: &Path) -> PathBuf {
        match path.parent() {
            Some(p) if p.file_name().is_some_and(|n| n == "checkpoints") => p.parent().unwrap_or(Path::new(".")).to_path_buf(),
            Some(p) => p.to_path_buf(),
            None => PathBuf::from("."),
        }
    }

    fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.0.join("checkpoints").join(format!("stage{}.safetensors", stage.number()))
    }

    fn log(&self) -> Result<BufWriter<File>> {
        let f = fs::OpenOptions::new().create(true).append(true).open(self.0.join("logs").join("metrics.jsonl"))?;
        Ok(BufWriter::new(f))
    }
}

fn jsonl_sink<'a>(out: &'a mut BufWriter<File>, tag: Option<&'a str>) -> impl FnMut(&EpochLog) -> gsclip::Result<()> + 'a {
    move |e| {
        let mut v = serde_json::to_value(e)?;
        if let Some(t) = tag {
            v["run"] = Value::String(t.to_string());
        }
        writeln!(out, "{}", serde_json::to_string(&v)?)?;
        out.flush()?;
        eprintln!("stage {} epoch {:>2}: loss {:.5}", e.stage.number(), e.epoch, e.train.total);
        Ok(())
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::read(dir).with_context(|| format!("reading dataset {}", dir.display()))?)
}

fn cmd_gen_data(out: &Path, cfg: &ConfigArgs) -> Result<()> {
    let c = cfg.resolve()?;
    let d = Dataset::generate(&c.data, c.seed)?;
    d.write(out)?;
    println!("wrote {} objects to {}", d.samples.len(), out.display());
    Ok(())
}

fn cmd_train(stage: StageArg, data: &Path, out: &Path, checkpoint: Option<&Path>, cfg: &ConfigArgs) -> Result<()> {
    let c = cfg.resolve()?;
    let dataset = load_data(data)?;
    let run = RunDir::create(out)?;
    c.save(&run.0.join("config.json"))?;
    let splits = PreparedSplits::new(&dataset, &c)?;
    let model = Model::new(&c)?;
    let mut log = run.log()?;
    if matches!(stage, StageArg::One | StageArg::All) {
        let report = run_stage1(&model, &splits, &mut jsonl_sink(&mut log, None))?;
        check_ledger(&report)?;
        model.save(&run.checkpoint(Stage::One), &model.meta(Stage::One, &splits.train_categories)?)?;
    }
    if matches!(stage, StageArg::Two | StageArg::All) {
        if matches!(stage, StageArg::Two) {
            let ck = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.checkpoint(Stage::One));
            let (meta, values) = read_checkpoint(&ck).with_context(|| format!("reading {}", ck.display()))?;
            model.restore(&meta, &values).with_context(|| format!("restoring {}", ck.display()))?;
        }
        let report = run_stage2(&model, &splits, &mut jsonl_sink(&mut log, None))?;
        check_ledger(&report)?;
        model.save(&run.checkpoint(Stage::Two), &model.meta(Stage::Two, &splits.train_categories)?)?;
    }
    println!("run directory: {}", run.0.display());
    Ok(())
}

fn check_ledger(report: &gsclip::training::StageReport) -> Result<()> {
    let bad = report.frozen_violations();
    if !bad.is_empty() {
        bail!(GsError::Scoring(format!("frozen groups changed during training: {bad:?}")));
    }
    Ok(())
}

fn default_mode(stage: u8) -> EvalMode {
    if stage >= 2 {
        EvalMode::Full
    } else {
        EvalMode::RenderOnly
    }
}

fn to_mode(m: Option<ModeArg>, stage: u8) -> EvalMode {
    match m {
        Some(ModeArg::Full) => EvalMode::Full,
        Some(ModeArg::RenderOnly) => EvalMode::RenderOnly,
        None => default_mode(stage),
    }
}

fn prepare(dataset: &Dataset, split: Split, cfg: &ExperimentConfig) -> Result<Vec<Prepared>> {
    Ok(dataset.split(split).iter().map(|s| Prepared::new(s, cfg)).collect::<gsclip::Result<Vec<_>>>()?)
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: SplitArg, mode: Option<ModeArg>, out: Option<&Path>) -> Result<()> {
    let (model, meta) = Model::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dataset = load_data(data)?;
    let mode = to_mode(mode, meta.stage);
    if mode == EvalMode::Full && meta.stage < 2 && model.config.ablation.uses_depth() {
        bail!(GsError::config("full mode needs a stage-2 checkpoint; use --mode render-only"));
    }
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let mut trained = meta.train_categories.clone();
    trained.extend(dataset.manifest.train_categories.iter().copied());
    let objects = prepare(&dataset, split, &model.config)?;
    let (evaluation, _) = evaluate(&model, &trained, &objects, mode)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| RunDir::of_checkpoint(checkpoint));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&evaluation)?)?;
    fs::write(dir.join("metrics.txt"), evaluation.metrics.format_table())?;
    print!("{}", evaluation.metrics.format_table());
    Ok(())
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let i = ((values.len() as f64 - 1.0) * q).round() as usize;
    values[i]
}

fn cmd_render_maps(checkpoint: &Path, data: &Path, ids: &[String], mode: Option<ModeArg>, out: Option<&Path>) -> Result<()> {
    let (model, meta) = Model::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dataset = load_data(data)?;
    let mode = to_mode(mode, meta.stage);
    let chosen: Vec<&gsclip::dataset::Sample> = if ids.is_empty() {
        let test = dataset.split(Split::Test);
        [false, true].iter().filter_map(|&l| test.iter().copied().find(|s| s.record.object_label == l)).collect()
    } else {
        ids.iter()
            .map(|id| dataset.samples.iter().find(|s| &s.record.id == id).ok_or_else(|| GsError::config(format!("no object '{id}'"))))
            .collect::<gsclip::Result<_>>()?
    };
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| RunDir::of_checkpoint(checkpoint).join("maps"));
    fs::create_dir_all(&dir)?;
    let mut summary = serde_json::Map::new();
    for s in chosen {
        let p = Prepared::new(s, &model.config)?;
        let r = model.infer(&p, mode)?;
        let (h, w) = (p.views.height, p.views.width);
        for (i, (m, v)) in r.maps_final.iter().zip(&p.views.views).enumerate() {
            save_heatmap(&dir.join(format!("{}_view{i}.png", p.id)), m, &v.rendered, h, w)?;
        }
        write_ply_with_quality(&s.cloud, Some(&r.point_scores), &dir.join(format!("{}_scores.ply", p.id)))?;
        let mut all: Vec<f64> = r.maps_final.iter().flatten().copied().collect();
        let p99 = percentile(&mut all, 0.99);
        println!("{}: label {} object score {:.4} map p99 {:.4}", p.id, p.object_label as u8, r.object_prob, p99);
        summary.insert(
            p.id.clone(),
            serde_json::json!({ "object_label": p.object_label, "object_score": r.object_prob, "map_p99": p99 }),
        );
    }
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&Value::Object(summary))?)?;
    Ok(())
}

fn cmd_ablate(data: &Path, out: &Path, sweeps: &[SweepArg], no_grid: bool, cfg: &ConfigArgs) -> Result<()> {
    let base = cfg.resolve()?;
    let dataset = load_data(data)?;
    let run = RunDir::create(out)?;
    base.save(&run.0.join("config.json"))?;
    let mut log = run.log()?;
    let mut results = serde_json::Map::new();
    if !no_grid {
        let splits = PreparedSplits::new(&dataset, &base)?;
        let rows = run_grid(&base, &Ablation::grid(), &splits, &mut |label, e| jsonl_sink(&mut log, Some(label))(e))?;
        let table = format_grid(&rows);
        print!("{table}");
        fs::write(run.0.join("ablation.txt"), &table)?;
        let json: Vec<Value> = rows
            .iter()
            .map(|r| serde_json::json!({ "label": r.label, "ablation": r.ablation, "metrics": r.evaluation.metrics }))
            .collect();
        results.insert("grid".into(), Value::Array(json));
    }
    for sweep in sweeps {
        let (name, values): (&str, &[usize]) = match sweep {
            SweepArg::K => ("k", &[4, 8, 12, 16, 20]),
            SweepArg::L => ("l", &[8, 16, 32, 64]),
            SweepArg::V => ("v", &[1, 3, 5, 7, 9]),
        };
        let mut points = Vec::new();
        for &value in values {
            let mut c = base.clone();
            match sweep {
                SweepArg::K => c.prompts.top_k = value,
                SweepArg::L => c.prompts.learnable_tokens = value,
                SweepArg::V => c.projection.views = value,
            }
            // Longer prompts need a longer text context.
            let len = c.ablation.use_shape_prompt as usize + c.prompts.learnable_tokens + c.prompts.top_k;
            c.encoder.context = c.encoder.context.max(len);
            c.validate()?;
            let splits = PreparedSplits::new(&dataset, &c)?;
            let tag = format!("{name}={value}");
            let rows = run_grid(&c, &[c.ablation.clone()], &splits, &mut |_, e| jsonl_sink(&mut log, Some(&tag))(e))?;
            let m = &rows[0].evaluation.metrics.overall;
            println!("{tag}: O-AUROC {:?} P-AUROC {:?} P-PRO {:?}", m.o_auroc, m.p_auroc, m.p_pro);
            points.push(serde_json::json!({ "value": value, "metrics": rows[0].evaluation.metrics }));
        }
        results.insert(format!("sweep_{name}"), Value::Array(points));
    }
    fs::write(run.0.join("ablation.json"), serde_json::to_string_pretty(&Value::Object(results))?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Config { out, cfg } => {
            let c = cfg.resolve()?;
            match out {
                Some(p) => c.save(p)?,
                None => println!("{}", c.to_json()?),
            }
            Ok(())
        }
        Command::GenData { out, cfg } => cmd_gen_data(out, cfg),
        Command::Train { stage, data, out, checkpoint, cfg } => cmd_train(*stage, data, out, checkpoint.as_deref(), cfg),
        Command::Eval { checkpoint, data, split, mode, out } => cmd_eval(checkpoint, data, *split, *mode, out.as_deref()),
        Command::RenderMaps { checkpoint, data, ids, mode, out } => cmd_render_maps(checkpoint, data, ids, *mode, out.as_deref()),
        Command::Ablate { data, out, sweep, no_grid, cfg } => cmd_ablate(data, out, sweep, *no_grid, cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.chain().find_map(|c| c.downcast_ref::<GsError>()).map(GsError::exit_code).unwrap_or(2);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
