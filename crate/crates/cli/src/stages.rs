//! Pipeline stages. Each writes into its own directory under the output root,
//! next to a `manifest.json` that echoes the effective configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use geoshift::checkpoint::{Checkpoint, Stage};
use geoshift::evaluation::{evaluate_model, EvalReport};
use geoshift::mean_teacher::{self, StepLoss, TraceRecord};
use geoshift::synthbench::{self, generate_domain_pair, Dataset, Split};
use geoshift::transform_approx::{fit_nested, remap_visualization, Grid};
use geoshift::Model;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const DATA_DIR: &str = "data";
pub const BASE_DIR: &str = "base";
pub const AGGREGATOR_DIR: &str = "aggregator";
pub const APPROX_DIR: &str = "approx";
pub const EVAL_DIR: &str = "eval";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub code_version: String,
    pub seed: u64,
    /// Upstream artifacts, relative to the output root.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub config: serde_json::Value,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    out.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Dependency {
            what: "trace".into(),
            detail: format!("{} not found; run the stage that writes it first", path.display()),
        },
        _ => CliError::io(path, e),
    })?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

fn write_manifest(
    dir: &Path,
    stage: &str,
    cfg: &ExperimentConfig,
    inputs: &[(&str, String)],
    outputs: &[&str],
) -> Result<()> {
    let manifest = StageManifest {
        stage: stage.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        inputs: inputs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        config: cfg.to_json(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[geoshift] {}", msg.as_ref());
}

/// Renders the benchmark into `<out>/data`.
pub fn synth_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let t = Instant::now();
    let data = generate_domain_pair(&cfg.bench())?;
    let dir = out.join(DATA_DIR);
    create_dir(&dir)?;
    synthbench::write_dataset(&dir, &data)?;
    // The dataset manifest records the bench spec; the stage manifest sits beside it.
    write_json(
        &dir.join("stage.json"),
        &StageManifest {
            stage: "synth-gen".into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            inputs: BTreeMap::new(),
            outputs: vec![synthbench::MANIFEST_FILE.into(), synthbench::ANNOTATIONS_FILE.into()],
            config: cfg.to_json(),
        },
    )?;
    log(format!(
        "synth-gen: {} images in {:.1}s -> {}",
        Split::ALL.iter().map(|&s| data.split(s).len()).sum::<usize>(),
        t.elapsed().as_secs_f64(),
        dir.display()
    ));
    Ok(data)
}

/// Loads `<out>/data`, refusing a dataset rendered from a different spec.
pub fn load_data(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let dir = out.join(DATA_DIR);
    let manifest = synthbench::read_manifest(&dir).map_err(|e| match e {
        geoshift::Error::Missing { .. } => CliError::Dependency {
            what: "dataset".into(),
            detail: format!("{} has no dataset; run `geoshift synth-gen` first", dir.display()),
        },
        other => other.into(),
    })?;
    if manifest.spec != cfg.bench() {
        return Err(CliError::Dependency {
            what: "dataset".into(),
            detail: format!(
                "{} was generated from a different scene, shift, counts or seed; re-run `geoshift synth-gen`",
                dir.display()
            ),
        });
    }
    Ok(synthbench::load_dataset(&dir)?)
}

fn load_checkpoint(out: &Path, dir_name: &str, stage: Stage) -> Result<Checkpoint> {
    let path = out.join(dir_name).join(CHECKPOINT_FILE);
    Checkpoint::load(&path, stage).map_err(|e| match e {
        geoshift::Error::Missing { what, .. } => CliError::Dependency {
            what,
            detail: format!("{} not found; run `geoshift {}` first", path.display(), stage.name()),
        },
        other => other.into(),
    })
}

fn source_val_ap(model: &Model, data: &Dataset, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let split = data.split(Split::SourceVal);
    Ok(evaluate_model(model, &split.images, split.labels()?, &cfg.eval)?)
}

fn target_val_ap(model: &Model, data: &Dataset, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let split = data.split(Split::TargetVal);
    Ok(evaluate_model(model, &split.images, split.labels()?, &cfg.eval)?)
}

fn save_stage(
    dir: &Path,
    stage: Stage,
    steps: usize,
    model: Model,
    teacher: Option<Model>,
    cfg: &ExperimentConfig,
    metrics: serde_json::Value,
) -> Result<()> {
    let mut ck = Checkpoint::new(stage, steps as u64, model, teacher, &cfg.to_json())?;
    ck.metrics = serde_json::to_string(&metrics)?;
    ck.save(&dir.join(CHECKPOINT_FILE))?;
    write_json(&dir.join(METRICS_FILE), &metrics)
}

fn final_loss(trace: &[StepLoss]) -> Option<f64> {
    let tail = &trace[trace.len().saturating_sub(50)..];
    (!tail.is_empty()).then(|| tail.iter().map(|s| s.total).sum::<f64>() / tail.len() as f64)
}

/// Trains the plain detector into `<out>/base`.
pub fn train_base(cfg: &ExperimentConfig, out: &Path, data: &Dataset) -> Result<Model> {
    let t = Instant::now();
    let run = mean_teacher::train_base(data.split(Split::SourceTrain), &cfg.detector, &cfg.training)?;
    let src = source_val_ap(&run.model, data, cfg)?;
    let tgt = target_val_ap(&run.model, data, cfg)?;
    let dir = out.join(BASE_DIR);
    create_dir(&dir)?;
    write_jsonl(&dir.join(TRACE_FILE), &run.trace)?;
    let metrics = json!({
        "steps": cfg.training.base.steps,
        "final_loss": final_loss(&run.trace),
        "source_val_ap50": src.ap50,
        "target_val_ap50": tgt.ap50,
    });
    save_stage(&dir, Stage::Base, cfg.training.base.steps, run.model.clone(), None, cfg, metrics)?;
    write_manifest(
        &dir,
        Stage::Base.name(),
        cfg,
        &[("dataset", DATA_DIR.into())],
        &[CHECKPOINT_FILE, TRACE_FILE, METRICS_FILE],
    )?;
    log(format!(
        "train-base: source_val AP50 {:.3}, target_val AP50 {:.3} in {:.1}s -> {}",
        src.ap50,
        tgt.ap50,
        t.elapsed().as_secs_f64(),
        dir.display()
    ));
    Ok(run.model)
}

pub fn load_base(out: &Path) -> Result<Model> {
    Ok(load_checkpoint(out, BASE_DIR, Stage::Base)?.model)
}

/// Trains the aggregator on top of the base model into `<out>/<dir_name>`.
pub fn train_aggregator(cfg: &ExperimentConfig, out: &Path, data: &Dataset, base: &Model, dir_name: &str) -> Result<Model> {
    let t = Instant::now();
    let run = mean_teacher::train_aggregator(
        base,
        data.split(Split::SourceTrain),
        Some(data.split(Split::SourceVal)),
        &cfg.training,
    )?;
    let src = source_val_ap(&run.model, data, cfg)?;
    let dir = out.join(dir_name);
    create_dir(&dir)?;
    write_jsonl(&dir.join(TRACE_FILE), &run.trace)?;
    let metrics = json!({
        "steps": cfg.training.aggregator.steps,
        "n": cfg.training.n,
        "final_loss": final_loss(&run.trace),
        "held_out_loss_before": run.held_out_before,
        "held_out_loss_after": run.held_out_after,
        "source_val_ap50_identity_set": src.ap50,
    });
    save_stage(&dir, Stage::Aggregator, cfg.training.aggregator.steps, run.model.clone(), None, cfg, metrics)?;
    write_manifest(
        &dir,
        Stage::Aggregator.name(),
        cfg,
        &[("dataset", DATA_DIR.into()), ("base", format!("{BASE_DIR}/{CHECKPOINT_FILE}"))],
        &[CHECKPOINT_FILE, TRACE_FILE, METRICS_FILE],
    )?;
    log(format!(
        "train-aggregator: held-out loss {:.4} -> {:.4}, source_val AP50 {:.3} in {:.1}s -> {}",
        run.held_out_before.unwrap_or(f64::NAN),
        run.held_out_after.unwrap_or(f64::NAN),
        src.ap50,
        t.elapsed().as_secs_f64(),
        dir.display()
    ));
    Ok(run.model)
}

pub fn load_aggregator(out: &Path, dir_name: &str) -> Result<Model> {
    Ok(load_checkpoint(out, dir_name, Stage::Aggregator)?.model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum StartFrom {
    /// The plain detector: a mean-teacher baseline without homographies.
    Base,
    /// The multi-homography detector.
    Aggregator,
}

impl StartFrom {
    pub fn dir(self) -> &'static str {
        match self {
            StartFrom::Base => BASE_DIR,
            StartFrom::Aggregator => AGGREGATOR_DIR,
        }
    }
}

/// Adapts `start` to the target domain into `<out>/<dir_name>`; returns the teacher's target AP.
pub fn adapt(
    cfg: &ExperimentConfig,
    out: &Path,
    data: &Dataset,
    start: &Model,
    start_dir: &str,
    dir_name: &str,
) -> Result<f64> {
    let t = Instant::now();
    let run = mean_teacher::adapt(
        start,
        data.split(Split::SourceTrain),
        data.split(Split::TargetTrain),
        Some(data.split(Split::TargetVal)),
        &cfg.training,
    )?;
    let teacher = &run.state.teacher;
    let tgt = target_val_ap(teacher, data, cfg)?;
    let src = source_val_ap(teacher, data, cfg)?;
    let dir = out.join(dir_name);
    create_dir(&dir)?;
    write_jsonl(&dir.join(TRACE_FILE), &run.trace)?;
    let metrics = json!({
        "steps": cfg.training.adapt.steps,
        "mode": cfg.training.adapt.mode,
        "start": start_dir,
        "target_val_ap50": tgt.ap50,
        "source_val_ap50": src.ap50,
        "teacher_transforms": teacher.homographies().map(|s| s.params.clone()),
        "min_pairwise_distance": teacher.homographies().map(|s| s.min_pairwise_distance()),
    });
    save_stage(
        &dir,
        Stage::Adapt,
        cfg.training.adapt.steps,
        run.state.student.clone(),
        Some(run.state.teacher.clone()),
        cfg,
        metrics,
    )?;
    write_manifest(
        &dir,
        Stage::Adapt.name(),
        cfg,
        &[("dataset", DATA_DIR.into()), ("start", format!("{start_dir}/{CHECKPOINT_FILE}"))],
        &[CHECKPOINT_FILE, TRACE_FILE, METRICS_FILE],
    )?;
    log(format!(
        "adapt: teacher target_val AP50 {:.3}, source_val AP50 {:.3} in {:.1}s -> {}",
        tgt.ap50,
        src.ap50,
        t.elapsed().as_secs_f64(),
        dir.display()
    ));
    Ok(tgt.ap50)
}

pub fn adapt_dir(tag: Option<&str>) -> String {
    match tag {
        Some(t) => format!("adapt-{t}"),
        None => "adapt".into(),
    }
}

/// Fits nested sets of sizes `1..=n_max` to the configured shift into `<out>/approx`.
pub fn fit_approx(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let t = Instant::now();
    let mapping = cfg.shift.mapping()?;
    let grid = Grid::new(cfg.approx.grid[0], cfg.approx.grid[1]).map_err(|e| CliError::Config {
        path: "approx.grid".into(),
        message: e.to_string(),
    })?;
    let reports = fit_nested(&mapping, cfg.approx.n_max, grid, &cfg.approx.fit)?;
    let dir = out.join(APPROX_DIR);
    create_dir(&dir)?;
    let mut outputs = vec!["fits.json".to_string()];
    for r in &reports {
        let name = format!("remap_n{}.png", r.params.len());
        let path = dir.join(&name);
        remap_visualization(&mapping, r, cfg.approx.visualization_size)
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| CliError::Core(e.into()))?;
        outputs.push(name);
        log(format!(
            "fit-approx: N={} rmse {:.3} px, max {:.3} px",
            r.params.len(),
            r.rmse,
            r.max_error
        ));
    }
    write_json(&dir.join("fits.json"), &reports)?;
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(&dir, "fit-approx", cfg, &[], &outputs)?;
    log(format!("fit-approx: done in {:.1}s -> {}", t.elapsed().as_secs_f64(), dir.display()));
    Ok(())
}

fn stage_of(dir_name: &str) -> Result<Stage> {
    match dir_name {
        BASE_DIR => Ok(Stage::Base),
        AGGREGATOR_DIR => Ok(Stage::Aggregator),
        d if d == "adapt" || d.starts_with("adapt-") => Ok(Stage::Adapt),
        d if d.starts_with("aggregator-") => Ok(Stage::Aggregator),
        other => Err(CliError::Config {
            path: "--stage".into(),
            message: format!("`{other}` is not a stage directory (base, aggregator, adapt or adapt-<tag>)"),
        }),
    }
}

/// AP@0.5 of a stage's inference model on one labeled split, written to `<out>/eval`.
pub fn eval(cfg: &ExperimentConfig, out: &Path, stage_dir: &str, split: Split) -> Result<EvalReport> {
    if !split.labeled() {
        return Err(CliError::Config {
            path: "--split".into(),
            message: format!("split {} is unlabeled and cannot be scored", split.name()),
        });
    }
    let ck = load_checkpoint(out, stage_dir, stage_of(stage_dir)?)?;
    let data = load_data(cfg, out)?;
    let s = data.split(split);
    let mut report = evaluate_model(ck.inference_model(), &s.images, s.labels()?, &cfg.eval)?;
    report.config = Some(json!({
        "stage": stage_dir,
        "split": split.name(),
        "checkpoint_config": serde_json::from_str::<serde_json::Value>(&ck.config)?,
        "eval_config": cfg.to_json(),
    }));
    let dir = out.join(EVAL_DIR);
    create_dir(&dir)?;
    let path = dir.join(format!("{stage_dir}_{}.json", split.name()));
    write_json(&path, &report)?;
    log(format!(
        "eval: {stage_dir} on {}: AP50 {:.4} ({} images) -> {}",
        split.name(),
        report.ap50,
        report.images,
        path.display()
    ));
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Number of homographies; retrains the aggregator per value.
    N,
    Lambda,
    Tau,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::N => "n",
            SweepParam::Lambda => "lambda",
            SweepParam::Tau => "tau",
        }
    }

    fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        match self {
            SweepParam::N => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(CliError::Config {
                        path: "--values".into(),
                        message: format!("n must be a positive integer, got {value}"),
                    });
                }
                c.training.n = value as usize;
            }
            SweepParam::Lambda => c.training.adapt.lambda = value,
            SweepParam::Tau => c.training.adapt.tau = value as f32,
        }
        c.training.validate().map_err(|e| CliError::Config {
            path: format!("training ({}={value})", self.name()),
            message: e.to_string(),
        })?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// Teacher target_val AP50 per seed, in `seeds` order.
    pub target_ap50: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub param: SweepParam,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn markdown(&self) -> String {
        let mut s = format!("| {} | mean AP50 | std |", self.param.name());
        for seed in &self.seeds {
            s += &format!(" seed {seed} |");
        }
        s += "\n|---|---|---|";
        s += &"---|".repeat(self.seeds.len());
        s += "\n";
        for r in &self.rows {
            s += &format!("| {} | {:.4} | {:.4} |", r.value, r.mean, r.std);
            for v in &r.target_ap50 {
                s += &format!(" {v:.4} |");
            }
            s += "\n";
        }
        s
    }
}

pub fn sweep_dir(param: SweepParam) -> String {
    format!("sweep-{}", param.name())
}

/// Full pipeline per seed and value. Each seed renders its own benchmark under
/// `<out>/sweep-<param>/seed-<s>`.
pub fn sweep(cfg: &ExperimentConfig, out: &Path, param: SweepParam, values: &[f64], seeds: &[u64]) -> Result<SweepSummary> {
    if values.is_empty() || seeds.is_empty() {
        return Err(CliError::Config {
            path: "--values".into(),
            message: "a sweep needs at least one value and one seed".into(),
        });
    }
    let per_value: Vec<ExperimentConfig> = values.iter().map(|&v| param.apply(cfg, v)).collect::<Result<_>>()?;
    let root = out.join(sweep_dir(param));
    let mut results = vec![Vec::with_capacity(seeds.len()); values.len()];
    for &seed in seeds {
        let seed_cfg = cfg.with_seed(seed);
        let seed_out: PathBuf = root.join(format!("seed-{seed}"));
        let data = synth_gen(&seed_cfg, &seed_out)?;
        let base = train_base(&seed_cfg, &seed_out, &data)?;
        let shared = match param {
            SweepParam::N => None,
            _ => Some(train_aggregator(&seed_cfg, &seed_out, &data, &base, AGGREGATOR_DIR)?),
        };
        for (i, (value, vcfg)) in values.iter().zip(&per_value).enumerate() {
            let vcfg = vcfg.with_seed(seed);
            let (start, start_dir) = match &shared {
                Some(m) => (m.clone(), AGGREGATOR_DIR.to_string()),
                None => {
                    let d = format!("aggregator-n{value}");
                    (train_aggregator(&vcfg, &seed_out, &data, &base, &d)?, d)
                }
            };
            let name = format!("adapt-{}{value}", param.name());
            results[i].push(adapt(&vcfg, &seed_out, &data, &start, &start_dir, &name)?);
        }
    }
    let rows = values
        .iter()
        .zip(results)
        .map(|(&value, aps)| {
            let mean = aps.iter().sum::<f64>() / aps.len() as f64;
            let var = aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / aps.len() as f64;
            SweepRow {
                value,
                target_ap50: aps,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    let summary = SweepSummary {
        param,
        seeds: seeds.to_vec(),
        rows,
    };
    write_json(&root.join(SUMMARY_FILE), &summary)?;
    let table = summary.markdown();
    fs::write(root.join("summary.md"), &table).map_err(|e| CliError::io(&root, e))?;
    write_manifest(&root, "sweep", cfg, &[], &[SUMMARY_FILE, "summary.md"])?;
    println!("{table}");
    Ok(summary)
}

pub fn read_summary(path: &Path) -> Result<SweepSummary> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Dependency {
            what: "sweep summary".into(),
            detail: format!("{} not found; run `geoshift sweep` first", path.display()),
        },
        _ => CliError::io(path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_adapt_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    read_jsonl(path)
}
