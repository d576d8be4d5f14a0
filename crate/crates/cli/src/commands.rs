use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use irene_core::encoder::Checkpoint;
use irene_core::export::{self, CompareRow, GraphMethod, TrainedGraphs};
use irene_core::metrics::{MetricReport, Task};
use irene_core::selfcheck::{self, Scope};
use irene_core::signal::{generate_synthetic, read_dataset, write_dataset, Dataset, SyntheticSpec};
use irene_core::trainer::{self, IreneModel, Loaded, PipelineConfig, Stage};
use irene_core::Error;
use serde::Serialize;

use crate::{
    CompareArgs, EvalArgs, FinetuneArgs, GradcheckArgs, GraphsArgs, PretrainArgs, SynthArgs,
};

const USAGE: u8 = 2;
const DATA: u8 = 3;
const NUMERIC: u8 = 4;
const THRESHOLD: u8 = 5;

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => USAGE,
            Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Json(_) => DATA,
            Error::NonFinite { .. } => NUMERIC,
            Error::Shape { .. } | Error::Contract(_) | Error::Undefined(_) => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: DATA,
        message: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn open_dataset(path: &Path) -> Result<Dataset, Failure> {
    read_dataset(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    path.map_or_else(|| Ok(PipelineConfig::default()), read_json)
}

fn load_model(path: &Path) -> Result<Loaded, Failure> {
    let ck = Checkpoint::load(path)?;
    Ok(IreneModel::from_checkpoint(&ck)?)
}

/// JSON-lines sink: a file when given, stdout otherwise.
fn log_sink(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(fs::File::create(p)?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn json_line<T: Serialize>(out: &mut dyn Write, value: &T) -> io::Result<()> {
    let line = serde_json::to_string(value).map_err(io::Error::other)?;
    writeln!(out, "{line}")
}

pub fn synth(a: SynthArgs) -> Outcome {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let dataset = generate_synthetic(&spec)?;
    write_dataset(&a.out, &dataset)?;
    log::info!("wrote {} clips to {}", dataset.clips.len(), a.out.display());
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Outcome {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    if let Some(e) = a.epochs {
        config.train.max_epochs = e;
    }
    let dataset = open_dataset(&a.data)?;
    let mut sink = log_sink(a.log.as_deref())?;
    let mut write_err = None;
    let outcome = trainer::pretrain(&dataset, &config, |log| {
        if write_err.is_none() {
            write_err = json_line(&mut *sink, log).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    sink.flush()?;
    outcome.checkpoint(!a.no_adjacency)?.save(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct FinetuneSummary<'a> {
    seed: u64,
    best_epoch: usize,
    best_score: f64,
    evaluated_on: &'a str,
}

pub fn finetune(a: FinetuneArgs) -> Outcome {
    if a.seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let ck = Checkpoint::load(&a.ckpt)?;
    let (_, meta, _) = IreneModel::from_checkpoint(&ck)?;
    let mut train = match &a.config {
        Some(p) => read_json::<PipelineConfig>(p)?.train,
        None => meta.config.train.clone(),
    };
    if let Some(e) = a.epochs {
        train.finetune_max_epochs = e;
    }
    let first = a.seed.unwrap_or(train.seed);
    let task = Task::from(a.task);
    let dataset = open_dataset(&a.data)?;
    let test = a.test.as_deref().map(open_dataset).transpose()?;

    fs::create_dir_all(&a.out)?;
    let mut seeds = Vec::new();
    let mut results = Vec::new();
    for s in 0..a.seeds as u64 {
        let seed = first + s;
        let cfg = trainer::TrainConfig {
            seed,
            ..train.clone()
        };
        let dir = a.out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir)?;
        let mut sink = log_sink(Some(&dir.join("log.jsonl")))?;
        let mut write_err = None;
        let run = trainer::finetune(&ck, &dataset, task, &cfg, a.unfreeze, |log| {
            if write_err.is_none() {
                write_err = json_line(&mut *sink, log).err();
            }
        })?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        sink.flush()?;
        run.checkpoint()?.save(&dir.join("model.irnc"))?;
        let (held_out, name) = match &test {
            Some(t) => (t.clone(), "test"),
            None => (dataset.subset(&run.val_indices), "validation"),
        };
        let result = trainer::evaluate(&run.model, &run.meta, &held_out, task)?;
        log::info!(
            "seed {seed}: auroc {:.4}, f1 {:.4}",
            result.auroc,
            result.f1
        );
        let summary = FinetuneSummary {
            seed,
            best_epoch: run.best_epoch,
            best_score: run.best_score,
            evaluated_on: name,
        };
        write_text(&dir.join("summary.json"), &pretty(&summary)?)?;
        seeds.push(seed);
        results.push(result);
    }
    let report = MetricReport::new(task, dataset.clip_seconds, seeds, results)?;
    write_text(&a.out.join("report.json"), &pretty(&report)?)?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Outcome {
    let (model, meta, _) = load_model(&a.model)?;
    if meta.stage != Stage::Finetune {
        return Err(Failure::usage(format!(
            "{} is not a finetuned model",
            a.model.display()
        )));
    }
    let task = a.task.map(Task::from).or(meta.task).unwrap_or_default();
    let dataset = open_dataset(&a.data)?;
    let result = trainer::evaluate(&model, &meta, &dataset, task)?;
    fs::create_dir_all(&a.out)?;
    write_text(&a.out.join("confusion.csv"), &result.confusion_csv())?;
    let report = MetricReport::new(task, dataset.clip_seconds, vec![meta.seed], vec![result])?;
    write_text(&a.out.join("metrics.json"), &pretty(&report)?)?;
    Ok(())
}

/// Graphs of `method` for every clip, using the checkpoint's configuration
/// when a model is given.
fn method_graphs(
    method: GraphMethod,
    dataset: &Dataset,
    config: &PipelineConfig,
    model: Option<&Loaded>,
) -> Result<Vec<export::ClipGraphs>, Failure> {
    let trained = model.map(|(m, meta, adjacency)| TrainedGraphs {
        model: m,
        meta,
        adjacency,
    });
    if method.needs_model() && trained.is_none() {
        return Err(Failure::usage(format!("method {method} needs --model")));
    }
    let graph = model.map_or(&config.model.graph, |(_, meta, _)| &meta.config.model.graph);
    Ok(export::dataset_graphs(
        method,
        dataset,
        graph,
        &config.baselines,
        trained.as_ref(),
    )?)
}

pub fn graphs(a: GraphsArgs) -> Outcome {
    let method = match (a.method, &a.model) {
        (Some(m), _) => GraphMethod::from(m),
        (None, Some(_)) => GraphMethod::Ib,
        (None, None) => return Err(Failure::usage("give --model or --method")),
    };
    let model = a.model.as_deref().map(load_model).transpose()?;
    let config = match (&a.config, &model) {
        (Some(p), _) => read_json(p)?,
        (None, Some((_, meta, _))) => meta.config.clone(),
        (None, None) => PipelineConfig::default(),
    };
    let dataset = open_dataset(&a.data)?;
    let graphs = method_graphs(method, &dataset, &config, model.as_ref())?;
    let n = dataset.channels;
    let dir = a.out.join("adjacency");
    fs::create_dir_all(&dir)?;
    for (c, clip) in graphs.iter().enumerate() {
        write_text(
            &dir.join(format!("clip_{c:04}.json")),
            &export::adjacency_json(clip, n)?,
        )?;
    }
    write_text(&a.out.join("density.csv"), &export::density_csv(&graphs, n))?;
    Ok(())
}

pub fn compare_graphs(a: CompareArgs) -> Outcome {
    let model = a.model.as_deref().map(load_model).transpose()?;
    let config = match (&a.config, &model) {
        (Some(p), _) => read_json(p)?,
        (None, Some((_, meta, _))) => meta.config.clone(),
        (None, None) => PipelineConfig::default(),
    };
    let dataset = open_dataset(&a.data)?;
    let mut rows = Vec::new();
    for m in &a.methods {
        let method = GraphMethod::from(*m);
        let graphs = method_graphs(method, &dataset, &config, model.as_ref())?;
        let scores = dataset
            .planted
            .as_deref()
            .map(|p| export::structure_scores(&graphs, p))
            .transpose()?;
        rows.push(CompareRow {
            method,
            mean_density: export::mean_density(&graphs, dataset.channels),
            precision: scores.map(|s| s.0),
            recall: scores.map(|s| s.1),
        });
    }
    write_text(&a.out, &export::compare_csv(&rows))?;
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Outcome {
    let scope = Scope::from(a.scope);
    let results = selfcheck::run(scope, a.eps)?;
    let mut failed = Vec::new();
    for r in &results {
        println!("{scope} {:<24} {:.3e}", r.target, r.max_rel_error);
        if !r.passed() {
            failed.push(r.target.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: THRESHOLD,
            message: format!(
                "relative error above {:e} for {}",
                selfcheck::TOLERANCE,
                failed.join(", ")
            ),
        })
    }
}
