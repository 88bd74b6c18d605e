use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use protoparts::checkpoint::{load_checkpoint, save_checkpoint};
use protoparts::fusion::{top_parts, AttentionRecord};
use protoparts::harness::{
    build_explicit_protocol, build_holdout_protocol, build_ntu120_protocol, build_nwucla_protocol,
    evaluate_episodic, evaluate_one_shot, parse_exemplar_map, train, Catalog, EpochRecord,
    EvalReport, Exemplars, ProtocolSplit, TrainObserver,
};
use protoparts::model::Model;
use protoparts::partition::{build_default_scheme, build_scheme_with_k};
use protoparts::skeleton::{
    generate_synthetic_dataset, load_dataset, normalize_sequence, parse_ntu_skeleton,
    parse_nwucla_sample, select_primary_body, write_dataset, JointTopology, SkeletonSequence,
    SkippedFile, SynthSpec,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ProtocolKind, RunConfig};
use crate::error::CliError;
use crate::svg::attention_bar_chart;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SPLIT_FILE: &str = "split.json";
pub const EVAL_FILE: &str = "eval_report.json";
pub const ATTENTION_FILE: &str = "attention_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DatasetKind {
    /// `.skeleton` text files.
    Ntu,
    /// Per-clip `.json` files.
    Nwucla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    /// Every test sample against the fixed exemplars.
    OneShot,
    /// Mean accuracy over sampled C-way episodes.
    Episodic,
}

pub fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::user(format!("{what} is required")))
}

fn load_data(cfg: &RunConfig) -> Result<Vec<SkeletonSequence>, CliError> {
    let dir = require(&cfg.paths.data_dir, "--data")?;
    let data = load_dataset(dir).map_err(|e| CliError::user(e.to_string()))?;
    if data.is_empty() {
        return Err(CliError::empty(format!("{} holds no samples", dir.display())));
    }
    Ok(data)
}

pub fn build_split(cfg: &RunConfig, data: &[SkeletonSequence]) -> Result<ProtocolSplit, CliError> {
    let catalog = Catalog::from_sequences(data);
    let labels = catalog.labels();
    let map = match &cfg.paths.exemplar_map {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Some(parse_exemplar_map(&text).map_err(|e| CliError::user(e.to_string()))?)
        }
        None => None,
    };
    let exemplars = match &map {
        Some(m) => Exemplars::Map(m),
        None => Exemplars::SmallestId(&catalog),
    };
    let p = &cfg.protocol;
    let split = match p.kind {
        ProtocolKind::Ntu120 => build_ntu120_protocol(&labels, p.training_class_count, exemplars),
        ProtocolKind::Nwucla => build_nwucla_protocol(&labels, exemplars),
        ProtocolKind::Holdout => build_holdout_protocol(&labels, p.holdout_classes, exemplars),
        ProtocolKind::Explicit => {
            build_explicit_protocol(&labels, &p.train_classes, &p.eval_classes, exemplars)
        }
    };
    split.map_err(|e| CliError::user(format!("protocol: {e}")))
}

/// Parses every raw file, keeps the primary body, normalizes and writes the
/// canonical dataset. Unparseable files are listed in the manifest.
pub fn prepare_data(
    cfg: &RunConfig,
    raw: &Path,
    kind: DatasetKind,
    out: &Path,
) -> Result<Value, CliError> {
    let (topology, ext) = match kind {
        DatasetKind::Ntu => (JointTopology::ntu25(), "skeleton"),
        DatasetKind::Nwucla => (JointTopology::nwucla20(), "json"),
    };
    let mut files: Vec<PathBuf> = fs::read_dir(raw)
        .map_err(|e| CliError::io(raw, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for path in &files {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let parsed = fs::File::open(path)
            .map_err(|e| e.to_string())
            .and_then(|f| {
                let res = match kind {
                    DatasetKind::Ntu => {
                        parse_ntu_skeleton(std::io::BufReader::new(f), &topology, Some(&stem))
                    }
                    DatasetKind::Nwucla => parse_nwucla_sample(f, &topology, Some(&stem)),
                };
                res.map_err(|e| e.to_string())
            })
            .and_then(|seq| {
                normalize_sequence(&select_primary_body(&seq), &topology, &cfg.preprocess)
                    .map_err(|e| e.to_string())
            });
        match parsed {
            Ok(seq) => samples.push(seq),
            Err(reason) => {
                log::warn!("skipping {name}: {reason}");
                skipped.push(SkippedFile { file: name, reason });
            }
        }
    }
    if samples.is_empty() {
        return Err(CliError::empty(format!(
            "no valid samples in {} ({} skipped)",
            raw.display(),
            skipped.len()
        )));
    }
    let manifest = write_dataset(out, &samples, Some(topology.name()), skipped)
        .map_err(|e| CliError::user(e.to_string()))?;
    Ok(json!({
        "out": out,
        "sample_count": manifest.sample_count,
        "skip_count": manifest.skipped.len(),
        "class_counts": manifest.class_counts,
    }))
}

pub fn synth(spec_path: &Path, seed: u64, out: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::io(spec_path, e))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::user(format!("spec {}: {e}", spec_path.display())))?;
    let topology =
        JointTopology::by_name(&spec.topology).map_err(|e| CliError::user(e.to_string()))?;
    let samples = generate_synthetic_dataset(&topology, &spec, seed)
        .map_err(|e| CliError::user(format!("spec {}: {e}", spec_path.display())))?;
    let manifest = write_dataset(out, &samples, Some(topology.name()), Vec::new())
        .map_err(|e| CliError::user(e.to_string()))?;
    Ok(json!({
        "out": out,
        "sample_count": manifest.sample_count,
        "class_counts": manifest.class_counts,
    }))
}

/// Streams epoch records to the JSON-lines log and writes periodic
/// checkpoints.
struct RunObserver {
    log: fs::File,
    checkpoint_dir: PathBuf,
}

impl TrainObserver for RunObserver {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<(), String> {
        let line = serde_json::to_string(record).map_err(|e| e.to_string())?;
        writeln!(self.log, "{line}").map_err(|e| e.to_string())?;
        log::info!(
            "epoch {} mean_loss {:.6} lr {}",
            record.epoch,
            record.mean_loss,
            record.lr
        );
        Ok(())
    }

    fn on_checkpoint(&mut self, epoch: usize, model: &Model) -> Result<(), String> {
        fs::create_dir_all(&self.checkpoint_dir).map_err(|e| e.to_string())?;
        let path = self.checkpoint_dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
        save_checkpoint(model, &path).map_err(|e| e.to_string())
    }
}

pub fn train_cmd(cfg: &RunConfig) -> Result<Value, CliError> {
    let out = require(&cfg.paths.out_dir, "--out")?.to_path_buf();
    let data = load_data(cfg)?;
    let split = build_split(cfg, &data)?;
    create_dir(&out)?;
    cfg.write_snapshot(&out)?;
    write_file(&out.join(SPLIT_FILE), &pretty(&split))?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)
        .map_err(|e| CliError::user(format!("model: {e}")))?;
    let log_path = out.join(LOG_FILE);
    let mut observer = RunObserver {
        log: fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?,
        checkpoint_dir: out.join("checkpoints"),
    };
    let outcome = train(&mut model, &data, &split, &cfg.train, &mut observer)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &ckpt).map_err(|e| CliError::user(e.to_string()))?;
    Ok(json!({
        "checkpoint": ckpt,
        "log": log_path,
        "epochs": outcome.records.len(),
        "episodes": outcome.episodes,
        "final_mean_loss": outcome.records.last().map(|r| r.mean_loss),
    }))
}

/// Loads the checkpoint; when a config file supplied a model section it
/// must agree with the checkpoint.
fn load_model(cfg: &RunConfig, config_given: bool) -> Result<Model, CliError> {
    let path = require(&cfg.paths.checkpoint, "--checkpoint")?;
    let ck = load_checkpoint(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    if config_given && ck.config != cfg.model {
        return Err(CliError::user(format!(
            "checkpoint {} was trained with a different model configuration",
            path.display()
        )));
    }
    ck.into_model()
        .map_err(|e| CliError::user(format!("{}: {e}", path.display())))
}

pub fn eval_cmd(
    cfg: &RunConfig,
    config_given: bool,
    mode: EvalMode,
    ways: Option<usize>,
    episodes: usize,
) -> Result<EvalReport, CliError> {
    let model = load_model(cfg, config_given)?;
    let data = load_data(cfg)?;
    let split = build_split(cfg, &data)?;
    let pool = rayon_pool(cfg.workers)?;
    let report = pool.install(|| match mode {
        EvalMode::OneShot => evaluate_one_shot(&model, &split, &data),
        EvalMode::Episodic => {
            let c = ways.unwrap_or_else(|| split.eval_classes.len().min(5));
            evaluate_episodic(&model, &data, &split.eval_classes, c, c, episodes, cfg.seed)
        }
    })?;
    if let Some(out) = &cfg.paths.out_dir {
        create_dir(out)?;
        write_file(&out.join(EVAL_FILE), &pretty(&report))?;
    }
    Ok(report)
}

fn rayon_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::user(e.to_string()))
}

pub fn dump_partitions(topology: &str, k: Option<usize>) -> Result<Value, CliError> {
    let topology = JointTopology::by_name(topology).map_err(|e| CliError::user(e.to_string()))?;
    let scheme = match k {
        None => build_default_scheme(&topology),
        Some(k) => build_scheme_with_k(&topology, k),
    }
    .map_err(|e| CliError::user(e.to_string()))?;
    Ok(json!({
        "topology": topology.name(),
        "k": scheme.k(),
        "parts": scheme.dump(),
    }))
}

#[derive(Debug, Serialize)]
pub struct AttentionReport {
    pub records: Vec<AttentionRecord>,
    pub errors: Vec<Value>,
}

pub fn attention_report(
    cfg: &RunConfig,
    config_given: bool,
    samples: &[String],
    plot: bool,
) -> Result<AttentionReport, CliError> {
    if samples.is_empty() {
        return Err(CliError::user("no samples requested"));
    }
    let model = load_model(cfg, config_given)?;
    let data = load_data(cfg)?;
    let names = model.scheme().part_names();
    let mut report = AttentionReport {
        records: Vec::new(),
        errors: Vec::new(),
    };
    for id in samples {
        let Some(seq) = data.iter().find(|s| s.sample_id == *id) else {
            report
                .errors
                .push(json!({"sample_id": id, "error": "sample not found"}));
            continue;
        };
        match model.part_attention(seq) {
            Ok(attention) => {
                let top3 = top_parts(&attention, 3)
                    .into_iter()
                    .map(|i| names[i].clone())
                    .collect();
                report.records.push(AttentionRecord {
                    sample_id: id.clone(),
                    true_class: seq.label.clone(),
                    attention,
                    top3,
                });
            }
            Err(e) => report
                .errors
                .push(json!({"sample_id": id, "error": e.to_string()})),
        }
    }
    if let Some(out) = &cfg.paths.out_dir {
        create_dir(out)?;
        write_file(&out.join(ATTENTION_FILE), &pretty(&report))?;
        if plot {
            for r in &report.records {
                let name = protoparts::skeleton::sample_file_name(&r.sample_id);
                let stem = name.strip_suffix(".json").unwrap_or(&name);
                let svg = attention_bar_chart(&r.sample_id, &names, &r.attention);
                write_file(&out.join(format!("attention_{stem}.svg")), &svg)?;
            }
        }
    } else if plot {
        return Err(CliError::user("--plot needs --out"));
    }
    if report.records.is_empty() {
        return Err(CliError::empty(pretty(&report)));
    }
    Ok(report)
}
