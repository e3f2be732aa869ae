use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use petalnet::checkpoint::{load_parameters, save_parameters, write_atomic};
use petalnet::dataset::{generate_synthetic, load_dataset, save_dataset, split, Dataset, SplitManifests, SplitTag};
use petalnet::fusion::{fuse as fuse_probs, strategy_weights, ConcatSource, FusionStrategy, MetaClassifier};
use petalnet::metrics::MetricsReport;
use petalnet::netcore::{Network, NetworkConfig};
use petalnet::trainer::{evaluate, fine_tune_meta, train, FusedEnsemble};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{BaseSection, ExperimentConfig};
use crate::{probs_csv, CliError};

type CmdResult = Result<(), CliError>;

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", parent.display())))?;
    }
    write_atomic(path, bytes).map_err(CliError::from)
}

fn to_json(value: &impl Serialize) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("net.json")
}

fn save_network(path: &Path, net: &Network) -> CmdResult {
    write_file(&sidecar(path), &to_json(&net.config))?;
    save_parameters(path, &net.params)?;
    Ok(())
}

fn load_network(path: &Path) -> Result<Network, CliError> {
    let config: NetworkConfig = read_json(&sidecar(path))?;
    let params = load_parameters(path)?;
    Ok(Network::new(config, params)?)
}

fn open_data(config: &ExperimentConfig, dir: Option<PathBuf>) -> Result<(Dataset, SplitManifests), CliError> {
    let dir = dir.unwrap_or_else(|| config.data_dir());
    let (ds, splits) = load_dataset(&dir)?;
    let (h, w, _) = ds.image_shape();
    if ds.num_classes != config.data.num_classes || h != config.data.image_side || w != config.data.image_side {
        return Err(CliError::config(format!(
            "dataset in {} has {} classes at {h}x{w}, configuration expects {} at {}x{}",
            dir.display(),
            ds.num_classes,
            config.data.num_classes,
            config.data.image_side,
            config.data.image_side
        )));
    }
    Ok((ds, splits))
}

fn select_bases<'a>(config: &'a ExperimentConfig, names: &[String]) -> Result<Vec<&'a BaseSection>, CliError> {
    if names.is_empty() {
        return Ok(config.bases.iter().collect());
    }
    names
        .iter()
        .map(|n| {
            config
                .bases
                .iter()
                .find(|b| &b.name == n)
                .ok_or_else(|| CliError::config(format!("no base named {n:?} in the configuration")))
        })
        .collect()
}

fn base_checkpoint(config: &ExperimentConfig, name: &str) -> PathBuf {
    config.bases_dir().join(format!("{name}.dfl"))
}

fn split_tag(name: &str) -> Result<SplitTag, CliError> {
    name.parse().map_err(|e: petalnet::Error| CliError::config(e.to_string()))
}

pub fn gen_data(config: &ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) -> CmdResult {
    let seed = seed.unwrap_or(config.data.seed);
    let dir = out.unwrap_or_else(|| config.data_dir());
    let (ds, manifest) = generate_synthetic(&config.data.spec(), seed)?;
    let splits = split(&manifest, config.data.fractions(), seed)?;
    save_dataset(&dir, &ds, &splits)?;
    println!(
        "{}",
        json!({
            "dir": dir.display().to_string(),
            "samples": ds.len(),
            "train": splits.train.len(),
            "val": splits.val.len(),
            "test": splits.test.len(),
        })
    );
    Ok(())
}

fn write_effective_config(config: &ExperimentConfig) -> CmdResult {
    write_file(&config.output_dir.join("config.toml"), config.to_toml().as_bytes())
}

pub fn train_base(config: &ExperimentConfig, data: Option<PathBuf>, names: &[String]) -> CmdResult {
    let bases = select_bases(config, names)?;
    let (ds, splits) = open_data(config, data)?;
    write_effective_config(config)?;
    for base in bases {
        let (net, history) = train(&config.train_config(base.seed), &config.network_config(base), &ds, &splits)?;
        let checkpoint = base_checkpoint(config, &base.name);
        save_network(&checkpoint, &net)?;
        write_file(
            &config.bases_dir().join(format!("{}_history.csv", base.name)),
            history.to_csv().as_bytes(),
        )?;
        println!(
            "{}",
            json!({
                "base": base.name,
                "best_val_macro_f1": history.best_val_macro_f1(),
                "checkpoint": checkpoint.display().to_string(),
            })
        );
    }
    Ok(())
}

/// Contents of `meta.json`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    /// Base checkpoints, relative to the directory holding `meta.json`.
    bases: Vec<PathBuf>,
    concat_source: ConcatSource,
    head: PathBuf,
}

fn relative_to(path: &Path, dir: &Path) -> PathBuf {
    pathdiff(path, dir).unwrap_or_else(|| path.to_path_buf())
}

fn pathdiff(path: &Path, base: &Path) -> Option<PathBuf> {
    let path = std::path::absolute(path).ok()?;
    let base = std::path::absolute(base).ok()?;
    let common = path.components().zip(base.components()).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in base.components().skip(common) {
        out.push("..");
    }
    for c in path.components().skip(common) {
        out.push(c);
    }
    Some(out)
}

pub fn train_meta(config: &ExperimentConfig, data: Option<PathBuf>, names: &[String]) -> CmdResult {
    let selected = select_bases(config, names)?;
    let paths: Vec<PathBuf> = selected.iter().map(|b| base_checkpoint(config, &b.name)).collect();
    let bases = paths.iter().map(|p| load_network(p)).collect::<Result<Vec<_>, _>>()?;
    let (ds, splits) = open_data(config, data)?;
    let (meta, history) = fine_tune_meta(
        bases,
        &ds,
        &splits,
        &config.train_config(config.meta.seed),
        &config.meta.meta_config(),
    )?;
    let dir = config.meta_dir();
    let head_path = dir.join("head.dfl");
    save_network(&head_path, meta.head())?;
    write_file(&dir.join("history.csv"), history.to_csv().as_bytes())?;
    let file = MetaFile {
        bases: paths.iter().map(|p| relative_to(p, &dir)).collect(),
        concat_source: meta.concat_source(),
        head: PathBuf::from("head.dfl"),
    };
    write_file(&dir.join("meta.json"), &to_json(&file))?;
    println!(
        "{}",
        json!({
            "meta": dir.join("meta.json").display().to_string(),
            "bases": selected.iter().map(|b| b.name.as_str()).collect::<Vec<_>>(),
            "best_val_macro_f1": history.best_val_macro_f1(),
        })
    );
    Ok(())
}

fn load_meta(path: &Path) -> Result<MetaClassifier, CliError> {
    let file: MetaFile = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let bases = file
        .bases
        .iter()
        .map(|p| load_network(&dir.join(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let head = load_network(&dir.join(&file.head))?;
    Ok(MetaClassifier::new(bases, file.concat_source, 0)?.with_head(head.params)?)
}

pub fn eval(config: &ExperimentConfig, model: &Path, data: Option<PathBuf>, split: &str) -> CmdResult {
    let tag = split_tag(split)?;
    let (ds, splits) = open_data(config, data)?;
    let manifest = splits.get(tag);
    let report = if model.extension().is_some_and(|e| e == "json") {
        evaluate(&load_meta(model)?, &ds, manifest)?
    } else {
        evaluate(&load_network(model)?, &ds, manifest)?
    };
    print!("{}", String::from_utf8(to_json(&report)).expect("utf-8"));
    Ok(())
}

pub fn fuse(strategy: &str, inputs: &[PathBuf], accuracies: &[f64], out: Option<PathBuf>) -> CmdResult {
    let strategy: FusionStrategy = strategy.parse().map_err(|e: petalnet::Error| CliError::config(e.to_string()))?;
    let probs = inputs.iter().map(|p| probs_csv::read(p)).collect::<Result<Vec<_>, _>>()?;
    let accuracies = (!accuracies.is_empty()).then_some(accuracies);
    let weights = strategy_weights(strategy, &probs, accuracies)?;
    let text = probs_csv::render(&fuse_probs(&probs, &weights)?);
    match out {
        Some(path) => write_file(&path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn lr_preview(config: &ExperimentConfig, steps: u32, out: Option<PathBuf>) -> CmdResult {
    let mut text = String::from("step,rate\n");
    for step in 0..steps {
        let _ = writeln!(text, "{step},{:e}", config.schedule.lr_at(i64::from(step))?);
    }
    match out {
        Some(path) => write_file(&path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct ReportRow {
    model: String,
    kind: &'static str,
    macro_f1: f64,
    accuracy: f64,
}

impl ReportRow {
    fn new(model: impl Into<String>, kind: &'static str, m: &MetricsReport) -> Self {
        Self {
            model: model.into(),
            kind,
            macro_f1: m.macro_f1,
            accuracy: m.accuracy,
        }
    }
}

pub fn report(config: &ExperimentConfig, data: Option<PathBuf>, split: &str) -> CmdResult {
    let tag = split_tag(split)?;
    let (ds, splits) = open_data(config, data)?;
    let manifest = splits.get(tag);
    let mut rows = Vec::new();
    let mut bases = Vec::new();
    let mut val_accuracies = Vec::new();
    for base in &config.bases {
        let path = base_checkpoint(config, &base.name);
        if !path.exists() {
            continue;
        }
        let net = load_network(&path)?;
        rows.push(ReportRow::new(&base.name, "base", &evaluate(&net, &ds, manifest)?));
        val_accuracies.push(evaluate(&net, &ds, &splits.val)?.accuracy);
        bases.push(net);
    }
    if bases.is_empty() {
        return Err(CliError::data(format!(
            "no base checkpoints found in {}",
            config.bases_dir().display()
        )));
    }
    let strategies = if config.fusion.strategy == FusionStrategy::Average {
        vec![FusionStrategy::Average]
    } else {
        vec![FusionStrategy::Average, config.fusion.strategy]
    };
    if bases.len() >= 2 {
        for strategy in strategies {
            let ensemble = FusedEnsemble {
                members: bases.clone(),
                strategy,
                val_accuracies: Some(val_accuracies.clone()),
            };
            let m = evaluate(&ensemble, &ds, manifest)?;
            rows.push(ReportRow::new(format!("fusion_{}", strategy.as_str()), "fusion", &m));
        }
    }
    let meta_path = config.meta_dir().join("meta.json");
    if meta_path.exists() {
        rows.push(ReportRow::new("meta", "meta", &evaluate(&load_meta(&meta_path)?, &ds, manifest)?));
    }
    let mut csv = String::from("model,kind,macro_f1,accuracy\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.model, r.kind, r.macro_f1, r.accuracy);
    }
    write_file(&config.output_dir.join("report.csv"), csv.as_bytes())?;
    write_file(
        &config.output_dir.join("report.json"),
        &to_json(&json!({ "split": tag.as_str(), "rows": rows })),
    )?;
    print!("{csv}");
    Ok(())
}
