use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use dmnil::datagen::{generate, load_features, save_corpus, Corpus, SyntheticSpec};
use dmnil::encoder::{embed, read_checkpoint, write_checkpoint, EncoderParams};
use dmnil::metrics::{similarity_histogram, EvalReport};
use dmnil::train::{run_training, EpochRecord, Evaluator, MetricsWriter, TrainConfig, Trainer};
use dmnil::Exec;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::{
    parse_assignment, read_manifest, resolve, write_json, ConfigFile, CorpusManifest, CorpusSource, RunManifest, Source,
    CHECKPOINT_FILE, DRONE_FILE, MANIFEST_FILE, METRICS_FILE, SATELLITE_FILE,
};
use crate::error::CliError;
use crate::{DiagArgs, EvalArgs, GenerateArgs, SynthArgs, TrainArgs};

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Synthetic-spec overrides given as dedicated flags.
fn synth_flags(a: &SynthArgs, seed: Option<u64>) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    put("num_locations", a.locations.map(Value::from));
    put("latent_dim", a.latent_dim.map(Value::from));
    put("input_dim", a.input_dim.map(Value::from));
    put("drone_per_loc", a.drone_per_loc.map(Value::from));
    put("sat_per_loc", a.sat_per_loc.map(Value::from));
    put("noise_std", a.noise.map(Value::from));
    put("shared_view_map", a.shared_view_map.then_some(Value::Bool(true)));
    put("seed", seed.map(Value::from));
    out
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let (spec, _) = resolve::<SyntheticSpec>("", &Map::new(), &synth_flags(&args.synth, args.seed))?;
    spec.validate()?;
    let corpus = generate(&spec)?;
    create_dir(&args.out)?;
    let drone = args.out.join(DRONE_FILE);
    let satellite = args.out.join(SATELLITE_FILE);
    save_corpus(&corpus, &drone, &satellite)?;
    write_json(
        &args.out.join(MANIFEST_FILE),
        &CorpusManifest {
            tool_version: TOOL_VERSION.into(),
            spec,
            drone: absolute(&drone),
            satellite: absolute(&satellite),
        },
    )?;
    println!(
        "wrote {} drone and {} satellite features to {}",
        corpus.num_drone(),
        corpus.num_satellite(),
        args.out.display()
    );
    Ok(())
}

/// Resolves config and corpus source without touching the filesystem beyond
/// reading the config file.
pub fn resolve_train(args: &TrainArgs) -> Result<RunManifest, CliError> {
    let file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };

    let mut flags = Vec::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            flags.push((k.to_string(), v));
        }
    };
    put("epochs", args.epochs.map(Value::from));
    put("seed", args.seed.map(Value::from));
    put("lr", args.lr.map(Value::from));
    put("eps", args.eps.map(Value::from));
    put("iters_per_epoch", args.iters_per_epoch.map(Value::from));
    put("ablation", args.ablation.clone().map(Value::from));
    for s in &args.set {
        flags.push(parse_assignment(s)?);
    }
    let (config, mut sources) = resolve::<TrainConfig>("", &file.train, &flags)?;
    config.validate()?;

    let synth_file = file.data.synthetic.clone().unwrap_or_default();
    let synth_flag_list = synth_flags(&args.synth, args.data_seed);
    let exclusive = || CliError::config("feature files and synthetic corpus options are mutually exclusive");
    let flag_paths = args.drone.is_some() || args.satellite.is_some();
    let file_paths = file.data.drone.is_some() || file.data.satellite.is_some();
    let corpus = if flag_paths || file_paths {
        if !synth_flag_list.is_empty() || (!flag_paths && file.data.synthetic.is_some()) {
            return Err(exclusive());
        }
        let (drone, satellite, source) = if flag_paths {
            (args.drone.clone(), args.satellite.clone(), Source::Flag)
        } else {
            (file.data.drone.clone(), file.data.satellite.clone(), Source::File)
        };
        let (Some(drone), Some(satellite)) = (drone, satellite) else {
            return Err(CliError::config("both drone and satellite feature files are required"));
        };
        sources.insert("data.drone".into(), source);
        sources.insert("data.satellite".into(), source);
        CorpusSource::Files { drone: absolute(&drone), satellite: absolute(&satellite) }
    } else {
        let (spec, spec_sources) = resolve::<SyntheticSpec>("data.synthetic.", &synth_file, &synth_flag_list)?;
        spec.validate()?;
        sources.extend(spec_sources);
        CorpusSource::Synthetic { spec }
    };

    Ok(RunManifest {
        tool_version: TOOL_VERSION.into(),
        seed: config.seed,
        output_dir: absolute(&args.out),
        parallel: !args.sequential,
        config,
        corpus,
        sources,
    })
}

pub fn load_corpus(source: &CorpusSource) -> Result<Corpus, CliError> {
    Ok(match source {
        CorpusSource::Synthetic { spec } => generate(spec)?,
        CorpusSource::Files { drone, satellite } => load_features(drone, satellite)?,
    })
}

fn exec_for(parallel: bool) -> Exec {
    if parallel {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let manifest = resolve_train(args)?;
    let corpus = load_corpus(&manifest.corpus)?;
    create_dir(&args.out)?;
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;

    let mut writer = MetricsWriter::new(create_file(&args.out.join(METRICS_FILE))?);
    let outcome = run_training(&corpus, &manifest.config, exec_for(manifest.parallel), Some(&mut writer))?;
    drop(writer);
    write_checkpoint(&outcome.params, create_file(&args.out.join(CHECKPOINT_FILE))?)?;

    match (outcome.records.last(), outcome.summary.untrained) {
        (Some(rec), _) => {
            println!(
                "{} epochs, final clusters {}/{}, loss {:.4}",
                outcome.records.len(),
                rec.clusters_drone,
                rec.clusters_satellite,
                rec.loss_total
            );
            if let Some(e) = rec.eval {
                print_report(&e);
            }
        }
        (None, Some(u)) => {
            println!("no epochs run; untrained encoder:");
            print_report(&u);
        }
        (None, None) => println!("no epochs run"),
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    for (name, m) in [("drone->satellite", r.drone_to_sat), ("satellite->drone", r.sat_to_drone)] {
        println!(
            "{name}: R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  AP {:.4}",
            m.r1, m.r5, m.r10, m.ap
        );
    }
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams, CliError> {
    let f = File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    Ok(read_checkpoint(BufReader::new(f))?)
}

/// Embeds both views and scores them against the corpus ground truth.
pub fn evaluate_params(params: &EncoderParams, corpus: &Corpus, exec: Exec) -> Result<EvalReport, CliError> {
    let evaluator =
        Evaluator::from_corpus(corpus).ok_or_else(|| CliError::data("corpus carries no ground-truth labels"))?;
    let d = embed(params, corpus.features(dmnil::View::Drone), exec)?;
    let s = embed(params, corpus.features(dmnil::View::Satellite), exec)?;
    Ok(evaluator.evaluate(&d, &s, exec)?)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let manifest = args.run.as_deref().map(read_manifest).transpose()?;
    let checkpoint = match (&args.checkpoint, &args.run) {
        (Some(p), _) => p.clone(),
        (None, Some(run)) => run.join(CHECKPOINT_FILE),
        (None, None) => return Err(CliError::config("either --run or --checkpoint is required")),
    };
    let corpus = match (&args.drone, &args.satellite, &manifest) {
        (Some(d), Some(s), _) => load_features(d, s)?,
        (None, None, Some(m)) => load_corpus(&m.corpus)?,
        (None, None, None) => return Err(CliError::config("no corpus: pass --drone/--satellite or --run")),
        _ => return Err(CliError::config("--drone and --satellite must be given together")),
    };
    let params = load_checkpoint(&checkpoint)?;
    let exec = exec_for(manifest.as_ref().is_none_or(|m| m.parallel));
    let report = evaluate_params(&params, &corpus, exec)?;
    print_report(&report);
    let out = args.out.clone().or_else(|| args.run.as_ref().map(|r| r.join("eval.json")));
    if let Some(out) = out {
        write_json(&out, &report)?;
    }
    Ok(())
}

/// Epoch records from a metrics file, skipping the summary line.
pub fn read_records(path: &Path) -> Result<Vec<EpochRecord>, CliError> {
    let f = File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::data(e.to_string()))?;
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.get("summary").is_some() {
            continue;
        }
        out.push(
            serde_json::from_value(v).map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Serialize)]
struct TraceRow {
    epoch: usize,
    clusters_drone: usize,
    clusters_satellite: usize,
    noise_drone: usize,
    noise_satellite: usize,
}

#[derive(Serialize)]
struct HistogramRow {
    encoder: &'static str,
    bin_lo: f64,
    bin_hi: f64,
    positive: u64,
    negative: u64,
}

#[derive(Serialize)]
struct HistogramStats {
    encoder: &'static str,
    positive_pairs: u64,
    negative_pairs: u64,
    positive_mean: f64,
    negative_mean: f64,
}

pub const TRACE_FILE: &str = "cluster_trace.csv";
pub const HISTOGRAM_FILE: &str = "similarity_histogram.csv";
pub const HISTOGRAM_STATS_FILE: &str = "similarity_stats.json";

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    Ok(csv::Writer::from_writer(create_file(path)?))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::data(e.to_string())
}

pub fn cmd_diag(args: &DiagArgs) -> Result<(), CliError> {
    if args.bins == 0 {
        return Err(CliError::config("--bins must be positive"));
    }
    let manifest = read_manifest(&args.run)?;
    let records = read_records(&args.run.join(METRICS_FILE))?;
    let out_dir = args.out.clone().unwrap_or_else(|| args.run.clone());
    create_dir(&out_dir)?;

    let mut trace = csv_writer(&out_dir.join(TRACE_FILE))?;
    for r in &records {
        trace
            .serialize(TraceRow {
                epoch: r.epoch,
                clusters_drone: r.clusters_drone,
                clusters_satellite: r.clusters_satellite,
                noise_drone: r.noise_drone,
                noise_satellite: r.noise_satellite,
            })
            .map_err(csv_err)?;
    }
    trace.flush().map_err(|e| CliError::data(e.to_string()))?;

    let corpus = load_corpus(&manifest.corpus)?;
    let truth = corpus
        .ground_truth()
        .ok_or_else(|| CliError::data("corpus carries no ground-truth labels"))?;
    let trained = load_checkpoint(&args.run.join(CHECKPOINT_FILE))?;
    let initial = Trainer::new(corpus.training_view(), manifest.config.clone())?.params().clone();
    let exec = exec_for(manifest.parallel);

    let mut hist = csv_writer(&out_dir.join(HISTOGRAM_FILE))?;
    let mut stats = Vec::new();
    for (name, params) in [("untrained", &initial), ("trained", &trained)] {
        let d = embed(params, corpus.features(dmnil::View::Drone), exec)?;
        let s = embed(params, corpus.features(dmnil::View::Satellite), exec)?;
        let h = similarity_histogram(&d, &s, &truth.drone, &truth.satellite, args.bins)?;
        for b in 0..args.bins {
            hist.serialize(HistogramRow {
                encoder: name,
                bin_lo: h.edges[b],
                bin_hi: h.edges[b + 1],
                positive: h.positive[b],
                negative: h.negative[b],
            })
            .map_err(csv_err)?;
        }
        stats.push(HistogramStats {
            encoder: name,
            positive_pairs: h.positive.iter().sum(),
            negative_pairs: h.negative.iter().sum(),
            positive_mean: h.positive_mean,
            negative_mean: h.negative_mean,
        });
    }
    hist.flush().map_err(|e| CliError::data(e.to_string()))?;
    write_json(&out_dir.join(HISTOGRAM_STATS_FILE), &stats)?;

    println!("cluster trace: {} epochs", records.len());
    for s in &stats {
        println!(
            "{}: positive mean {:.4}, negative mean {:.4}",
            s.encoder, s.positive_mean, s.negative_mean
        );
    }
    Ok(())
}
