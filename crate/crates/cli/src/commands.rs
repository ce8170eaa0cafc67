use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use dlmuq_core::eval::{self, MetricOutput, TaskPreset};
use dlmuq_core::oracle::{self, OracleError, SimConfig, ToyDiffusion};
use dlmuq_core::oracle::theorem::{self, LossMode, TheoremReport};
use dlmuq_core::scoring::Scorer;
use dlmuq_core::trace::{self, InstanceTrace};
use dlmuq_core::{SimilarityProvider, UncertaintyReport};
use flate2::write::GzEncoder;
use flate2::Compression;
use rayon::prelude::*;
use serde_json::Value;

use crate::config::{parse_signal_list, require_files, Metric, RunConfig};
use crate::{EvalArgs, ReportArgs, ScoreArgs, SimulateArgs, Status, ValidateArgs};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json_line<W: Write, T: serde::Serialize>(sink: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *sink, value)?;
    sink.write_all(b"\n")?;
    Ok(())
}

/// File-name-safe form of a signal name.
fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn score(mut cfg: RunConfig, args: ScoreArgs) -> Result<Status> {
    if !args.traces.is_empty() {
        cfg.io.traces = args.traces;
    }
    if let Some(list) = &args.signals {
        cfg.signals = parse_signal_list(list)?;
    }
    if let Some(kind) = args.provider {
        cfg.provider.kind = kind;
    }
    if let Some(url) = args.endpoint {
        cfg.provider.endpoint = Some(url);
    }
    ensure!(!cfg.io.traces.is_empty(), "no trace files given");
    require_files(&cfg.io.traces)?;
    let specs = cfg.signal_specs()?;
    let provider = Arc::new(SimilarityProvider::from_config(&cfg.provider)?);
    let mut scorer = Scorer::new(specs, provider);
    scorer.render_masks = cfg.render_masks;
    scorer.options.remask_mode = cfg.remask_mode;

    let out = args
        .out
        .or_else(|| cfg.io.output_dir.as_ref().map(|d| d.join("reports.jsonl")));
    let mut sink: Box<dyn Write> = match &out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };

    // traces are scored in windows so memory stays bounded; each window is
    // written in input order
    let window = rayon::current_num_threads() * 8;
    let (mut written, mut failures) = (0usize, 0usize);
    'files: for path in &cfg.io.traces {
        let mut reader = trace::open_traces(path).with_context(|| format!("opening {}", path.display()))?;
        let mut batch: Vec<InstanceTrace> = Vec::with_capacity(window);
        loop {
            batch.clear();
            let mut read_error = None;
            for item in reader.by_ref().take(window) {
                match item {
                    Ok(t) => batch.push(t),
                    Err(e) => {
                        read_error = Some(e);
                        break;
                    }
                }
            }
            if batch.is_empty() && read_error.is_none() {
                break;
            }
            let results: Vec<Result<UncertaintyReport, String>> = batch
                .par_iter()
                .map(|t| {
                    let violations = trace::validate(t);
                    if let Some(v) = violations.first() {
                        return Err(format!("invalid trace ({} violations, first: {v})", violations.len()));
                    }
                    scorer.score(t).map_err(|e| e.to_string())
                })
                .collect();
            for (t, r) in batch.iter().zip(results) {
                match r {
                    Ok(report) => {
                        write_json_line(&mut sink, &report)?;
                        written += 1;
                    }
                    Err(message) => {
                        failures += 1;
                        log::error!("{} {}: {message}", path.display(), t.instance_id);
                        if args.strict {
                            break 'files;
                        }
                    }
                }
            }
            if let Some(e) = read_error {
                failures += 1;
                log::error!("{}: {e}", path.display());
                if args.strict {
                    break 'files;
                }
                break;
            }
        }
    }
    sink.flush()?;
    log::info!("scored {written} instances, {failures} failed");
    Ok(if failures == 0 { Status::Ok } else { Status::Partial })
}

fn read_reports(paths: &[PathBuf]) -> Result<Vec<UncertaintyReport>> {
    let mut out = Vec::new();
    for path in paths {
        let file = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
        for (i, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .with_context(|| format!("{}:{}: malformed report", path.display(), i + 1))?,
            );
        }
    }
    Ok(out)
}

pub fn eval(mut cfg: RunConfig, args: EvalArgs) -> Result<Status> {
    if !args.reports.is_empty() {
        cfg.io.reports = args.reports;
    }
    if let Some(q) = args.qualities {
        cfg.io.qualities = Some(q);
    }
    if let Some(list) = &args.signals {
        cfg.signals = parse_signal_list(list)?;
    }
    let e = &mut cfg.eval;
    e.metric = args.metric.unwrap_or(e.metric);
    e.preset = args.preset.or(e.preset);
    e.threshold = args.threshold.or(e.threshold);
    e.max_reject = args.max_reject.unwrap_or(e.max_reject);
    e.dataset = args.dataset.or(e.dataset.take());
    let out_dir = args.out_dir.or(cfg.io.output_dir.clone());

    ensure!(!cfg.io.reports.is_empty(), "no report files given");
    let qualities_path = cfg.io.qualities.clone().context("no quality file given")?;
    require_files(cfg.io.reports.iter().chain([&qualities_path]))?;
    let e = &cfg.eval;
    ensure!(
        e.max_reject > 0.0 && e.max_reject <= 1.0,
        "max_reject must lie in (0, 1], got {}",
        e.max_reject
    );
    let threshold = e.threshold.or(e.preset.map(TaskPreset::threshold));
    if matches!(e.metric, Metric::RocAuc | Metric::All) && threshold.is_none() {
        bail!("roc_auc needs --preset or --threshold");
    }

    let reports = read_reports(&cfg.io.reports)?;
    let qualities = eval::read_qualities(BufReader::new(File::open(&qualities_path)?))
        .with_context(|| format!("reading {}", qualities_path.display()))?;
    let signals: Vec<String> = if cfg.signals.is_empty() {
        let names: BTreeSet<&String> = reports.iter().flat_map(|r| r.signals.keys()).collect();
        names.into_iter().cloned().collect()
    } else {
        cfg.signal_specs()?.iter().map(|s| s.name()).collect()
    };

    let preset = e.preset.map(|p| p.as_str().to_string());
    let mut stdout = io::stdout().lock();
    let mut failures = 0;
    for signal in &signals {
        let (records, stats) = eval::join(&reports, &qualities, signal)?;
        log::info!(
            "{signal}: matched {}, excluded {}, unmatched reports {}, unmatched qualities {}",
            stats.matched,
            stats.excluded,
            stats.unmatched_reports,
            stats.unmatched_qualities
        );
        let mut outputs = Vec::new();
        let output = |metric: &str, value: f64, degenerate: bool| MetricOutput {
            signal: signal.clone(),
            metric: metric.into(),
            value,
            n: records.len(),
            degenerate,
            preset: preset.clone(),
            dataset: e.dataset.clone(),
        };
        if matches!(e.metric, Metric::Prr | Metric::All) {
            match eval::prr(&records, e.max_reject) {
                Ok(r) => {
                    outputs.push(output("prr", r.prr, r.degenerate));
                    if let Some(dir) = &out_dir {
                        let mut csv = create(&dir.join(format!("{}.curve.csv", file_stem(signal))))?;
                        eval::write_curve_csv(&records, e.max_reject, &mut csv)?;
                        csv.flush()?;
                    }
                }
                Err(err) => {
                    failures += 1;
                    log::error!("{signal}: prr: {err}");
                }
            }
        }
        if let (Metric::RocAuc | Metric::All, Some(t)) = (e.metric, threshold) {
            match eval::roc_auc(&records, t) {
                Ok(v) => outputs.push(output("roc_auc", v, false)),
                Err(err) => {
                    failures += 1;
                    log::error!("{signal}: roc_auc: {err}");
                }
            }
        }
        for m in &outputs {
            write_json_line(&mut stdout, m)?;
            if let Some(dir) = &out_dir {
                let mut f = create(&dir.join(format!("{}.{}.json", file_stem(signal), m.metric)))?;
                serde_json::to_writer_pretty(&mut f, m)?;
                f.write_all(b"\n")?;
                f.flush()?;
            }
        }
    }
    Ok(if failures == 0 { Status::Ok } else { Status::Partial })
}

fn sim_config(cfg: &RunConfig, args: &SimulateArgs) -> Result<SimConfig> {
    let mut obj = cfg.simulate.clone().unwrap_or_default();
    let mut set = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            obj.insert(key.into(), v);
        }
    };
    set("vocab_size", args.vocab_size.map(Value::from));
    set("length", args.length.map(Value::from));
    set("steps", args.steps.map(Value::from));
    set("dist", args.dist.clone().map(Value::from));
    set("unmask_policy", args.unmask_policy.clone().map(Value::from));
    set("decode", args.decode.clone().map(Value::from));
    set("confidence_threshold", args.confidence_threshold.map(Value::from));
    set("blocks", args.blocks.map(Value::from));
    set("mc_samples", args.mc_samples.map(Value::from));
    set("n_traces", args.n_traces.map(Value::from));
    set("theorem_samples", args.theorem_samples.map(Value::from));
    set("loss_mode", args.loss_mode.clone().map(Value::from));
    set("seed", args.seed.or(cfg.seed).map(Value::from));
    obj.entry("dist").or_insert_with(|| Value::from("uniform"));
    obj.entry("seed").or_insert_with(|| Value::from(0u64));
    serde_json::from_value(Value::Object(obj)).context("invalid simulator configuration")
}

fn check_theorem(model: &ToyDiffusion, sim: &SimConfig) -> Result<TheoremReport> {
    match sim.loss_mode {
        LossMode::ExactDiscretized => match theorem::verify_theorem1_exact(model) {
            Err(e @ OracleError::EnumerationBound { .. }) => {
                bail!("{e}; rerun with --loss-mode monte_carlo")
            }
            r => Ok(r?),
        },
        LossMode::MonteCarlo => Ok(theorem::verify_theorem1(model, sim.theorem_samples)?),
    }
}

pub fn simulate(cfg: RunConfig, args: SimulateArgs) -> Result<Status> {
    let sim = sim_config(&cfg, &args)?;
    let out_dir = args
        .out_dir
        .clone()
        .or(cfg.io.output_dir.clone())
        .context("simulate needs --out-dir")?;
    let model = ToyDiffusion::from_config(&sim)?;
    let report = check_theorem(&model, &sim)?;
    let traces = oracle::generate_traces(&model, sim.n_traces, &sim.gen_options())?;
    let header = model.header(sim.blocks);

    let trace_path = out_dir.join(if args.gzip { "traces.jsonl.gz" } else { "traces.jsonl" });
    let file = create(&trace_path)?;
    if args.gzip {
        let mut gz = GzEncoder::new(file, Compression::default());
        trace::write_traces(&header, &traces, &mut gz)?;
        gz.finish()?.flush()?;
    } else {
        let mut file = file;
        trace::write_traces(&header, &traces, &mut file)?;
        file.flush()?;
    }
    let mut f = create(&out_dir.join("theorem.json"))?;
    serde_json::to_writer_pretty(&mut f, &report)?;
    f.write_all(b"\n")?;
    f.flush()?;
    let mut f = create(&out_dir.join("sim_config.json"))?;
    serde_json::to_writer_pretty(&mut f, &sim)?;
    f.write_all(b"\n")?;
    f.flush()?;

    log::info!(
        "wrote {} traces to {}; E[u_AD] = {:.6} ≤ L = {:.6}: {}",
        traces.len(),
        trace_path.display(),
        report.mean_u_ad.value,
        report.loss_value.value,
        report.inequality_holds
    );
    if !report.inequality_holds {
        log::error!("dissimilarity bound violated (margin {})", report.margin);
        return Ok(Status::Partial);
    }
    Ok(Status::Ok)
}

pub fn validate(args: ValidateArgs) -> Result<Status> {
    require_files(&args.traces)?;
    let mut stdout = io::stdout().lock();
    let (mut checked, mut bad) = (0usize, 0usize);
    for path in &args.traces {
        let reader = match trace::open_traces(path) {
            Ok(r) => r,
            Err(e) => {
                bad += 1;
                writeln!(stdout, "{}\t-\theader\t-\t{e}", path.display())?;
                continue;
            }
        };
        for item in reader {
            match item {
                Ok(t) => {
                    checked += 1;
                    let violations = trace::validate(&t);
                    if !violations.is_empty() {
                        bad += 1;
                    }
                    for v in violations {
                        writeln!(
                            stdout,
                            "{}\t{}\t{}\t{}\t{}",
                            path.display(),
                            t.instance_id,
                            v.kind.as_str(),
                            v.location,
                            v.message
                        )?;
                    }
                }
                Err(e) => {
                    bad += 1;
                    writeln!(stdout, "{}\t-\tparse\t-\t{e}", path.display())?;
                }
            }
        }
    }
    log::info!("checked {checked} traces, {bad} with problems");
    Ok(if bad == 0 { Status::Ok } else { Status::Partial })
}

fn metric_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<io::Result<_>>()?;
            found.retain(|f| f.extension().is_some_and(|x| x == "json"));
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            bail!("input {} does not exist", p.display());
        }
    }
    Ok(files)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report(args: ReportArgs) -> Result<Status> {
    let mut cells: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut datasets = BTreeSet::new();
    for path in metric_files(&args.inputs)? {
        let text = fs::read_to_string(&path)?;
        // a file holds one metric object, pretty or not, or one per line
        let metrics: Vec<MetricOutput> = match serde_json::from_str::<MetricOutput>(&text) {
            Ok(m) => vec![m],
            Err(_) => text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()
                .with_context(|| format!("{}: not a metric file", path.display()))?,
        };
        for m in metrics.into_iter().filter(|m| m.metric == args.metric) {
            let dataset = m.dataset.clone().unwrap_or_else(|| {
                path.parent()
                    .and_then(Path::file_name)
                    .map_or_else(|| "-".into(), |n| n.to_string_lossy().into_owned())
            });
            datasets.insert(dataset.clone());
            if cells.entry(m.signal.clone()).or_default().insert(dataset.clone(), m.value).is_some() {
                bail!("duplicate {} value for signal {} on {dataset}", args.metric, m.signal);
            }
        }
    }
    ensure!(!cells.is_empty(), "no '{}' metrics found", args.metric);
    let mut sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let header: Vec<String> = std::iter::once("signal".to_string())
        .chain(datasets.iter().map(|d| csv_field(d)))
        .chain(std::iter::once("mean".to_string()))
        .collect();
    writeln!(sink, "{}", header.join(","))?;
    for (signal, row) in &cells {
        let mut line = vec![csv_field(signal)];
        for d in &datasets {
            line.push(row.get(d).map_or_else(String::new, |v| v.to_string()));
        }
        // mean over datasets where the signal has a value
        line.push((row.values().sum::<f64>() / row.len() as f64).to_string());
        writeln!(sink, "{}", line.join(","))?;
    }
    sink.flush()?;
    Ok(Status::Ok)
}
