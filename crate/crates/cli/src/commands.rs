use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use covidnn::data::{
    cache, load_and_preprocess, load_record, stratified_assign, validate_manifest, DatasetManifest,
    ImageRecord, Samples, Split,
};
use covidnn::metrics::{
    auc_trapezoid, classify, covid_scores, evaluate, roc_points, write_roc_csv,
};
use covidnn::model::{build_alexnet, build_proposed_cnn_sized, replace_last_layers, Network};
use covidnn::rng::{STREAM_INIT, STREAM_SPLIT};
use covidnn::train::{multirun, train_with, TrainConfig, TrainingCurve};
use covidnn::{gradcheck, io, SeededRng};
use serde::Serialize;

use crate::config::{ModelKind, RunConfig};
use crate::{thread_count, Command, EvalArgs, Failure, RunArgs};

pub const WEIGHTS_FILE: &str = "weights.cvnw";
pub const CURVE_FILE: &str = "curve.csv";
pub const METADATA_FILE: &str = "metadata.json";
pub const SPLIT_MANIFEST_FILE: &str = "split_manifest.csv";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const CACHED_MANIFEST_FILE: &str = "manifest.csv";

pub fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Preprocess {
            manifest,
            out_dir,
            size,
        } => cmd_preprocess(&manifest, &out_dir, size, out, err),
        Command::Train(args) => cmd_train(&args, out, err),
        Command::Eval {
            target,
            threshold,
            out: report_path,
            modality,
        } => cmd_eval(&target, threshold, report_path.as_deref(), &modality, out),
        Command::Predict {
            weights,
            image,
            threshold,
        } => cmd_predict(&weights, &image, threshold, out),
        Command::Roc { target, out: csv } => cmd_roc(&target, &csv, out),
        Command::Multirun(args) => cmd_multirun(&args, out, err),
        Command::Gradcheck { seeds } => cmd_gradcheck(seeds, out),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .map_err(|e| Failure::Data(format!("cannot create {}: {e}", path.display())))
}

pub fn cmd_preprocess(
    manifest_path: &Path,
    out_dir: &Path,
    size: usize,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), Failure> {
    let manifest = DatasetManifest::load(manifest_path, size)?;
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        for v in &violations {
            writeln!(err, "{v}")?;
        }
        return Err(Failure::Data(format!(
            "{} manifest violation(s); nothing preprocessed",
            violations.len()
        )));
    }
    create_dir(out_dir)?;
    let mut records = Vec::with_capacity(manifest.records.len());
    let mut failures = 0;
    for (i, r) in manifest.records.iter().enumerate() {
        let src = manifest.resolve(r);
        let stem = src
            .file_stem()
            .map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let name = format!("{i:05}_{stem}.{}", cache::CACHE_EXTENSION);
        match load_and_preprocess(&src, r.crop, (size, size)) {
            Ok(t) => {
                cache::write_tensor(&out_dir.join(&name), &t)?;
                records.push(ImageRecord {
                    path: PathBuf::from(name),
                    crop: None,
                    ..r.clone()
                });
            }
            Err(e) => {
                failures += 1;
                writeln!(err, "{}: {e}", src.display())?;
            }
        }
    }
    if failures > 0 {
        return Err(Failure::Data(format!(
            "{failures} record(s) failed to preprocess"
        )));
    }
    let cached = DatasetManifest {
        records,
        base_dir: out_dir.to_path_buf(),
        ..manifest
    };
    cached.save(&out_dir.join(CACHED_MANIFEST_FILE))?;
    writeln!(
        out,
        "preprocessed {} images to {}",
        cached.records.len(),
        out_dir.display()
    )?;
    Ok(())
}

/// Every manifest record loaded once, index-aligned with `manifest.records`.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Samples,
}

pub fn load_dataset(manifest_path: &Path, size: usize) -> Result<Dataset, Failure> {
    let manifest = DatasetManifest::load(manifest_path, size)?;
    if manifest.records.is_empty() {
        return Err(Failure::Data(format!(
            "{}: manifest has no records",
            manifest_path.display()
        )));
    }
    let mut samples = Samples::default();
    for r in &manifest.records {
        samples.push(load_record(&manifest, r)?, r.class_label()?);
    }
    Ok(Dataset { manifest, samples })
}

impl Dataset {
    /// The manifest's own train/val assignment when it has both, otherwise a
    /// stratified split of every non-test record drawn from `seed`.
    pub fn splits(&self, train_fraction: f64, seed: u64) -> covidnn::Result<Vec<Split>> {
        let given: Vec<Split> = self.manifest.records.iter().map(|r| r.split).collect();
        if given.contains(&Split::Train) && given.contains(&Split::Val) {
            return Ok(given);
        }
        let mut rng = SeededRng::with_stream(seed, STREAM_SPLIT);
        stratified_assign(&self.samples.labels, &given, train_fraction, &mut rng)
    }

    pub fn select(&self, splits: &[Split], which: Split) -> Samples {
        let idx: Vec<usize> = (0..splits.len()).filter(|&i| splits[i] == which).collect();
        self.samples.subset(&idx)
    }
}

pub fn build_network(cfg: &RunConfig, seed: u64) -> covidnn::Result<Network> {
    let mut rng = SeededRng::with_stream(seed, STREAM_INIT);
    match cfg.model {
        ModelKind::Cnn => Network::new(
            build_proposed_cnn_sized(cfg.input_size(), cfg.fc_hidden)?,
            &mut rng,
        ),
        ModelKind::Alexnet => {
            let mut net = Network::new(build_alexnet(), &mut rng)?;
            if let Some(p) = &cfg.pretrained {
                io::load_into(&mut net, p, false)?;
            }
            replace_last_layers(net, 2, &mut rng)
        }
    }
}

#[derive(Debug, Serialize)]
struct RunMetadata<'a> {
    seed: u64,
    config_hash: String,
    final_val_accuracy: Option<f64>,
    iterations: usize,
    train_size: usize,
    val_size: usize,
    config: &'a RunConfig,
}

fn log_progress(err: &mut dyn Write) -> impl FnMut(&covidnn::train::CurveRecord) + '_ {
    move |r| {
        if let Some(acc) = r.val_accuracy {
            let _ = writeln!(
                err,
                "iteration {:>4}  loss {:.4}  val_accuracy {:.4}",
                r.iteration, r.train_loss, acc
            );
        }
    }
}

/// Split, train and return the network with its curve.
fn train_once(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
    err: &mut dyn Write,
) -> covidnn::Result<(Network, TrainingCurve, Vec<Split>)> {
    let splits = data.splits(cfg.train_fraction, seed)?;
    let train_set = data.select(&splits, Split::Train);
    let val_set = data.select(&splits, Split::Val);
    let mut net = build_network(cfg, seed)?;
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let curve = train_with(&mut net, &train_set, &val_set, &tc, log_progress(err))?;
    Ok((net, curve, splits))
}

pub fn cmd_train(args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let cfg = args.resolve()?;
    let data = load_dataset(&cfg.manifest, cfg.input_size())?;
    create_dir(&cfg.out_dir)?;
    let seed = cfg.train.seed;
    let (net, curve, splits) = train_once(&cfg, &data, seed, err)?;

    let mut split_manifest = data.manifest.clone();
    for (r, s) in split_manifest.records.iter_mut().zip(&splits) {
        r.path = data.manifest.resolve(r);
        r.split = *s;
    }
    split_manifest.save(&cfg.out_dir.join(SPLIT_MANIFEST_FILE))?;

    let weights = cfg.out_dir.join(WEIGHTS_FILE);
    io::save_weights(&net, &weights)?;
    curve.write_csv(fs::File::create(cfg.out_dir.join(CURVE_FILE))?)?;
    let meta = RunMetadata {
        seed,
        config_hash: cfg.hash(),
        final_val_accuracy: curve.final_val_accuracy(),
        iterations: curve.records.len(),
        train_size: splits.iter().filter(|s| **s == Split::Train).count(),
        val_size: splits.iter().filter(|s| **s == Split::Val).count(),
        config: &cfg,
    };
    write_json(&cfg.out_dir.join(METADATA_FILE), &meta)?;
    match meta.final_val_accuracy {
        Some(a) => writeln!(
            out,
            "trained {} iterations, final val_accuracy {a:.4}",
            meta.iterations
        )?,
        None => writeln!(out, "trained {} iterations", meta.iterations)?,
    }
    writeln!(out, "weights: {}", weights.display())?;
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    match Split::parse(s) {
        Ok(Split::Unassigned) | Err(_) => Err(Failure::Usage(format!(
            "--split: `{s}` is not train, val or test"
        ))),
        Ok(split) => Ok(split),
    }
}

/// Loaded weights plus the images and labels of the requested split.
fn eval_target(target: &EvalArgs) -> Result<(Network, Samples), Failure> {
    let net = io::load_network(&target.weights)?;
    let size = net.spec().input_shape[0];
    let manifest = DatasetManifest::load(&target.manifest, size)?;
    let split = match &target.split {
        Some(s) => parse_split(s)?,
        None if manifest.count(Split::Test) > 0 => Split::Test,
        None => Split::Val,
    };
    let records: Vec<&ImageRecord> = manifest.in_split(split).collect();
    if records.is_empty() {
        return Err(Failure::Data(format!(
            "manifest has no `{}` records",
            split.as_str()
        )));
    }
    let samples = covidnn::data::load_samples(&manifest, records)?;
    Ok((net, samples))
}

pub fn cmd_eval(
    target: &EvalArgs,
    threshold: f64,
    report_path: Option<&Path>,
    modality: &str,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    if modality.parse::<covidnn::data::Modality>().is_err() {
        return Err(Failure::Usage(format!(
            "--modality: `{modality}` is not xray or ct"
        )));
    }
    let (net, samples) = eval_target(target)?;
    let ev = evaluate(&net, &samples.images, &samples.labels, threshold, modality)?;
    match report_path {
        Some(p) => {
            write_json(p, &ev.report)?;
            writeln!(
                out,
                "accuracy {}  sensitivity {}  specificity {}",
                ev.report.accuracy, ev.report.sensitivity, ev.report.specificity
            )?;
        }
        None => writeln!(
            out,
            "{}",
            serde_json::to_string_pretty(&ev.report).expect("report serializes")
        )?,
    }
    Ok(())
}

/// Six decimals with trailing zeros dropped: `0.93` rather than `0.930000`.
pub fn format_probability(p: f64) -> String {
    let s = format!("{p:.6}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

pub fn cmd_predict(
    weights: &Path,
    image: &Path,
    threshold: f64,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Failure::Usage(format!(
            "--threshold: {threshold} outside (0, 1)"
        )));
    }
    let net = io::load_network(weights)?;
    let [h, w, _] = net.spec().input_shape;
    let t = if cache::is_cached_tensor(image) {
        cache::read_tensor(image)?
    } else {
        load_and_preprocess(image, None, (h, w))?
    };
    let p = covid_scores(&net, &[t], 1)?[0];
    let label = classify(p, threshold).index();
    writeln!(out, "{label},{}", format_probability(p))?;
    Ok(())
}

pub fn cmd_roc(target: &EvalArgs, csv: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let (net, samples) = eval_target(target)?;
    let scores = covid_scores(&net, &samples.images, 10)?;
    let points = roc_points(&scores, &samples.labels)?;
    write_roc_csv(&points, fs::File::create(csv)?)?;
    writeln!(out, "auc {}", auc_trapezoid(&points))?;
    Ok(())
}

pub fn cmd_multirun(
    args: &RunArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), Failure> {
    let cfg = args.resolve()?;
    let threads = thread_count()?;
    let data = load_dataset(&cfg.manifest, cfg.input_size())?;
    create_dir(&cfg.out_dir)?;
    let has_test = data.manifest.count(Split::Test) > 0;
    let eval_split = if has_test { Split::Test } else { Split::Val };
    let progress = std::sync::Mutex::new(Vec::<String>::new());
    let report = multirun(&cfg.train, threads, |seed| {
        let (net, _, splits) = train_once(&cfg, &data, seed, &mut std::io::sink())?;
        let set = data.select(&splits, eval_split);
        let ev = evaluate(&net, &set.images, &set.labels, cfg.threshold, &cfg.modality)?;
        let json = serde_json::to_string_pretty(&ev.report)? + "\n";
        fs::write(cfg.out_dir.join(format!("run_{seed}.json")), json)?;
        progress
            .lock()
            .unwrap()
            .push(format!("seed {seed}: accuracy {}", ev.report.accuracy));
        Ok(ev.report)
    });
    for line in progress.into_inner().unwrap() {
        writeln!(err, "{line}")?;
    }
    let report = report?;
    write_json(&cfg.out_dir.join(AGGREGATE_FILE), &report)?;
    let a = &report.aggregate;
    writeln!(out, "runs {} on {} split", a.runs, eval_split.as_str())?;
    for (name, s) in [
        ("accuracy", a.accuracy),
        ("sensitivity", a.sensitivity),
        ("specificity", a.specificity),
    ] {
        writeln!(out, "{name:<12} mean {}  std {}", s.mean, s.std)?;
    }
    Ok(())
}

pub fn cmd_gradcheck(seeds: u64, out: &mut dyn Write) -> Result<(), Failure> {
    let report = gradcheck::run_suite(seeds)?;
    for r in &report.results {
        writeln!(
            out,
            "{} {:<12} max_rel_err {:.3e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.kind,
            r.max_relative_error
        )?;
    }
    if report.all_pass() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed (tolerance {:e})",
            report.tolerance
        )))
    }
}
