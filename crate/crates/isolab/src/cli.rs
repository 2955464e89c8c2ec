//! The `isolab` command line: argument parsing and one function per
//! subcommand.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::clock::WallClock;
use crate::experiment::{self, Splits, TimingSummary};
use crate::formats;
use crate::manifest::{InputDigest, Manifest};
use crate::plot::{self, LinePlot, Series};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use isolab_core::data::{generate_synthetic, Dataset, SplitSpec, SynthConfig};
use isolab_core::fewshot::{self, EpisodeSpec, EvalReport, ProbeClassifier};
use isolab_core::geometry;
use isolab_core::model::{self, ModelParams};
use isolab_core::objectives::ObjectiveConfig;
use isolab_core::training::{self, TrainConfig};
use isolab_core::{Matrix, Rng};

#[derive(Parser)]
#[command(
    name = "isolab",
    version,
    about = "Isotropy-regularized pre-training for few-shot intent detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic intent corpus as JSONL.
    Synth(SynthArgs),
    /// Pre-train an encoder on the source domains.
    Pretrain(PretrainArgs),
    /// Score checkpoints on few-shot episodes from the target domains.
    Eval(EvalArgs),
    /// Measure the isotropy of an embedding file or an encoded corpus.
    Isotropy(IsotropyArgs),
    /// Fit a whitening map and apply it to an embedding file.
    Whiten(WhitenArgs),
    /// Train and score one model per value of a hyperparameter.
    Sweep(SweepArgs),
    /// Covariance and correlation heatmaps, isotropy per split and timing.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Corpus as JSONL with text, label and domain fields. Without it the
    /// synthetic corpus is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic corpus settings (JSON), used when --data is absent.
    #[arg(long, conflicts_with = "data")]
    synth: Option<PathBuf>,
    /// Domain split (JSON with train, validation and excluded lists).
    /// Defaults to six training domains, two validation domains and the
    /// rest as the target.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct EpisodeArgs {
    /// Classes per episode.
    #[arg(long = "ways", alias = "C", default_value_t = 5)]
    ways: usize,
    /// Support examples per class.
    #[arg(long = "shots", alias = "K", default_value_t = 2)]
    shots: usize,
    /// Query examples per class.
    #[arg(long, default_value_t = 5)]
    queries: usize,
    #[arg(long, default_value_t = 500)]
    episodes: usize,
}

impl EpisodeArgs {
    fn spec(&self, seed: u64) -> EpisodeSpec {
        EpisodeSpec {
            ways: self.ways,
            shots: self.shots,
            queries: self.queries,
            episodes: self.episodes,
            seed,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic corpus settings (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args)]
struct PretrainArgs {
    /// Training settings (JSON); fields left out take the desk preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point when no --config is given.
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    /// Overrides the configured training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score; repeat to compare models on the same episodes.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Target corpus (JSONL). Without it the excluded domains of the data
    /// split are used.
    #[arg(long)]
    target: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    episodes: EpisodeArgs,
    /// Episode seeds; each seed draws its own set of episodes.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Draw different episodes for every checkpoint instead of sharing them.
    #[arg(long)]
    independent_episodes: bool,
    /// Report file (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IsotropyArgs {
    /// Embedding file: a `rows cols` line, then one row per line.
    #[arg(long, conflicts_with_all = ["checkpoint", "target"], required_unless_present = "checkpoint")]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus to encode (JSONL). Without it the target split of the data
    /// options is encoded.
    #[arg(long)]
    target: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Also report the isotropy of each domain.
    #[arg(long, requires = "checkpoint")]
    per_domain: bool,
    /// Measure on this many randomly chosen rows instead of all of them.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the encoded vectors as an embedding file.
    #[arg(long, requires = "checkpoint")]
    dump: Option<PathBuf>,
    /// Result file (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WhitenArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Fit the map on this embedding file and apply it to --embeddings.
    #[arg(long)]
    fit_on: Option<PathBuf>,
    /// Whitened embeddings. The map and the before/after isotropy are
    /// written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    /// Weight of the single active regularizer.
    Lambda,
    /// CL-Reg weight when both regularizers are active.
    Lambda1,
    /// Cor-Reg weight when both regularizers are active.
    Lambda2,
    Tau,
    L2Weight,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
            SweepParam::Tau => "tau",
            SweepParam::L2Weight => "l2_weight",
        }
    }

    fn apply(self, objective: &mut ObjectiveConfig, value: f64) {
        match self {
            SweepParam::Lambda => objective.lambda = Some(value),
            SweepParam::Lambda1 => objective.lambda1 = value,
            SweepParam::Lambda2 => objective.lambda2 = value,
            SweepParam::Tau => objective.tau = value,
            SweepParam::L2Weight => objective.l2_weight = value,
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    /// Training settings (JSON). Defaults to the desk preset with Cor-Reg.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Training seeds, shared by every value.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    episodes: EpisodeArgs,
    #[arg(long, default_value_t = 0)]
    episode_seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Timing file written by pretrain. Defaults to timing.json beside the
    /// checkpoint.
    #[arg(long)]
    timing: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// A loaded or generated corpus with the digests of where it came from.
struct Corpus {
    data: Dataset,
    split: SplitSpec,
    inputs: Vec<InputDigest>,
}

impl Corpus {
    fn load(args: &DataArgs) -> Result<Self> {
        let mut inputs = Vec::new();
        let data = match (&args.data, &args.synth) {
            (Some(path), _) => {
                inputs.push(InputDigest::of_file(path)?);
                formats::read_jsonl(path)?
            }
            (None, synth) => {
                let config: SynthConfig = match synth {
                    Some(path) => {
                        inputs.push(InputDigest::of_file(path)?);
                        formats::read_json(path)?
                    }
                    None => SynthConfig::default(),
                };
                let data = generate_synthetic(&config)?;
                inputs.push(InputDigest::of_bytes(
                    "synthetic corpus",
                    formats::dataset_to_jsonl(&data).as_bytes(),
                ));
                data
            }
        };
        let split = match &args.split {
            Some(path) => {
                inputs.push(InputDigest::of_file(path)?);
                formats::read_json(path)?
            }
            None => SplitSpec::default_for(&data)?,
        };
        split.validate()?;
        Ok(Corpus {
            data,
            split,
            inputs,
        })
    }

    fn splits(&self) -> Result<Splits> {
        Ok(Splits::new(&self.data, &self.split)?)
    }

    /// The explicit target file if given, else the excluded domains.
    fn target(args: &DataArgs, target: Option<&Path>) -> Result<(Dataset, Vec<InputDigest>)> {
        match target {
            Some(path) => Ok((
                formats::read_jsonl(path)?,
                vec![InputDigest::of_file(path)?],
            )),
            None => {
                let corpus = Corpus::load(args)?;
                let target = corpus.splits()?.target;
                Ok((target, corpus.inputs))
            }
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `<file>.<suffix>` beside an output file.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn to_value<T: serde::Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("configuration serializes")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Usage(format!("{}: {other:?}", path.display())),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_params(path: &Path) -> Result<(ModelParams, InputDigest)> {
    let (params, _) = checkpoint::load(path)?;
    Ok((params, InputDigest::of_file(path)?))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut config: SynthConfig = match &args.config {
        Some(path) => formats::read_json(path)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let data = generate_synthetic(&config)?;
    formats::write_jsonl(&args.out, &data)?;
    let mut manifest = Manifest::new("synth", to_value(&config), Some(config.seed));
    if let Some(path) = &args.config {
        manifest.input(InputDigest::of_file(path)?);
    }
    manifest.output(&args.out);
    manifest.write(&sibling(&args.out, "manifest.json"))?;
    println!(
        "{} utterances, {} intents, {} domains -> {}",
        data.len(),
        data.num_labels(),
        data.num_domains(),
        args.out.display()
    );
    Ok(())
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let mut config = match (&args.config, args.preset) {
        (Some(path), _) => formats::read_json::<TrainConfig>(path)?,
        (None, Some(Preset::Paper)) => TrainConfig::paper(),
        (None, _) => TrainConfig::desk(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let corpus = Corpus::load(&args.data)?;
    let splits = corpus.splits()?;
    create_dir(&args.out)?;

    let (params, log) = training::train(
        &splits.source,
        &splits.validation,
        &config,
        &WallClock::new(),
    )?;
    let ckpt = args.out.join("model.ckpt");
    let log_path = args.out.join("train_log.jsonl");
    let timing_path = args.out.join("timing.json");
    checkpoint::save(&ckpt, &params, to_value(&config))?;
    write_text(&log_path, &experiment::train_log_jsonl(&log))?;
    let timing = TimingSummary::from_log(&log);
    formats::write_json(&timing_path, &timing)?;

    let mut manifest = Manifest::new("pretrain", to_value(&config), Some(config.seed));
    if let Some(path) = &args.config {
        manifest.input(InputDigest::of_file(path)?);
    }
    corpus.inputs.into_iter().for_each(|d| manifest.input(d));
    for p in [&ckpt, &log_path, &timing_path] {
        manifest.output(p);
    }
    manifest.write(&args.out.join("manifest.json"))?;

    for w in &log.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "objective {}: {} steps, stopped ({:?}) at {}, best step {} (validation acc {})",
        config.objective.label(),
        log.steps.len(),
        log.stop_reason,
        log.stopped_at,
        log.best_step,
        log.best_val_accuracy
            .map_or("n/a".into(), |a| format!("{:.2}%", 100.0 * a)),
    );
    print_timing(&timing);
    Ok(())
}

fn print_timing(t: &TimingSummary) {
    println!("{:<10} {:>12} {:>14}", "term", "seconds", "ms/step");
    for (name, total, per) in t.rows() {
        println!("{name:<10} {total:>12.4} {:>14.4}", 1e3 * per);
    }
}

fn eval(args: &EvalArgs) -> Result<()> {
    if args.seeds.is_empty() {
        return Err(Error::Usage("--seeds needs at least one value".into()));
    }
    let (target, mut inputs) = Corpus::target(&args.data, args.target.as_deref())?;
    let labels = target.labels();
    let mut names = Vec::new();
    let mut reports = Vec::new();
    for (k, path) in args.checkpoint.iter().enumerate() {
        let (params, digest) = load_params(path)?;
        inputs.push(digest);
        let reps = model::encode_texts(&params.encoder, &target.texts())?;
        let runs = args
            .seeds
            .iter()
            .map(|&seed| {
                let episode_seed = if args.independent_episodes {
                    seed ^ ((k as u64) << 32)
                } else {
                    seed
                };
                let spec = args.episodes.spec(episode_seed);
                let acc = fewshot::evaluate_representations(
                    &reps,
                    &labels,
                    &spec,
                    &ProbeClassifier::default(),
                )?;
                Ok((seed, acc))
            })
            .collect::<Result<Vec<_>>>()?;
        let report = EvalReport::from_runs(&args.episodes.spec(args.seeds[0]), &runs)?;
        println!("{}: {}", path.display(), report.summary());
        names.push(path.display().to_string());
        reports.push(report);
    }

    let mut paired = Vec::new();
    for (name, report) in names.iter().zip(&reports).skip(1) {
        let diffs: Vec<f64> = report
            .per_episode
            .iter()
            .zip(&reports[0].per_episode)
            .map(|(a, b)| a - b)
            .collect();
        let mean = fewshot::mean(&diffs);
        let stderr = fewshot::sample_std(&diffs) / (diffs.len() as f64).sqrt();
        println!(
            "{name} - {}: {:+.2} points (± {:.2} standard error, {})",
            names[0],
            100.0 * mean,
            100.0 * stderr,
            if args.independent_episodes {
                "unpaired"
            } else {
                "paired"
            }
        );
        paired.push(serde_json::json!({
            "checkpoint": name, "baseline": names[0], "paired": !args.independent_episodes,
            "mean_difference": mean, "standard_error": stderr,
        }));
    }

    if let Some(out) = &args.out {
        let body = if reports.len() == 1 {
            to_value(&reports[0])
        } else {
            serde_json::json!({"checkpoints": names, "reports": reports, "differences": paired})
        };
        formats::write_json(out, &body)?;
        let config = serde_json::json!({
            "episodes": to_value(&args.episodes.spec(0)), "seeds": args.seeds,
            "independent_episodes": args.independent_episodes,
        });
        let mut manifest = Manifest::new("eval", config, None);
        inputs.into_iter().for_each(|d| manifest.input(d));
        manifest.output(out);
        manifest.write(&sibling(out, "manifest.json"))?;
    }
    Ok(())
}

fn subsample(v: &Matrix, n: Option<usize>, seed: u64) -> Result<Matrix> {
    match n {
        None => Ok(v.clone()),
        Some(n) if n == 0 || n > v.rows() => Err(Error::Usage(format!(
            "--subsample must be between 1 and the number of rows ({})",
            v.rows()
        ))),
        Some(n) => {
            let mut ids = Rng::new(seed).sample_indices(v.rows(), n);
            ids.sort_unstable();
            Ok(v.select_rows(&ids))
        }
    }
}

fn isotropy(args: &IsotropyArgs) -> Result<()> {
    let mut inputs = Vec::new();
    let mut per_domain = Vec::new();
    let vectors = match (&args.embeddings, &args.checkpoint) {
        (Some(path), _) => {
            inputs.push(InputDigest::of_file(path)?);
            formats::read_embeddings(path)?
        }
        (None, Some(ckpt)) => {
            let (params, digest) = load_params(ckpt)?;
            let (target, corpus_inputs) = Corpus::target(&args.data, args.target.as_deref())?;
            inputs.extend(corpus_inputs);
            inputs.push(digest);
            let reps = model::encode_texts(&params.encoder, &target.texts())?;
            if args.per_domain {
                for (id, name) in target.domain_names.iter().enumerate() {
                    let rows: Vec<usize> = (0..target.len())
                        .filter(|&i| target.utterances[i].domain == id)
                        .collect();
                    let iso = geometry::isotropy(&reps.select_rows(&rows))?;
                    per_domain.push((name.clone(), rows.len(), iso));
                }
            }
            if let Some(dump) = &args.dump {
                formats::write_embeddings(dump, &reps)?;
            }
            reps
        }
        (None, None) => return Err(Error::Usage("give --embeddings or --checkpoint".into())),
    };
    let v = subsample(&vectors, args.subsample, args.seed)?;
    let iso = geometry::isotropy(&v)?;
    println!("{iso:.6}");
    for (name, n, value) in &per_domain {
        println!("{name}\t{n}\t{value:.6}");
    }
    if let Some(out) = &args.out {
        let domains: Vec<_> = per_domain
            .iter()
            .map(|(name, n, value)| serde_json::json!({"domain": name, "n": n, "isotropy": value}))
            .collect();
        formats::write_json(
            out,
            &serde_json::json!({"isotropy": iso, "n": v.rows(), "d": v.cols(), "per_domain": domains}),
        )?;
        let config =
            serde_json::json!({"subsample": args.subsample, "per_domain": args.per_domain});
        let mut manifest = Manifest::new("isotropy", config, Some(args.seed));
        inputs.into_iter().for_each(|d| manifest.input(d));
        manifest.output(out);
        if let Some(dump) = &args.dump {
            manifest.output(dump);
        }
        manifest.write(&sibling(out, "manifest.json"))?;
    }
    Ok(())
}

fn max_off_diagonal(m: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            if r != c {
                worst = worst.max(m[(r, c)].abs());
            }
        }
    }
    worst
}

fn mean_abs_off_diagonal(m: &Matrix) -> f64 {
    let d = m.rows();
    if d < 2 {
        return 0.0;
    }
    let total: f64 = (0..d)
        .flat_map(|r| (0..d).filter(move |&c| c != r).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)].abs())
        .sum();
    total / (d * (d - 1)) as f64
}

fn whiten(args: &WhitenArgs) -> Result<()> {
    let v = formats::read_embeddings(&args.embeddings)?;
    let mut manifest = Manifest::new("whiten", serde_json::Value::Null, None);
    manifest.input(InputDigest::of_file(&args.embeddings)?);
    let fit = match &args.fit_on {
        Some(path) => {
            manifest.input(InputDigest::of_file(path)?);
            formats::read_embeddings(path)?
        }
        None => v.clone(),
    };
    let map = geometry::fit_whitening(&fit)?;
    let w = geometry::apply_whitening(&map, &v)?;
    let before = geometry::isotropy(&v)?;
    let after = geometry::isotropy(&w)?;
    let max_cov = max_off_diagonal(&geometry::covariance(&w)?);

    let map_path = sibling(&args.out, "map.json");
    let summary_path = sibling(&args.out, "summary.json");
    formats::write_embeddings(&args.out, &w)?;
    formats::write_json(&map_path, &map)?;
    formats::write_json(
        &summary_path,
        &serde_json::json!({
            "isotropy_before": before, "isotropy_after": after,
            "max_abs_off_diagonal_covariance": max_cov, "fit_rows": fit.rows(),
        }),
    )?;
    for p in [&args.out, &map_path, &summary_path] {
        manifest.output(p);
    }
    manifest.write(&sibling(&args.out, "manifest.json"))?;
    println!("isotropy before {before:.6} after {after:.6}");
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let base = match &args.config {
        Some(path) => formats::read_json::<TrainConfig>(path)?,
        None => TrainConfig {
            objective: ObjectiveConfig::cor(),
            ..TrainConfig::desk()
        },
    };
    if args.seeds.is_empty() {
        return Err(Error::Usage("--seeds needs at least one value".into()));
    }
    let configs: Vec<TrainConfig> = args
        .values
        .iter()
        .map(|&value| {
            let mut c = base.clone();
            args.param.apply(&mut c.objective, value);
            c.validate().map(|_| c)
        })
        .collect::<isolab_core::Result<_>>()?;
    let corpus = Corpus::load(&args.data)?;
    let splits = corpus.splits()?;
    let spec = args.episodes.spec(args.episode_seed);
    spec.validate()?;
    create_dir(&args.out)?;

    let mut summary_rows = Vec::new();
    let mut run_rows = Vec::new();
    let mut points = Vec::new();
    for (value, config) in args.values.iter().zip(&configs) {
        let mut isos = Vec::new();
        let mut accs = Vec::new();
        for &seed in &args.seeds {
            let cfg = TrainConfig {
                seed,
                ..config.clone()
            };
            let run = experiment::run(&splits, &cfg, &spec, &isolab_core::objectives::ZeroClock)?;
            run_rows.push(vec![
                value.to_string(),
                seed.to_string(),
                run.target_isotropy.to_string(),
                run.accuracy().to_string(),
                run.log.best_step.to_string(),
            ]);
            isos.push(run.target_isotropy);
            accs.push(run.accuracy());
        }
        let (iso, acc, std) = (
            fewshot::mean(&isos),
            fewshot::mean(&accs),
            fewshot::sample_std(&accs),
        );
        println!(
            "{} = {value}: isotropy {iso:.4}, acc = {:.2}% ± {:.2}",
            args.param.name(),
            100.0 * acc,
            100.0 * std
        );
        summary_rows.push(vec![
            value.to_string(),
            iso.to_string(),
            acc.to_string(),
            std.to_string(),
            args.seeds.len().to_string(),
        ]);
        points.push((iso, acc));
    }

    let csv_path = args.out.join("sweep.csv");
    let runs_path = args.out.join("sweep_runs.csv");
    let svg_path = args.out.join("sweep.svg");
    let param = args.param.name();
    write_csv(
        &csv_path,
        &[param, "isotropy", "accuracy", "std", "seeds"],
        &summary_rows,
    )?;
    write_csv(
        &runs_path,
        &[param, "seed", "isotropy", "accuracy", "best_step"],
        &run_rows,
    )?;
    let chart = LinePlot {
        title: format!("accuracy against target isotropy over {param}"),
        x_label: "isotropy I(V)".into(),
        y_label: "mean accuracy".into(),
        series: vec![Series {
            label: param.into(),
            points,
        }],
    };
    write_text(&svg_path, &chart.to_svg())?;

    let config = serde_json::json!({
        "train": to_value(&base), "param": param, "values": args.values,
        "seeds": args.seeds, "episodes": to_value(&spec),
    });
    let mut manifest = Manifest::new("sweep", config, None);
    if let Some(path) = &args.config {
        manifest.input(InputDigest::of_file(path)?);
    }
    corpus.inputs.into_iter().for_each(|d| manifest.input(d));
    for p in [&csv_path, &runs_path, &svg_path] {
        manifest.output(p);
    }
    manifest.write(&args.out.join("manifest.json"))
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<String>> {
    (0..m.rows())
        .map(|r| {
            std::iter::once(r.to_string())
                .chain(m.row(r).iter().map(|v| v.to_string()))
                .collect()
        })
        .collect()
}

fn report(args: &ReportArgs) -> Result<()> {
    let (params, digest) = load_params(&args.checkpoint)?;
    let corpus = Corpus::load(&args.data)?;
    let splits = corpus.splits()?;
    create_dir(&args.out)?;
    let mut manifest = Manifest::new("report", to_value(&corpus.split), None);
    manifest.input(digest);
    corpus
        .inputs
        .iter()
        .cloned()
        .for_each(|d| manifest.input(d));

    let target = model::encode_texts(&params.encoder, &splits.target.texts())?;
    let cov = geometry::covariance(&target)?;
    let cor = geometry::correlation(&target)?;
    let header: Vec<String> = std::iter::once("dim".to_string())
        .chain((0..cov.cols()).map(|c| c.to_string()))
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut outputs = Vec::new();
    for (name, m, scale) in [
        ("covariance", &cov, cov.max_abs()),
        ("correlation", &cor, 1.0),
    ] {
        let csv_path = args.out.join(format!("{name}.csv"));
        let svg_path = args.out.join(format!("{name}.svg"));
        write_csv(&csv_path, &header, &matrix_rows(m))?;
        write_text(
            &svg_path,
            &plot::heatmap_svg(m, &format!("target {name}"), scale),
        )?;
        outputs.push(csv_path);
        outputs.push(svg_path);
    }

    let mut iso_rows = Vec::new();
    for (name, data) in [
        ("source", &splits.source),
        ("validation", &splits.validation),
        ("target", &splits.target),
    ] {
        if data.len() < 2 {
            continue;
        }
        let reps = model::encode_texts(&params.encoder, &data.texts())?;
        let iso = geometry::isotropy(&reps)?;
        println!("isotropy {name:<10} {iso:.6} ({} utterances)", data.len());
        iso_rows.push(vec![
            name.to_string(),
            data.len().to_string(),
            iso.to_string(),
        ]);
    }
    let iso_path = args.out.join("isotropy.csv");
    write_csv(&iso_path, &["split", "n", "isotropy"], &iso_rows)?;
    outputs.push(iso_path);

    let timing_path = args
        .timing
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_file_name("timing.json"));
    // Wall-clock figures differ between runs, so they stay out of the
    // manifest and the summary; only timing.csv carries them.
    let timing = if timing_path.exists() {
        let t: TimingSummary = formats::read_json(&timing_path)?;
        let rows: Vec<Vec<String>> = t
            .rows()
            .into_iter()
            .map(|(name, total, per)| vec![name.to_string(), total.to_string(), per.to_string()])
            .collect();
        let path = args.out.join("timing.csv");
        write_csv(&path, &["term", "seconds", "seconds_per_step"], &rows)?;
        outputs.push(path);
        print_timing(&t);
        "timing.csv"
    } else if args.timing.is_some() {
        return Err(Error::io(&timing_path, std::io::ErrorKind::NotFound.into()));
    } else {
        println!("timing: unavailable");
        "unavailable"
    };

    let summary_path = args.out.join("summary.json");
    let mean_abs_cor = mean_abs_off_diagonal(&cor);
    println!("mean |off-diagonal correlation| {mean_abs_cor:.6}");
    formats::write_json(
        &summary_path,
        &serde_json::json!({
            "d": cov.rows(),
            "mean_abs_off_diagonal_correlation": mean_abs_cor,
            "mean_abs_off_diagonal_covariance": mean_abs_off_diagonal(&cov),
            "isotropy": iso_rows.iter().map(|r| (r[0].clone(), r[2].parse::<f64>().unwrap())).collect::<std::collections::BTreeMap<_, _>>(),
            "timing": timing,
        }),
    )?;
    outputs.push(summary_path);
    outputs.iter().for_each(|p| manifest.output(p));
    manifest.write(&args.out.join("manifest.json"))
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit status: 0 on success, 1 when the computation fails and 2
/// for bad arguments, configuration or input files.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Eval(a) => eval(a),
        Command::Isotropy(a) => isotropy(a),
        Command::Whiten(a) => whiten(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
