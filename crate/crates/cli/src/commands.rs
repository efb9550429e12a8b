//! The subcommands. Each takes a validated config and writes its outputs
//! under the config's output directory.

use std::fs;
use std::path::{Path, PathBuf};

use gues_core::checkpoint::{self, CLASSIFIER_MAGIC, GENERATOR_MAGIC};
use gues_core::classifier::{argmax_rows, train_source, SourceClassifier};
use gues_core::data::{apply_shift, generate_retinatoy, make_stream, Batch, Domain, NUM_GRADES};
use gues_core::metrics::{confusion, Scores};
use gues_core::pipeline::{fmt_opt, run_online, AdaptMode, LabeledImage, OnlineReport};
use gues_core::pnm::{self, Pnm};
use gues_core::saliency::{fine_grained_saliency, to_gray};
use gues_core::vae::{GuesModel, VaeShape};
use gues_core::verify::{self, VerifyReport};
use gues_core::Image;
use gues_tensor::derive_seed;
use rayon::prelude::*;

use crate::config::{parse_mode, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::manifest::{render_manifest, Manifest, ManifestRow, MANIFEST_FILE};
use crate::svg::{heat_table, line_plot, Series};

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;
const SHIFT_STREAM: u64 = 3;
const HELDOUT_STREAM: u64 = 4;
const GENERATOR_STREAM: u64 = 11;
const ORDER_STREAM: u64 = 12;

pub fn data_dir(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join("data")
}

pub fn source_dir(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join("source")
}

pub fn classifier_path(config: &ExperimentConfig) -> PathBuf {
    source_dir(config).join("classifier.ckpt")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

/// Round trip through 8-bit PPM, so in-memory images match what a reader
/// of the written files would see.
pub fn quantized(image: &Image) -> Result<Image> {
    match pnm::decode(&pnm::encode_ppm(image))? {
        Pnm::Rgb(img) => Ok(img),
        Pnm::Gray(_) => unreachable!("encode_ppm writes colour"),
    }
}

/// Source and shifted target samples, before quantization.
pub struct Dataset {
    pub source: Vec<LabeledImage>,
    pub target: Vec<LabeledImage>,
}

pub fn generate_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let labeled = |samples: Vec<gues_core::data::RetinaToySample>| -> Vec<LabeledImage> {
        samples
            .into_iter()
            .map(|s| LabeledImage {
                image: s.image,
                grade: s.grade,
            })
            .collect()
    };
    let dist = &config.grade_distribution;
    let source = generate_retinatoy(derive_seed(config.seed, SOURCE_STREAM), config.source_size, dist)?;
    let target = generate_retinatoy(derive_seed(config.seed, TARGET_STREAM), config.target_size, dist)?;
    let shift = config.shift();
    let shift_seed = derive_seed(config.seed, SHIFT_STREAM);
    let mut target = labeled(target);
    for (i, s) in target.iter_mut().enumerate() {
        s.image = apply_shift(&s.image, &shift, derive_seed(shift_seed, i as u64));
    }
    Ok(Dataset {
        source: labeled(source),
        target,
    })
}

/// In-domain evaluation images, never written to disk.
pub fn heldout_set(config: &ExperimentConfig) -> Result<Vec<LabeledImage>> {
    generate_retinatoy(
        derive_seed(config.seed, HELDOUT_STREAM),
        config.heldout_size,
        &config.grade_distribution,
    )?
    .into_iter()
    .map(|s| {
        Ok(LabeledImage {
            image: quantized(&s.image)?,
            grade: s.grade,
        })
    })
    .collect()
}

pub fn cmd_gen_data(config: &ExperimentConfig) -> Result<PathBuf> {
    let data = generate_dataset(config)?;
    let dir = data_dir(config);
    let mut rows = Vec::with_capacity(data.source.len() + data.target.len());
    for (domain, samples) in [(Domain::Source, &data.source), (Domain::Target, &data.target)] {
        let sub = dir.join(domain.as_str());
        create_dir(&sub)?;
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("{}/{i:06}.ppm", domain.as_str());
            pnm::write_image(dir.join(&rel), &s.image)?;
            rows.push(ManifestRow {
                path: rel,
                grade: s.grade,
                domain_tag: domain.as_str().to_string(),
            });
        }
    }
    let manifest = dir.join(MANIFEST_FILE);
    write_file(&manifest, render_manifest(&rows)?)?;
    Ok(manifest)
}

/// Frozen-model scores over `samples`, predicted in chunks.
pub fn evaluate(classifier: &SourceClassifier, samples: &[LabeledImage]) -> Result<Scores> {
    let mut pred = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let images: Vec<Image> = chunk.iter().map(|s| s.image.clone()).collect();
        pred.extend(argmax_rows(&classifier.predict(&images)?));
    }
    let truth: Vec<usize> = samples.iter().map(|s| s.grade).collect();
    Ok(Scores::of(&confusion(&truth, &pred, NUM_GRADES)?)?)
}

fn scores_row(split: &str, n: usize, s: &Scores) -> String {
    format!("{split},{n},{:.6},{},{}\n", s.acc, fmt_opt(s.qwk), fmt_opt(s.avg()))
}

pub struct TrainOutcome {
    pub classifier: SourceClassifier,
    pub heldout: Scores,
    pub target: Scores,
}

/// Trains on the manifest's source images. Writes the checkpoint,
/// `metrics.csv` (`split,n,acc,qwk,avg`) and `loss.csv` (`epoch,loss`).
pub fn cmd_train_source(config: &ExperimentConfig) -> Result<TrainOutcome> {
    let manifest = Manifest::load(&data_dir(config))?;
    let source = manifest.images(Domain::Source)?;
    let target = manifest.images(Domain::Target)?;
    let images: Vec<Image> = source.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = source.iter().map(|s| s.grade).collect();
    let mut classifier = SourceClassifier::new(config.seed);
    let history = train_source(&mut classifier, &images, &labels, &config.train_config())?;

    let heldout = heldout_set(config)?;
    let heldout_scores = evaluate(&classifier, &heldout)?;
    let target_scores = evaluate(&classifier, &target)?;
    let dir = source_dir(config);
    create_dir(&dir)?;
    checkpoint::write(&classifier_path(config), CLASSIFIER_MAGIC, classifier.params())?;
    let mut metrics = String::from("split,n,acc,qwk,avg\n");
    metrics.push_str(&scores_row("heldout", heldout.len(), &heldout_scores));
    metrics.push_str(&scores_row("target", target.len(), &target_scores));
    write_file(&dir.join("metrics.csv"), metrics)?;
    let mut loss = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        loss.push_str(&format!("{e},{l:.6}\n"));
    }
    write_file(&dir.join("loss.csv"), loss)?;
    Ok(TrainOutcome {
        classifier,
        heldout: heldout_scores,
        target: target_scores,
    })
}

pub fn load_classifier(config: &ExperimentConfig) -> Result<SourceClassifier> {
    let path = classifier_path(config);
    if !path.exists() {
        return Err(CliError::Missing(format!("{} (run train-source first)", path.display())));
    }
    let mut classifier = SourceClassifier::new(config.seed);
    classifier.load_params(checkpoint::read(&path, CLASSIFIER_MAGIC)?)?;
    Ok(classifier)
}

/// Generator at identity initialization, sized for `target`.
pub fn initial_generator(target: &[LabeledImage], seed: u64) -> Result<GuesModel> {
    let first = target.first().ok_or(gues_core::Error::EmptyDataset)?;
    let shape = VaeShape::new(first.image.height(), first.image.width());
    Ok(GuesModel::new(shape, derive_seed(seed, GENERATOR_STREAM))?)
}

/// One online pass of `mode` over an explicit stream.
pub fn adapt_stream<I>(
    config: &ExperimentConfig,
    classifier: &SourceClassifier,
    generator: GuesModel,
    stream: I,
    mode: AdaptMode,
    batch_size: usize,
    seed: u64,
) -> Result<OnlineReport>
where
    I: IntoIterator<Item = Batch<LabeledImage>>,
{
    let mut settings = config.online_settings(mode)?;
    settings.gues.batch_size = batch_size;
    settings.gues.seed = seed;
    let generator = mode.uses_gues().then_some(generator);
    Ok(run_online(classifier, generator, stream, &settings)?)
}

/// One online pass of `mode` over `target` in seeded arrival order.
pub fn adapt_once(
    config: &ExperimentConfig,
    classifier: &SourceClassifier,
    target: &[LabeledImage],
    mode: AdaptMode,
    batch_size: usize,
    seed: u64,
) -> Result<OnlineReport> {
    let stream = make_stream(target.to_vec(), batch_size, derive_seed(seed, ORDER_STREAM))?;
    let generator = initial_generator(target, seed)?;
    adapt_stream(config, classifier, generator, stream, mode, batch_size, seed)
}

pub const SUMMARY_HEADER: &str = "mode,batch_size,seed,n,acc,qwk,avg\n";

fn summary_row(mode: AdaptMode, batch_size: usize, seed: u64, report: &OnlineReport) -> Result<String> {
    let s = report.aggregate()?;
    Ok(format!(
        "{mode},{batch_size},{seed},{},{:.6},{},{}\n",
        report.confusion.n(),
        s.acc,
        fmt_opt(s.qwk),
        fmt_opt(s.avg())
    ))
}

/// Per-batch `metrics.csv`, one-row `summary.csv`, and for generator
/// modes `gues_loss.csv` and `generator.ckpt`.
fn write_run(dir: &Path, mode: AdaptMode, batch_size: usize, seed: u64, report: &OnlineReport) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("metrics.csv"), report.to_csv())?;
    let summary = format!("{SUMMARY_HEADER}{}", summary_row(mode, batch_size, seed, report)?);
    write_file(&dir.join("summary.csv"), summary)?;
    if let Some(generator) = &report.generator {
        write_file(&dir.join("gues_loss.csv"), report.gues.to_csv())?;
        checkpoint::write(&dir.join("generator.ckpt"), GENERATOR_MAGIC, generator.params())?;
    }
    Ok(())
}

pub fn adapt_dir(config: &ExperimentConfig, mode: AdaptMode) -> PathBuf {
    config.out_dir.join("adapt").join(mode.as_str())
}

pub fn cmd_adapt(config: &ExperimentConfig) -> Result<(PathBuf, Scores)> {
    let mode = config.adapt_mode()?;
    let classifier = load_classifier(config)?;
    let target = Manifest::load(&data_dir(config))?.images(Domain::Target)?;
    let report = adapt_once(config, &classifier, &target, mode, config.batch_size, config.seed)?;
    let dir = adapt_dir(config, mode);
    write_run(&dir, mode, config.batch_size, config.seed, &report)?;
    Ok((dir, report.aggregate()?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Batch,
    AlphaBeta,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(SweepAxis::Batch),
            "alpha_beta" => Ok(SweepAxis::AlphaBeta),
            other => Err(CliError::Usage(format!("unknown axis '{other}' (batch or alpha_beta)"))),
        }
    }
}

/// Worker count: `GUES_THREADS` if set, else the machine's parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var("GUES_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("GUES_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run_parallel<J, T, F>(jobs: &[J], f: F) -> Result<Vec<T>>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    pool.install(|| jobs.par_iter().map(&f).collect())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPoint {
    pub mode: AdaptMode,
    pub batch_size: usize,
    pub seed: u64,
    pub scores: Scores,
}

/// Max minus min ACC across batch sizes, per mode and seed, then the
/// median over seeds.
pub fn acc_spreads(points: &[BatchPoint]) -> Vec<(AdaptMode, f64)> {
    let mut modes: Vec<AdaptMode> = Vec::new();
    for p in points {
        if !modes.contains(&p.mode) {
            modes.push(p.mode);
        }
    }
    modes
        .into_iter()
        .map(|mode| {
            let mut seeds: Vec<u64> = points.iter().filter(|p| p.mode == mode).map(|p| p.seed).collect();
            seeds.dedup();
            let mut spreads: Vec<f64> = seeds
                .iter()
                .map(|&seed| {
                    let accs = points.iter().filter(|p| p.mode == mode && p.seed == seed).map(|p| p.scores.acc);
                    let (lo, hi) = accs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| (lo.min(a), hi.max(a)));
                    hi - lo
                })
                .collect();
            (mode, median(&mut spreads))
        })
        .collect()
}

/// Runs every (mode, batch size, seed) point over `target`, writing each
/// run to its own subdirectory of `dir` when one is given.
pub fn batch_sweep(
    config: &ExperimentConfig,
    classifier: &SourceClassifier,
    target: &[LabeledImage],
    dir: Option<&Path>,
) -> Result<Vec<BatchPoint>> {
    let modes = config.sweep_modes.iter().map(|m| parse_mode(m)).collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for &mode in &modes {
        for &batch_size in &config.sweep_batch_sizes {
            for &seed in &config.sweep_seeds {
                jobs.push((mode, batch_size, seed));
            }
        }
    }
    if jobs.is_empty() {
        return Err(CliError::Config("batch sweep grid is empty".into()));
    }
    run_parallel(&jobs, |&(mode, batch_size, seed)| {
        let run_seed = derive_seed(seed, batch_size as u64);
        let report = adapt_once(config, classifier, target, mode, batch_size, run_seed)?;
        if let Some(dir) = dir {
            let sub = dir.join(mode.as_str()).join(format!("bs{batch_size:02}")).join(format!("seed{seed}"));
            write_run(&sub, mode, batch_size, run_seed, &report)?;
        }
        Ok(BatchPoint {
            mode,
            batch_size,
            seed,
            scores: report.aggregate()?,
        })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub scores: Scores,
}

pub fn alpha_beta_sweep(
    config: &ExperimentConfig,
    classifier: &SourceClassifier,
    target: &[LabeledImage],
    dir: Option<&Path>,
) -> Result<Vec<GridPoint>> {
    let mode = config.adapt_mode()?;
    if !mode.uses_gues() {
        return Err(CliError::Usage(format!("the alpha_beta sweep needs a generator mode, got {mode}")));
    }
    let mut jobs = Vec::new();
    for (i, &alpha) in config.sweep_alphas.iter().enumerate() {
        for (j, &beta) in config.sweep_betas.iter().enumerate() {
            for &seed in &config.sweep_seeds {
                jobs.push((i, j, alpha, beta, seed));
            }
        }
    }
    if jobs.is_empty() {
        return Err(CliError::Config("alpha/beta sweep grid is empty".into()));
    }
    run_parallel(&jobs, |&(i, j, alpha, beta, seed)| {
        let mut run_config = config.clone();
        run_config.alpha = alpha;
        run_config.beta = beta;
        run_config.gues_config()?.validate()?;
        let report = adapt_once(&run_config, classifier, target, mode, config.batch_size, seed)?;
        if let Some(dir) = dir {
            let sub = dir.join(format!("a{i:02}_b{j:02}")).join(format!("seed{seed}"));
            write_run(&sub, mode, config.batch_size, seed, &report)?;
        }
        Ok(GridPoint {
            alpha,
            beta,
            seed,
            scores: report.aggregate()?,
        })
    })
}

pub fn sweep_dir(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join("sweep")
}

/// Runs the sweep, writes the CSVs and SVG, and returns the lines it
/// reports on stdout.
pub fn cmd_sweep(config: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<String>> {
    let classifier = load_classifier(config)?;
    let target = Manifest::load(&data_dir(config))?.images(Domain::Target)?;
    let dir = sweep_dir(config);
    let mut lines = Vec::new();
    match axis {
        SweepAxis::Batch => {
            let runs = dir.join("batch");
            let points = batch_sweep(config, &classifier, &target, Some(&runs))?;
            let mut csv = String::from("mode,batch_size,seed,acc,qwk,avg\n");
            for p in &points {
                csv.push_str(&format!(
                    "{},{},{},{:.6},{},{}\n",
                    p.mode,
                    p.batch_size,
                    p.seed,
                    p.scores.acc,
                    fmt_opt(p.scores.qwk),
                    fmt_opt(p.scores.avg())
                ));
            }
            write_file(&dir.join("batch.csv"), csv)?;
            let mut spread_csv = String::from("mode,median_acc_spread\n");
            for (mode, spread) in acc_spreads(&points) {
                spread_csv.push_str(&format!("{mode},{spread:.6}\n"));
                lines.push(format!("{mode}: median ACC spread across batch sizes {spread:.4}"));
            }
            write_file(&dir.join("batch_spread.csv"), spread_csv)?;
            let series: Vec<Series> = acc_spreads(&points)
                .into_iter()
                .map(|(mode, _)| Series {
                    label: mode.to_string(),
                    points: config
                        .sweep_batch_sizes
                        .iter()
                        .map(|&bs| {
                            let mut accs: Vec<f64> = points
                                .iter()
                                .filter(|p| p.mode == mode && p.batch_size == bs)
                                .map(|p| p.scores.acc)
                                .collect();
                            (bs as f64, median(&mut accs))
                        })
                        .collect(),
                })
                .collect();
            write_file(
                &dir.join("batch.svg"),
                line_plot("Target ACC by batch size", "batch size", "ACC (median over seeds)", &series, true),
            )?;
        }
        SweepAxis::AlphaBeta => {
            let runs = dir.join("alpha_beta");
            let points = alpha_beta_sweep(config, &classifier, &target, Some(&runs))?;
            let mut csv = String::from("alpha,beta,seed,acc,qwk,avg\n");
            for p in &points {
                csv.push_str(&format!(
                    "{},{},{},{:.6},{},{}\n",
                    p.alpha,
                    p.beta,
                    p.seed,
                    p.scores.acc,
                    fmt_opt(p.scores.qwk),
                    fmt_opt(p.scores.avg())
                ));
            }
            write_file(&dir.join("alpha_beta.csv"), csv)?;
            let values: Vec<Vec<f64>> = config
                .sweep_alphas
                .iter()
                .map(|&a| {
                    config
                        .sweep_betas
                        .iter()
                        .map(|&b| {
                            let mut avgs: Vec<f64> = points
                                .iter()
                                .filter(|p| p.alpha == a && p.beta == b)
                                .filter_map(|p| p.scores.avg())
                                .collect();
                            median(&mut avgs)
                        })
                        .collect()
                })
                .collect();
            let finite: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
            let spread = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - finite.iter().copied().fold(f64::INFINITY, f64::min);
            write_file(&dir.join("alpha_beta_spread.csv"), format!("metric,spread\navg,{spread:.6}\n"))?;
            lines.push(format!("AVG spread (max - min) over the alpha x beta grid: {spread:.4}"));
            let rows: Vec<String> = config.sweep_alphas.iter().map(|a| format!("{a}")).collect();
            let cols: Vec<String> = config.sweep_betas.iter().map(|b| format!("{b:e}")).collect();
            write_file(
                &dir.join("alpha_beta.svg"),
                heat_table("Target AVG over alpha x beta", "alpha", "beta", &rows, &cols, &values),
            )?;
        }
    }
    Ok(lines)
}

/// Writes the saliency map of a PPM or PGM file as PGM.
pub fn cmd_saliency(input: &Path, output: &Path) -> Result<()> {
    let bytes = fs::read(input).map_err(|e| CliError::Missing(format!("{}: {e}", input.display())))?;
    let gray = match pnm::decode(&bytes).map_err(|e| CliError::Other(format!("{}: {e}", input.display())))? {
        Pnm::Rgb(img) => to_gray(&img),
        Pnm::Gray(g) => g,
    };
    let map = fine_grained_saliency(&gray);
    write_file(output, pnm::encode_pgm(&map.to_gray()))
}

pub fn cmd_verify() -> VerifyReport {
    verify::run_all()
}
