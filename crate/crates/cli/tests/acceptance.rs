//! End-to-end acceptance run (a plain binary, not the libtest harness, so
//! its lines always show). Prints one `PASS` or `FAIL` line per criterion
//! and exits nonzero if any failed.
//!
//! One source classifier is trained at the default configuration and
//! shared by every criterion that needs a trained model.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::rc::Rc;
use std::time::{Duration, Instant};

use clap::Parser;
use gues_cli::commands::{
    acc_spreads, adapt_once, adapt_stream, batch_sweep, cmd_gen_data, cmd_train_source, data_dir, initial_generator,
    quantized, TrainOutcome,
};
use gues_cli::manifest::Manifest;
use gues_cli::{run, Cli, ExperimentConfig};
use gues_core::baseline::{compare_generative_vs_iterative, loss_and_input_grad, optimize_unadversarial, IterativeConfig};
use gues_core::classifier::SourceClassifier;
use gues_core::data::{apply_shift, generate_retinatoy, make_stream, Batch, Domain, Stream};
use gues_core::pipeline::{AdaptMode, LabeledImage};
use gues_core::saliency::fine_grained_saliency;
use gues_core::verify::{self, Check};
use gues_core::{images_to_tensor, Image};
use gues_tensor::{derive_seed, Tensor};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
}

type CriterionResult = Result<(bool, String), String>;

struct Fixture {
    config: ExperimentConfig,
    trained: TrainOutcome,
    target: Vec<LabeledImage>,
    train_time: Duration,
    _dir: tempfile::TempDir,
}

fn fixture() -> Result<Fixture, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = ExperimentConfig {
        out_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    cmd_gen_data(&config).map_err(|e| e.to_string())?;
    let trained = cmd_train_source(&config).map_err(|e| e.to_string())?;
    let train_time = start.elapsed();
    let target = Manifest::load(&data_dir(&config))
        .and_then(|m| m.images(Domain::Target))
        .map_err(|e| e.to_string())?;
    Ok(Fixture {
        config,
        trained,
        target,
        train_time,
        _dir: dir,
    })
}

fn from_check(check: Check) -> CriterionResult {
    Ok((check.passed, format!("{}: {}", check.name, check.detail)))
}

fn timed(limit: Duration, f: impl FnOnce() -> Check) -> CriterionResult {
    let start = Instant::now();
    let check = f();
    let took = start.elapsed();
    let within = took < limit;
    Ok((
        check.passed && within,
        format!("{}: {} ({:.1} s, limit {} s)", check.name, check.detail, took.as_secs_f64(), limit.as_secs()),
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_3() -> CriterionResult {
    let start = Instant::now();
    let primitives = verify::check_primitive_gradients();
    let gues = verify::check_gues_gradients();
    let took = start.elapsed();
    Ok((
        primitives.passed && gues.passed && took < Duration::from_secs(60),
        format!(
            "{}: {} | {}: {} ({:.1} s, limit 60 s)",
            primitives.name,
            primitives.detail,
            gues.name,
            gues.detail,
            took.as_secs_f64()
        ),
    ))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn criterion_6(fx: &Fixture) -> CriterionResult {
    let synthetic = verify::check_identity_initialization();
    let mut notes = vec![format!("{}: {}", synthetic.name, synthetic.detail)];
    let mut passed = synthetic.passed;
    let target = &fx.target[..256];
    for (plain, with) in [(AdaptMode::SourceOnly, AdaptMode::Gues), (AdaptMode::Tent, AdaptMode::GuesTent)] {
        let a = adapt_once(&fx.config, &fx.trained.classifier, target, plain, 64, 5).map_err(|e| e.to_string())?;
        let b = adapt_once(&fx.config, &fx.trained.classifier, target, with, 64, 5).map_err(|e| e.to_string())?;
        let same = bits(&a.logits[0]) == bits(&b.logits[0]);
        passed &= same;
        notes.push(format!(
            "trained classifier, {with} vs {plain}: first batch {}",
            if same { "bit-identical" } else { "differs" }
        ));
    }
    Ok((passed, notes.join("; ")))
}

fn criterion_7(fx: &Fixture) -> CriterionResult {
    let start = Instant::now();
    let mut gains = Vec::new();
    let mut source = Vec::new();
    let mut gues = Vec::new();
    for seed in SEEDS {
        let c = &fx.config;
        let s = adapt_once(c, &fx.trained.classifier, &fx.target, AdaptMode::SourceOnly, c.batch_size, seed)
            .and_then(|r| Ok(r.aggregate()?.acc))
            .map_err(|e| e.to_string())?;
        let g = adapt_once(c, &fx.trained.classifier, &fx.target, AdaptMode::Gues, c.batch_size, seed)
            .and_then(|r| Ok(r.aggregate()?.acc))
            .map_err(|e| e.to_string())?;
        source.push(s);
        gues.push(g);
        gains.push(g - s);
    }
    let runtime = fx.train_time + start.elapsed();
    let drop = fx.trained.heldout.acc - fx.trained.target.acc;
    let gain = median(gains);
    let passed = drop >= 0.10 && gain >= 0.02 && runtime < Duration::from_secs(600);
    Ok((
        passed,
        format!(
            "shift drop {:.1} pts (in-domain {:.3} -> target {:.3}); median gain {:+.1} pts \
             (source_only {:.3}, gues {:.3}); runtime incl. training {:.0} s of 600 s",
            100.0 * drop,
            fx.trained.heldout.acc,
            fx.trained.target.acc,
            100.0 * gain,
            median(source),
            median(gues),
            runtime.as_secs_f64()
        ),
    ))
}

fn criterion_8(fx: &Fixture) -> CriterionResult {
    let config = ExperimentConfig {
        sweep_modes: ["tent", "gues", "gues+tent"].map(String::from).to_vec(),
        sweep_seeds: SEEDS.to_vec(),
        ..fx.config.clone()
    };
    let points = batch_sweep(&config, &fx.trained.classifier, &fx.target, None).map_err(|e| e.to_string())?;
    let spreads: HashMap<AdaptMode, f64> = acc_spreads(&points).into_iter().collect();
    let tent = spreads[&AdaptMode::Tent];
    let gues = spreads[&AdaptMode::Gues];
    let combo = spreads[&AdaptMode::GuesTent];
    let by_size = |mode: AdaptMode| -> String {
        config
            .sweep_batch_sizes
            .iter()
            .map(|&bs| {
                let accs = points
                    .iter()
                    .filter(|p| p.mode == mode && p.batch_size == bs)
                    .map(|p| p.scores.acc)
                    .collect();
                format!("{bs}:{:.3}", median(accs))
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok((
        gues < tent && combo < tent,
        format!(
            "median ACC spread tent {tent:.3}, gues {gues:.3}, gues+tent {combo:.3}; \
             tent [{}] gues [{}] gues+tent [{}]",
            by_size(AdaptMode::Tent),
            by_size(AdaptMode::Gues),
            by_size(AdaptMode::GuesTent)
        ),
    ))
}

/// Shifted samples from streams the adaptation run never sees.
fn heldout_shifted(config: &ExperimentConfig, n: usize) -> Result<Vec<LabeledImage>, String> {
    let samples = generate_retinatoy(derive_seed(config.seed, 901), n, &config.grade_distribution).map_err(|e| e.to_string())?;
    let shift = config.shift();
    samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let image = quantized(&apply_shift(&s.image, &shift, derive_seed(902, i as u64))).map_err(|e| e.to_string())?;
            Ok(LabeledImage { image, grade: s.grade })
        })
        .collect()
}

fn losses_at(classifier: &SourceClassifier, images: &[Image], delta: &[f64], labels: &[usize]) -> Result<Vec<f64>, String> {
    let x = images_to_tensor(images).map_err(|e| e.to_string())?;
    let shifted = x.data().iter().zip(delta).map(|(a, d)| a + d).collect();
    let t = Tensor::new(x.shape(), shifted).map_err(|e| e.to_string())?;
    Ok(loss_and_input_grad(classifier, t, labels).map_err(|e| e.to_string())?.0)
}

fn criterion_9(fx: &Fixture) -> CriterionResult {
    let classifier = &fx.trained.classifier;
    let cfg = IterativeConfig::default();
    let probe = heldout_shifted(&fx.config, 20)?;
    let images: Vec<Image> = probe.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = probe.iter().map(|s| s.grade).collect();
    let (d0, dk) = optimize_unadversarial(&images, &labels, classifier, &cfg).map_err(|e| e.to_string())?;
    let before = losses_at(classifier, &images, &d0, &labels)?;
    let after = losses_at(classifier, &images, &dk, &labels)?;
    let decreased = before.iter().zip(&after).filter(|(b, a)| a < b).count();
    let ratio = decreased as f64 / before.len() as f64;

    let report = adapt_once(&fx.config, classifier, &fx.target, AdaptMode::Gues, fx.config.batch_size, 0)
        .map_err(|e| e.to_string())?;
    let generator = report.generator.ok_or("gues run returned no generator")?;
    let eval = heldout_shifted(&fx.config, 200)?;
    let images: Vec<Image> = eval.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = eval.iter().map(|s| s.grade).collect();
    let rows = compare_generative_vs_iterative(classifier, &generator, &images, &labels, &cfg, &SEEDS)
        .map_err(|e| e.to_string())?;
    let mut by_condition: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_condition.entry(r.condition).or_default().push(r.accuracy);
    }
    let plain = by_condition["plain"][0];
    let floor = plain - 0.005;
    let perturbed_ok = rows.iter().filter(|r| r.condition != "plain").all(|r| r.accuracy >= floor);
    let summary: Vec<String> = by_condition
        .iter()
        .map(|(c, v)| format!("{c} {:.3}", median(v.clone())))
        .collect();
    Ok((
        ratio >= 0.9 && perturbed_ok,
        format!(
            "K=20 descent lowered the loss on {decreased}/20 samples; accuracy over 200 samples x 5 seeds \
             (median): {}; every perturbed row >= plain - 0.5 pts: {perturbed_ok}",
            summary.join(", ")
        ),
    ))
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn run_all_subcommands(dir: &Path) -> Result<(), String> {
    let config = ExperimentConfig {
        out_dir: dir.to_path_buf(),
        source_size: 120,
        target_size: 48,
        heldout_size: 30,
        epochs: 2,
        batch_size: 16,
        sweep_batch_sizes: vec![4, 16],
        sweep_seeds: vec![0, 1],
        sweep_alphas: vec![0.5, 1.5],
        sweep_betas: vec![0.5, 1.0],
        ..ExperimentConfig::default()
    };
    let config_path = dir.join("config.json");
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).map_err(|e| e.to_string())?;
    let c = config_path.to_string_lossy().into_owned();
    let image = dir.join("data/target/000000.ppm").to_string_lossy().into_owned();
    let map = dir.join("saliency.pgm").to_string_lossy().into_owned();
    let invocations: Vec<Vec<&str>> = vec![
        vec!["gen-data"],
        vec!["train-source"],
        vec!["adapt", "--mode", "source_only"],
        vec!["adapt", "--mode", "gues"],
        vec!["adapt", "--mode", "gues+tent"],
        vec!["adapt", "--mode", "gues+shot_im"],
        vec!["sweep", "--axis", "batch"],
        vec!["sweep", "--axis", "alpha_beta", "--mode", "gues"],
        vec!["saliency", &image, &map],
    ];
    for args in invocations {
        let mut argv = vec!["gues", "--config", &c];
        argv.extend(&args);
        let cli = Cli::try_parse_from(&argv).map_err(|e| e.to_string())?;
        run(cli).map_err(|e| format!("{args:?}: {e}"))?;
    }
    Ok(())
}

fn criterion_10() -> CriterionResult {
    std::env::set_var("GUES_THREADS", "2");
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    run_all_subcommands(&a)?;
    run_all_subcommands(&b)?;
    let (fa, fb) = (files_under(&a), files_under(&b));
    let mut differing: Vec<&String> = fa
        .keys()
        .filter(|k| !k.ends_with("config.json") && fb.get(*k) != fa.get(*k))
        .collect();
    differing.extend(fb.keys().filter(|k| !fa.contains_key(*k)));
    let count = |ext: &str| fa.keys().filter(|k| k.ends_with(ext)).count();
    Ok((
        differing.is_empty() && count(".csv") > 0 && count(".ckpt") > 0,
        format!(
            "{} files compared ({} csv, {} ckpt, {} svg, {} images) across two runs; {} differ{}",
            fa.len(),
            count(".csv"),
            count(".ckpt"),
            count(".svg"),
            count(".ppm") + count(".pgm"),
            differing.len(),
            differing.first().map(|d| format!(", first {d}")).unwrap_or_default()
        ),
    ))
}

/// Passes batches through unchanged while logging what was handed out.
struct Recorder {
    inner: Stream<LabeledImage>,
    log: Rc<RefCell<Vec<(usize, Vec<u64>)>>>,
    calls_after_end: Rc<RefCell<usize>>,
    finished: bool,
}

fn fingerprint(image: &Image) -> u64 {
    image.data().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3))
}

impl Iterator for Recorder {
    type Item = Batch<LabeledImage>;

    fn next(&mut self) -> Option<Batch<LabeledImage>> {
        if self.finished {
            *self.calls_after_end.borrow_mut() += 1;
            return None;
        }
        let batch = self.inner.next();
        match &batch {
            Some(b) => self.log.borrow_mut().push((b.index, b.items.iter().map(|s| fingerprint(&s.image)).collect())),
            None => self.finished = true,
        }
        batch
    }
}

fn criterion_11(fx: &Fixture) -> CriterionResult {
    let target = &fx.target[..300];
    let batch_size = 16;
    let mut notes = Vec::new();
    let mut passed = true;
    for mode in [AdaptMode::Gues, AdaptMode::GuesTent, AdaptMode::Tent] {
        let log = Rc::new(RefCell::new(Vec::new()));
        let after_end = Rc::new(RefCell::new(0));
        let recorder = Recorder {
            inner: make_stream(target.to_vec(), batch_size, 3).map_err(|e| e.to_string())?,
            log: log.clone(),
            calls_after_end: after_end.clone(),
            finished: false,
        };
        let generator = initial_generator(target, 3).map_err(|e| e.to_string())?;
        let report = adapt_stream(&fx.config, &fx.trained.classifier, generator, recorder, mode, batch_size, 3)
            .map_err(|e| e.to_string())?;
        let log = log.borrow();
        let expected_batches = target.len().div_ceil(batch_size);
        let indices: Vec<usize> = log.iter().map(|(i, _)| *i).collect();
        let in_order = indices == (0..expected_batches).collect::<Vec<_>>();
        let scored: Vec<usize> = report.batches.iter().map(|b| b.batch_index).collect();
        let mut seen: Vec<u64> = log.iter().flat_map(|(_, f)| f.iter().copied()).collect();
        let mut all: Vec<u64> = target.iter().map(|s| fingerprint(&s.image)).collect();
        seen.sort_unstable();
        all.sort_unstable();
        let generator_order = report.gues.losses.iter().map(|l| l.batch_index).collect::<Vec<_>>();
        let generator_ok = !mode.uses_gues() || generator_order == indices;
        let ok = in_order && scored == indices && seen == all && generator_ok && *after_end.borrow() == 0;
        passed &= ok;
        notes.push(format!(
            "{mode}: {} batches pulled in order {in_order}, each item once {}, scored in arrival order {}",
            indices.len(),
            seen == all,
            scored == indices
        ));
    }
    Ok((passed, notes.join("; ")))
}

fn record(outcomes: &mut Vec<Outcome>, id: usize, title: &'static str, result: CriterionResult) {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    let o = Outcome {
        id,
        title,
        passed,
        detail,
    };
    println!("criterion {:>2} {} {}: {}", o.id, if o.passed { "PASS" } else { "FAIL" }, o.title, o.detail);
    outcomes.push(o);
}

fn main() {
    let mut outcomes = Vec::new();
    let saliency = |g: &gues_core::GrayImage| fine_grained_saliency(g);
    record(
        &mut outcomes,
        1,
        "saliency oracle equivalence",
        timed(Duration::from_secs(10), || verify::check_saliency_oracle(&saliency)),
    );
    record(
        &mut outcomes,
        2,
        "saliency analytic cases",
        from_check(verify::check_saliency_analytic(&saliency)),
    );
    record(&mut outcomes, 3, "gradient checks", criterion_3());
    record(&mut outcomes, 4, "analytic KL", from_check(verify::check_kl_analytic()));
    record(&mut outcomes, 5, "QWK and AVG", from_check(verify::check_metrics()));
    record(&mut outcomes, 10, "determinism", criterion_10());

    match fixture() {
        Ok(fx) => {
            println!(
                "trained source classifier: in-domain acc {:.3}, target acc {:.3} ({:.0} s)",
                fx.trained.heldout.acc,
                fx.trained.target.acc,
                fx.train_time.as_secs_f64()
            );
            record(&mut outcomes, 6, "identity initialization", criterion_6(&fx));
            record(&mut outcomes, 7, "adaptation gain", criterion_7(&fx));
            record(&mut outcomes, 8, "batch-size robustness", criterion_8(&fx));
            record(&mut outcomes, 9, "iterative baseline", criterion_9(&fx));
            record(&mut outcomes, 11, "single-pass online contract", criterion_11(&fx));
        }
        Err(e) => {
            for (id, title) in [
                (6, "identity initialization"),
                (7, "adaptation gain"),
                (8, "batch-size robustness"),
                (9, "iterative baseline"),
                (11, "single-pass online contract"),
            ] {
                record(&mut outcomes, id, title, Err(format!("fixture: {e}")));
            }
        }
    }

    outcomes.sort_by_key(|o| o.id);
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| format!("{} ({})", o.id, o.title)).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
