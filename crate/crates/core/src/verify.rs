//! Self-checks run by `gues verify`: exact oracles, analytic cases,
//! gradient checks, identity initialization and determinism.

use gues_tensor::{derive_seed, grad_check_params, primitive_suite, Graph, ParamId, SeededRng, Tensor};

use crate::adapt::{adapt_stream, GuesConfig};
use crate::checkpoint::{self, CLASSIFIER_MAGIC, GENERATOR_MAGIC};
use crate::classifier::{train_source, SourceClassifier, TrainConfig};
use crate::data::{generate_retinatoy, make_stream, DEFAULT_GRADE_DISTRIBUTION};
use crate::error::Result;
use crate::image::{images_to_tensor, GrayImage, Image};
use crate::layers::Binding;
use crate::metrics::{avg_metric, qwk, ConfusionMatrix};
use crate::pipeline::{run_online, AdaptMode, LabeledImage, OnlineSettings};
use crate::saliency::{fine_grained_saliency, saliency_target, SaliencyMap, SALIENCY_SCALES};
use crate::vae::{gues_loss, kl_loss, recon_loss, GuesModel, LatentGaussian, Noise, VaeShape};

/// Maximum relative error accepted by the gradient checks.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, failures: Vec<String>, ok: impl Into<String>) -> Self {
        match failures.is_empty() {
            true => Check {
                name,
                passed: true,
                detail: ok.into(),
            },
            false => Check {
                name,
                passed: false,
                detail: failures.join("; "),
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One `PASS name: detail` or `FAIL name: detail` line per check.
    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect()
    }
}

/// Every check against the library's own saliency.
pub fn run_all() -> VerifyReport {
    run_with_saliency(&fine_grained_saliency)
}

/// Every check, with `saliency` standing in for the implementation under
/// test.
pub fn run_with_saliency(saliency: &dyn Fn(&GrayImage) -> SaliencyMap) -> VerifyReport {
    let checks = vec![
        check_saliency_oracle(saliency),
        check_saliency_analytic(saliency),
        check_primitive_gradients(),
        check_gues_gradients(),
        check_kl_analytic(),
        check_metrics(),
        check_identity_initialization(),
        check_determinism(),
    ];
    VerifyReport { checks }
}

fn failed(name: &'static str, err: crate::Error) -> Check {
    Check {
        name,
        passed: false,
        detail: format!("error: {err}"),
    }
}

/// Straightforward nested-loop saliency: clamp-to-edge indexing, per
/// scale the mean of centre-minus-neighbour differences, positive parts
/// summed over scales and divided by the number of scales.
pub fn naive_saliency(gray: &GrayImage) -> Vec<f64> {
    let (h, w) = (gray.height() as isize, gray.width() as isize);
    let at = |r: isize, c: isize| gray.get(r.clamp(0, h - 1) as usize, c.clamp(0, w - 1) as usize);
    let mut out = vec![0.0; (h * w) as usize];
    for r in 0..h {
        for c in 0..w {
            let centre = at(r, c);
            let mut total = 0.0;
            for &s in SALIENCY_SCALES.iter() {
                let s = s as isize;
                let mut sum = 0.0;
                let mut count = 0usize;
                for dr in -s..=s {
                    for dc in -s..=s {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        sum += centre - at(r + dr, c + dc);
                        count += 1;
                    }
                }
                let contrast = sum / count as f64;
                if contrast > 0.0 {
                    total += contrast;
                }
            }
            out[(r * w + c) as usize] = total / 3.0;
        }
    }
    out
}

fn random_gray(rng: &mut SeededRng, size: usize) -> GrayImage {
    GrayImage::raw(size, size, (0..size * size).map(|_| rng.uniform()).collect())
}

pub fn check_saliency_oracle(saliency: &dyn Fn(&GrayImage) -> SaliencyMap) -> Check {
    let mut rng = SeededRng::new(0x5a11);
    let mut failures = Vec::new();
    let sizes = std::iter::repeat(16).take(100).chain(std::iter::repeat(64).take(10));
    for (i, size) in sizes.enumerate() {
        let gray = random_gray(&mut rng, size);
        let got = saliency(&gray);
        let want = naive_saliency(&gray);
        let mismatches = got
            .values()
            .iter()
            .zip(&want)
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
        if got.values().len() != want.len() || mismatches > 0 {
            failures.push(format!("image {i} ({size}x{size}): {mismatches} pixels differ from the nested-loop oracle"));
        }
    }
    Check::new(
        "saliency-oracle-equivalence",
        failures,
        "bit-identical to the nested-loop oracle on 100 16x16 and 10 64x64 images",
    )
}

pub fn check_saliency_analytic(saliency: &dyn Fn(&GrayImage) -> SaliencyMap) -> Check {
    let mut failures = Vec::new();
    for v in [0.0, 0.37, 1.0] {
        let flat = saliency(&GrayImage::raw(12, 9, vec![v; 108]));
        if flat.values().iter().any(|&s| s != 0.0) {
            failures.push(format!("constant {v} image has nonzero saliency"));
        }
    }
    let mut spot = vec![0.0; 31 * 31];
    spot[15 * 31 + 15] = 1.0;
    let map = saliency(&GrayImage::raw(31, 31, spot));
    if map.get(15, 15) != 1.0 {
        failures.push(format!("bright pixel saliency {} != 1", map.get(15, 15)));
    }
    for (r, c) in [(14, 15), (16, 15), (15, 14), (15, 16)] {
        if map.get(r, c) != 0.0 {
            failures.push(format!("neighbour ({r}, {c}) saliency {} != 0", map.get(r, c)));
        }
    }
    Check::new("saliency-analytic-cases", failures, "constant images map to zero; isolated bright pixel is 1 with zero 4-neighbours")
}

pub fn check_primitive_gradients() -> Check {
    const NAME: &str = "primitive-gradients";
    match primitive_suite(1e-5, GRAD_TOL) {
        Ok(reports) => {
            let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
            let failures = reports
                .iter()
                .filter(|r| !r.passed())
                .map(|r| format!("{}: max rel error {:.3e}", r.label, r.max_rel_error()))
                .collect();
            Check::new(NAME, failures, format!("{} checks, worst rel error {worst:.2e}", reports.len()))
        }
        Err(e) => failed(NAME, e.into()),
    }
}

/// Up to `k` distinct indices below `n`, drawn from `rng`.
fn sample_indices(rng: &mut SeededRng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    while picked.len() < k {
        let i = rng.int_inclusive(0, n - 1);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Gradient of the combined generator loss on a 1x3x16x16 input with a
/// fixed noise draw, against central differences at sampled coordinates
/// of every parameter tensor.
pub fn gues_gradient_reports(per_tensor: usize, seed: u64) -> Result<Vec<gues_tensor::GradCheckReport>> {
    let shape = VaeShape::new(16, 16);
    let model = GuesModel::new_random(shape, seed)?;
    let mut rng = SeededRng::new(derive_seed(seed, 1));
    let image = Image::new(16, 16, (0..16 * 16 * 3).map(|_| rng.uniform()).collect())?;
    let x = images_to_tensor(std::slice::from_ref(&image))?;
    let target = images_to_tensor(&[saliency_target(&image)])?;
    let noise = Noise::Explicit(Tensor::from_fn(&[1, shape.latent_dim], |_| rng.normal()));
    let targets: Vec<(ParamId, Vec<usize>)> = model
        .param_ids()
        .into_iter()
        .map(|id| (id, sample_indices(&mut rng, model.params().get(id).numel(), per_tensor)))
        .collect();
    let loss = |g: &mut Graph, store: &gues_tensor::ParamStore| -> gues_tensor::Result<gues_tensor::Var> {
        let xv = g.constant(x.clone());
        let tv = g.constant(target.clone());
        let out = model
            .forward(g, &Binding::all(store), xv, &noise)
            .map_err(|e| gues_tensor::TensorError::Config(e.to_string()))?;
        let kl = kl_loss(g, out.q).map_err(|e| gues_tensor::TensorError::Config(e.to_string()))?;
        let mse = recon_loss(g, out.x_hat, tv).map_err(|e| gues_tensor::TensorError::Config(e.to_string()))?;
        gues_loss(g, kl, mse, 1.0, 1.0).map_err(|e| gues_tensor::TensorError::Config(e.to_string()))
    };
    Ok(grad_check_params(model.params(), &targets, loss, 1e-6, GRAD_TOL)?)
}

pub fn check_gues_gradients() -> Check {
    const NAME: &str = "gues-loss-gradients";
    match gues_gradient_reports(8, 17) {
        Ok(reports) => {
            let probed: usize = reports.iter().map(|r| r.entries.len()).sum();
            let excluded: usize = reports.iter().map(|r| r.excluded()).sum();
            let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
            let failures = reports
                .iter()
                .filter(|r| !r.passed())
                .map(|r| format!("{}: max rel error {:.3e}", r.label, r.max_rel_error()))
                .collect();
            Check::new(
                NAME,
                failures,
                format!("{probed} coordinates over {} tensors ({excluded} at kinks), worst rel error {worst:.2e}", reports.len()),
            )
        }
        Err(e) => failed(NAME, e),
    }
}

/// KL of a diagonal Gaussian batch, evaluated through the graph.
pub fn kl_value(mu: Tensor, log_var: Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let q = LatentGaussian {
        mu: g.constant(mu),
        log_var: g.constant(log_var),
    };
    let kl = kl_loss(&mut g, q)?;
    Ok(g.value(kl).data()[0])
}

pub fn check_kl_analytic() -> Check {
    const NAME: &str = "kl-analytic";
    let run = || -> Result<Vec<String>> {
        let mut failures = Vec::new();
        let zero = kl_value(Tensor::zeros(&[1, 10]), Tensor::zeros(&[1, 10]))?;
        if zero.abs() > 1e-12 {
            failures.push(format!("KL(0, 0) = {zero:e}"));
        }
        let unit = kl_value(Tensor::ones(&[1, 10]), Tensor::zeros(&[1, 10]))?;
        if (unit - 5.0).abs() > 1e-9 {
            failures.push(format!("KL(mu=1, d=10) = {unit}"));
        }
        let mut rng = SeededRng::new(0x6b1);
        let mut negative = 0;
        for _ in 0..1000 {
            let mu = Tensor::from_fn(&[1, 10], |_| rng.uniform_range(-3.0, 3.0));
            let lv = Tensor::from_fn(&[1, 10], |_| rng.uniform_range(-4.0, 4.0));
            if kl_value(mu, lv)? < 0.0 {
                negative += 1;
            }
        }
        if negative > 0 {
            failures.push(format!("{negative} of 1000 random inputs gave negative KL"));
        }
        Ok(failures)
    };
    match run() {
        Ok(f) => Check::new(NAME, f, "KL(0,0)=0, KL(mu=1,d=10)=5, nonnegative on 1000 random inputs"),
        Err(e) => failed(NAME, e),
    }
}

pub fn check_metrics() -> Check {
    const NAME: &str = "metrics-analytic";
    let run = || -> Result<Vec<String>> {
        let mut failures = Vec::new();
        let diag = ConfusionMatrix::from_counts(&[&[3, 0, 0], &[0, 2, 0], &[0, 0, 4]])?;
        let cases: [(&str, ConfusionMatrix, f64); 3] = [
            ("diagonal", diag, 1.0),
            ("[[1,1],[1,1]]", ConfusionMatrix::from_counts(&[&[1, 1], &[1, 1]])?, 0.0),
            ("[[0,2],[2,0]]", ConfusionMatrix::from_counts(&[&[0, 2], &[2, 0]])?, -1.0),
        ];
        for (label, cm, want) in cases {
            let got = qwk(&cm)?;
            if (got - want).abs() > 1e-9 {
                failures.push(format!("QWK {label} = {got}, expected {want}"));
            }
        }
        let avg = avg_metric(0.539, 0.601);
        if (avg - 0.570).abs() > 1e-9 {
            failures.push(format!("AVG(0.539, 0.601) = {avg}"));
        }
        Ok(failures)
    };
    match run() {
        Ok(f) => Check::new(NAME, f, "QWK of diagonal, uniform and anti-diagonal matrices; AVG of (0.539, 0.601)"),
        Err(e) => failed(NAME, e),
    }
}

fn toy_target(seed: u64, n: usize) -> Result<Vec<LabeledImage>> {
    Ok(generate_retinatoy(seed, n, &DEFAULT_GRADE_DISTRIBUTION)?
        .into_iter()
        .map(|s| LabeledImage {
            image: s.image,
            grade: s.grade,
        })
        .collect())
}

/// First-batch logits of `mode` on a small stream, with an identity
/// generator.
pub fn first_batch_logits(classifier: &SourceClassifier, samples: &[LabeledImage], mode: AdaptMode) -> Result<Tensor> {
    let config = GuesConfig {
        batch_size: samples.len(),
        ..GuesConfig::default()
    };
    let generator = GuesModel::new(VaeShape::new(samples[0].image.height(), samples[0].image.width()), 3)?;
    let stream = make_stream(samples.to_vec(), samples.len(), 0)?;
    let report = run_online(classifier, Some(generator), stream, &OnlineSettings::new(mode, config))?;
    Ok(report.logits.into_iter().next().expect("one batch"))
}

pub fn check_identity_initialization() -> Check {
    const NAME: &str = "identity-initialization";
    let run = || -> Result<Vec<String>> {
        let mut failures = Vec::new();
        let classifier = SourceClassifier::new(11);
        let samples = toy_target(5, 6)?;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        for (plain, with) in [(AdaptMode::SourceOnly, AdaptMode::Gues), (AdaptMode::Tent, AdaptMode::GuesTent)] {
            let a = first_batch_logits(&classifier, &samples, plain)?;
            let b = first_batch_logits(&classifier, &samples, with)?;
            if bits(&a) != bits(&b) {
                failures.push(format!("{with} first-batch logits differ from {plain}"));
            }
        }
        let generator = GuesModel::new(VaeShape::new(64, 64), 3)?;
        let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
        for (i, ex) in generator.generate(&images, &Noise::Seeded(9))?.iter().enumerate() {
            if ex.delta.iter().any(|&d| d != 0.0) || ex.x_hat != ex.x {
                failures.push(format!("sample {i}: zero-initialized generator is not the identity"));
            }
        }
        Ok(failures)
    };
    match run() {
        Ok(f) => Check::new(NAME, f, "gues == source_only and gues+tent == tent on the first batch, bit for bit"),
        Err(e) => failed(NAME, e),
    }
}

/// Checkpoint bytes and loss log of a short generator run plus a short
/// classifier fit.
fn deterministic_artifacts() -> Result<(Vec<u8>, String, Vec<u8>)> {
    let samples = toy_target(21, 8)?;
    let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let config = GuesConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        ..GuesConfig::default()
    };
    let stream = make_stream(images.clone(), 4, 4)?.map(|b| b.items);
    let (model, report) = adapt_stream(GuesModel::new_random(VaeShape::new(64, 64), 2)?, stream, config, |_, _| Ok(()))?;
    let mut classifier = SourceClassifier::new(8);
    let labels: Vec<usize> = samples.iter().map(|s| s.grade).collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    train_source(&mut classifier, &images, &labels, &cfg)?;
    Ok((
        checkpoint::encode(GENERATOR_MAGIC, model.params()),
        report.to_csv(),
        checkpoint::encode(CLASSIFIER_MAGIC, classifier.params()),
    ))
}

pub fn check_determinism() -> Check {
    const NAME: &str = "determinism";
    let run = || -> Result<Vec<String>> {
        let mut failures = Vec::new();
        let a = generate_retinatoy(4, 6, &DEFAULT_GRADE_DISTRIBUTION)?;
        let b = generate_retinatoy(4, 6, &DEFAULT_GRADE_DISTRIBUTION)?;
        if a != b {
            failures.push("dataset generation differs between runs".into());
        }
        let first = deterministic_artifacts()?;
        let second = deterministic_artifacts()?;
        if first.0 != second.0 {
            failures.push("generator checkpoint differs between runs".into());
        }
        if first.1 != second.1 {
            failures.push("generator loss log differs between runs".into());
        }
        if first.2 != second.2 {
            failures.push("classifier checkpoint differs between runs".into());
        }
        Ok(failures)
    };
    match run() {
        Ok(f) => Check::new(NAME, f, "data, generator and classifier artifacts reproduce byte for byte"),
        Err(e) => failed(NAME, e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::fine_grained_saliency_with_norm;

    #[test]
    fn oracle_agrees_on_a_small_case() {
        let g = GrayImage::raw(5, 5, (0..25).map(|i| ((i * 7) % 11) as f64 / 10.0).collect());
        let a = fine_grained_saliency(&g);
        assert_eq!(a.values(), naive_saliency(&g).as_slice());
    }

    #[test]
    fn tampered_normalization_is_caught_by_name() {
        let tampered = |g: &GrayImage| fine_grained_saliency_with_norm(g, 2.0);
        let check = check_saliency_oracle(&tampered);
        assert!(!check.passed);
        assert_eq!(check.name, "saliency-oracle-equivalence");
        assert!(check_saliency_analytic(&tampered).detail.contains("bright pixel"));
    }

    #[test]
    fn kl_and_metric_cases() {
        assert!(check_kl_analytic().passed);
        assert!(check_metrics().passed);
    }
}
