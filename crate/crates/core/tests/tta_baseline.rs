use gues_core::baseline::{
    compare_generative_vs_iterative, initial_delta, optimize_unadversarial, unadv_step, IterativeConfig,
};
use gues_core::classifier::{softmax_rows, entropy, SourceClassifier};
use gues_core::data::{generate_retinatoy, DEFAULT_GRADE_DISTRIBUTION};
use gues_core::tta::{tent_step, shot_im_step, TtaMethod, TtaState};
use gues_core::vae::{GuesModel, VaeShape};
use gues_core::Image;
use gues_tensor::{ParamStore, SeededRng};

fn images(seed: u64, n: usize, side: usize) -> Vec<Image> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| Image::new(side, side, (0..3 * side * side).map(|_| rng.uniform()).collect()).unwrap())
        .collect()
}

fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

fn snapshot(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn changed(before: &[(String, Vec<u64>)], after: &[(String, Vec<u64>)]) -> Vec<String> {
    before
        .iter()
        .zip(after)
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.clone())
        .collect()
}

#[test]
fn tent_descends_entropy_and_touches_only_norm_affine() {
    let batch = images(1, 8, 16);
    let mut model = SourceClassifier::new(2);
    let before = snapshot(model.params());
    let norm: Vec<String> = model.norm_affine_ids().into_iter().map(|id| model.params().name(id).to_string()).collect();
    let mut state = TtaState::new(TtaMethod::Tent, &model, 0.05, 0.9).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| tent_step(&mut model, &batch, &mut state).unwrap().loss).collect();
    for pair in moving_average(&losses, 10).windows(2) {
        assert!(pair[1] <= pair[0] + 1e-12, "{pair:?}");
    }
    let moved = changed(&before, &snapshot(model.params()));
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|n| norm.contains(n)), "{moved:?}");
}

#[test]
fn shot_im_never_moves_the_head() {
    let batch = images(3, 8, 16);
    let mut model = SourceClassifier::new(4);
    let head: Vec<String> = model.head_ids().into_iter().map(|id| model.params().name(id).to_string()).collect();
    let before = snapshot(model.params());
    let mut state = TtaState::new(TtaMethod::ShotIm, &model, 0.05, 0.9).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| shot_im_step(&mut model, &batch, &mut state).unwrap().loss).collect();
    for pair in moving_average(&losses, 10).windows(2) {
        assert!(pair[1] <= pair[0] + 1e-12, "{pair:?}");
    }
    let moved = changed(&before, &snapshot(model.params()));
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|n| !head.contains(n)), "{moved:?}");
    assert!(shot_im_step(&mut model, &batch[..1], &mut state).is_err());
}

#[test]
fn frozen_prediction_ignores_batch_composition() {
    let batch = images(5, 4, 16);
    let model = SourceClassifier::new(6);
    let all = model.predict(&batch).unwrap();
    for (i, img) in batch.iter().enumerate() {
        let alone = model.predict(std::slice::from_ref(img)).unwrap();
        assert_eq!(alone.data(), &all.data()[i * 5..(i + 1) * 5]);
    }
    for p in softmax_rows(&all) {
        let h = entropy(&p).unwrap();
        assert!((0.0..=5f64.ln() + 1e-12).contains(&h));
    }
}

#[test]
fn iterative_steps_move_by_alpha_and_compose() {
    let batch = images(7, 3, 16);
    let labels = [0, 2, 4];
    let model = SourceClassifier::new(8);
    let cfg = IterativeConfig {
        iterations: 1,
        ..IterativeConfig::default()
    };
    let len = 3 * 16 * 16;
    let start: Vec<f64> = (0..3).flat_map(|i| initial_delta(&cfg, i, len)).collect();
    let stepped = unadv_step(&batch, &start, &model, &labels, &cfg).unwrap();
    for (a, b) in start.iter().zip(&stepped) {
        let d = (b - a).abs();
        assert!(d == 0.0 || (d - cfg.step_alpha).abs() < 1e-15, "{d}");
    }
    let (d0, d1) = optimize_unadversarial(&batch, &labels, &model, &cfg).unwrap();
    assert_eq!(d0, start);
    assert_eq!(d1, stepped);

    let clamped = IterativeConfig {
        iterations: 5,
        epsilon: Some(0.01),
        ..IterativeConfig::default()
    };
    let (_, d) = optimize_unadversarial(&batch, &labels, &model, &clamped).unwrap();
    assert!(d.iter().all(|v| v.abs() <= 0.01));
    assert!(IterativeConfig { iterations: 0, ..cfg }.validate().is_err());
}

#[test]
fn identity_generator_matches_plain_accuracy() {
    let samples = generate_retinatoy(9, 12, &DEFAULT_GRADE_DISTRIBUTION).unwrap();
    let imgs: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.grade).collect();
    let cfg = IterativeConfig {
        iterations: 2,
        ..IterativeConfig::default()
    };
    let rows = compare_generative_vs_iterative(
        &SourceClassifier::new(1),
        &GuesModel::new(VaeShape::new(64, 64), 1).unwrap(),
        &imgs,
        &labels,
        &cfg,
        &[0, 1],
    )
    .unwrap();
    assert_eq!(rows.len(), 6);
    for pair in rows.chunks(3) {
        assert_eq!(pair[0].condition, "plain");
        assert_eq!(pair[2].condition, "gues");
        assert_eq!(pair[0].accuracy, pair[2].accuracy);
    }
}
