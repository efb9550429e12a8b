use gues_core::checkpoint::{self, CLASSIFIER_MAGIC, GENERATOR_MAGIC};
use gues_core::classifier::SourceClassifier;
use gues_core::data::make_stream;
use gues_core::metrics::{confusion, qwk};
use gues_core::pnm::{self, Pnm};
use gues_core::Image;
use gues_tensor::{ParamStore, Tensor};
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = Image> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..=1.0, 3 * h * w).prop_map(move |data| Image::new(h, w, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ppm_round_trip_is_within_half_a_step(img in image_strategy()) {
        let Pnm::Rgb(back) = pnm::decode(&pnm::encode_ppm(&img)).unwrap() else {
            panic!("colour image decoded as gray");
        };
        prop_assert!(img.max_abs_diff(&back) <= 1.0 / 510.0 + 1e-15);
    }

    #[test]
    fn decoders_reject_garbage_without_panicking(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = pnm::decode(&bytes);
        let _ = checkpoint::decode(GENERATOR_MAGIC, &bytes);
    }

    #[test]
    fn checkpoint_round_trip_is_exact(values in prop::collection::vec(-1e6f64..1e6, 1..40)) {
        let mut store = ParamStore::new();
        let n = values.len();
        store.register("w", Tensor::new(&[n], values).unwrap());
        store.register("b", Tensor::new(&[1, 1], vec![f64::MIN_POSITIVE]).unwrap());
        let bytes = checkpoint::encode(GENERATOR_MAGIC, &store);
        let back = checkpoint::decode(GENERATOR_MAGIC, &bytes).unwrap();
        prop_assert_eq!(back.len(), 2);
        for ((name, t), (_, n2, t2)) in back.iter().zip(store.iter()) {
            prop_assert_eq!(name.as_str(), n2);
            prop_assert_eq!(t.shape(), t2.shape());
            prop_assert_eq!(t.data(), t2.data());
        }
        prop_assert!(checkpoint::decode(CLASSIFIER_MAGIC, &bytes).is_err());
    }

    #[test]
    fn kappa_never_exceeds_one(pairs in prop::collection::vec((0usize..5, 0usize..5), 2..60)) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let cm = confusion(&truth, &pred, 5).unwrap();
        if let Ok(k) = qwk(&cm) {
            prop_assert!(k <= 1.0 + 1e-12);
            if truth != pred {
                prop_assert!(k < 1.0);
            }
        }
    }

    #[test]
    fn streams_partition_their_items(n in 1usize..60, bs in 1usize..9, seed in any::<u64>()) {
        let batches: Vec<_> = make_stream((0..n).collect::<Vec<_>>(), bs, seed).unwrap().collect();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.items.clone()).collect();
        prop_assert!(batches.iter().enumerate().all(|(i, b)| b.index == i && b.items.len() <= bs));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn classifier_checkpoint_restores_predictions() {
    let model = SourceClassifier::new(3);
    let bytes = checkpoint::encode(CLASSIFIER_MAGIC, model.params());
    let mut other = SourceClassifier::new(99);
    other.load_params(checkpoint::decode(CLASSIFIER_MAGIC, &bytes).unwrap()).unwrap();
    let img = Image::filled(8, 8, [0.3, 0.2, 0.1]).unwrap();
    assert_eq!(model.predict(std::slice::from_ref(&img)).unwrap(), other.predict(&[img]).unwrap());
}
