mod common;

use common::random_model;
use mqa::data::ImageFeatureStore;
use mqa::model::EncodedExample;
use mqa::nn;
use mqa::train::{sgd_update, EarlyStopping};
use mqa::{checkpoint, Variant};
use proptest::prelude::*;

fn store(vectors: &[[f64; 3]]) -> ImageFeatureStore {
    let mut s = ImageFeatureStore::new(3);
    for (i, v) in vectors.iter().enumerate() {
        s.insert(format!("i{i}"), v.to_vec()).unwrap();
    }
    s
}

fn examples(qs: &[Vec<usize>], answers: &[Vec<usize>], n_images: usize) -> Vec<EncodedExample> {
    qs.iter()
        .zip(answers)
        .enumerate()
        .map(|(i, (q, a))| EncodedExample {
            image_id: format!("i{}", i % n_images),
            question: q.clone(),
            answer: a.clone(),
        })
        .collect()
}

fn ids(max: usize, len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2..max, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn avg_question_ignores_token_order(seed in any::<u64>(), q in ids(9, 1..7), rot in 0usize..7) {
        let m = random_model(seed, 9, Variant::AvgQuestion, 1.0);
        let mut p = q.clone();
        p.rotate_left(rot % q.len());
        p.reverse();
        let (a, b) = (m.encode_question(&q).unwrap(), m.encode_question(&p).unwrap());
        let (pa, _) = m.answer_step(&a, Some(&[0.2, 0.1, -0.4]), &m.zero_state(), 0).unwrap();
        let (pb, _) = m.answer_step(&b, Some(&[0.2, 0.1, -0.4]), &m.zero_state(), 0).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn blind_metrics_ignore_which_image_is_which(seed in any::<u64>(), q in prop::collection::vec(ids(9, 1..5), 4), a in prop::collection::vec(ids(9, 1..4), 4)) {
        let m = random_model(seed, 9, Variant::Blind, 1.0);
        let data = examples(&q, &a, 3);
        let s1 = store(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let s2 = store(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let r1 = mqa::eval::teacher_forced(&m, &data, &s1).unwrap();
        let r2 = mqa::eval::teacher_forced(&m, &data, &s2).unwrap();
        prop_assert_eq!(r1, r2);
    }

    #[test]
    fn mean_loss_is_the_training_objective(seed in any::<u64>(), v in 0usize..5, q in prop::collection::vec(ids(8, 1..5), 3), a in prop::collection::vec(ids(8, 1..4), 3)) {
        let m = random_model(seed, 8, Variant::ALL[v], 0.8);
        let data = examples(&q, &a, 2);
        let s = store(&[[0.5, -0.5, 0.1], [0.0, 0.3, 0.9]]);
        let objective: f64 = data.iter().map(|e| m.forward(e, &s).unwrap().loss).sum();
        let positions: usize = data.iter().map(|e| e.target_len()).sum();
        let loss = mqa::eval::mean_loss(&m, &data, &s).unwrap();
        prop_assert!((loss - objective / positions as f64).abs() <= 1e-12);
        let wer = mqa::eval::word_error_rate(&m, &data, &s).unwrap();
        prop_assert!((0.0..=1.0).contains(&wer));
    }

    #[test]
    fn early_stopping_best_is_never_beaten_earlier(losses in prop::collection::vec(0.0f64..10.0, 1..30), patience in 1usize..5) {
        let mut es = EarlyStopping::new(patience);
        let mut seen = Vec::new();
        for (e, &l) in losses.iter().enumerate() {
            seen.push(l);
            let stop = es.observe(e, l).stop;
            let (be, bl) = es.best().unwrap();
            prop_assert!(seen.iter().all(|&x| x >= bl));
            prop_assert_eq!(seen.iter().position(|&x| x == bl), Some(be));
            if stop {
                prop_assert_eq!(e - be, patience);
                break;
            }
        }
    }
}

/// One update of the tied model moves the embedding by the sum of what the
/// untied model would apply to its embedding and its decoder matrix.
#[test]
fn tws_update_applies_every_use_site_once() {
    let mut tied = random_model(3, 9, Variant::Complete, 0.5);
    let mut free = tied.clone();
    free.config.variant = Variant::NoTws;
    free.params.head.free_weights = Some(tied.params.embedding.weights.clone());
    let s = store(&[[0.4, -0.2, 0.7]]);
    let ex = EncodedExample {
        image_id: "i0".into(),
        question: vec![3, 4, 5],
        answer: vec![6, 7],
    };
    let mut g_tied = nn::backward(&tied.params, &tied.forward(&ex, &s).unwrap(), 1.0).unwrap();
    let mut g_free = nn::backward(&free.params, &free.forward(&ex, &s).unwrap(), 1.0).unwrap();
    let before = tied.params.embedding.weights.clone();
    sgd_update(&mut tied, &mut g_tied, 0.1, f64::INFINITY).unwrap();
    sgd_update(&mut free, &mut g_free, 0.1, f64::INFINITY).unwrap();
    let head_delta: Vec<f64> = free
        .params
        .head
        .free_weights
        .as_ref()
        .unwrap()
        .data()
        .iter()
        .zip(before.data())
        .map(|(a, b)| a - b)
        .collect();
    for (k, ((t, f), h)) in tied
        .params
        .embedding
        .weights
        .data()
        .iter()
        .zip(free.params.embedding.weights.data())
        .zip(&head_delta)
        .enumerate()
    {
        let expected = f + h;
        assert!((t - expected).abs() < 1e-12, "entry {k}: {t} vs {expected}");
    }
}

#[test]
fn same_lstms_has_one_cell() {
    let same = random_model(0, 9, Variant::SameLstms, 0.1);
    let complete = random_model(0, 9, Variant::Complete, 0.1);
    let cell = 4 * (5 * 4 + 5 * 5 + 5);
    assert_eq!(complete.parameter_count() - same.parameter_count(), cell);
    assert!(same
        .params
        .tensors()
        .iter()
        .any(|t| t.name.starts_with("lstm_shared.")));
    let bytes = checkpoint::to_bytes(&same);
    assert_eq!(checkpoint::from_bytes(&bytes).unwrap(), same);
}
