mod common;

use common::reference::{brute, labels, metric_case, random_sentence};
use iktn::metrics::{evaluate, read_predictions, write_predictions, SentencePrediction};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn two_hundred_random_sets_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..200 {
        let (pred, gold) = metric_case(&mut rng);
        let report = evaluate(&pred, &gold, &labels()).unwrap();
        let want = brute(&pred, &gold);
        for ((name, got), want) in report.columns().iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "case {case}: {name} {got} vs {want}");
        }
        assert!(report.f1_i <= report.f1_a + 1e-12, "case {case}");
    }
}

#[test]
fn perfect_predictions_score_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gold: Vec<SentencePrediction> = (0..5).map(|_| random_sentence(&mut rng, 8)).collect();
    let gold: Vec<SentencePrediction> = gold.into_iter().filter(|g| !g.ate_spans.is_empty() && !g.ote_spans.is_empty()).collect();
    assert!(!gold.is_empty());
    let r = evaluate(&gold, &gold, &labels()).unwrap();
    assert_eq!((r.f1_a, r.f1_o, r.acc_s, r.f1_i), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn prediction_file_round_trips_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let preds: Vec<SentencePrediction> = (0..20).map(|_| random_sentence(&mut rng, 9)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.jsonl");
    write_predictions(&path, &preds).unwrap();
    let back = read_predictions(&path).unwrap();
    assert_eq!(back, preds);
    let a = evaluate(&preds, &preds, &labels()).unwrap();
    let b = evaluate(&back, &preds, &labels()).unwrap();
    assert_eq!(a, b);
}
