use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdforge::metrics::{cos, cos_checked, mse, rank_scores, score_predictions};
use rdforge::{GlossEntry, Task};

fn brute_force_rank(preds: &[Vec<f64>], refs: &[Vec<f64>]) -> Vec<f64> {
    let c = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let n = preds.len();
    (0..n)
        .map(|i| {
            let own = c(&preds[i], &refs[i]);
            let mut k = 0;
            for j in 0..n {
                if j != i && c(&preds[i], &refs[j]) > own {
                    k += 1;
                }
            }
            k as f64 / (n - 1) as f64
        })
        .collect()
}

fn random_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn mse_examples() {
    assert_eq!(mse(&[0.5, 2.0], &[0.5, 2.0]).unwrap(), 0.0);
    assert_eq!(mse(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
    assert!((mse(&[0.3, -0.1], &[0.1, 0.2]).unwrap() - 0.065).abs() < 1e-15);
    assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn cos_examples() {
    assert!((cos(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cos(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!((cos(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
    assert_eq!(cos_checked(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), None);
    assert_eq!(cos(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn cos_is_scale_invariant(u in prop::collection::vec(-3.0f64..3.0, 4), v in prop::collection::vec(-3.0f64..3.0, 4),
                              a in 0.01f64..100.0, b in 0.01f64..100.0) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let su: Vec<f64> = u.iter().map(|x| a * x).collect();
        let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
        prop_assert!((cos(&su, &sv).unwrap() - cos(&u, &v).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn rank_matches_double_loop_exactly() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds = random_vecs(&mut rng, 50, 16);
        let refs = random_vecs(&mut rng, 50, 16);
        assert_eq!(rank_scores(&preds, &refs).unwrap(), brute_force_rank(&preds, &refs));
    }
}

#[test]
fn rank_extremes() {
    let refs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    assert_eq!(rank_scores(&refs, &refs).unwrap(), vec![0.0; 3]);
    // item 0 predicts orthogonal to its own reference but along both others
    let refs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]];
    let preds = vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    assert_eq!(rank_scores(&preds, &refs).unwrap()[0], 1.0);
    // ties do not count
    assert_eq!(rank_scores(&preds, &refs).unwrap()[1], 0.0);
    assert!(rank_scores(&preds[..1], &refs[..1]).is_err());
}

fn entry(id: &str, lang: &str, sgns: Option<Vec<f64>>) -> GlossEntry {
    let mut e = GlossEntry::new(id, "a gloss", lang);
    e.sgns = sgns;
    e
}

#[test]
fn report_groups_by_language_and_skips_missing_tasks() {
    let entries = vec![
        entry("1", "en", Some(vec![1.0, 0.0])),
        entry("2", "en", Some(vec![0.0, 1.0])),
        entry("3", "fr", Some(vec![1.0, 1.0])),
    ];
    let preds = vec![
        vec![vec![1.0, 0.0], vec![0.0]],
        vec![vec![0.0, 0.0], vec![0.0]],
        vec![vec![2.0, 2.0], vec![0.0]],
    ];
    let report = score_predictions(&entries, &preds, &[Task::Sgns, Task::Char]).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.zero_norm_warnings, 1);
    let en = &report.rows[0];
    assert_eq!((en.language.as_str(), en.task.as_str(), en.count), ("en", "sgns", 2));
    assert!((en.mse - 0.25).abs() < 1e-15);
    assert!((en.cos - 0.5).abs() < 1e-15);
    assert_eq!(report.rows[1].rank, None);
    assert_eq!(report.total_count("sgns"), 3);
    let text = report.to_text();
    assert!(text.lines().next().unwrap().starts_with("language"));
    assert!(report.to_csv().contains("en,sgns,mse,0.25"));
    assert_eq!(report.to_json().unwrap(), score_predictions(&entries, &preds, &[Task::Sgns, Task::Char]).unwrap().to_json().unwrap());
    assert!(score_predictions(&[], &[], &[Task::Sgns]).is_err());
}
