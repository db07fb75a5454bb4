use std::collections::BTreeSet;

use chrono::{Days, NaiveDate};
use ehrseq::corpus::{generate_synthetic_corpus, Event, Gender, GeneratorConfig, IcdCode, PatientHistory, Vocabulary};
use ehrseq::embedding::PoolingStrategy;
use ehrseq::encoder::ModelConfig;
use ehrseq::evaluation::{
    ablation_suite, assign_folds, evaluate_visit_prediction, mean_std, next_code_accuracy, precision_at_k,
    split_final_visit, top_k, AblationVariant, CategoryMap, FrequencyScorer, MostCommon, Oracle, Previous,
    VisitScorer,
};
use ehrseq::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize, seed: u64) -> Vec<PatientHistory> {
    generate_synthetic_corpus(
        seed,
        &GeneratorConfig {
            n_patients: n,
            n_codes: 40,
            ..Default::default()
        },
    )
    .unwrap()
}

/// Brute force: sort all (score, id) pairs, take k, count overlap.
fn brute_precision(scores: &[f64], actual: &BTreeSet<usize>, k: usize) -> f64 {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let hits = ids.iter().take(k).filter(|i| actual.contains(i)).count();
    hits as f64 / k.min(actual.len()) as f64
}

#[test]
fn precision_at_k_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let c = rng.random_range(1..30);
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..c).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let m = rng.random_range(1..=c);
        let actual: BTreeSet<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let k = rng.random_range(1..=c + 3);
        let got = precision_at_k(&scores, &actual, k).unwrap();
        assert_eq!(got, brute_precision(&scores, &actual, k));
        assert!((0.0..=1.0).contains(&got));
    }
    assert_eq!(precision_at_k(&[1.0, 2.0], &BTreeSet::new(), 1), None);
}

#[test]
fn precision_examples() {
    // top_5 = {0..5}, actual = {0, 1, 9}.
    let scores: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
    let actual: BTreeSet<usize> = [0, 1, 9].into();
    assert_eq!(precision_at_k(&scores, &actual, 5), Some(2.0 / 3.0));
    assert_eq!(precision_at_k(&scores, &[2, 3].into(), 5), Some(1.0));
    assert_eq!(top_k(&[0.5, 0.9, 0.5, 0.1], 3), vec![1, 0, 2]);
}

#[test]
fn hit_count_non_decreasing_in_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let scores: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
        let actual: BTreeSet<usize> = (0..4).map(|_| rng.random_range(0..15)).collect();
        let mut last = 0;
        for k in 1..=15 {
            let hits = top_k(&scores, k).iter().filter(|i| actual.contains(i)).count();
            assert!(hits >= last);
            last = hits;
        }
    }
}

#[test]
fn random_scorer_expectation_is_k_over_c() {
    // Exact expectation over all C! rankings is k/C for a singleton target;
    // enumerate every position of the target in the ranking.
    let c = 8;
    let k = 5;
    let mut total = 0.0;
    for rank in 0..c {
        let scores: Vec<f64> = (0..c).map(|i| if i == 0 { (c - rank) as f64 - 0.5 } else { (c - i) as f64 }).collect();
        let target: BTreeSet<usize> = [0].into();
        total += precision_at_k(&scores, &target, k).unwrap();
    }
    assert!((total / c as f64 - k as f64 / c as f64).abs() < 1e-12);
}

#[test]
fn previous_accuracy_equals_direct_count() {
    let ps = corpus(400, 2);
    let ths = [2, 4, 8];
    let r = next_code_accuracy(&Previous, &ps, &ths).unwrap();
    for th in ths {
        let eligible: Vec<&PatientHistory> = ps.iter().filter(|p| p.events.len() >= th).collect();
        let same = eligible
            .iter()
            .filter(|p| p.events[th - 1].code == p.events[th - 2].code)
            .count();
        let cell = r.cell(&format!("th={th}")).unwrap();
        assert_eq!(cell.count, eligible.len());
        assert_eq!(cell.mean, same as f64 / eligible.len() as f64);
    }
}

#[test]
fn oracle_and_most_common() {
    let ps = corpus(200, 4);
    let r = next_code_accuracy(&Oracle::new(&ps), &ps, &[2, 4, 8]).unwrap();
    assert!(r.cells.iter().all(|c| c.mean == 1.0));
    let mc = MostCommon::fit(&ps).unwrap();
    let r = next_code_accuracy(&mc, &ps, &[4]).unwrap();
    assert!(r.cells[0].mean < 0.5);
}

fn day(i: u64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + Days::new(i)
}

#[test]
fn final_visit_split() {
    let ev = |d, c: &str| Event {
        date: day(d),
        code: IcdCode::parse(c).unwrap(),
    };
    let p = PatientHistory::new("p", Gender::Male, 30, vec![ev(0, "A01"), ev(3, "B01"), ev(3, "C01")]);
    let (prefix, target) = split_final_visit(&p).unwrap();
    assert_eq!(prefix.events.len(), 1);
    assert_eq!(target.iter().map(IcdCode::as_str).collect::<Vec<_>>(), ["B01", "C01"]);
    let single = PatientHistory::new("q", Gender::Male, 30, vec![ev(0, "A01"), ev(0, "B01")]);
    assert!(split_final_visit(&single).is_none());
}

#[test]
fn folds_are_a_seeded_partition() {
    let a = assign_folds(103, 10, 5);
    let mut sizes = [0; 10];
    a.iter().for_each(|&f| sizes[f] += 1);
    assert!(sizes.iter().all(|&s| s == 10 || s == 11));
    assert_eq!(a, assign_folds(103, 10, 5));
    assert_ne!(a, assign_folds(103, 10, 6));
}

/// Scores exactly the categories of each patient's held-back final visit.
struct TargetOracle<'a> {
    full: &'a [PatientHistory],
    cmap: &'a CategoryMap,
}

impl VisitScorer for TargetOracle<'_> {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn fit(&mut self, _: &[PatientHistory], _: &[BTreeSet<usize>]) -> Result<()> {
        Ok(())
    }

    fn score(&self, inputs: &[PatientHistory]) -> Result<Vec<Vec<f64>>> {
        Ok(inputs
            .iter()
            .map(|p| {
                let full = self.full.iter().find(|f| f.patient_id == p.patient_id).unwrap();
                let (_, target) = split_final_visit(full).unwrap();
                let mut s = vec![0.0; self.cmap.n_slots()];
                for c in target {
                    s[self.cmap.category_of(&c)] = 1.0;
                }
                s
            })
            .collect())
    }
}

#[test]
fn concentrated_scorer_is_perfect_and_fold_stats_recompute() {
    let ps = corpus(300, 6);
    let v = Vocabulary::build(&ps).unwrap();
    let cmap = CategoryMap::prefix3(&v);
    let mut oracle = TargetOracle { full: &ps, cmap: &cmap };
    let r = evaluate_visit_prediction(&mut oracle, &ps, &cmap, &[5, 10, 20, 30], 10, 1).unwrap();
    assert!(r.cells.iter().all(|c| c.mean == 1.0 && c.std == Some(0.0)));

    let mut freq = FrequencyScorer::new(&cmap);
    let r = evaluate_visit_prediction(&mut freq, &ps, &cmap, &[5], 10, 1).unwrap();
    let cell = r.cell("k=5").unwrap();
    assert_eq!(cell.folds.len(), 10);
    let (m, s) = mean_std(&cell.folds);
    let direct_mean = cell.folds.iter().sum::<f64>() / 10.0;
    let direct_var = cell.folds.iter().map(|f| (f - direct_mean).powi(2)).sum::<f64>() / 9.0;
    assert!((m - direct_mean).abs() < 1e-15 && (cell.mean - direct_mean).abs() < 1e-15);
    assert!((s.unwrap() - direct_var.sqrt()).abs() < 1e-12);
    assert!(cell.count > 0);
}

#[test]
fn ablation_single_variant_and_determinism() {
    let ps = corpus(80, 8);
    let v = Vocabulary::build(&ps).unwrap();
    let cmap = CategoryMap::prefix3(&v);
    let base = ModelConfig {
        d: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 24,
        epochs: 1,
        ..ModelConfig::desk(v.len())
    };
    let variant = AblationVariant {
        pooling: PoolingStrategy::ConcatMeanMax,
        positional: false,
        demographics: true,
    };
    let one = ablation_suite(&ps, &v, &base, &[variant], &cmap, &[5], 3, 9, 10.0);
    assert_eq!(one.len(), 1);
    let r = one[0].1.as_ref().unwrap();
    assert_eq!(r.variant, "concat_mean_max_wo_positional");
    let two = ablation_suite(&ps, &v, &base, &[variant, variant], &cmap, &[5], 3, 9, 10.0);
    assert_eq!(two[0].1.as_ref().unwrap(), two[1].1.as_ref().unwrap());
    assert_eq!(two[0].1.as_ref().unwrap(), r);
}

#[test]
fn ablation_without_demographics_keeps_sample_count() {
    let ps = corpus(60, 10);
    let v = Vocabulary::build(&ps).unwrap();
    let cmap = CategoryMap::prefix3(&v);
    let base = ModelConfig {
        d: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 24,
        epochs: 1,
        ..ModelConfig::desk(v.len())
    };
    let variants: Vec<AblationVariant> = [true, false]
        .into_iter()
        .map(|demographics| AblationVariant {
            pooling: PoolingStrategy::Cls,
            positional: true,
            demographics,
        })
        .collect();
    let out = ablation_suite(&ps, &v, &base, &variants, &cmap, &[5], 2, 1, 10.0);
    let counts: Vec<usize> = out.iter().map(|(_, r)| r.as_ref().unwrap().cells[0].count).collect();
    assert_eq!(counts[0], counts[1]);
    assert_eq!(out[1].1.as_ref().unwrap().variant, "cls_wo_gender_age");
}

#[test]
fn ablation_failure_is_isolated() {
    let ps = corpus(60, 12);
    let v = Vocabulary::build(&ps).unwrap();
    let cmap = CategoryMap::prefix3(&v);
    // Three heads do not divide d=8, so every training fails but a result
    // slot is still produced per variant.
    let base = ModelConfig {
        d: 8,
        n_heads: 3,
        ..ModelConfig::desk(v.len())
    };
    let out = ablation_suite(&ps, &v, &base, &AblationVariant::grid(), &cmap, &[5], 2, 1, 10.0);
    assert_eq!(out.len(), 8);
    assert!(out.iter().all(|(_, r)| r.is_err()));
}
