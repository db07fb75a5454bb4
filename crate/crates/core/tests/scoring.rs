use std::collections::BTreeMap;

use ehrseq::corpus::{
    generate_synthetic_corpus, generate_synthetic_insurance, ApplicationRecord, Gender, GeneratorConfig, IcdCode,
    InsuranceConfig, PatientHistory, Vocabulary,
};
use ehrseq::embedding::{average_group_embedding, GroupAverages, PoolingStrategy};
use ehrseq::encoder::{EncoderModel, ModelConfig};
use ehrseq::scoring::{
    assemble_features, fit_ridge, fit_scoring, monthly_auc, psi, psi_of_proportions, ridge_fit, roc_auc,
    split_by_month, BlockKind, EmbeddingSource, FeatureSchema, ScoreDistribution, ScoringArtifact, Scheme,
    LAMBDA_GRID,
};
use ehrseq::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gaussian elimination with partial pivoting.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn random_problem(n: usize, p: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * p).map(|i| rng.random::<f64>() * (1 + i % p) as f64 - 0.3).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    (x, y)
}

#[test]
fn ridge_matches_augmented_normal_equations() {
    let (n, p) = (60, 7);
    for (seed, lambda) in [(1, 0.01), (2, 1.0), (3, 37.0)] {
        let (x, y) = random_problem(n, p, seed);
        let sol = fit_ridge(&x, n, p, &y, 1, lambda).unwrap();
        // Oracle: standardize by hand and solve for [intercept, w] with the
        // intercept unpenalized.
        let mean: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64).collect();
        let sd: Vec<f64> = (0..p)
            .map(|j| ((0..n).map(|i| (x[i * p + j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
            .collect();
        let row = |i: usize| -> Vec<f64> {
            std::iter::once(1.0).chain((0..p).map(|j| (x[i * p + j] - mean[j]) / sd[j])).collect()
        };
        let mut a = vec![vec![0.0; p + 1]; p + 1];
        let mut b = vec![0.0; p + 1];
        for i in 0..n {
            let r = row(i);
            for u in 0..=p {
                b[u] += r[u] * y[i];
                for v in 0..=p {
                    a[u][v] += r[u] * r[v];
                }
            }
        }
        for (u, a_row) in a.iter_mut().enumerate().skip(1) {
            a_row[u] += lambda;
        }
        let w = dense_solve(a, b);
        assert!((w[0] - sol.intercepts[0]).abs() < 1e-8);
        for j in 0..p {
            assert!((w[j + 1] - sol.weights[j]).abs() < 1e-8, "weight {j}: {} vs {}", w[j + 1], sol.weights[j]);
        }
    }
}

#[test]
fn ridge_recovers_linear_data_and_shrinks() {
    let (n, p) = (50, 3);
    let (x, _) = random_problem(n, p, 9);
    let truth = [1.5, -2.0, 0.25];
    let y: Vec<f64> = (0..n)
        .map(|i| 0.7 + (0..p).map(|j| truth[j] * x[i * p + j]).sum::<f64>())
        .collect();
    let sol = fit_ridge(&x, n, p, &y, 1, 1e-10).unwrap();
    for j in 0..p {
        // Back to raw-feature scale.
        assert!((sol.weights[j] / sol.stds[j] - truth[j]).abs() < 1e-6);
    }
    let fitted = sol.predict(&x).unwrap();
    assert!(fitted.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-6));

    let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
    let m = ridge_fit(&x, n, &labels, 1e9, "h", "p").unwrap();
    let mean = labels.iter().map(|&l| l as f64).sum::<f64>() / n as f64;
    assert!(m.weights.iter().all(|w| w.abs() < 1e-6));
    assert!(m.predict(&x, "h").unwrap().iter().all(|s| (s - mean).abs() < 1e-6));
}

#[test]
fn ridge_predict_contracts() {
    let (n, p) = (30, 4);
    let (x, _) = random_problem(n, p, 4);
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let m = ridge_fit(&x, n, &labels, 1.0, "schema-a", "months 0-5").unwrap();
    assert!(matches!(m.predict(&x, "schema-b"), Err(Error::SchemaMismatch { .. })));
    let mut dup = x[..p].to_vec();
    dup.extend_from_slice(&x[..p]);
    let s = m.predict(&dup, "schema-a").unwrap();
    assert_eq!(s[0], s[1]);
    let mut zero = m.clone();
    zero.weights.iter_mut().for_each(|w| *w = 0.0);
    assert!(zero.predict(&x, "schema-a").unwrap().iter().all(|&v| v == zero.intercept));
    assert!(matches!(ridge_fit(&x, n, &vec![1; n], 1.0, "s", "p"), Err(Error::SingleClass(1))));
    assert!(ridge_fit(&x, n, &labels, 0.0, "s", "p").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ridge_invariant_to_affine_column_rescaling(seed in any::<u64>(), col in 0usize..4, a in 0.1f64..50.0, b in -20.0f64..20.0) {
        let (n, p) = (40, 4);
        let (x, y) = random_problem(n, p, seed);
        let mut x2 = x.clone();
        for i in 0..n {
            x2[i * p + col] = a * x2[i * p + col] + b;
        }
        let s1 = fit_ridge(&x, n, p, &y, 1, 0.5).unwrap().predict(&x).unwrap();
        let s2 = fit_ridge(&x2, n, p, &y, 1, 0.5).unwrap().predict(&x2).unwrap();
        for (u, v) in s1.iter().zip(&s2) {
            prop_assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn auc_rank_properties(seed in any::<u64>(), n in 2usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let auc = roc_auc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc + roc_auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
        let mono: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() + 4.0).collect();
        prop_assert_eq!(auc, roc_auc(&mono, &labels).unwrap());
    }

    #[test]
    fn psi_non_negative_and_symmetric(seed in any::<u64>(), n in 1usize..200, m in 1usize..200, bins in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 1.5).collect();
        prop_assert!(psi(&r, &c, bins).unwrap() >= 0.0);
        let edges = ScoreDistribution::reference(&r, bins).unwrap().edges;
        let pr = ScoreDistribution::on_edges(edges.clone(), &r).unwrap();
        let pc = ScoreDistribution::on_edges(edges, &c).unwrap();
        prop_assert!((pr.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let ab = psi_of_proportions(&pr.proportions, &pc.proportions);
        let ba = psi_of_proportions(&pc.proportions, &pr.proportions);
        prop_assert!((ab - ba).abs() < 1e-12);
    }
}

#[test]
fn auc_reference_values() {
    assert_eq!(roc_auc(&[1.0, 2.0, 3.0, 4.0], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[2.0; 10], &[0, 1, 0, 1, 0, 1, 0, 1, 0, 0]).unwrap(), 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let s: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let l: Vec<u8> = (0..10_000).map(|_| rng.random_bool(0.5) as u8).collect();
    assert!((roc_auc(&s, &l).unwrap() - 0.5).abs() < 0.02);
}

#[test]
fn psi_reference_values() {
    let r: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
    assert!(psi(&r, &r, 10).unwrap() <= 1e-12);
    let far: Vec<f64> = r.iter().map(|x| x + 100.0).collect();
    assert!(psi(&r, &far, 10).unwrap() > 1.0);
    assert!(psi(&r, &[], 10).is_err());
    assert!(psi(&[], &r, 10).is_err());
    assert!(psi(&r, &r, 1).is_err());
}

#[test]
fn single_month_average_is_its_auc() {
    let r = monthly_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1], &[3; 4]).unwrap();
    assert_eq!(r.average, Some(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap()));
    assert_eq!(r.std, None);
}

struct Fixture {
    patients: Vec<PatientHistory>,
    vocab: Vocabulary,
    model: EncoderModel,
    averages: GroupAverages,
    apps: Vec<ApplicationRecord>,
}

fn fixture() -> Fixture {
    let patients = generate_synthetic_corpus(
        3,
        &GeneratorConfig {
            n_patients: 300,
            n_codes: 40,
            ..Default::default()
        },
    )
    .unwrap();
    let vocab = Vocabulary::build(&patients).unwrap();
    let cfg = ModelConfig {
        d: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 24,
        use_positional: false,
        ..ModelConfig::desk(vocab.len())
    };
    let model = EncoderModel::new(cfg, vocab.hash(), 5).unwrap();
    let averages = average_group_embedding(&model, &patients, &vocab, PoolingStrategy::Mean).unwrap();
    let apps = generate_synthetic_insurance(
        4,
        &patients,
        &InsuranceConfig {
            n_apps: 2000,
            positive_rate: 0.2,
            ..Default::default()
        },
    )
    .unwrap();
    Fixture {
        patients,
        vocab,
        model,
        averages,
        apps,
    }
}

fn record(codes: &[&str]) -> ApplicationRecord {
    ApplicationRecord {
        app_id: "X1".into(),
        month: 7,
        gender: Gender::Female,
        age_years: 44,
        anamnesis: codes.iter().map(|c| IcdCode::parse(c).unwrap()).collect(),
        policy: BTreeMap::from([("region".to_string(), "R99".to_string())]),
        claim: 0,
    }
}

#[test]
fn base_schema_maps_unseen_values_to_missing() {
    let f = fixture();
    let (train, _) = split_by_month(&f.apps, 6);
    let schema = FeatureSchema::fit(&train, Scheme::Base, None).unwrap();
    let offsets = schema.offsets();
    let pos = schema.blocks.iter().position(|b| b.name == "anamnesis").unwrap();
    let block = &schema.blocks[pos];
    let BlockKind::MultiHot { levels } = &block.kind else { panic!("anamnesis is multi-hot") };
    assert_eq!(levels.last().unwrap(), "missing");
    let x = schema.assemble(&[record(&["Z99.9"])], None).unwrap();
    let row = &x[offsets[pos]..offsets[pos] + block.width()];
    assert_eq!(row.iter().sum::<f64>(), 1.0);
    assert_eq!(*row.last().unwrap(), 1.0);
    // Unseen region value and absent policy fields land on "missing" too.
    let region = schema.blocks.iter().position(|b| b.name == "policy.region").unwrap();
    assert_eq!(x[offsets[region] + schema.blocks[region].width() - 1], 1.0);
    assert_eq!(x.len(), schema.width());
}

#[test]
fn unknown_policy_field_is_rejected() {
    let f = fixture();
    let schema = FeatureSchema::fit(&f.apps, Scheme::Base, None).unwrap();
    let mut r = record(&[]);
    r.policy.insert("color".into(), "red".into());
    assert!(matches!(schema.assemble(&[r.clone()], None), Err(Error::UnknownPolicyField(k)) if k == "color"));
    assert!(FeatureSchema::fit(&[r], Scheme::Base, None).is_err());
}

#[test]
fn schema_is_deterministic_and_round_trips() {
    let f = fixture();
    let (x1, s1) = assemble_features(&f.apps, Scheme::Base, None).unwrap();
    let (x2, s2) = assemble_features(&f.apps, Scheme::Base, None).unwrap();
    assert_eq!(x1, x2);
    assert_eq!(s1.hash(), s2.hash());
    let back: FeatureSchema = serde_json::from_str(&serde_json::to_string(&s1).unwrap()).unwrap();
    assert_eq!(back, s1);
    assert_eq!(back.hash(), s1.hash());
}

#[test]
fn replacement_fallback_and_unseen_code() {
    let f = fixture();
    let src = EmbeddingSource::new(&f.model, &f.vocab, &f.averages).unwrap();
    let (train, _) = split_by_month(&f.apps, 6);
    let schema = FeatureSchema::fit(&train, Scheme::Replacement, Some(src.dim())).unwrap();
    let emb = schema.blocks.iter().position(|b| b.name == "embedding").unwrap();
    let off = schema.offsets()[emb];

    let x = schema.assemble(&[record(&[])], Some(&src)).unwrap();
    let fallback = f.averages.lookup(Gender::Female, 44);
    for (j, v) in fallback.iter().enumerate() {
        assert_eq!(x[off + j], f64::from(*v));
    }

    // A vocabulary code that no training application declared.
    let declared: std::collections::BTreeSet<&IcdCode> = train.iter().flat_map(|r| r.anamnesis.iter()).collect();
    let unseen = f
        .patients
        .iter()
        .flat_map(|p| p.codes())
        .find(|c| !declared.contains(c))
        .expect("some code is withheld early");
    let x = schema.assemble(&[record(&[unseen.as_str()])], Some(&src)).unwrap();
    let v = &x[off..off + src.dim()];
    assert!(v.iter().all(|x| x.is_finite()));
    assert!(v.iter().zip(fallback).any(|(a, b)| (a - f64::from(*b)).abs() > 1e-6));
}

#[test]
fn fit_scoring_selects_lambda_and_round_trips() {
    let f = fixture();
    let (train, valid) = split_by_month(&f.apps, 6);
    let fit = fit_scoring(&train, &valid, Scheme::Base, None, &LAMBDA_GRID).unwrap();
    assert_eq!(fit.grid.len(), LAMBDA_GRID.len());
    let best = fit
        .grid
        .iter()
        .filter_map(|g| g.average_auc)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(fit.validation.average, Some(best));
    assert!(fit.artifact.model.lambda > 0.0);
    assert!(!fit.artifact.model.period.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.scorer");
    fit.artifact.save(&path).unwrap();
    let back = ScoringArtifact::load(&path).unwrap();
    assert_eq!(back, fit.artifact);
    assert_eq!(back.score(&valid, None).unwrap(), fit.artifact.score(&valid, None).unwrap());
    assert_eq!(back.hash(), fit.artifact.hash());

    let train_scores = fit.artifact.score(&train, None).unwrap();
    assert!(fit.artifact.reference.psi(&train_scores).unwrap() <= 1e-12);
}
