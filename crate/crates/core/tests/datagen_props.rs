use eda_core::datagen::{
    gen_abrupt_switch, gen_label_drift, gen_rotating_gaussians, generated_records, ingest, label_distribution, load_records,
    split_5_1_4, split_sizes, write_csv, write_ndjson, DataError, IngestOptions, MonthWindow, PriorDrift, ShiftKind,
    ShiftProfile, YearMonth,
};
use eda_core::divergence::{mmd_matrix, permutation_test, Conditioning, Estimator};
use eda_core::{Domain, Instance};
use proptest::prelude::*;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn same_seed_same_stream_other_seed_other_samples() {
    let p = ShiftProfile::gradual_rotation(4, 80, 0.1, 0.3, None);
    let a = gen_rotating_gaussians(&p, 3).unwrap();
    assert_eq!(a, gen_rotating_gaussians(&p, 3).unwrap());
    let b = gen_rotating_gaussians(&p, 4).unwrap();
    assert_ne!(a, b);
    for (x, y) in a.domains.iter().zip(&b.domains) {
        assert_eq!(x.len(), y.len());
        assert_eq!(x.name, y.name);
    }
}

#[test]
fn abrupt_seeds_differ_but_share_sizes_and_priors() {
    let p = ShiftProfile::abrupt_switch(10, 100, 6, 1.05, 0.35);
    let a = gen_abrupt_switch(&p, 1).unwrap();
    let b = gen_abrupt_switch(&p, 2).unwrap();
    assert_ne!(a, b);
    for t in 0..=10 {
        assert_eq!(a.domains[t].len(), b.domains[t].len());
        assert_eq!(p.prior(t), vec![0.5, 0.5]);
    }
}

#[test]
fn discrepancy_from_source_grows_with_rotation() {
    let p = ShiftProfile::gradual_rotation(10, 300, 0.1, 0.3, None);
    let s = gen_rotating_gaussians(&p, 7).unwrap();
    let m = mmd_matrix(&s, Conditioning::Marginal, Estimator::Biased, None, 7).unwrap();
    assert!(m.values[0][10] > m.values[0][1], "{} vs {}", m.values[0][10], m.values[0][1]);
}

#[test]
fn drifting_priors_stay_within_binomial_bounds() {
    let drift = PriorDrift { from: vec![0.85, 0.15], to: vec![0.45, 0.55] };
    let mut p = ShiftProfile::gradual_rotation(10, 500, 0.05, 0.3, Some(drift));
    p.kind = ShiftKind::LabelDrift;
    let s = gen_label_drift(&p, 13).unwrap();
    for t in 0..=10 {
        let dist = label_distribution(&s.domains[t], 2).unwrap();
        let n = dist.total as f64;
        let pi = p.prior(t)[1];
        let sd = (n * pi * (1.0 - pi)).sqrt();
        let got = dist.counts[1] as f64;
        assert!((got - n * pi).abs() <= 3.0 * sd, "domain {t}: {got} vs {}", n * pi);
    }
    assert!((p.prior(10)[1] - 0.55).abs() < 1e-12);
}

#[test]
fn switch_after_the_last_domain_is_a_static_stream() {
    let abrupt = ShiftProfile::abrupt_switch(5, 60, 6, 2.0, 0.3);
    let still = ShiftProfile::gradual_rotation(5, 60, 0.0, 0.3, None);
    assert_eq!(gen_abrupt_switch(&abrupt, 9).unwrap(), gen_rotating_gaussians(&still, 9).unwrap());
}

#[test]
fn abrupt_switch_shows_as_a_single_jump() {
    let sigma = 0.3;
    let p = ShiftProfile::abrupt_switch(10, 300, 6, 3.0 * sigma, sigma);
    let s = gen_abrupt_switch(&p, 11).unwrap();
    let m = mmd_matrix(&s, Conditioning::Marginal, Estimator::Biased, None, 11).unwrap();
    let jump = m.values[5][6];
    let others: Vec<f64> = (1..=10).filter(|&t| t != 6).map(|t| m.values[t - 1][t]).collect();
    assert!(jump > 5.0 * median(others.clone()), "{jump} vs {others:?}");
}

#[test]
fn static_stream_discrepancy_is_within_noise() {
    let p = ShiftProfile::gradual_rotation(4, 200, 0.0, 0.35, None);
    let s = gen_rotating_gaussians(&p, 17).unwrap();
    let m = mmd_matrix(&s, Conditioning::Marginal, Estimator::Biased, None, 17).unwrap();
    let src: Vec<&[f64]> = s.domains[0].instances().map(|i| i.features.as_slice()).collect();
    for t in 1..=4 {
        let tgt: Vec<&[f64]> = s.domains[t].instances().map(|i| i.features.as_slice()).collect();
        let perm = permutation_test(&src, &tgt, m.bandwidth, Estimator::Biased, 200, t as u64).unwrap();
        let mut null = perm.null.clone();
        null.sort_by(f64::total_cmp);
        let q95 = null[(0.95 * (null.len() - 1) as f64).round() as usize];
        assert!(m.values[0][t] < 3.0 * q95, "domain {t}: {} vs {q95}", m.values[0][t]);
    }
}

#[test]
fn invalid_profiles_are_rejected() {
    let too_far = ShiftProfile::gradual_rotation(10, 50, 0.2, 0.3, None);
    assert!(matches!(gen_rotating_gaussians(&too_far, 0), Err(DataError::InvalidProfile(_))));
    let tiny = ShiftProfile::gradual_rotation(2, 5, 0.1, 0.3, None);
    assert!(matches!(gen_rotating_gaussians(&tiny, 0), Err(DataError::InvalidProfile(_))));
    let late = ShiftProfile::abrupt_switch(3, 50, 5, 1.0, 0.3);
    assert!(matches!(gen_abrupt_switch(&late, 0), Err(DataError::InvalidProfile(_))));
    let wrong_kind = ShiftProfile::abrupt_switch(3, 50, 2, 1.0, 0.3);
    assert!(matches!(gen_rotating_gaussians(&wrong_kind, 0), Err(DataError::InvalidProfile(_))));
}

fn opts() -> IngestOptions {
    let jan = YearMonth { year: 2000, month: 1 };
    IngestOptions {
        source_window: MonthWindow { start: jan, end: jan },
        window_len: 1,
        min_domain_size: 1,
        class_names: None,
        stratify: true,
        seed: 0,
    }
}

#[test]
fn generated_stream_survives_both_file_formats() {
    let p = ShiftProfile::gradual_rotation(13, 40, 0.05, 0.3, None);
    let s = gen_rotating_gaussians(&p, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("stream.ndjson");
    let csv = dir.path().join("stream.csv");
    write_ndjson(&generated_records(&s), &json).unwrap();
    write_csv(&generated_records(&s), &csv).unwrap();
    assert_eq!(s.domains[13].name, "2001-02");
    for path in [&json, &csv] {
        let back = ingest(load_records(path).unwrap(), &opts()).unwrap();
        assert_eq!(back, s, "{}", path.display());
    }
}

fn domain_of(labels: &[Option<usize>]) -> Domain {
    let train = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| Instance {
            id: format!("r{i}"),
            features: vec![i as f64],
            gold_label: l,
            pseudo_label: None,
            arrival_order: i as u64,
        })
        .collect();
    Domain { index: 3, name: "d".into(), train, val: vec![], test: vec![] }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn split_sizes_follow_the_ratio(n in 10usize..5000) {
        let (tr, va, te) = split_sizes(n);
        prop_assert_eq!(tr + va + te, n);
        prop_assert!((va as f64 - n as f64 / 10.0).abs() < 1.0);
        prop_assert!((tr as f64 - n as f64 / 2.0).abs() <= 1.0);
        prop_assert!((te as f64 - 0.4 * n as f64).abs() <= 1.5);
    }

    #[test]
    fn split_is_a_partition_in_arrival_order(
        labels in prop::collection::vec(prop::option::weighted(0.9, 0usize..3), 10..200),
        seed in any::<u64>(),
        stratify in any::<bool>(),
    ) {
        let d = split_5_1_4(domain_of(&labels), seed, stratify).unwrap();
        let mut ids: Vec<u64> = d.instances().map(|i| i.arrival_order).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..labels.len() as u64).collect::<Vec<_>>());
        let (tr, va, te) = split_sizes(labels.len());
        prop_assert_eq!((d.train.len(), d.val.len(), d.test.len()), (tr, va, te));
        for part in [&d.train, &d.val, &d.test] {
            prop_assert!(part.windows(2).all(|w| w[0].arrival_order < w[1].arrival_order));
        }
        prop_assert_eq!(&d, &split_5_1_4(domain_of(&labels), seed, stratify).unwrap());
    }

    #[test]
    fn stratified_split_keeps_every_class_in_train_and_test(
        labels in prop::collection::vec(0usize..3, 20..200),
        seed in any::<u64>(),
    ) {
        let opt: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        let d = split_5_1_4(domain_of(&opt), seed, true).unwrap();
        for c in 0..3 {
            let total = labels.iter().filter(|&&l| l == c).count();
            if total >= 2 {
                prop_assert!(d.train.iter().any(|i| i.gold_label == Some(c)));
                prop_assert!(d.test.iter().any(|i| i.gold_label == Some(c)));
            }
            let in_train = d.train.iter().filter(|i| i.gold_label == Some(c)).count();
            prop_assert!((in_train as f64 - total as f64 / 2.0).abs() <= 3.0, "class {} {} of {}", c, in_train, total);
        }
    }
}
