//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (bypassing output capture) and fails when its criterion does.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use eda_bench::{cmd_run, Experiment, Overrides};
use eda_core::dann::{dann_gradients, DannSpec};
use eda_core::datagen::{gen_abrupt_switch, ShiftProfile};
use eda_core::divergence::{mmd2, mmd_matrix, Conditioning, Estimator};
use eda_core::gradcheck::max_relative_error;
use eda_core::metrics::{macro_f1, pearson_r, relative_gain};
use eda_core::model::Activation;
use eda_core::seed::rng_for;
use eda_core::selftrain::run_obs;
use eda_core::{mask_target_labels, ArchSpec, Buffer, Capacity, ClassifierModel, Labeled, Method, RunConfig};
use rand::Rng;

const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.json");

// Tolerances
const GRAD_REL_ERR: f64 = 1e-5;
const GRAD_MIN_CASES: usize = 30;
const MMD_SELF_TOL: f64 = 1e-12;
const CLOSED_FORM_TOL: f64 = 1e-12;
const PIN_TOL: f64 = 1e-9;

// Time budgets
const GRAD_BUDGET: Duration = Duration::from_secs(10);
const BUFFER_BUDGET: Duration = Duration::from_secs(5);
const EQUIV_BUDGET: Duration = Duration::from_secs(60);
const REFERENCE_BUDGET: Duration = Duration::from_secs(600);
const MMD_BUDGET: Duration = Duration::from_secs(60);

// Frozen from the first verified run of the reference config (seed 42).
const PINNED_F_AVG: [(&str, f64); 7] = [
    ("Supervised", 0.9944914105852452),
    ("OCS", 0.9830069549758964),
    ("OBS", 0.9828826192074247),
    ("DANN", 0.7872951867637417),
    ("OS", 0.7244986773776194),
    ("SrcOnly", 0.6155108603813826),
    ("OCS-no-upsample", 0.3843852059303937),
];
const PINNED_GAIN_SHIFT_R: f64 = 0.9676046201468552;

fn report(name: &str, ok: bool, detail: &str) {
    let line = format!("{} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{name}: {detail}");
}

struct Reference {
    exp: Experiment,
    single_thread_time: Duration,
    dirs: [tempfile::TempDir; 2],
}

fn reference() -> &'static Reference {
    static REF: OnceLock<Reference> = OnceLock::new();
    REF.get_or_init(|| {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let over = |d: &tempfile::TempDir| Overrides { seed: None, output_dir: Some(d.path().join("out")) };
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let start = Instant::now();
        let exp = pool.install(|| cmd_run(Path::new(REFERENCE), &over(&dirs[0]))).unwrap();
        let single_thread_time = start.elapsed();
        let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        wide.install(|| cmd_run(Path::new(REFERENCE), &over(&dirs[1]))).unwrap();
        Reference { exp, single_thread_time, dirs }
    })
}

fn f_avg(exp: &Experiment, label: &str) -> f64 {
    exp.reports[label].f_avg
}

/// `a > b` with a paired-bootstrap interval strictly above zero.
fn strictly_better(exp: &Experiment, a: &str, b: &str) -> (bool, String) {
    match exp.comparison(a, b) {
        Some(c) => {
            let r = &c.result;
            (
                r.ci_low > 0.0,
                format!("{a}-{b} {:.4} [{:.4}, {:.4}]", r.diff_mean, r.ci_low, r.ci_high),
            )
        }
        None => (false, format!("{a} does not rank above {b}")),
    }
}

fn labeled_batch(n: usize, dim: usize, classes: usize, seed: u64) -> Vec<Labeled> {
    let mut rng = rng_for(seed, "acceptance-batch", 0);
    (0..n)
        .map(|i| Labeled {
            features: (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            label: rng.gen_range(0..classes),
            arrival_order: i as u64,
        })
        .collect()
}

/// Moves parameters off the ReLU kink so central differences are valid.
fn jitter(params: &mut [f64], seed: u64) {
    let mut rng = rng_for(seed, "acceptance-jitter", 0);
    params.iter_mut().for_each(|p| *p += rng.gen_range(0.05..0.15));
}

#[test]
fn gradient_oracle() {
    let start = Instant::now();
    let specs = [
        ArchSpec::linear(3, 3),
        ArchSpec::mlp(3, vec![5], Activation::Tanh, 3),
        ArchSpec::mlp(2, vec![6, 4], Activation::Relu, 2),
    ];
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (k, spec) in specs.iter().enumerate() {
        for trial in 0..10u64 {
            let mut model = ClassifierModel::init(spec.clone(), 100 * k as u64 + trial).unwrap();
            jitter(&mut model.params, trial);
            let batch = labeled_batch(7, spec.input_dim, spec.num_classes, trial + 10 * k as u64);
            let (_, g) = model.grad(&batch).unwrap();
            let err = max_relative_error(&model.params, &g, |p| {
                ClassifierModel { spec: spec.clone(), params: p.to_vec() }.grad(&batch).unwrap().0
            });
            worst = worst.max(err);
            cases += 1;
        }
    }
    for trial in 0..10u64 {
        let spec = ArchSpec::mlp(2, vec![5], Activation::Tanh, 2);
        let model = ClassifierModel::init(spec, trial).unwrap();
        let net = model.network();
        let dspec = DannSpec { discriminator_dims: vec![4], ..DannSpec::default() };
        let disc = dspec.discriminator(5);
        let mut dparams = disc.init(trial, "acceptance-disc");
        jitter(&mut dparams, trial + 1000);
        let src = labeled_batch(6, 2, 2, trial + 50);
        let tgt_owned = labeled_batch(6, 2, 2, trial + 80);
        let src_refs: Vec<&Labeled> = src.iter().collect();
        let tgt: Vec<&[f64]> = tgt_owned.iter().map(|l| l.features.as_slice()).collect();
        let lambda = 0.2 + 0.1 * trial as f64;
        let g = dann_gradients(&net, &model.params, &disc, &dparams, &src_refs, &tgt, lambda);
        let composite = |p: &[f64]| {
            let r = dann_gradients(&net, p, &disc, &dparams, &src_refs, &tgt, lambda);
            r.l_cls - lambda * r.l_adv
        };
        worst = worst.max(max_relative_error(&model.params, &g.classifier, composite));
        let adv = |d: &[f64]| dann_gradients(&net, &model.params, &disc, d, &src_refs, &tgt, lambda).l_adv;
        worst = worst.max(max_relative_error(&dparams, &g.discriminator, adv));
        cases += 1;
    }
    let elapsed = start.elapsed();
    report(
        "gradient_oracle",
        worst < GRAD_REL_ERR && cases >= GRAD_MIN_CASES && elapsed < GRAD_BUDGET,
        &format!("{cases} cases, max rel err {worst:.2e} (< {GRAD_REL_ERR:e}), {elapsed:.2?}"),
    );
}

#[test]
fn buffer_semantics() {
    let start = Instant::now();
    let mut mismatches = 0;
    for case in 0..1000u64 {
        let mut rng = rng_for(case, "acceptance-buffer", 0);
        let cap = rng.gen_range(1..20usize);
        let mut fixed = Buffer::new(Capacity::Fixed(cap)).unwrap();
        let mut unbounded = Buffer::new(Capacity::Unbounded).unwrap();
        let mut history: Vec<Labeled> = Vec::new();
        let mut next = 0u64;
        for _ in 0..rng.gen_range(0..12) {
            let batch: Vec<Labeled> = (0..rng.gen_range(0..8))
                .map(|_| {
                    next += rng.gen_range(1..3);
                    Labeled { features: vec![next as f64], label: rng.gen_range(0..3), arrival_order: next }
                })
                .collect();
            history.extend(batch.iter().cloned());
            fixed.insert(batch.clone()).unwrap();
            unbounded.insert(batch).unwrap();
        }
        let suffix = &history[history.len().saturating_sub(cap)..];
        if fixed.to_vec() != suffix || unbounded.to_vec() != history {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        "buffer_semantics",
        mismatches == 0 && elapsed < BUFFER_BUDGET,
        &format!("1000 random sequences, {mismatches} mismatches, {elapsed:.2?}"),
    );
}

#[test]
fn obs_ocs_equivalence() {
    let start = Instant::now();
    let stream =
        eda_core::datagen::gen_rotating_gaussians(&ShiftProfile::gradual_rotation(3, 200, 0.12, 0.35, None), 42).unwrap();
    let masked = mask_target_labels(&stream);
    let total: usize = stream.domains.iter().map(|d| d.len()).sum();
    let obs_cfg = RunConfig { buffer_capacity: Some(total), ..RunConfig::new(Method::Obs, 42) };
    let obs = run_obs(&masked, &obs_cfg).unwrap();
    let ocs = eda_core::selftrain::run_ocs(&masked, &RunConfig::new(Method::Ocs, 42)).unwrap();
    let elapsed = start.elapsed();
    report(
        "obs_ocs_equivalence",
        obs.steps == ocs.steps && elapsed < EQUIV_BUDGET,
        &format!("T=3, n=200, capacity {total}: traces identical = {}, {elapsed:.2?}", obs.steps == ocs.steps),
    );
}

#[test]
fn method_ordering() {
    let r = reference();
    let exp = &r.exp;
    let mut ok = r.single_thread_time < REFERENCE_BUDGET;
    let mut parts = vec![format!("single-threaded run {:.2?}", r.single_thread_time)];
    ok &= f_avg(exp, "OCS") >= f_avg(exp, "OBS");
    parts.push(format!("OCS {:.4} >= OBS {:.4}", f_avg(exp, "OCS"), f_avg(exp, "OBS")));
    for (a, b) in [
        ("Supervised", "OCS"),
        ("OBS", "DANN"),
        ("OBS", "SrcOnly"),
        ("OCS", "DANN"),
        ("DANN", "SrcOnly"),
    ] {
        let (good, detail) = strictly_better(exp, a, b);
        ok &= good;
        parts.push(detail);
    }
    for (label, pinned) in PINNED_F_AVG {
        let got = f_avg(exp, label);
        if (got - pinned).abs() > PIN_TOL {
            ok = false;
            parts.push(format!("{label} F_avg {got} drifted from {pinned}"));
        }
    }
    report("method_ordering", ok, &parts.join("; "));
}

#[test]
fn upsampling_ablation() {
    let exp = &reference().exp;
    let (ok, detail) = strictly_better(exp, "OCS", "OCS-no-upsample");
    report("upsampling_ablation", ok, &detail);
}

#[test]
fn mmd_properties() {
    let start = Instant::now();
    let exp = &reference().exp;
    let mut parts = Vec::new();
    let mut ok = true;

    let pts: Vec<&[f64]> = exp.stream.domains[3].instances().map(|i| i.features.as_slice()).collect();
    let self_mmd = mmd2(&pts, &pts, 1.0, Estimator::Biased).unwrap();
    ok &= self_mmd.abs() <= MMD_SELF_TOL;
    parts.push(format!("mmd2(X,X) = {self_mmd:e}"));

    let marginal = exp.matrices.iter().find(|m| m.conditioning == Conditioning::Marginal).expect("marginal matrix");
    let n = marginal.values.len();
    let symmetric = exp.matrices.iter().all(|m| (0..n).all(|i| (0..n).all(|j| m.values[i][j] == m.values[j][i])));
    ok &= symmetric;
    parts.push(format!("{} matrices symmetric = {symmetric}", exp.matrices.len()));

    let v = &marginal.values;
    let adjacency_failures: Vec<usize> = (3..n).filter(|&t| v[t - 1][t] >= v[0][t]).collect();
    ok &= adjacency_failures.is_empty();
    parts.push(format!("adjacent < to-source for t >= 3, failures {adjacency_failures:?}"));

    let abrupt = gen_abrupt_switch(&ShiftProfile::abrupt_switch(10, 400, 6, 1.0, 0.35), 42).unwrap();
    let m = mmd_matrix(&abrupt, Conditioning::Marginal, Estimator::Biased, Some(1000), 42).unwrap();
    let argmax = (1..=10).max_by(|&a, &b| m.values[a - 1][a].total_cmp(&m.values[b - 1][b])).unwrap();
    ok &= argmax == 6;
    parts.push(format!("abrupt switch: largest adjacent cell ({}, {argmax}) = {:.4}", argmax - 1, m.values[argmax - 1][argmax]));

    let elapsed = start.elapsed();
    ok &= elapsed < MMD_BUDGET;
    parts.push(format!("{elapsed:.2?}"));
    report("mmd_properties", ok, &parts.join("; "));
}

#[test]
fn gain_shift_correlation() {
    let exp = &reference().exp;
    let c = exp.reports["OCS"].correlation.clone().expect("correlation for OCS");
    let low = c.ci_low.expect("interval");
    let ok = c.pearson_r > 0.0 && low > 0.0 && (c.pearson_r - PINNED_GAIN_SHIFT_R).abs() <= PIN_TOL;
    report(
        "gain_shift_correlation",
        ok,
        &format!("OCS vs SrcOnly r = {:.4}, 95% CI [{low:.4}, {:.4}]", c.pearson_r, c.ci_high.unwrap_or(f64::NAN)),
    );
}

#[test]
fn metric_oracles() {
    let close = |a: f64, b: f64| (a - b).abs() <= CLOSED_FORM_TOL;
    let checks = [
        ("macro_f1 perfect", close(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0)),
        ("macro_f1 confusion", close(macro_f1(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap(), 0.5)),
        ("macro_f1 disagreement", close(macro_f1(&[1, 1], &[0, 0], 2).unwrap(), 0.0)),
        ("relative_gain", close(relative_gain(0.611, 0.509, 0.713).unwrap(), 0.5)),
        ("relative_gain floor", close(relative_gain(0.509, 0.509, 0.713).unwrap(), 0.0)),
        ("relative_gain ceiling", close(relative_gain(0.713, 0.509, 0.713).unwrap(), 1.0)),
        ("pearson linear", close(pearson_r(&[1.0, 2.0, 4.0], &[5.0, 7.0, 11.0]).unwrap(), 1.0)),
        ("pearson negated", close(pearson_r(&[1.0, 2.0, 4.0], &[-1.0, -2.0, -4.0]).unwrap(), -1.0)),
        ("pearson three points", close(pearson_r(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    report("metric_oracles", failed.is_empty(), &format!("{} hand examples, failed {failed:?}", checks.len()));
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn determinism() {
    let r = reference();
    let a = tree(&r.dirs[0].path().join("out"));
    let b = tree(&r.dirs[1].path().join("out"));
    let differing: Vec<_> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let ok = !a.is_empty() && a.len() == b.len() && differing.is_empty();
    report(
        "determinism",
        ok,
        &format!("two runs (1 and 4 threads), {} files each, differing {differing:?}", a.len()),
    );
}

#[test]
fn masking_audit() {
    let exp = &reference().exp;
    let clean = &exp.stream;
    let mut poisoned = clean.clone();
    let m = clean.num_classes;
    for d in &mut poisoned.domains[1..] {
        for inst in d.train.iter_mut().chain(d.val.iter_mut()) {
            inst.gold_label = inst.gold_label.map(|l| (l + 1) % m);
        }
    }
    let cfg = RunConfig::new(Method::Obs, 42);
    let a = run_obs(&mask_target_labels(clean), &cfg).unwrap();
    let b = run_obs(&mask_target_labels(&poisoned), &cfg).unwrap();
    report(
        "masking_audit",
        a == b,
        &format!("OBS on poisoned target train/val labels: trace identical = {}; adaptation takes only the masked view", a == b),
    );
}
