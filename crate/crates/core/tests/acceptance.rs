//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its
//! criterion before asserting.
//!
//! Tests hold a shared lock so runtime limits are measured without the other
//! criteria competing for the same cores.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otk_nas::fixtures::{golden_x, golden_z};
use otk_nas::gp::lml;
use otk_nas::ot::ot_oracle;
use otk_nas::pool::random_architecture;
use otk_nas::runner::{best_at, quantile, run_experiment, write_records, RunRecord};
use otk_nas::select::sample_kdpp;
use otk_nas::tw::{kernel_matrix, tw_distance};
use otk_nas::{
    ArchMetric, Architecture, DistanceWeights, EmpiricalMeasure, ExperimentConfig, GpModel, KernelParams, MetricTree,
    SpaceSpec, TaxonomySpec, Vocabulary,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, ok: bool, detail: &str, elapsed: Duration) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    // straight to the stream: the harness only shows captured output of failing tests
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id:>2} [{name}]: {verdict} ({detail}; {:.2}s)", elapsed.as_secs_f64()).unwrap();
    out.flush().unwrap();
}

fn metric(n: usize) -> ArchMetric {
    ArchMetric::new(TaxonomySpec::default_nb(), n).unwrap()
}

fn random_space() -> SpaceSpec {
    SpaceSpec::new(Vocabulary::new(["cv1", "cv3", "mp3"]), 2, 8, 14).unwrap()
}

fn random_set(rng: &mut ChaCha8Rng, max: usize) -> Vec<Architecture> {
    let space = random_space();
    let n = rng.random_range(2..=max);
    (0..n).map(|_| random_architecture(&space, rng)).collect()
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// The desk-scale synthetic space: up to 5 nodes, at most 6 edges, 3 ops.
fn desk_config(seeds: std::ops::RangeInclusive<u64>) -> ExperimentConfig {
    ExperimentConfig { seeds: seeds.collect(), ..ExperimentConfig::default() }
}

fn with(cfg: &ExperimentConfig, pairs: &[(&str, &str)]) -> ExperimentConfig {
    let mut c = cfg.clone();
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

#[test]
fn c01_golden_values() {
    let _g = serial();
    let t = Instant::now();
    let (x, z) = (golden_x(), golden_z());
    let one = metric(1).components(&x, &z).unwrap();
    let two = metric(2).components(&x, &z).unwrap();
    let elapsed = t.elapsed();

    let checks = [
        ("1-gram", one.ops, 0.5),
        ("2-gram", two.ops, 2.0),
        ("indegree", one.indegree, 4.0 / 70.0),
        ("outdegree", one.outdegree, 6.0 / 70.0),
    ];
    let mut detail = Vec::new();
    let mut ok = elapsed < Duration::from_secs(1);
    for (name, got, want) in checks {
        let good = (got - want).abs() <= 1e-12;
        ok &= good;
        detail.push(format!("{name} {got} vs {want}{}", if good { "" } else { " MISMATCH" }));
    }
    report(1, "golden values", ok, &detail.join(", "), elapsed);
    assert!(ok, "golden values: {}", detail.join(", "));
}

#[test]
fn c02_tree_wasserstein_matches_exact_ot() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let nodes = rng.random_range(1..=12);
        let mut tree: MetricTree<usize> = MetricTree::with_root("r");
        tree.bind(0, 0);
        for v in 1..nodes {
            let parent = rng.random_range(0..v);
            let id = tree.add_node(parent, rng.random_range(0.05..3.0), format!("n{v}"));
            tree.bind(v, id);
        }
        let draw = |rng: &mut ChaCha8Rng| loop {
            let mut masses = Vec::new();
            for v in 0..nodes {
                if rng.random_bool(0.6) {
                    masses.push((v, rng.random_range(0.0..1.0)));
                }
            }
            if let Some(m) = EmpiricalMeasure::from_masses(masses) {
                break m;
            }
        };
        let (mu, nu) = (draw(&mut rng), draw(&mut rng));
        let closed = tw_distance(&tree, &mu, &nu).unwrap();

        let cost: Vec<Vec<f64>> =
            (0..nodes).map(|a| (0..nodes).map(|b| tree.tree_distance(a, b).unwrap()).collect()).collect();
        let a: Vec<f64> = (0..nodes).map(|v| mu.mass_of(&v)).collect();
        let b: Vec<f64> = (0..nodes).map(|v| nu.mass_of(&v)).collect();
        let exact = ot_oracle(&cost, &a, &b).unwrap();
        worst = worst.max((closed - exact).abs());
    }
    let elapsed = t.elapsed();
    let ok = worst <= 1e-9 && elapsed < Duration::from_secs(30);
    report(2, "tree-Wasserstein equals exact OT", ok, &format!("200 instances, max abs error {worst:.3e}"), elapsed);
    assert!(ok);
}

#[test]
fn c03_metric_and_definiteness() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut asym, mut tri, mut cnd, mut min_eig) = (0usize, 0.0f64, f64::NEG_INFINITY, f64::INFINITY);
    for _ in 0..100 {
        let m = metric(rng.random_range(1..=2));
        let xs = random_set(&mut rng, 12);
        let a1 = rng.random_range(0.0..1.0);
        let w = DistanceWeights::new(a1, rng.random_range(0.0..1.0 - a1)).unwrap();
        let feats: Vec<_> = xs.iter().map(|x| m.extract(x).unwrap()).collect();
        let n = xs.len();
        let d = DMatrix::from_fn(n, n, |i, j| m.components_of(&feats[i], &feats[j]).d_nn(&w));
        asym += (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| d[(i, j)] != d[(j, i)]).count();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    tri = tri.max(d[(i, k)] - d[(i, j)] - d[(j, k)]);
                }
            }
        }
        for _ in 0..20 {
            let mut c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean = c.iter().sum::<f64>() / n as f64;
            c.iter_mut().for_each(|v| *v -= mean);
            let q: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| c[i] * c[j] * d[(i, j)]).sum();
            cnd = cnd.max(q);
        }
        let p = KernelParams::new(
            log_uniform(&mut rng, 0.1, 10.0),
            log_uniform(&mut rng, 0.1, 10.0),
            log_uniform(&mut rng, 0.1, 10.0),
            0.0,
        );
        let k = kernel_matrix(&m, &xs, &p).unwrap();
        min_eig = min_eig.min(k.symmetric_eigen().eigenvalues.min());
    }
    let elapsed = t.elapsed();
    let ok = asym == 0 && tri <= 1e-12 && cnd <= 1e-8 && min_eig >= -1e-8;
    report(
        3,
        "metric and definiteness",
        ok,
        &format!(
            "100 sets, asymmetric entries {asym}, max triangle excess {tri:.3e}, max sum c_i c_j d {cnd:.3e}, min kernel eigenvalue {min_eig:.3e}"
        ),
        elapsed,
    );
    assert!(ok);
}

#[test]
fn c04_infinite_divisibility() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let space = random_space();
    let mut worst = 0.0f64;
    for i in 0..50 {
        let m = metric(1 + i % 2);
        let (x, z) = (random_architecture(&space, &mut rng), random_architecture(&space, &mut rng));
        let lam = [0, 1, 2].map(|_| log_uniform(&mut rng, 0.05, 5.0));
        let c = m.components(&x, &z).unwrap();
        let full = c.kernel(&KernelParams::new(lam[0], lam[1], lam[2], 0.0));
        for gamma in [2.0, 3.0, 7.0] {
            let part = c.kernel(&KernelParams::new(lam[0] / gamma, lam[1] / gamma, lam[2] / gamma, 0.0));
            worst = worst.max((part.powf(gamma) - full).abs());
        }
    }
    let elapsed = t.elapsed();
    let ok = worst <= 1e-12;
    report(4, "infinite divisibility", ok, &format!("50 pairs x 3 roots, max abs error {worst:.3e}"), elapsed);
    assert!(ok);
}

#[test]
fn c05_gradient_matches_finite_differences() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..20 {
        let m = Arc::new(metric(1 + i % 2));
        let xs = random_set(&mut rng, 15);
        let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let p = KernelParams::new(
            log_uniform(&mut rng, 0.1, 10.0),
            log_uniform(&mut rng, 0.1, 10.0),
            log_uniform(&mut rng, 0.1, 10.0),
            log_uniform(&mut rng, 1e-2, 0.5),
        );
        let model = GpModel::fit(m, &xs, &ys, p).unwrap();
        let g = model.lml_gradient();
        let y = model.train_y_standardized();
        for (c, &gc) in g.iter().enumerate() {
            let mut up = p.as_array();
            let mut dn = p.as_array();
            up[c] += h;
            dn[c] -= h;
            let fd = (lml(model.distances(), y, &KernelParams::from_array(up)).unwrap()
                - lml(model.distances(), y, &KernelParams::from_array(dn)).unwrap())
                / (2.0 * h);
            // floor keeps exactly-flat directions (all-zero distance blocks) from dividing by zero
            let rel = (gc - fd).abs() / gc.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    let elapsed = t.elapsed();
    let ok = worst < 1e-4;
    report(
        5,
        "LML gradient vs finite differences",
        ok,
        &format!("20 instances, max relative error {worst:.3e}"),
        elapsed,
    );
    assert!(ok);
}

fn log_det(m: &DMatrix<f64>) -> f64 {
    let ch = m.clone().cholesky().expect("positive definite");
    2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

#[test]
fn c06_schur_determinant_identity() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let space = random_space();
    let jitter = 1e-6;
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 50 {
        let m = Arc::new(metric(1 + done % 2));
        let na = rng.random_range(1..=8);
        let nb = rng.random_range(1..=4);
        let all: Vec<Architecture> = (0..na + nb).map(|_| random_architecture(&space, &mut rng)).collect();
        // points the kernel cannot tell apart are one point; redraw
        let dists = m.component_matrices(&all).unwrap();
        let twins = (0..all.len()).any(|i| (0..i).any(|j| dists.parts.iter().all(|d| d[(i, j)] == 0.0)));
        if twins {
            continue;
        }
        let (a, b) = all.split_at(na);
        let p = KernelParams::new(
            log_uniform(&mut rng, 0.1, 3.0),
            log_uniform(&mut rng, 0.1, 3.0),
            log_uniform(&mut rng, 0.1, 3.0),
            jitter,
        );
        let ys: Vec<f64> = a.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let model = GpModel::fit(m, a, &ys, p).unwrap();
        let j = jitter + model.jitter();
        let eye = |n: usize| DMatrix::<f64>::identity(n, n) * j;

        // the same diagonal shift enters K_{A u B}, K_A and the B block
        let full = dists.kernel(&p) + eye(na + nb);
        let ka = full.view((0, 0), (na, na)).into_owned();
        let ratio = (log_det(&full) - log_det(&ka)).exp();
        let cond = model.predict_cov(b).unwrap() + eye(nb);
        let lhs = cond.determinant();
        worst = worst.max((lhs - ratio).abs() / ratio.abs());
        done += 1;
    }
    let elapsed = t.elapsed();
    let ok = worst <= 1e-6;
    report(6, "posterior determinant identity", ok, &format!("50 instances, max relative error {worst:.3e}"), elapsed);
    assert!(ok);
}

#[test]
fn c07_kdpp_sampler_law() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
    let k = &a * a.transpose();

    let mut target = BTreeMap::new();
    for i in 0..6 {
        for j in i + 1..6 {
            target.insert(vec![i, j], k[(i, i)] * k[(j, j)] - k[(i, j)] * k[(j, i)]);
        }
    }
    let z: f64 = target.values().sum();
    let draws = 20_000;
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(sample_kdpp(&k, 2, &mut rng).unwrap()).or_default() += 1;
    }
    let stray = counts.keys().filter(|s| !target.contains_key(*s)).count();
    let tv = 0.5
        * target
            .iter()
            .map(|(s, d)| (counts.get(s).copied().unwrap_or(0) as f64 / draws as f64 - d / z).abs())
            .sum::<f64>();
    let elapsed = t.elapsed();
    let ok = stray == 0 && tv < 0.05;
    report(7, "k-DPP sampler law", ok, &format!("N=6 b=2, {draws} draws, TV {tv:.4}"), elapsed);
    assert!(ok);
}

#[test]
fn c08_search_efficacy() {
    let _g = serial();
    let t = Instant::now();
    let base = desk_config(0..=29);
    let oracle = base.build_oracle().unwrap();
    let run = |pairs: &[(&str, &str)]| run_experiment(&with(&base, pairs), &oracle).unwrap();

    let bo = median(best_at(&run(&[("optimizer", "bo-tw-2g"), ("budget", "40")]), 40).into_values());
    let rnd = median(best_at(&run(&[("optimizer", "random"), ("budget", "120")]), 120).into_values());
    let evo = median(best_at(&run(&[("optimizer", "evolution"), ("budget", "40")]), 40).into_values());
    let elapsed = t.elapsed();
    let ok = bo >= rnd && bo >= evo && elapsed < Duration::from_secs(600);
    report(
        8,
        "desk-scale search efficacy",
        ok,
        &format!(
            "{} architectures, 30 seeds, median best_val bo-tw-2g@40 {bo:.5}, random@120 {rnd:.5}, evolution@40 {evo:.5}",
            oracle.len()
        ),
        elapsed,
    );
    assert!(ok);
}

#[test]
fn c09_batch_efficacy() {
    let _g = serial();
    let t = Instant::now();
    let base = desk_config(0..=29);
    let oracle = base.build_oracle().unwrap();
    let mut finals = BTreeMap::new();
    let mut at10 = BTreeMap::new();
    for name in ["kdpp-quality", "kdpp", "ts", "bucb"] {
        let records = run_experiment(
            &with(&base, &[("mode", "batch"), ("batch_size", "5"), ("budget", "100"), ("optimizer", name)]),
            &oracle,
        )
        .unwrap();
        finals.insert(name, median(best_at(&records, 20).into_values()));
        at10.insert(name, best_at(&records, 10));
    }
    let strict = at10["kdpp-quality"].iter().filter(|(s, v)| **v > at10["kdpp"][*s]).count();
    let q = finals["kdpp-quality"];
    let elapsed = t.elapsed();
    let ok = finals.values().all(|&v| q >= v) && strict >= 18 && elapsed < Duration::from_secs(900);
    let medians: Vec<String> = finals.iter().map(|(k, v)| format!("{k} {v:.5}")).collect();
    report(
        9,
        "batch efficacy",
        ok,
        &format!("final medians {}; kdpp-quality > kdpp at batch 10 in {strict}/30 seeds", medians.join(", ")),
        elapsed,
    );
    assert!(ok);
}

fn csv_bytes(records: &[RunRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_records(records, &mut buf).unwrap();
    buf
}

#[test]
fn c10_determinism() {
    let _g = serial();
    let t = Instant::now();
    let base = ExperimentConfig { budget: 20, seeds: vec![0, 1, 2], ..ExperimentConfig::default() };
    let oracle = base.build_oracle().unwrap();
    let configs = [
        with(&base, &[("optimizer", "bo-tw")]),
        with(&base, &[("optimizer", "evolution")]),
        with(&base, &[("mode", "batch"), ("optimizer", "kdpp-quality")]),
        with(&base, &[("mode", "batch"), ("optimizer", "ts")]),
    ];
    let mut same = 0;
    for cfg in &configs {
        let first = csv_bytes(&run_experiment(cfg, &oracle).unwrap());
        let second = csv_bytes(&run_experiment(cfg, &cfg.build_oracle().unwrap()).unwrap());
        same += usize::from(first == second);
    }
    let elapsed = t.elapsed();
    let ok = same == configs.len();
    report(
        10,
        "determinism",
        ok,
        &format!("{same}/{} configurations bytewise identical on rerun", configs.len()),
        elapsed,
    );
    assert!(ok);
}
