//! The verification battery behind `fedtree check`: every fast path
//! against its oracle on seeded random instances.

use std::time::Instant;

use fedtree_core::lora::{local_gradients, sgd_step_with, LambdaProjection};
use fedtree_core::oracle;
use fedtree_core::similarity::mean_distance_matrix;
use fedtree_core::topology::{build_merge_tree, compute_depth_schedule, cut, silhouette};
use fedtree_core::{
    run_experiment, Activation, AdapterPair, DistanceMatrix, FederationConfig, FrozenBackbone, LayerExperts, Matrix,
    Mode, Partition, Sample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::artifacts::metrics_csv;
use crate::error::CliError;

pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const SILHOUETTE_TOLERANCE: f64 = 1e-12;
pub const HEIGHT_TOLERANCE: f64 = 1e-12;

/// Outcome of one suite. `max_error` is the worst observed deviation from
/// the oracle; for pass/fail suites it is the violation count.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    pub projection: LambdaProjection,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            projection: LambdaProjection::Clamp,
        }
    }
}

fn timed(name: &'static str, tolerance: f64, f: impl FnOnce() -> (usize, usize, f64, Option<String>)) -> SuiteResult {
    let start = Instant::now();
    let (cases, failures, max_error, detail) = f();
    SuiteResult {
        name,
        cases,
        failures,
        max_error,
        tolerance,
        seconds: start.elapsed().as_secs_f64(),
        detail,
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    Matrix::gaussian(1, len, 1.0, rng).as_slice().to_vec()
}

fn random_pair(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, rank: usize) -> AdapterPair {
    AdapterPair::new(
        Matrix::gaussian(rank, d_in, 0.5, rng),
        Matrix::gaussian(d_out, rank, 0.5, rng),
    )
    .expect("rank fits both widths")
}

/// A random network with `layers ≤ 3`, widths `≤ 8`, rank `≤ 3`, a mix of
/// solo and mixed experts and a small batch.
pub fn random_network(rng: &mut ChaCha8Rng) -> (FrozenBackbone, Vec<LayerExperts>, Vec<Sample>) {
    let layers = rng.random_range(1..=3);
    let dims: Vec<usize> = (0..=layers).map(|_| rng.random_range(1..=8)).collect();
    let max_rank = dims.windows(2).map(|w| w[0].min(w[1])).min().expect("one layer").min(3);
    let rank = rng.random_range(1..=max_rank);
    let act = if rng.random_bool(0.8) {
        Activation::Tanh
    } else {
        Activation::Identity
    };
    let w0 = dims
        .windows(2)
        .map(|w| Matrix::gaussian(w[1], w[0], 1.0 / (w[0] as f64).sqrt(), rng))
        .collect();
    let backbone = FrozenBackbone::new(w0, act).expect("widths chain");
    let experts = dims
        .windows(2)
        .map(|w| {
            let cluster = random_pair(rng, w[0], w[1], rank);
            if rng.random_bool(0.25) {
                LayerExperts::solo(cluster)
            } else {
                let external = random_pair(rng, w[0], w[1], rank);
                let lambda = rng.random_range(0.0..=1.0);
                LayerExperts::mixed(cluster, external, lambda).expect("lambda in range")
            }
        })
        .collect();
    let batch = (0..rng.random_range(1..=4))
        .map(|_| Sample {
            x: gaussian_vec(rng, dims[0]),
            y: gaussian_vec(rng, dims[layers]),
        })
        .collect();
    (backbone, experts, batch)
}

/// Analytic adapter gradients against central differences of the dense loss.
pub fn gradient_suite(cases: usize, seed: u64) -> SuiteResult {
    timed("gradient finite differences", GRADIENT_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut failures, mut worst, mut detail) = (0, 0.0f64, None);
        for case in 0..cases {
            let (backbone, experts, batch) = random_network(&mut rng);
            match oracle::check_gradients(&backbone, &experts, &batch) {
                Ok(c) if c.max_relative_error <= GRADIENT_TOLERANCE => worst = worst.max(c.max_relative_error),
                Ok(c) => {
                    failures += 1;
                    worst = if c.max_relative_error.is_nan() {
                        f64::NAN
                    } else {
                        worst.max(c.max_relative_error)
                    };
                    detail.get_or_insert(format!("case {case}: relative error {:e}", c.max_relative_error));
                }
                Err(e) => {
                    failures += 1;
                    detail.get_or_insert(format!("case {case}: {e}"));
                }
            }
        }
        (cases, failures, worst, detail)
    })
}

/// Random symmetric distances; integer-valued ones produce exact ties.
pub fn random_distances(rng: &mut ChaCha8Rng, n: usize) -> DistanceMatrix {
    let integer = rng.random_bool(0.3);
    let mut rows = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = if integer {
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(0.0..2.0)
            };
            rows[i][j] = v;
            rows[j][i] = v;
        }
    }
    DistanceMatrix::from_rows(&rows).expect("valid by construction")
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize) -> Partition {
    let c = rng.random_range(2..=n);
    let mut labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.random_range(0..c) }).collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    Partition::from_labels(&labels)
}

/// Library silhouette against the direct Rousseeuw evaluation.
pub fn silhouette_suite(cases: usize, seed: u64) -> SuiteResult {
    timed("silhouette oracle", SILHOUETTE_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut failures, mut worst, mut detail) = (0, 0.0f64, None);
        for case in 0..cases {
            let n = rng.random_range(2..=12);
            let d = random_distances(&mut rng, n);
            let p = random_partition(&mut rng, n);
            let fast = silhouette(&d, &p).expect("partition has two or more clusters");
            let slow = oracle::direct_silhouette(&d, &p).expect("sizes agree");
            let err = (fast - slow).abs();
            worst = worst.max(err);
            if !(err <= SILHOUETTE_TOLERANCE && (-1.0..=1.0).contains(&fast)) {
                failures += 1;
                detail.get_or_insert(format!("case {case}: {fast} vs {slow}"));
            }
        }
        (cases, failures, worst, detail)
    })
}

/// Merge sequences against brute-force average linkage.
pub fn ahc_suite(cases: usize, seed: u64) -> SuiteResult {
    timed("merge tree brute force", HEIGHT_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut failures, mut worst, mut detail) = (0, 0.0f64, None);
        for case in 0..cases {
            let n = rng.random_range(2..=7);
            let d = random_distances(&mut rng, n);
            let tree = build_merge_tree(&d).expect("n >= 2");
            let members = tree.node_members();
            let reference = oracle::brute_force_merges(&d);
            let mut ok = tree.merges.len() == reference.len();
            for (m, r) in tree.merges.iter().zip(&reference) {
                worst = worst.max((m.height - r.height).abs());
                ok &= members[m.left] == r.left && members[m.right] == r.right;
                ok &= (m.height - r.height).abs() <= HEIGHT_TOLERANCE;
            }
            let cuts_agree =
                (1..=n).all(|c| cut(&tree, c).ok() == oracle::reference_cuts(n, &reference).get(c - 1).cloned());
            if !(ok && cuts_agree) {
                failures += 1;
                detail.get_or_insert(format!("case {case}: merge sequence differs (n = {n})"));
            }
        }
        (cases, failures, worst, detail)
    })
}

/// Monotone counts, nested partitions, every partition a cut of one tree.
pub fn schedule_suite(cases: usize, seed: u64) -> SuiteResult {
    timed("schedule invariants", 0.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut failures, mut detail) = (0, None);
        for case in 0..cases {
            let n = rng.random_range(2..=10);
            let layers = rng.random_range(1..=8);
            let ds: Vec<_> = (0..layers).map(|_| random_distances(&mut rng, n)).collect();
            let tree = build_merge_tree(&mean_distance_matrix(&ds).expect("same sizes")).expect("n >= 2");
            let tau = rng.random_range(-0.2..0.3);
            let k = rng.random_range(1..=5);
            let outcome = compute_depth_schedule(&tree, &ds, tau, k).and_then(|s| s.validate(&tree));
            if let Err(e) = outcome {
                failures += 1;
                detail.get_or_insert(format!("case {case}: {e}"));
            }
        }
        (cases, failures, failures as f64, detail)
    })
}

/// Long SGD trajectories with large steps: `λ` must stay in `[0, 1]` and
/// the external expert must not move.
pub fn lambda_suite(cases: usize, seed: u64, projection: LambdaProjection) -> SuiteResult {
    timed("lambda bounds and frozen externals", 0.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut failures, mut worst, mut detail) = (0, 0.0f64, None);
        for case in 0..cases {
            let (backbone, mut experts, batch) = random_network(&mut rng);
            let externals: Vec<AdapterPair> = experts.iter().map(|e| e.external().clone()).collect();
            let eta = rng.random_range(0.1..2.0);
            let mut bad = false;
            for _ in 0..10 {
                let Ok((_, grads)) = local_gradients(&backbone, &experts, &batch) else {
                    break;
                };
                let Ok(next) = experts
                    .iter()
                    .zip(&grads)
                    .map(|(e, g)| sgd_step_with(e, g, eta, projection))
                    .collect::<Result<Vec<_>, _>>()
                else {
                    break;
                };
                experts = next;
                for (e, ext) in experts.iter().zip(&externals) {
                    let lam = e.lambda();
                    let excess = (lam - lam.clamp(0.0, 1.0)).abs();
                    worst = worst.max(excess);
                    bad |= excess > 0.0 || lam.is_nan() || e.external() != ext;
                }
            }
            if bad {
                failures += 1;
                detail.get_or_insert(format!("case {case}: lambda left [0, 1] or the external moved"));
            }
        }
        (cases, failures, worst, detail)
    })
}

/// A small two-group federation used by the reduction check.
pub fn reduction_config(seed: u64) -> FederationConfig {
    let mut cfg = FederationConfig::from_json_str(
        r#"{"N": 4, "L": 3, "dims": [6, 6, 6, 6], "T": 4, "E_warm": 2, "batch_size": 16,
            "data": {"groups": 2, "shared_depth": 1, "train_samples": 48, "test_samples": 16}}"#,
    )
    .expect("built-in config is valid");
    cfg.seed = seed;
    cfg
}

/// With `τ = 10` the tree mode never splits and must reproduce the FedAvg
/// baseline's metrics byte for byte.
pub fn fedavg_suite(base: &FederationConfig, seeds: &[u64]) -> SuiteResult {
    timed("fedavg reduction", 0.0, || {
        let (mut failures, mut detail) = (0, None);
        for &seed in seeds {
            let mut tree = base.clone();
            tree.seed = seed;
            tree.tau = 10.0;
            tree.mode = Mode::Fedtree;
            let fedit = FederationConfig {
                mode: Mode::Fedit,
                ..tree.clone()
            };
            let outcome = run_experiment(&tree).and_then(|a| run_experiment(&fedit).map(|b| (a, b)));
            let same = match &outcome {
                Ok((a, b)) => match (metrics_csv(a), metrics_csv(b)) {
                    (Ok(x), Ok(y)) => x == y && !x.is_empty(),
                    _ => false,
                },
                Err(_) => false,
            };
            if !same {
                failures += 1;
                detail.get_or_insert(match outcome {
                    Err(e) => format!("seed {seed}: {e}"),
                    Ok(_) => format!("seed {seed}: metrics streams differ"),
                });
            }
        }
        (seeds.len(), failures, failures as f64, detail)
    })
}

/// The full battery at the sizes `fedtree check` uses.
pub fn run_battery(opts: CheckOptions) -> Vec<SuiteResult> {
    let s = opts.seed;
    vec![
        gradient_suite(100, s),
        silhouette_suite(500, s.wrapping_add(1)),
        ahc_suite(200, s.wrapping_add(2)),
        schedule_suite(100, s.wrapping_add(3)),
        lambda_suite(50, s.wrapping_add(4), opts.projection),
        fedavg_suite(&reduction_config(s), &[s, s.wrapping_add(1)]),
    ]
}

pub fn render_table(results: &[SuiteResult]) -> String {
    let mut out = format!(
        "{:<38} {:>6} {:>6} {:>12} {:>10} {:>8}  {}\n",
        "check", "cases", "fails", "max error", "tolerance", "seconds", "result"
    );
    for r in results {
        out.push_str(&format!(
            "{:<38} {:>6} {:>6} {:>12.3e} {:>10.1e} {:>8.3}  {}\n",
            r.name,
            r.cases,
            r.failures,
            r.max_error,
            r.tolerance,
            r.seconds,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
        if let Some(d) = &r.detail {
            out.push_str(&format!("    {d}\n"));
        }
    }
    out
}

/// Runs the battery and returns the table together with the verdict, which
/// names every failed suite.
pub fn cmd_check(opts: CheckOptions) -> (String, Result<(), CliError>) {
    let results = run_battery(opts);
    let table = render_table(&results);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let verdict = if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(failed.join(", ")))
    };
    (table, verdict)
}
