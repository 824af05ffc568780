//! End-to-end acceptance battery. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any criterion fails.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use fedtree_cli::artifacts::{metrics_csv, REPORT_FILE};
use fedtree_cli::check::{ahc_suite, gradient_suite, schedule_suite, silhouette_suite, SuiteResult};
use fedtree_core::federation::Experiment;
use fedtree_core::synthetic::planted_partition;
use fedtree_core::{run_experiment, ExperimentReport, FederationConfig, Mode};

const SEEDS: u64 = 10;

struct Outcome {
    passed: bool,
    detail: String,
}

fn planted(seed: u64, mode: Mode) -> FederationConfig {
    FederationConfig {
        seed,
        mode,
        ..FederationConfig::default()
    }
}

fn run(cfg: &FederationConfig) -> ExperimentReport {
    run_experiment(cfg).unwrap_or_else(|e| panic!("seed {}: {e}", cfg.seed))
}

fn final_loss(cfg: &FederationConfig) -> f64 {
    let r = run(cfg);
    r.final_mean_test_loss()
        .filter(|v| v.is_finite())
        .unwrap_or(f64::INFINITY)
}

fn suite(r: SuiteResult, limit_secs: f64) -> Outcome {
    Outcome {
        passed: r.passed() && r.seconds < limit_secs,
        detail: format!(
            "{} cases, {} failures, max error {:.3e} (tolerance {:.0e}), {:.2}s{}",
            r.cases,
            r.failures,
            r.max_error,
            r.tolerance,
            r.seconds,
            r.detail.map(|d| format!(", first failure: {d}")).unwrap_or_default()
        ),
    }
}

fn gradient_fidelity() -> Outcome {
    suite(gradient_suite(200, 101), 5.0)
}

fn silhouette_oracle() -> Outcome {
    suite(silhouette_suite(500, 102), 5.0)
}

fn ahc_oracle() -> Outcome {
    suite(ahc_suite(200, 103), 5.0)
}

fn structural_invariants() -> Outcome {
    suite(schedule_suite(100, 104), f64::INFINITY)
}

fn fedavg_reduction() -> Outcome {
    let start = Instant::now();
    let mut identical = 0;
    for seed in 0..5 {
        let mut tree = planted(seed, Mode::Fedtree);
        tree.tau = 10.0;
        let fedit = FederationConfig {
            mode: Mode::Fedit,
            ..tree.clone()
        };
        let a = metrics_csv(&run(&tree)).expect("metrics render");
        let b = metrics_csv(&run(&fedit)).expect("metrics render");
        identical += usize::from(a == b);
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        passed: identical == 5 && secs < 120.0,
        detail: format!("{identical}/5 seeds byte-identical, {secs:.1}s"),
    }
}

fn planted_recovery() -> Outcome {
    let mut hits = 0;
    let mut slowest = 0.0f64;
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let start = Instant::now();
        let cfg = planted(seed, Mode::Fedtree);
        let exp = Experiment::prepare(&cfg).expect("prepare");
        let s = exp.schedule();
        let shallow = s.counts[..3].iter().all(|&c| c == 1);
        let truth = planted_partition(&cfg);
        let deep = s.counts[4..].iter().all(|&c| c == 2) && s.partitions[4..].iter().all(|p| *p == truth);
        hits += usize::from(shallow && deep);
        slowest = slowest.max(start.elapsed().as_secs_f64());
        lines.push(format!("{:?}", s.counts));
    }
    Outcome {
        passed: hits >= 9 && slowest < 60.0,
        detail: format!(
            "{hits}/{SEEDS} seeds recover the planted hierarchy; counts {}",
            lines.join(" ")
        ),
    }
}

struct Losses {
    fedtree: Vec<f64>,
    fedit: Vec<f64>,
    local: Vec<f64>,
    fixed_one: Vec<f64>,
    fixed_all: Vec<f64>,
    independent: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn collect_losses() -> Losses {
    let n = FederationConfig::default().clients;
    let each = |mode: Mode| (0..SEEDS).map(|s| final_loss(&planted(s, mode))).collect::<Vec<_>>();
    Losses {
        fedtree: each(Mode::Fedtree),
        fedit: each(Mode::Fedit),
        local: each(Mode::LocalOnly),
        fixed_one: each(Mode::FixedK(1)),
        fixed_all: each(Mode::FixedK(n)),
        independent: each(Mode::IndependentLayerwise),
    }
}

fn personalization(l: &Losses) -> Outcome {
    let wins = (0..SEEDS as usize)
        .filter(|&i| l.fedtree[i] <= l.fedit[i] && l.fedtree[i] <= l.local[i])
        .count();
    let tree = mean(&l.fedtree);
    let ok_fixed = tree <= mean(&l.fixed_one) && tree <= mean(&l.fixed_all);
    Outcome {
        passed: wins >= 9 && ok_fixed,
        detail: format!(
            "fedtree beats fedit and local_only in {wins}/{SEEDS} seeds; seed means: fedtree {tree:.4}, fedit {:.4}, local_only {:.4}, fixed_k(1) {:.4}, fixed_k(N) {:.4}",
            mean(&l.fedit),
            mean(&l.local),
            mean(&l.fixed_one),
            mean(&l.fixed_all)
        ),
    }
}

fn ablation(l: &Losses) -> Outcome {
    let worse = (0..SEEDS as usize)
        .filter(|&i| l.independent[i] >= l.fedtree[i])
        .count();
    let gap = mean(&l.independent) - mean(&l.fedtree);
    Outcome {
        passed: gap >= 0.0 && worse >= 7,
        detail: format!(
            "seed-mean gap (independent - fedtree) {gap:+.4}; independent >= fedtree in {worse}/{SEEDS} seeds"
        ),
    }
}

fn empirical_descent() -> Outcome {
    let (mut ok, mut total) = (0, 0);
    for seed in 0..SEEDS {
        let mut cfg = planted(seed, Mode::Fedtree);
        cfg.eta = 1e-3;
        let r = run(&cfg);
        for w in r.rounds.windows(2).filter(|w| w[0].round >= 2) {
            total += 1;
            ok += usize::from(w[1].mean_train_loss <= w[0].mean_train_loss);
        }
    }
    let frac = ok as f64 / total as f64;
    Outcome {
        passed: frac >= 0.95,
        detail: format!(
            "{ok}/{total} round transitions after round 2 non-increasing ({:.1}%)",
            100.0 * frac
        ),
    }
}

fn run_cli(config: &Path, out: &Path, threads: &str) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_fedtree"))
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("FEDTREE_THREADS", threads)
        .stdout(Stdio::null())
        .status()
        .expect("spawn fedtree");
    assert!(status.success(), "fedtree run failed with {status}");
    std::fs::read(out.join(REPORT_FILE)).expect("report written")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let configs = [
        "{}",
        r#"{"seed": 7, "mode": "independent_layerwise", "metric": "cosine"}"#,
        r#"{"seed": 3, "mode": {"fixed_k": 3}, "weighting": "by_samples", "T": 5}"#,
    ];
    let mut same = 0;
    for (i, text) in configs.iter().enumerate() {
        let path = dir.path().join(format!("c{i}.json"));
        std::fs::write(&path, text).expect("write config");
        let one = run_cli(&path, &dir.path().join(format!("r{i}_1")), "1");
        let many = run_cli(&path, &dir.path().join(format!("r{i}_4")), "4");
        same += usize::from(one == many);
    }
    Outcome {
        passed: same == configs.len(),
        detail: format!(
            "{same}/{} configs give byte-identical report.json with 1 and 4 threads",
            configs.len()
        ),
    }
}

fn main() {
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, o: Outcome| {
        println!(
            "criterion {id:>2} {name:<28} {}  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.passed {
            failed.push(id);
        }
    };
    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "silhouette oracle", silhouette_oracle());
    report(3, "merge tree oracle", ahc_oracle());
    report(4, "structural invariants", structural_invariants());
    report(5, "fedavg reduction", fedavg_reduction());
    report(6, "planted hierarchy recovery", planted_recovery());
    let losses = collect_losses();
    report(7, "personalization gain", personalization(&losses));
    report(8, "ablation direction", ablation(&losses));
    report(9, "empirical descent", empirical_descent());
    report(10, "determinism", determinism());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
