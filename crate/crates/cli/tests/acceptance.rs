//! Acceptance checks. Each test prints one `PASS`/`FAIL` line (written straight
//! to stderr so it survives output capture) and then asserts.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use smallunif::fnspace::{brownian_eigenelements, brownian_eigenvalue, coefficient_function, generate_dataset};
use smallunif::fpca::{eigensolve, empirical_covariance, DEFAULT_RELATIVE_FLOOR};
use smallunif::fractional::maximize;
use smallunif::gproc::{covariance_matrix, factorize, sample_index_points, simulate_sup, Factorization};
use smallunif::harness::run_study;
use smallunif::rng::stream;
use smallunif::testing::dn_statistic;
use smallunif::{
    CoefficientKind, FractionalObjective, GpConfig, GpKernel, Grid, OptimizerConfig, SchemeKind, StudyConfig,
    TruncationMode,
};

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let status = if pass && elapsed <= limit { "PASS" } else { "FAIL" };
    let line = format!(
        "[acceptance] criterion {id} {name}: {status} ({:.2}s of {:.0}s) {detail}\n",
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
    assert!(elapsed <= limit, "criterion {id} exceeded its time budget");
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn grid100() -> Arc<Grid> {
    Arc::new(Grid::equispaced(100).unwrap())
}

#[test]
fn criterion_1_eigen_recovery() {
    let start = Instant::now();
    let g = grid100();
    let eig = eigensolve(&g.brownian_kernel(), &g, DEFAULT_RELATIVE_FLOOR).unwrap();
    let worst_rel = (1..=5)
        .map(|j| (eig.eigenvalues()[j - 1] / brownian_eigenvalue(j) - 1.0).abs())
        .fold(0.0, f64::max);
    let (_, e1) = brownian_eigenelements(1, &g).unwrap();
    let est = eig.eigenfunction_values(0);
    let dev = |s: f64| {
        est.iter()
            .zip(e1.values())
            .map(|(a, b)| (a - s * b).abs())
            .fold(0.0, f64::max)
    };
    let max_dev = dev(1.0).min(dev(-1.0));
    report(
        1,
        "eigen recovery",
        worst_rel <= 0.02 && max_dev <= 0.05,
        start.elapsed(),
        secs(1),
        &format!("max rel eigenvalue error {worst_rel:.2e}, max eigenfunction deviation {max_dev:.2e}"),
    );
}

fn random_objective(rng: &mut impl Rng, k: usize, a_n: f64) -> FractionalObjective {
    let theta = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let psi = (0..k).map(|_| rng.random_range(0.3..5.0)).collect();
    FractionalObjective::new(theta, psi, a_n).unwrap()
}

fn random_interior_point(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    loop {
        let b: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (0.2..1.0).contains(&r) {
            return b;
        }
    }
}

fn max_abs(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn criterion_2_derivatives() {
    let start = Instant::now();
    let mut rng = stream(2024, &[]);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for inst in 0..100 {
        let k = 1 + inst % 10;
        let a_n = rng.random_range(0.01..1.0);
        let obj = random_objective(&mut rng, k, a_n);
        let b = random_interior_point(&mut rng, k);
        let f = |x: &[f64]| obj.value(x);

        let grad = obj.gradient(&b).unwrap();
        let h = 1e-6;
        let fd_grad: Vec<f64> = (0..k)
            .map(|l| {
                let (mut p, mut m) = (b.clone(), b.clone());
                p[l] += h;
                m[l] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect();
        let err = max_abs(grad.iter().zip(&fd_grad).map(|(a, c)| a - c));
        worst_g = worst_g.max(err / max_abs(grad.iter().copied()).max(1e-12));

        // second differences of the objective only
        let hess = obj.hessian(&b).unwrap();
        let h = 1e-4;
        let mut err = 0.0f64;
        for l in 0..k {
            for m in 0..k {
                let shifted = |dl: f64, dm: f64| {
                    let mut x = b.clone();
                    x[l] += dl;
                    x[m] += dm;
                    f(&x)
                };
                let fd = (shifted(h, h) - shifted(h, -h) - shifted(-h, h) + shifted(-h, -h)) / (4.0 * h * h);
                err = err.max((hess[(l, m)] - fd).abs());
            }
        }
        worst_h = worst_h.max(err / max_abs(hess.iter().copied()).max(1e-12));
    }
    report(
        2,
        "derivative correctness",
        worst_g <= 1e-5 && worst_h <= 1e-4,
        start.elapsed(),
        secs(5),
        &format!("worst relative gradient error {worst_g:.2e}, Hessian {worst_h:.2e}"),
    );
}

fn brute_force(obj: &FractionalObjective) -> f64 {
    let step = 1e-3;
    let steps = (2.0 / step) as i64;
    let coord = |i: i64| -1.0 + i as f64 * step;
    match obj.dim() {
        1 => (0..=steps)
            .map(|i| obj.value(&[coord(i)]))
            .fold(f64::NEG_INFINITY, f64::max),
        2 => {
            let mut best = f64::NEG_INFINITY;
            for i in 0..=steps {
                for j in 0..=steps {
                    let b = [coord(i), coord(j)];
                    if b[0] * b[0] + b[1] * b[1] <= 1.0 {
                        best = best.max(obj.value(&b));
                    }
                }
            }
            best
        }
        _ => unreachable!(),
    }
}

#[test]
fn criterion_3_optimizer_oracle() {
    let start = Instant::now();
    let mut rng = stream(77, &[]);
    let cfg = OptimizerConfig::default();
    let (mut worst_cs, mut worst_bf) = (0.0f64, 0.0f64);
    for inst in 0..50 {
        let k = 1 + inst % 10;
        let obj = random_objective(&mut rng, k, 1e-12);
        let best = maximize(&obj, &cfg, &mut stream(77, &[1, inst as u64])).best_value;
        let oracle = obj
            .theta()
            .iter()
            .zip(obj.psi())
            .map(|(t, p)| (t / p).powi(2))
            .sum::<f64>()
            .sqrt();
        worst_cs = worst_cs.max((best - oracle).abs() / oracle);
        if k <= 2 {
            worst_bf = worst_bf.max((best - brute_force(&obj)).abs() / oracle.max(1.0));
        }
    }
    report(
        3,
        "optimizer oracle",
        worst_cs <= 1e-4 && worst_bf <= 1e-3,
        start.elapsed(),
        secs(30),
        &format!("worst relative error vs closed form {worst_cs:.2e}, vs brute force {worst_bf:.2e}"),
    );
}

#[test]
fn criterion_4_gaussian_sup() {
    let start = Instant::now();
    // unit weights and negligible a_n make the kernel the cosine of the angle
    let kernel = GpKernel::new(vec![1.0, 1.0], vec![1.0, 1.0], 1e-12).unwrap();
    let mut worst_z = 0.0f64;
    for (i, &rho) in [-0.5f64, 0.0, 0.5, 0.9].iter().enumerate() {
        let phi = rho.acos();
        let points = vec![vec![1.0, 0.0], vec![phi.cos(), phi.sin()]];
        let sim = simulate_sup(&kernel, &points, 100_000, 40 + i as u64).unwrap();
        let n = sim.samples.len() as f64;
        let mean = sim.samples.iter().sum::<f64>() / n;
        let var = sim.samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = ((1.0 - rho) / std::f64::consts::PI).sqrt();
        worst_z = worst_z.max((mean - expected).abs() / (var / n).sqrt());
    }

    let mut rng = stream(404, &[]);
    let mut worst_jitter = 0.0f64;
    let mut all_cholesky = true;
    for _ in 0..20 {
        let k = rng.random_range(1..=10);
        let mut lambda: Vec<f64> = (0..k).map(|_| rng.random_range(1e-3..1.0)).collect();
        lambda.sort_by(|a, b| b.total_cmp(a));
        let fvals = lambda.iter().map(|l| 1.0 / (l + rng.random_range(0.0..0.05))).collect();
        let kernel = GpKernel::new(lambda, fvals, rng.random_range(1e-8..1e-2)).unwrap();
        let pts = sample_index_points(k, 312, 313, &mut rng).unwrap();
        match factorize(&covariance_matrix(&kernel, &pts)).unwrap().1 {
            Factorization::Cholesky { jitter } => worst_jitter = worst_jitter.max(jitter),
            Factorization::EigenClipped { .. } => all_cholesky = false,
        }
    }
    report(
        4,
        "gaussian sup engine",
        worst_z <= 3.0 && all_cholesky && worst_jitter <= 1e-6,
        start.elapsed(),
        secs(60),
        &format!("worst |z| of E[max] {worst_z:.2}, largest jitter {worst_jitter:.0e}, all factorized: {all_cholesky}"),
    );
}

fn desk_study(kind: CoefficientKind, snr: Option<f64>, n_list: Vec<usize>, c: f64, seed: u64) -> StudyConfig {
    StudyConfig {
        rho_kind: kind,
        snr,
        sigma_known: true,
        n_list,
        n_sims: 200,
        c_exponents: vec![c],
        truncation_mode: TruncationMode::Deterministic,
        schemes: vec![SchemeKind::Ridge],
        alpha: 0.05,
        gp: GpConfig::default(),
        seed,
        ..StudyConfig::default()
    }
}

#[test]
fn criterion_5_size() {
    let start = Instant::now();
    let mut cfg = desk_study(CoefficientKind::Rho0, None, vec![200], 2.0, 5);
    cfg.sigma_eps = Some(1.0);
    let cell = &run_study(&cfg).unwrap()[0];
    let w = cell.reject_rate_w;
    let d = cell.reject_rate_d.unwrap();
    report(
        5,
        "size sanity",
        cell.failures == 0 && (0.0..=0.15).contains(&w) && (0.01..=0.12).contains(&d),
        start.elapsed(),
        secs(600),
        &format!(
            "reject rate W {w:.3}, D {d:.3}, k {}, failures {}",
            cell.gp_k, cell.failures
        ),
    );
}

#[test]
fn criterion_6_power() {
    let start = Instant::now();
    let cfg = desk_study(CoefficientKind::Rho1, Some(0.10), vec![1000], 4.0, 6);
    let cell = &run_study(&cfg).unwrap()[0];
    let w = cell.reject_rate_w;
    let d = cell.reject_rate_d.unwrap();
    report(
        6,
        "power sanity",
        cell.gp_k == 3 && w >= 0.8 && d >= 0.8 && (w - d).abs() <= 0.15,
        start.elapsed(),
        secs(900),
        &format!("reject rate W {w:.3}, D {d:.3}, k {}", cell.gp_k),
    );
}

#[test]
fn criterion_7_consistency() {
    let start = Instant::now();
    let cfg = desk_study(CoefficientKind::Rho1, Some(0.10), vec![50, 200, 1000], 4.0, 7);
    let errors: Vec<f64> = run_study(&cfg).unwrap().iter().map(|c| c.mean_log_error).collect();
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    report(
        7,
        "consistency",
        errors.len() == 3 && decreasing,
        start.elapsed(),
        secs(600),
        &format!("mean log error at n = 50, 200, 1000: {errors:.3?}"),
    );
}

#[test]
fn criterion_8_dn_null_law() {
    let start = Instant::now();
    let g = grid100();
    let zero = coefficient_function(CoefficientKind::Rho0, &g);
    let reps = 500;
    let d: Vec<f64> = (0..reps)
        .map(|r| {
            let data = generate_dataset(1000, &zero, 1.0, &mut stream(8, &[r])).unwrap();
            let eig = eigensolve(&empirical_covariance(&data), data.grid(), DEFAULT_RELATIVE_FLOOR).unwrap();
            dn_statistic(&data, &eig, 3, 1.0).unwrap()
        })
        .collect();
    let mean = d.iter().sum::<f64>() / reps as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
    report(
        8,
        "D_n null law",
        (2.6..=3.4).contains(&mean) && (4.0..=8.0).contains(&var),
        start.elapsed(),
        secs(120),
        &format!("sample mean {mean:.3}, sample variance {var:.3}"),
    );
}

fn cli(threads: usize, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_smallunif"))
        .env("RUST_LOG", "warn")
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

/// Runs `args` (with `{dir}` substituted) and returns stdout plus every file written.
fn snapshot(dir: &Path, threads: usize, args: &[&str]) -> Vec<Vec<u8>> {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.file_name().unwrap().to_str().unwrap().starts_with("out") {
            std::fs::remove_file(p).unwrap();
        }
    }
    let d = dir.to_str().unwrap();
    let args: Vec<String> = args.iter().map(|a| a.replace("{dir}", d)).collect();
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let mut snap = vec![cli(threads, &refs)];
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("out"))
        .collect();
    files.sort();
    snap.extend(files.iter().map(|p| std::fs::read(p).unwrap()));
    snap
}

#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cli(
        1,
        &[
            "generate",
            "--n",
            "300",
            "--rho",
            "rho1",
            "--snr",
            "0.2",
            "--seed",
            "9",
            "-o",
            d.join("data.csv").to_str().unwrap(),
        ],
    );
    std::fs::write(
        d.join("study.toml"),
        "rho_kind = \"rho1\"\nsnr = 0.2\nn_list = [100]\nn_sims = 20\nc_exponents = [3.0]\n\
         truncation_mode = \"data_based\"\nschemes = [\"simple\", \"ridge\"]\nseed = 9\n[gp]\nreps = 5000\n",
    )
    .unwrap();
    let commands: [&[&str]; 5] = [
        &[
            "generate",
            "--n",
            "150",
            "--rho",
            "rho2",
            "--snr",
            "0.1",
            "--seed",
            "9",
            "-o",
            "{dir}/out.csv",
        ],
        &[
            "estimate",
            "{dir}/data.csv",
            "--truth",
            "rho1",
            "-o",
            "{dir}/out-fit.json",
        ],
        &[
            "test",
            "{dir}/data.csv",
            "--seed",
            "9",
            "--baselines",
            "-o",
            "{dir}/out-test.json",
        ],
        &["simulate-null", "--k", "3", "--seed", "9", "-o", "{dir}/out-null.json"],
        &["study", "{dir}/study.toml", "-o", "{dir}/out-study.csv"],
    ];
    let mut mismatches = Vec::new();
    for args in commands {
        let reference = snapshot(d, 1, args);
        for threads in [1, 8] {
            if snapshot(d, threads, args) != reference {
                mismatches.push(format!("{} ({threads} threads)", args[0]));
            }
        }
    }
    report(
        9,
        "determinism",
        mismatches.is_empty(),
        start.elapsed(),
        secs(120),
        &format!("5 commands x (1, 1, 8 threads); mismatches: {mismatches:?}"),
    );
}
