use std::path::Path;
use std::process::Command;

use bbvi::estimator::estimate_energy_gradient;
use bbvi::experiments::{random_feasible, ExperimentConfig, ExperimentKind};
use bbvi::optimizer::{run_replicated, HitSearch, OptimizerConfig};
use bbvi::rng::substream;
use bbvi::targets::{FiniteSumQuadratic, Target};
use bbvi::{BaseDistribution, BlockLayout, Init, ScaleMatrix, Structure, VariationalParams};
use nalgebra::{DMatrix, DVector};

fn bbvi(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bbvi"))
        .args(args)
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    bbvi(args).status.code().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.conf");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = "# small grid\nstepsize.count = 6\nstepsize.low = 1e-3\nstepsize.high = 0.5\n\
                     variance.outer = 40\nvariance.points = 2\nnonconvex.count = 4\nrun.eval_every = 25\n";

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&["nonconvex", "--out", out]), 0);
    assert_eq!(code(&["sweep", "--family", "bogus", "--out", out]), 2);
    assert_eq!(code(&["sweep", "--eps", "-1", "--out", out]), 2);
    assert_eq!(code(&["scaling", "--m", "0", "--out", out]), 2);
    assert_eq!(code(&["scaling", "--n", "ten", "--out", out]), 2);

    let bad = write_config(dir.path(), "stepsize.low = 1\nstepsize.high = 1e-3\n");
    let o = bbvi(&["sweep", "--config", &bad, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepsize.low"));
    let unknown = write_config(dir.path(), "no.such.key = 3\n");
    assert_eq!(code(&["sweep", "--config", &unknown, "--out", out]), 2);

    let missing = dir.path().join("missing.conf");
    assert_eq!(
        code(&["run", "--config", missing.to_str().unwrap(), "--out", out]),
        1
    );
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let under_file = blocker.join("sub");
    assert_eq!(
        code(&["nonconvex", "--out", under_file.to_str().unwrap()]),
        1
    );
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap_or_default()
        .to_string()
}

#[test]
fn outputs_have_expected_headers_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), SMALL);
    let cases = [
        ("sweep", "sweep.csv", "family,n,stepsize,T_hit,hit"),
        ("scaling", "scaling.csv", "family,n,best_stepsize,T_best"),
        (
            "variance",
            "variance.csv",
            "family,n,M,d_star,k_phi,empirical,stderr,bound",
        ),
        ("nonconvex", "nonconvex.csv", "x,y,z,energy,det,min_eig"),
        ("run", "trace_structured_n2.csv", "iteration,r,elbo"),
    ];
    for (cmd, file, header) in cases {
        let mut bodies = Vec::new();
        for k in 0..2 {
            let out = dir.path().join(format!("{cmd}{k}"));
            let o = bbvi(&[
                cmd,
                "--config",
                &conf,
                "--n",
                "2",
                "--family",
                "mean_field,structured",
                "--tmax",
                "300",
                "--reps",
                "2",
                "--seed",
                "7",
                "--out",
                out.to_str().unwrap(),
            ]);
            assert!(
                o.status.success(),
                "{cmd}: {}",
                String::from_utf8_lossy(&o.stderr)
            );
            let path = out.join(file);
            assert_eq!(first_line(&path), header, "{cmd}");
            bodies.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(bodies[0], bodies[1], "{cmd} output differs between reruns");
        assert!(
            bodies[0].iter().filter(|&&b| b == b'\n').count() > 1,
            "{cmd} wrote no rows"
        );
    }
}

#[test]
fn sweep_results_depend_on_seed_only() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::Sweep);
    cfg.target.n = vec![2];
    cfg.stepsize.count = 4;
    cfg.stepsize.low = 1e-3;
    cfg.tmax = 200;
    cfg.reps = 2;
    let a = bbvi::experiments::sweep(&cfg).unwrap();
    let b = bbvi::experiments::sweep(&cfg).unwrap();
    assert_eq!(a, b);

    let layout = BlockLayout::new(2, 2, 3).unwrap();
    let target =
        FiniteSumQuadratic::random_hierarchical(layout, 5.0, &mut substream(3, &[])).unwrap();
    let s = Structure::BorderedBlockDiagonal(layout);
    let optimum = bbvi::targets::gaussian_optimum(&target, s).unwrap();
    let init = VariationalParams::init(s, Init::StandardGaussian);
    let config = OptimizerConfig {
        stepsize: 0.01,
        max_iters: 300,
        ..OptimizerConfig::default()
    };
    let search = |seed| HitSearch {
        eps: 1e-9,
        reps: 3,
        seed,
        budget: 300,
        prune: None,
    };
    let r1 = run_replicated(&init, &target, &config, &optimum, &search(1), &[9]).unwrap();
    let r2 = run_replicated(&init, &target, &config, &optimum, &search(1), &[9]).unwrap();
    let r3 = run_replicated(&init, &target, &config, &optimum, &search(2), &[9]).unwrap();
    assert_eq!(r1, r2);
    assert_ne!(r1.mean_trace, r3.mean_trace);
}

/// `grad_m f = sum_n P_n (m - c_n)` and `grad_C f = (P C)` on stored entries.
fn exact_energy_gradient(target: &FiniteSumQuadratic, q: &VariationalParams) -> Vec<f64> {
    let d = target.dim();
    let m = DVector::from_column_slice(&q.location);
    let mut p = DMatrix::<f64>::zeros(d, d);
    let mut gm = DVector::<f64>::zeros(d);
    for part in target.parts() {
        let k = part.indices.len();
        let mut sub = DVector::zeros(k);
        for (a, &i) in part.indices.iter().enumerate() {
            sub[a] = m[i] - part.center[a];
        }
        let local = &part.precision * sub;
        for (a, &i) in part.indices.iter().enumerate() {
            gm[i] += local[a];
            for (b, &j) in part.indices.iter().enumerate() {
                p[(i, j)] += part.precision[(a, b)];
            }
        }
    }
    let pc = p * q.scale.to_dense();
    let s = q.structure();
    let mut gc = ScaleMatrix::zeros(s);
    for i in 0..d {
        for j in 0..=i {
            if let Some(o) = s.stored_offset(i, j) {
                gc.values_mut()[o] = pc[(i, j)];
            }
        }
    }
    let mut out: Vec<f64> = gm.iter().copied().collect();
    out.extend_from_slice(gc.values());
    out
}

#[test]
fn estimator_is_unbiased_for_every_structure() {
    let layout = BlockLayout::new(2, 2, 3).unwrap();
    let mut rng = substream(21, &[]);
    let target = FiniteSumQuadratic::random_hierarchical(layout, 5.0, &mut rng).unwrap();
    let d = layout.dim();
    for s in [
        Structure::Diagonal { dim: d },
        Structure::DenseLowerTriangular { dim: d },
        Structure::BorderedBlockDiagonal(layout),
    ] {
        for base in [
            BaseDistribution::StandardGaussian,
            BaseDistribution::ScaledUniform,
        ] {
            let q = random_feasible(
                &VariationalParams::init(s, Init::StandardGaussian),
                &mut rng,
            )
            .unwrap();
            let exact = exact_energy_gradient(&target, &q);
            let reps = 20_000;
            let mut sum = vec![0.0; exact.len()];
            let mut sq = vec![0.0; exact.len()];
            for _ in 0..reps {
                let g = estimate_energy_gradient(&q, &target, base, 1, &mut rng)
                    .unwrap()
                    .to_flat();
                for k in 0..g.len() {
                    sum[k] += g[k];
                    sq[k] += g[k] * g[k];
                }
            }
            let n = reps as f64;
            for k in 0..exact.len() {
                let mean = sum[k] / n;
                let se = ((sq[k] / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
                assert!(
                    (mean - exact[k]).abs() <= 4.5 * se + 1e-12,
                    "{} {} entry {k}: {mean} vs {}",
                    s.tag(),
                    base.name(),
                    exact[k]
                );
            }
        }
    }
}
