//! End-to-end acceptance checks, one printed PASS/FAIL line per criterion.
//! Run with `cargo test -p usm --test acceptance`; the process exits
//! nonzero when any line fails.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erf;

use usm_core::decoder::{AnalyticEllipsoid, LatentGaussian, SdfDecoder};
use usm_core::eval::{
    chamfer, placed_surface_points, pose_correct, pose_error, uncertainty_correlation, PoseErrors, PoseThresholds,
};
use usm_core::geometry::{world_to_object, Pose9, PoseGaussian};
use usm_core::ingestion::assemble_world_points;
use usm_core::optimizer::{fit, init_state, FitProblem, OptimConfig, OptimState};
use usm_core::propagation::{sdf_distribution, SdfGaussian};
use usm_core::renderer::{
    draw_depth, logit_normal_cdf, logit_normal_pdf, logit_normal_quantile, occupancy_from_sdf, termination_weights,
    RayConfig, Renderer,
};
use usm_core::surface_loss::{energy_score_gaussian, EsConfig};
use usm_core::synth::{synthesize, SynthSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, start: Instant, out: Outcome, failures: &mut Vec<usize>) {
    let tag = if out.pass { "PASS" } else { "FAIL" };
    println!(
        "criterion {n} {tag} {name}: {} [{:.1} s]",
        out.detail,
        start.elapsed().as_secs_f64()
    );
    if !out.pass {
        failures.push(n);
    }
}

fn within_time(start: Instant, limit: Duration) -> bool {
    start.elapsed() < limit
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let d = AnalyticEllipsoid::default();
    let gt = Pose9::new(Vector3::new(0.05, 0.0, -0.03), Vector3::new(0.0, 0.1, 0.3), Vector3::new(0.6, 0.5, 0.45))
        .unwrap();
    let spec = SynthSpec {
        gt_pose: gt,
        views: 1,
        width: 32,
        height: 32,
        focal: 32.0,
        ..SynthSpec::default()
    };
    let frames = synthesize(&d, &spec).unwrap();
    let cfg = OptimConfig::default();
    let points = assemble_world_points(&frames, cfg.point_budget, 7).unwrap();
    let state = init_state(&d, &points, &cfg, None).unwrap();
    let problem = FitProblem::new(&d, &frames, points, &state.pose.mean, &cfg).unwrap();
    let mut x0 = state.to_params();
    // move off the symmetric zero code so latent coordinates carry gradient
    x0[0] = 0.08;
    x0[1] = -0.05;
    x0[2] = 0.03;
    let iteration = 3;
    let g = problem.total_loss(&x0, iteration).unwrap().grad;
    let h = 1e-6;
    let mut agree = 0;
    for i in 0..x0.len() {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[i] += h;
        xm[i] -= h;
        let fp = problem.total_loss_at(&xp, iteration, Some(&x0)).unwrap().record.total;
        let fm = problem.total_loss_at(&xm, iteration, Some(&x0)).unwrap().record.total;
        let fd = (fp - fm) / (2.0 * h);
        let scale = g[i].abs().max(fd.abs()).max(1e-6);
        if (fd - g[i]).abs() / scale <= 1e-3 {
            agree += 1;
        }
    }
    let frac = agree as f64 / x0.len() as f64;
    Outcome {
        pass: frac >= 0.95 && within_time(start, Duration::from_secs(120)),
        detail: format!(
            "{agree}/{} coordinates within 1e-3 relative ({:.1}%, need >= 95%)",
            x0.len(),
            100.0 * frac
        ),
    }
}

fn variance_oracle() -> Outcome {
    let start = Instant::now();
    let d = AnalyticEllipsoid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut ok = 0;
    for _ in 0..20 {
        let mut mean = vec![0.0; 64];
        for v in mean.iter_mut().take(3) {
            *v = rng.random_range(-0.4..0.4);
        }
        let var: Vec<f64> = (0..64).map(|_| rng.random_range(1e-6..1e-4)).collect();
        let z = LatentGaussian::new(mean, var).unwrap();
        let xi_mean = Pose9::new(
            Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
            Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            Vector3::from_fn(|_, _| rng.random_range(0.6..1.5)),
        )
        .unwrap();
        let mut pv = [0.0; 9];
        pv.iter_mut().for_each(|v| *v = rng.random_range(1e-6..1e-4));
        let pose = PoseGaussian::new(xi_mean, pv).unwrap();
        let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
        let p = xi_mean.t + dir * rng.random_range(0.8..2.0);
        let predicted = sdf_distribution(&d, &z, &pose, &p).unwrap().var;

        let n = 50_000;
        let mut samples = Vec::with_capacity(n);
        let mut zs = vec![0.0; 64];
        for _ in 0..n {
            for (i, zi) in zs.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *zi = z.mean[i] + z.var[i].sqrt() * e;
            }
            let mut xi = xi_mean.to_vector();
            for (k, x) in xi.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *x += pose.var[k].sqrt() * e;
            }
            samples.push(d.decode(&zs, &world_to_object(&Pose9::from_vector(&xi), &p)).unwrap());
        }
        let m = samples.iter().sum::<f64>() / n as f64;
        let mc = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let rel = (predicted - mc).abs() / mc;
        worst = worst.max(rel);
        if rel <= 0.1 {
            ok += 1;
        }
    }
    Outcome {
        pass: ok == 20 && within_time(start, Duration::from_secs(60)),
        detail: format!("{ok}/20 configurations within 10% of Monte Carlo, worst {:.2}%", 100.0 * worst),
    }
}

/// Closed-form CRPS of N(mu, sigma^2) at `y`.
fn crps_oracle(mu: f64, sigma: f64, y: f64) -> f64 {
    let w = (y - mu) / sigma;
    let cdf = 0.5 * (1.0 + erf(w / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * w * w).exp() / (2.0 * std::f64::consts::PI).sqrt();
    sigma * (w * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::f64::consts::PI.sqrt())
}

fn energy_score_oracle() -> Outcome {
    let start = Instant::now();
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    let mut cell = 0u64;
    for &mu in &[-1.0, -0.5, 0.0, 0.5, 1.0] {
        for &sigma in &[0.5, 1.0, 1.5, 2.0] {
            for &y in &[-1.0, -0.5, 0.0, 0.5, 1.0] {
                let es = energy_score_gaussian(mu, sigma * sigma, y, &EsConfig { samples: 1000, seed: cell }).unwrap();
                let exact = crps_oracle(mu, sigma, y);
                let rel = (es - exact).abs() / exact;
                worst = worst.max(rel);
                if rel <= 0.02 {
                    ok += 1;
                }
                cell += 1;
            }
        }
    }
    Outcome {
        pass: ok == 100 && within_time(start, Duration::from_secs(10)),
        detail: format!("{ok}/100 cells within 2% of closed-form CRPS, worst {:.2}%", 100.0 * worst),
    }
}

fn renderer_normalization() -> Outcome {
    let r = Renderer::new(RayConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut draw_dev, mut mean_dev, mut det_weight_dev, mut det_depth_dev): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let depths: Vec<f64> = (1..=32).map(|i| 1.0 + i as f64 / 32.0 * 2.0).collect();
    for ray in 0..1000u64 {
        let sdf: Vec<SdfGaussian> = (0..32)
            .map(|_| SdfGaussian {
                mean: rng.random_range(-0.06..0.06),
                var: rng.random_range(0.0..1e-4),
            })
            .collect();
        let t = r.termination_distributions(&sdf, ray).unwrap();
        for m in 0..t.draws {
            draw_dev = draw_dev.max((t.draw(m).iter().sum::<f64>() - 1.0).abs());
        }
        mean_dev = mean_dev.max((t.mean.iter().sum::<f64>() - 1.0).abs());

        let det: Vec<SdfGaussian> = sdf.iter().map(|g| SdfGaussian { mean: g.mean, var: 0.0 }).collect();
        let occ: Vec<f64> = det.iter().map(|g| occupancy_from_sdf(g.mean, 400.0)).collect();
        let direct = termination_weights(&occ);
        let t0 = r.termination_distributions(&det, ray).unwrap();
        for (a, b) in t0.mean.iter().zip(&direct) {
            det_weight_dev = det_weight_dev.max((a - b).abs());
        }
        let rendered = r.render_from_sdf(&det, &depths, 3.3, ray).unwrap();
        det_depth_dev = det_depth_dev.max((rendered.depth_mean - draw_depth(&occ, &depths, 3.3)).abs());
    }
    // "exactly" is read as equal up to accumulated rounding of 33 products
    let pass = draw_dev <= 1e-14 && mean_dev <= 1e-12 && det_weight_dev <= 1e-6 && det_depth_dev <= 1e-6;
    Outcome {
        pass,
        detail: format!(
            "1000 rays: max |sum draw weights - 1| {draw_dev:.1e}, max |sum mean weights - 1| {mean_dev:.1e}, \
             deterministic limit weight dev {det_weight_dev:.1e}, depth dev {det_depth_dev:.1e} m"
        ),
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn logit_normal_consistency() -> Outcome {
    let mut pdf_dev: f64 = 0.0;
    let mut inv_dev: f64 = 0.0;
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    for &mu in &[-0.01, -0.005, 0.0, 0.005, 0.01] {
        for &sd in &[0.001, 0.005, 0.01] {
            for &l in &[100.0, 400.0] {
                // substitute o = sigmoid(x); the logit of the occupancy is N(-l mu, (l sd)^2)
                let (c, w) = (-l * mu, 10.0 * l * sd);
                let total = simpson(
                    |x| {
                        let o = sigmoid(x);
                        if o <= 0.0 || o >= 1.0 {
                            return 0.0;
                        }
                        logit_normal_pdf(o, mu, sd * sd, l).unwrap() * o * (1.0 - o)
                    },
                    c - w,
                    c + w,
                    20_000,
                );
                pdf_dev = pdf_dev.max((total - 1.0).abs());
                for k in 1..50 {
                    let o = k as f64 / 50.0;
                    let u = logit_normal_cdf(o, mu, sd * sd, l).unwrap();
                    if !(1e-9..=1.0 - 1e-9).contains(&u) {
                        continue;
                    }
                    inv_dev = inv_dev.max((logit_normal_quantile(u, mu, sd * sd, l).unwrap() - o).abs());
                }
            }
        }
    }

    let r = Renderer::new(RayConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut qmc_dev: f64 = 0.0;
    for (k, &mu) in [-0.01, -0.005, 0.0, 0.004, 0.01].iter().enumerate() {
        for (j, &sd) in [0.001, 0.0025, 0.005].iter().enumerate() {
            let sdf = [SdfGaussian { mean: mu, var: sd * sd }];
            // a one-sample ray terminates at its only sample with probability o
            let qmc = r.termination_distributions(&sdf, (10 * k + j) as u64).unwrap().mean[0];
            let n = 1_000_000;
            let mc = (0..n)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    occupancy_from_sdf(mu + sd * e, 400.0)
                })
                .sum::<f64>()
                / n as f64;
            qmc_dev = qmc_dev.max((qmc - mc).abs());
        }
    }
    Outcome {
        pass: pdf_dev <= 1e-6 && inv_dev <= 1e-9 && qmc_dev <= 1e-3,
        detail: format!(
            "pdf mass dev {pdf_dev:.1e}, quantile(cdf(o)) dev {inv_dev:.1e}, QMC vs 1e6 MC occupancy dev {qmc_dev:.1e}"
        ),
    }
}

struct SceneFit {
    gt: Pose9,
    spec: SynthSpec,
    state: OptimState,
    errors: PoseErrors,
}

fn run_scene(spec: SynthSpec, cfg: &OptimConfig, initial: Option<Pose9>) -> SceneFit {
    let d = AnalyticEllipsoid::default();
    let frames = synthesize(&d, &spec).unwrap();
    let state = fit(&d, &frames, cfg, initial).unwrap();
    let errors = pose_error(&state.pose.mean, &spec.gt_pose);
    SceneFit {
        gt: spec.gt_pose,
        spec,
        state,
        errors,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median total loss over iterations 150..=200 below the median over 1..=50.
fn loss_trend_holds(state: &OptimState) -> bool {
    let total = |lo: usize, hi: usize| -> Vec<f64> {
        state
            .history
            .iter()
            .filter(|h| (lo..=hi).contains(&h.iteration))
            .map(|h| h.total)
            .collect()
    };
    median(total(150, 200)) < median(total(1, 50))
}

fn variances_positive(state: &OptimState) -> bool {
    state.z.var.iter().chain(&state.pose.var).all(|&v| v > 0.0 && v.is_finite())
}

fn noisy_suite() -> Vec<SceneFit> {
    (0..10u64)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
            let t = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            let phi = Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.5..0.5),
            );
            let s = Vector3::from_fn(|_, _| rng.random_range(0.35..0.65));
            let spec = SynthSpec {
                gt_pose: Pose9::new(t, phi, s).unwrap(),
                views: 3,
                noise: 0.005,
                seed: k,
                ..SynthSpec::default()
            };
            let cfg = OptimConfig {
                seed: k,
                ..OptimConfig::default()
            };
            run_scene(spec, &cfg, None)
        })
        .collect()
}

fn end_to_end(suite: &[SceneFit], suite_time: Duration) -> (Outcome, Vec<String>) {
    let start = Instant::now();
    let d = AnalyticEllipsoid::default();
    let gt = Pose9::new(Vector3::new(0.1, -0.05, 0.02), Vector3::new(0.1, -0.05, 0.5), Vector3::new(0.6, 0.45, 0.35))
        .unwrap();
    let spec = SynthSpec {
        gt_pose: gt,
        views: 3,
        ..SynthSpec::default()
    };
    let clean = run_scene(spec, &OptimConfig::default(), None);
    let est = placed_surface_points(&d, &clean.state.z.mean, &clean.state.pose.mean, 64, 10_000, 1).unwrap();
    let truth = placed_surface_points(&d, &clean.spec.gt_latent, &clean.gt, 64, 10_000, 2).unwrap();
    let cd = chamfer(&est, &truth).unwrap();
    let e = clean.errors;
    let clean_elapsed = start.elapsed();
    let clean_ok = e.translation < 0.02 && e.rotation < 2.0 && e.scale < 0.02 && cd < 0.02;

    let thresholds = PoseThresholds::default();
    let correct = suite.iter().filter(|f| pose_correct(&f.errors, &thresholds)).count();
    let pass = clean_ok && clean_elapsed < Duration::from_secs(600) && correct >= 9;

    let mut notes = Vec::new();
    let all: Vec<&SceneFit> = std::iter::once(&clean).chain(suite.iter()).collect();
    let trend = all.iter().filter(|f| loss_trend_holds(&f.state)).count();
    notes.push(format!(
        "invariant {} loss trend: late median below early median on {trend}/{} acceptance scenes",
        if trend == all.len() { "PASS" } else { "FAIL" },
        all.len()
    ));
    let positive = all.iter().filter(|f| variances_positive(&f.state)).count();
    notes.push(format!(
        "invariant {} covariance positivity: {positive}/{} final states",
        if positive == all.len() { "PASS" } else { "FAIL" },
        all.len()
    ));
    for (k, f) in suite.iter().enumerate() {
        notes.push(format!(
            "  noisy scene {k}: {:.4} m, {:.2} deg, scale {:.2}% -> {}",
            f.errors.translation,
            f.errors.rotation,
            100.0 * f.errors.scale,
            if pose_correct(&f.errors, &thresholds) { "correct" } else { "incorrect" }
        ));
    }
    let detail = format!(
        "noise-free: {:.4} m, {:.3} deg, scale {:.2}%, chamfer {:.4} in {:.0} s (need < 0.02 m, 2 deg, 2%, 0.02); \
         noisy: {correct}/10 pose_correct (need >= 9) in {:.0} s",
        e.translation,
        e.rotation,
        100.0 * e.scale,
        cd,
        clean_elapsed.as_secs_f64(),
        suite_time.as_secs_f64()
    );
    (Outcome { pass, detail }, notes)
}

fn uncertainty_correlation_suite(suite: &[SceneFit]) -> Outcome {
    let d = AnalyticEllipsoid::default();
    let rs: Vec<f64> = suite
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let pts = placed_surface_points(&d, &f.spec.gt_latent, &f.gt, 64, 10_000, 50 + k as u64).unwrap();
            uncertainty_correlation(&d, &f.state.z, &f.state.pose, &pts).unwrap().pearson
        })
        .collect();
    let m = median(rs.clone());
    let list: Vec<String> = rs.iter().map(|r| format!("{r:.3}")).collect();
    Outcome {
        pass: m >= 0.5,
        detail: format!("median Pearson r {m:.3} over 10 noisy scenes (need >= 0.5); per scene [{}]", list.join(", ")),
    }
}

fn two_d_necessity() -> Outcome {
    let gt = Pose9::new(Vector3::new(0.1, -0.05, 0.02), Vector3::zeros(), Vector3::new(0.9, 0.35, 0.3)).unwrap();
    let spec = SynthSpec {
        gt_pose: gt,
        views: 1,
        ..SynthSpec::default()
    };
    let full = run_scene(spec.clone(), &OptimConfig::default(), Some(gt));
    let mut cfg = OptimConfig::default();
    cfg.weights.render = 0.0;
    let no_2d = run_scene(spec, &cfg, Some(gt));
    let (a, b) = (no_2d.state.pose.mean.scale().max(), full.state.pose.mean.scale().max());
    let ratio = a / b;
    Outcome {
        pass: ratio >= 1.10,
        detail: format!("max scale without 2D {a:.4}, with 2D {b:.4}, ratio {ratio:.3} (need >= 1.10; true 0.9)"),
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_usm"))
            .args(args)
            .current_dir(tmp.path())
            .env_remove("USM_THREADS")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["synth", "--out", "scene", "--views", "2", "--noise", "0.005", "--seed", "9", "--scale", "0.5,0.4,0.3"]);
    for tag in ["a", "b"] {
        run(&[
            "fit",
            "--scene",
            "scene",
            "--iters",
            "20",
            "--seed",
            "9",
            "--out",
            &format!("{tag}.json"),
            "--history",
            &format!("{tag}.csv"),
        ]);
    }
    let read = |f: &str| fs::read(tmp.path().join(f)).unwrap();
    let json = read("a.json") == read("b.json");
    let csv = read("a.csv") == read("b.csv");
    Outcome {
        pass: json && csv,
        detail: format!("result.json identical: {json}, history.csv identical: {csv}"),
    }
}

fn main() {
    let mut failures = Vec::new();

    let t = Instant::now();
    report(1, "gradient correctness", t, gradient_correctness(), &mut failures);
    let t = Instant::now();
    report(2, "variance propagation", t, variance_oracle(), &mut failures);
    let t = Instant::now();
    report(3, "energy score", t, energy_score_oracle(), &mut failures);
    let t = Instant::now();
    report(4, "renderer normalization", t, renderer_normalization(), &mut failures);
    let t = Instant::now();
    report(5, "logit-normal consistency", t, logit_normal_consistency(), &mut failures);

    let t = Instant::now();
    let suite = noisy_suite();
    let suite_time = t.elapsed();
    let (outcome, notes) = end_to_end(&suite, suite_time);
    report(6, "end-to-end recovery", t, outcome, &mut failures);
    for n in &notes {
        println!("{n}");
    }
    let t = Instant::now();
    report(7, "uncertainty-error correlation", t, uncertainty_correlation_suite(&suite), &mut failures);
    let t = Instant::now();
    report(8, "2D-loss necessity", t, two_d_necessity(), &mut failures);
    let t = Instant::now();
    report(9, "determinism", t, determinism(), &mut failures);

    if failures.is_empty() {
        println!("acceptance: all 9 criteria pass");
    } else {
        let list: Vec<String> = failures.iter().map(|n| n.to_string()).collect();
        println!("acceptance: {} of 9 criteria fail ({})", failures.len(), list.join(", "));
        std::process::exit(1);
    }
}
