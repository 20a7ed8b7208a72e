//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdisagg::conversion::{AggregationRule, ConversionMatrix};
use tdisagg::ensemble::{run_ensemble_on, DEFAULT_MEMBERS};
use tdisagg::frame::{parse_csv, write_csv, Frame, IndexKey, Row};
use tdisagg::models::{fit, FitOptions, MethodId};
use tdisagg::postestimation::{adjust, simplex_project};
use tdisagg::retropolarizer::{retropolate, MlpConfig, RetroMethod};
use tdisagg::rho::{RhoObjective, DEFAULT_BOUNDS, GRID_POINTS};
use tdisagg::synth::{generate, SynthConfig, SynthData};

type Outcome = Result<String, String>;

fn seed(criterion: u64, k: u64) -> u64 {
    1000 * criterion + k
}

fn synth(n_l: usize, m: usize, rho: f64, rule: AggregationRule, seed: u64) -> SynthData {
    generate(&SynthConfig { n_l, m, rho, rule, seed, ..Default::default() }).expect("valid synth config")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

// 1
fn aggregation_consistency() -> Outcome {
    let cases: [(MethodId, Option<f64>); 11] = [
        (MethodId::Denton, None),
        (MethodId::DentonCholette, None),
        (MethodId::ChowLin, Some(0.5)),
        (MethodId::ChowLinOpt, None),
        (MethodId::ChowLinEcotrim, None),
        (MethodId::ChowLinQuilis, None),
        (MethodId::Litterman, Some(0.3)),
        (MethodId::LittermanOpt, None),
        (MethodId::Fernandez, None),
        (MethodId::Fast, None),
        (MethodId::Uniform, None),
    ];
    let mut worst = 0.0f64;
    let mut checked = 0;
    for k in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed(1, k));
        let n_l = rng.random_range(5..=40);
        let m = [3, 4, 12][rng.random_range(0..3)];
        let rule = AggregationRule::ALL[(k % 4) as usize];
        let data = synth(n_l, m, 0.5, rule, seed(1, k));
        for (method, rho) in cases {
            let opts = FitOptions { rho, ..Default::default() };
            let r = fit(method, &data.y_l, &data.x, &data.cm, &opts)
                .map_err(|e| format!("{method} on frame {k} (n_l={n_l}, m={m}, {rule}): {e}"))?;
            let agg = data.cm.aggregate(&r.y_hat).unwrap();
            let ratio = max_abs_diff(&agg, &data.y_l) / (1e-6 * (1.0 + inf_norm(&data.y_l)));
            if ratio > 1.0 {
                return Err(format!("{method} on frame {k}: gap {:.3e} of tolerance", ratio));
            }
            worst = worst.max(ratio);
            checked += 1;
        }
    }
    Ok(format!("{checked} fits, worst gap {worst:.2e} x tolerance"))
}

// 2
fn method_identities() -> Outcome {
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let rule = AggregationRule::ALL[(k % 4) as usize];
        let data = synth(8 + k as usize, [3, 4, 12][(k % 3) as usize], 0.6, rule, seed(2, k));
        let run = |method, rho| {
            fit(method, &data.y_l, &data.x, &data.cm, &FitOptions { rho, ..Default::default() })
                .map(|r| r.y_hat)
                .map_err(|e| format!("{method} on frame {k}: {e}"))
        };
        let pairs = [
            (run(MethodId::Fernandez, None)?, run(MethodId::Litterman, Some(0.0))?, "fernandez"),
            (run(MethodId::Fast, None)?, run(MethodId::Litterman, Some(0.9))?, "fast"),
            (run(MethodId::ChowLinEcotrim, None)?, run(MethodId::ChowLin, Some(0.75))?, "ecotrim"),
            (run(MethodId::ChowLinQuilis, None)?, run(MethodId::ChowLin, Some(0.15))?, "quilis"),
        ];
        for (a, b, name) in pairs {
            let d = max_abs_diff(&a, &b);
            if d > 1e-9 {
                return Err(format!("{name} differs by {d:.3e} on frame {k}"));
            }
            worst = worst.max(d);
        }
    }
    Ok(format!("max abs difference {worst:.2e}"))
}

// 3
fn rho_recovery() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for truth in [0.3, 0.5, 0.7] {
        let mut estimates = Vec::new();
        for k in 0..20u64 {
            let data = synth(80, 4, truth, AggregationRule::Sum, seed(3, k));
            let opts = FitOptions { rho_objective: Some(RhoObjective::MaxLog), ..Default::default() };
            let r = fit(MethodId::ChowLinOpt, &data.y_l, &data.x, &data.cm, &opts)
                .map_err(|e| format!("rho={truth} seed {k}: {e}"))?;
            estimates.push(r.rho.expect("opt reports rho"));
        }
        let in_bounds = estimates.iter().all(|r| (DEFAULT_BOUNDS.0..=DEFAULT_BOUNDS.1).contains(r));
        estimates.sort_by(f64::total_cmp);
        let median = 0.5 * (estimates[9] + estimates[10]);
        let pass = in_bounds && (median - truth).abs() <= 0.15;
        ok &= pass;
        lines.push(format!("rho={truth}: median {median:.3}{}", if pass { "" } else { " (outside band)" }));
    }
    if ok {
        Ok(lines.join(", "))
    } else {
        Err(lines.join(", "))
    }
}

/// Chow-Lin GLS objective evaluated from scratch with dense inverses.
fn oracle_objective(y_l: &[f64], x: &[f64], c: &DMatrix<f64>, rho: f64, kind: RhoObjective) -> f64 {
    let n = x.len();
    let q = DMatrix::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32) / (1.0 - rho * rho));
    let v = c * q * c.transpose();
    let v_inv = v.clone().try_inverse().expect("V invertible");
    let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let x_l = c * design;
    let y = DVector::from_column_slice(y_l);
    let gram = x_l.transpose() * &v_inv * &x_l;
    let beta = gram.try_inverse().expect("full rank") * x_l.transpose() * &v_inv * &y;
    let u = &y - &x_l * beta;
    let rss = (u.transpose() * &v_inv * &u)[(0, 0)];
    match kind {
        RhoObjective::MinRss => rss,
        RhoObjective::MaxLog => {
            let n_l = y_l.len() as f64;
            let ln_det = v.determinant().ln();
            -0.5 * (n_l * (2.0 * std::f64::consts::PI).ln() + n_l * (rss / n_l).ln() + ln_det + n_l)
        }
    }
}

// 4
fn optimizer_vs_grid() -> Outcome {
    let (lo, hi) = DEFAULT_BOUNDS;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|k| lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64).collect();
    let mut worst = 0.0f64;
    for kind in [RhoObjective::MaxLog, RhoObjective::MinRss] {
        for k in 0..10u64 {
            let data = synth(16, 4, [0.2, 0.5, 0.8][(k % 3) as usize], AggregationRule::Sum, seed(4, k));
            let c = data.cm.matrix().clone();
            let opts = FitOptions { rho_objective: Some(kind), ..Default::default() };
            let r = fit(MethodId::ChowLinOpt, &data.y_l, &data.x, &data.cm, &opts).map_err(|e| format!("{kind} {k}: {e}"))?;
            let at_hat = oracle_objective(&data.y_l, &data.x, &c, r.rho.unwrap(), kind);
            let values = grid.iter().map(|&g| oracle_objective(&data.y_l, &data.x, &c, g, kind));
            let best = match kind {
                RhoObjective::MaxLog => values.fold(f64::NEG_INFINITY, f64::max),
                RhoObjective::MinRss => values.fold(f64::INFINITY, f64::min),
            };
            let d = (at_hat - best).abs();
            if d > 1e-3 {
                return Err(format!("{kind} instance {k}: objective at rho_hat {at_hat} vs grid {best}"));
            }
            worst = worst.max(d);
        }
    }
    Ok(format!("max |objective(rho_hat) - grid optimum| {worst:.2e}"))
}

// 5
fn ensemble_simplex() -> Outcome {
    let mut worst_sum = 0.0f64;
    for k in 0..20u64 {
        let rule = AggregationRule::ALL[(k % 4) as usize];
        let data = synth(10 + k as usize, 4, 0.5, rule, seed(5, k));
        let er = run_ensemble_on(&data.y_l, &data.x, &data.cm, &DEFAULT_MEMBERS, &FitOptions::default())
            .map_err(|e| format!("run {k}: {e}"))?;
        if er.weights.iter().any(|w| *w < 0.0) {
            return Err(format!("run {k}: negative weight {:?}", er.weights));
        }
        let sum_err = (er.weights.iter().sum::<f64>() - 1.0).abs();
        if sum_err > 1e-8 {
            return Err(format!("run {k}: weights sum off by {sum_err:.3e}"));
        }
        worst_sum = worst_sum.max(sum_err);
        let best_member = er.members.iter().map(|m| m.column_sse).fold(f64::INFINITY, f64::min);
        if er.objective > best_member + 1e-9 {
            return Err(format!("run {k}: ensemble sse {} above best member {}", er.objective, best_member));
        }
    }
    Ok(format!("20 runs, max |sum w - 1| {worst_sum:.2e}"))
}

/// Enumerates supports and keeps the best feasible stationary point.
fn brute_force_projection(v: &[f64], s: f64) -> Vec<f64> {
    let m = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << m) {
        let support: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let tau = (support.iter().map(|&i| v[i]).sum::<f64>() - s) / support.len() as f64;
        let mut y = vec![0.0; m];
        let mut feasible = true;
        for &i in &support {
            y[i] = v[i] - tau;
            if y[i] < 0.0 {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        let dist: f64 = y.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().map_or(true, |(d, _)| dist < *d) {
            best = Some((dist, y));
        }
    }
    best.expect("some support is feasible").1
}

// 6
fn projection_oracle() -> Outcome {
    if simplex_project(&[-1.0, 3.0], 2.0).map_err(|e| e.to_string())? != vec![0.0, 2.0] {
        return Err("worked case [-1, 3] -> [0, 2] failed".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed(6, 0));
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let m = rng.random_range(1..=8);
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
        let s = rng.random_range(0.0..20.0);
        let fast = simplex_project(&v, s).map_err(|e| e.to_string())?;
        let d = max_abs_diff(&fast, &brute_force_projection(&v, s));
        if d > 1e-8 {
            return Err(format!("trial {trial}: {v:?} target {s}: deviation {d:.3e}"));
        }
        worst = worst.max(d);
    }
    Ok(format!("1000 vectors, max deviation {worst:.2e}"))
}

// 7
fn post_adjustment_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed(7, 0));
    let mut unresolved = 0;
    for rule in AggregationRule::ALL {
        for trial in 0..200 {
            let m = rng.random_range(2..=8);
            let mut v: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..10.0)).collect();
            let forced = rng.random_range(0..m);
            v[forced] = -rng.random_range(0.1..5.0);
            let cm = ConversionMatrix::regular(1, m, rule).unwrap();
            let y_l = cm.aggregate(&v).unwrap();
            let (once, report) = adjust(&v, &y_l, &cm).map_err(|e| e.to_string())?;
            let (twice, _) = adjust(&once, &y_l, &cm).map_err(|e| e.to_string())?;
            let ctx = format!("{rule} trial {trial} {v:?}");
            let flagged = report.groups.iter().any(|g| g.unresolved);
            unresolved += flagged as usize;
            if !flagged && once.iter().any(|x| *x < 0.0) {
                return Err(format!("{ctx}: negative output {once:?} without flag"));
            }
            let target = y_l[0];
            let feasible = target >= 0.0;
            let kept = match rule {
                AggregationRule::Sum => (once.iter().sum::<f64>() - target).abs(),
                AggregationRule::Average => (once.iter().sum::<f64>() / m as f64 - target).abs(),
                AggregationRule::First => (once[0] - target).abs(),
                AggregationRule::Last => (once[m - 1] - target).abs(),
            };
            if feasible && kept > 1e-9 {
                return Err(format!("{ctx}: target moved by {kept:.3e}"));
            }
            if feasible && flagged {
                return Err(format!("{ctx}: feasible group flagged unresolved"));
            }
            let drift = max_abs_diff(&once, &twice);
            if drift > 1e-12 {
                return Err(format!("{ctx}: second pass moved values by {drift:.3e}"));
            }
        }
    }
    Ok(format!("800 groups, {unresolved} flagged unresolved"))
}

// 8
fn exact_fit_identity() -> Outcome {
    let methods: Vec<MethodId> = MethodId::ALL.iter().copied().filter(|m| m.is_regression()).collect();
    let mut worst = 0.0f64;
    for k in 0..30u64 {
        let rule = AggregationRule::ALL[(k % 4) as usize];
        let data = synth(6 + k as usize, [3, 4, 12][(k % 3) as usize], 0.5, rule, seed(8, k));
        let y_l = data.cm.aggregate(&data.x).unwrap();
        for &method in &methods {
            let r = fit(method, &y_l, &data.x, &data.cm, &FitOptions::without_intercept())
                .map_err(|e| format!("{method} on frame {k}: {e}"))?;
            let d = max_abs_diff(&r.y_hat, &data.x);
            if d > 1e-8 {
                return Err(format!("{method} on frame {k}: |y_hat - X| = {d:.3e}"));
            }
            worst = worst.max(d);
        }
    }
    Ok(format!("{} methods x 30 frames, max |y_hat - X| {worst:.2e}", methods.len()))
}

// 9
fn retropolarizer_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed(9, 0));
    let x: Vec<f64> = (0..20).map(|_| rng.random_range(1.0..50.0)).collect();
    let holes = [3usize, 11, 19];
    let masked = |truth: &[f64]| -> Vec<Option<f64>> {
        truth.iter().enumerate().map(|(i, v)| (!holes.contains(&i)).then_some(*v)).collect()
    };
    let check = |name: &str, truth: Vec<f64>, method: RetroMethod, tol: f64| -> Result<f64, String> {
        let r = retropolate(&masked(&truth), &x, method).map_err(|e| format!("{name}: {e}"))?;
        let d = max_abs_diff(&r.y_l_filled, &truth);
        if d > tol {
            Err(format!("{name}: deviation {d:.3e} > {tol:e}"))
        } else {
            Ok(d)
        }
    };
    let lin = check("linear", x.iter().map(|v| 3.0 + 2.0 * v).collect(), RetroMethod::Linear, 1e-8)?;
    let quad = check("poly2", x.iter().map(|v| v * v - 4.0 * v + 1.0).collect(), RetroMethod::Polynomial { degree: 2 }, 1e-6)?;
    let prop = check("proportion", x.iter().map(|v| 2.5 * v).collect(), RetroMethod::Proportion, 1e-9)?;

    let observed_x: Vec<f64> = (0..20).map(|i| 10.0 + 1.5 * i as f64).collect();
    let target: Vec<f64> = observed_x.iter().map(|v| 4.0 - 0.7 * v).collect();
    let y: Vec<Option<f64>> = target.iter().map(|v| Some(*v)).collect();
    let mlp = retropolate(&y, &observed_x, RetroMethod::Mlp(MlpConfig { seed: 42, ..Default::default() }))
        .map_err(|e| format!("mlp: {e}"))?;
    let mean = target.iter().sum::<f64>() / 20.0;
    let sd = (target.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0).sqrt();
    if mlp.rmse > 0.1 * sd {
        return Err(format!("mlp rmse {} above 10% of sd {}", mlp.rmse, sd));
    }
    Ok(format!(
        "linear {lin:.1e}, poly2 {quad:.1e}, proportion {prop:.1e}, mlp rmse/sd {:.3}",
        mlp.rmse / sd
    ))
}

fn canonical_frames() -> Vec<Frame> {
    let mut frames: Vec<Frame> = (0..5u64)
        .map(|k| synth(5 + k as usize, [3, 4, 12][(k % 3) as usize], 0.4, AggregationRule::ALL[k as usize % 4], seed(10, k)).to_frame())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed(10, 99));
    let mut rows = Vec::new();
    for (g, name) in ["alpha", "beta", "gamma"].iter().enumerate() {
        for grain in 1..=3u32 {
            let scale = 10f64.powi(rng.random_range(-12..12));
            let mut row = Row::new(IndexKey::from(*name), grain, Some(g as f64 * 1e-7 - 3.25), Some(rng.random_range(-1.0..1.0) * scale));
            row.extra = vec![if grain == 2 { None } else { Some(f64::MIN_POSITIVE * grain as f64) }, Some(-0.1 * grain as f64)];
            rows.push(row);
        }
    }
    frames.push(Frame::new(rows, vec!["aux".into(), "weights".into()]).unwrap());
    frames
}

fn run_twice(dir: &Path, tag: &str, args: &[&str]) -> Result<(), String> {
    let mut outputs = Vec::new();
    for attempt in 0..2 {
        let out = dir.join(format!("{tag}-{attempt}.out"));
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--seed", "11", "-o", out.to_str().unwrap()]);
        let o = Command::new(env!("CARGO_BIN_EXE_tdisagg")).args(&full).output().map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{tag} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
        }
        outputs.push((std::fs::read(&out).map_err(|e| e.to_string())?, o.stdout, o.stderr));
    }
    if outputs[0] != outputs[1] {
        return Err(format!("{tag}: outputs differ between runs"));
    }
    Ok(())
}

// 10
fn round_trip_and_determinism() -> Outcome {
    let frames = canonical_frames();
    for (k, frame) in frames.iter().enumerate() {
        let bytes = write_csv(frame, &[]).map_err(|e| e.to_string())?;
        let back = parse_csv(&bytes).map_err(|e| format!("frame {k}: {e}"))?;
        if &back != frame {
            return Err(format!("frame {k}: parse(write(frame)) differs"));
        }
        if write_csv(&back, &[]).map_err(|e| e.to_string())? != bytes {
            return Err(format!("frame {k}: second write differs"));
        }
    }

    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let data = dir.path().join("data.csv");
    let fixture = synth(14, 4, 0.5, AggregationRule::Sum, seed(10, 50)).to_frame();
    std::fs::write(&data, write_csv(&fixture, &[]).unwrap()).unwrap();
    let d = data.to_str().unwrap();
    // gappy copy exercises imputation
    let text = std::fs::read_to_string(&data).unwrap();
    let gappy: String = text
        .lines()
        .map(|l| {
            if l.starts_with("2,") || l.starts_with("5,") {
                let mut f: Vec<&str> = l.split(',').collect();
                f[2] = "";
                f.join(",")
            } else {
                l.to_string()
            }
        })
        .map(|l| l + "\n")
        .collect();
    let gappy_path = dir.path().join("gappy.csv");
    std::fs::write(&gappy_path, gappy).unwrap();
    let g = gappy_path.to_str().unwrap();
    let preds = dir.path().join("pred.csv");
    let status = Command::new(env!("CARGO_BIN_EXE_tdisagg"))
        .args(["fit", "--method", "ols", "-i", d, "-o", preds.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err("could not produce predictions".into());
    }
    let p = preds.to_str().unwrap();

    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("validate", vec!["validate", "-i", d]),
        ("fit", vec!["fit", "--method", "chow-lin-opt", "--adjust", "-i", d]),
        ("fit-retro-mlp", vec!["fit", "--method", "litterman-opt", "--retro-method", "mlp", "-i", g]),
        ("ensemble", vec!["ensemble", "-i", d]),
        ("adjust", vec!["adjust", "-i", p]),
        ("retropolate", vec!["retropolate", "--method", "mlp", "-i", g]),
        ("compare", vec!["compare", "--format", "csv", "-i", d]),
        ("plot", vec!["plot", "-i", p]),
        ("synth", vec!["synth", "--n-l", "9", "--m", "12"]),
    ];
    for (tag, args) in &commands {
        run_twice(dir.path(), tag, args)?;
    }
    Ok(format!("{} frames round-trip, {} commands byte-identical", frames.len(), commands.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("aggregation consistency", aggregation_consistency),
        ("method identities", method_identities),
        ("rho recovery", rho_recovery),
        ("optimizer vs grid", optimizer_vs_grid),
        ("ensemble simplex", ensemble_simplex),
        ("projection oracle", projection_oracle),
        ("post-adjustment contracts", post_adjustment_contracts),
        ("exact-fit identity", exact_fit_identity),
        ("retropolarizer exactness", retropolarizer_exactness),
        ("round-trip and determinism", round_trip_and_determinism),
    ];
    let started = Instant::now();
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed in {:.1}s", criteria.len() - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
