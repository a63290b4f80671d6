//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protoconcepts::config::Config;
use protoconcepts::data::Dataset;
use protoconcepts::explain::{scan_members, summarize_scan};
use protoconcepts::geometry::{
    ball_similarity, clamp_value, effective_radius, is_member, similarity_gradient, Geometry,
    GeometryConfig, LatentPatchGrid, PrototypeBall,
};
use protoconcepts::losses::{
    radius_loss, radius_loss_gradient, topk_cluster_loss, ClassAssignment,
};
use protoconcepts::model::{checkpoint, ProtoConceptsNet};
use protoconcepts::training::{prepare_splits, run_pipeline, PipelineReport, RADIUS_PRESETS};

// Tolerances and budgets, one per criterion.
const BASELINE_TOL: f64 = 1e-6;
const BASELINE_PAIRS: usize = 1000;
const BASELINE_BUDGET: Duration = Duration::from_secs(5);
const SCALAR_TOL: f64 = 1e-6;
const PLATEAU_SAMPLES: usize = 1000;
const TOPK_TOL: f64 = 1e-6;
const TOPK_INSTANCES: usize = 100;
const TOPK_BUDGET: Duration = Duration::from_secs(10);
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_POINTS: usize = 100;
const FD_STEP: f64 = 1e-5;
const PRUNE_TOL: f64 = 1e-5;
const E2E_BUDGET: Duration = Duration::from_secs(600);
const E2E_MIN_ACCURACY: f64 = 0.90;
const E2E_MIN_MULTI_IMAGE: f64 = 0.5;
const E2E_MIN_PURITY: f64 = 0.7;
const TREND_BUDGET: Duration = Duration::from_secs(1800);
const K_VALUES: [usize; 3] = [1, 5, 10];

const EPS: f64 = 1e-4;
const PRESET: &str = "synthetic-small";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cfg() -> GeometryConfig {
    GeometryConfig::new(EPS, 1e-6).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

fn log_act(d2: f64) -> f64 {
    ((d2 + 1.0) / (d2 + EPS)).ln()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn c1_baseline_recovery() -> Outcome {
    let start = Instant::now();
    let tiny = GeometryConfig::new(EPS, 1e-12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for geometry in [Geometry::Log, Geometry::Cosine] {
        for _ in 0..BASELINE_PAIRS {
            let p = random_vec(&mut rng, 16, 1.0);
            let c = random_vec(&mut rng, 16, 1.0);
            let ball = PrototypeBall::new(c.clone(), -1.0, geometry).unwrap();
            let expected = match geometry {
                Geometry::Log => log_act(d2(&p, &c)),
                Geometry::Cosine => cosine(&p, &c),
            };
            worst = worst.max((ball_similarity(&p, &ball, &tiny).unwrap() - expected).abs());
        }
    }
    let t = start.elapsed();
    outcome(
        worst < BASELINE_TOL && t < BASELINE_BUDGET,
        format!(
            "max |Δ| = {worst:.2e} (tol {BASELINE_TOL:e}) over 2×{BASELINE_PAIRS} pairs in {t:.2?}"
        ),
    )
}

fn c2_scalar_fidelity() -> Outcome {
    let at = |d2: f64, r: f64| {
        let ball = PrototypeBall::new(vec![0.0, 0.0], r, Geometry::Log).unwrap();
        ball_similarity(&[d2.sqrt(), 0.0], &ball, &cfg()).unwrap()
    };
    let cos_ball = PrototypeBall::new(vec![0.3, -0.4], 0.5, Geometry::Cosine).unwrap();
    let tiny = GeometryConfig::new(EPS, 1e-12).unwrap();
    let zero_r = PrototypeBall::new(vec![0.0], -1.0, Geometry::Log).unwrap();
    // (name, library value, exact reference, value printed to 5 significant digits)
    let cases = [
        ("d2=0 r=1", at(0.0, 1.0), (2.0f64 / 1.0001).ln(), 0.69305),
        ("d2=4 r=1", at(4.0, 1.0), (5.0f64 / 4.0001).ln(), 0.22312),
        (
            "cos r=0.5",
            ball_similarity(&[0.3, -0.4], &cos_ball, &cfg()).unwrap(),
            0.5f64.cos(),
            0.87758,
        ),
        (
            "d2=0 r→0",
            ball_similarity(&[0.0], &zero_r, &tiny).unwrap(),
            (1.0 / EPS).ln(),
            9.2104,
        ),
    ];
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for (_, got, exact, printed) in cases {
        worst = worst.max((got - exact).abs());
        pass &= (got - exact).abs() < SCALAR_TOL;
        pass &= (got - printed).abs() <= 0.5e-4 * printed.abs().max(1.0);
    }
    let list: Vec<String> = cases
        .iter()
        .map(|(n, g, _, _)| format!("{n} → {g:.5}"))
        .collect();
    outcome(
        pass,
        format!(
            "{}; max |Δ| = {worst:.1e} (tol {SCALAR_TOL:e})",
            list.join(", ")
        ),
    )
}

fn c3_clamp_plateau() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    let mut mismatches = 0;
    for geometry in [Geometry::Log, Geometry::Cosine] {
        for _ in 0..PLATEAU_SAMPLES {
            let c = random_vec(&mut rng, 8, 1.0);
            let r = rng.gen_range(0.01..1.0);
            let ball = PrototypeBall::new(c.clone(), r, geometry).unwrap();
            let u = random_vec(&mut rng, 8, 1.0);
            let scale = match geometry {
                Geometry::Log => rng.gen_range(0.0..1.0) * (r.sqrt() / norm(&u)),
                Geometry::Cosine => rng.gen_range(0.0..1.0) * (r / 2.0).tan() * norm(&c) / norm(&u),
            };
            let p: Vec<f64> = c.iter().zip(&u).map(|(a, b)| a + scale * b).collect();
            if !is_member(&p, &ball, &cfg()).unwrap() {
                continue;
            }
            checked += 1;
            let s = ball_similarity(&p, &ball, &cfg()).unwrap();
            let clamp = clamp_value(geometry, effective_radius(&ball, &cfg()), EPS);
            mismatches += (s.to_bits() != clamp.to_bits()) as usize;
        }
    }
    outcome(
        mismatches == 0 && checked >= PLATEAU_SAMPLES,
        format!("{checked} member patches, {mismatches} differ bitwise from the clamp value"),
    )
}

fn c4_topk_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..TOPK_INSTANCES {
        let n = rng.gen_range(1..=4);
        let per_class = rng.gen_range(1..=8);
        let classes = rng.gen_range(2..=3);
        let (h, w, dim) = (
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(1..=4),
        );
        let m = per_class * classes;
        let centers: Vec<Vec<f64>> = (0..m).map(|_| random_vec(&mut rng, dim, 2.0)).collect();
        let radii: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..2.0)).collect();
        let patches: Vec<Vec<f64>> = (0..n)
            .map(|_| random_vec(&mut rng, h * w * dim, 2.0))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();

        let balls: Vec<PrototypeBall> = centers
            .iter()
            .zip(&radii)
            .map(|(c, &r)| PrototypeBall::new(c.clone(), r, Geometry::Log).unwrap())
            .collect();
        let grids: Vec<LatentPatchGrid> = patches
            .iter()
            .map(|p| LatentPatchGrid::new(h, w, dim, p.clone(), "x").unwrap())
            .collect();
        let assign = ClassAssignment::class_specific(per_class, classes);
        let mut previous = f64::NEG_INFINITY;
        for k in 1..=per_class {
            let got = topk_cluster_loss(&grids, &labels, &balls, &assign, k, &cfg()).unwrap();
            // brute force: every class prototype, every patch, sort, sum
            let mut oracle = 0.0;
            for (p, &y) in patches.iter().zip(&labels) {
                let mut ds: Vec<f64> = (y * per_class..(y + 1) * per_class)
                    .map(|j| {
                        p.chunks(dim)
                            .map(|q| d2(q, &centers[j]).max(radii[j].max(1e-6)))
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect();
                ds.sort_by(f64::total_cmp);
                oracle += ds[..k].iter().sum::<f64>();
            }
            oracle /= n as f64;
            worst = worst.max((got - oracle).abs());
            monotone &= got >= previous;
            previous = got;
        }
    }
    let t = start.elapsed();
    outcome(
        worst < TOPK_TOL && monotone && t < TOPK_BUDGET,
        format!("{TOPK_INSTANCES} instances, max |Δ| = {worst:.1e} (tol {TOPK_TOL:e}), monotone in k: {monotone}, {t:.2?}"),
    )
}

fn c5_gradient_audit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    while points < GRAD_POINTS {
        let geometry = if points % 2 == 0 {
            Geometry::Log
        } else {
            Geometry::Cosine
        };
        let p = random_vec(&mut rng, 6, 1.5);
        let c = random_vec(&mut rng, 6, 1.5);
        let r = rng.gen_range(0.01..0.3);
        let outside = match geometry {
            Geometry::Log => d2(&p, &c) >= 2.0 * r,
            Geometry::Cosine => {
                let a = cosine(&p, &c).clamp(-1.0, 1.0).acos();
                a >= 2.0 * r && a < PI - 0.1
            }
        };
        if !outside {
            continue;
        }
        points += 1;
        let ball = PrototypeBall::new(c.clone(), r, geometry).unwrap();
        let g = similarity_gradient(&p, &ball, &cfg()).unwrap();
        let f = |p: &[f64], c: &[f64]| {
            ball_similarity(
                p,
                &PrototypeBall::new(c.to_vec(), r, geometry).unwrap(),
                &cfg(),
            )
            .unwrap()
        };
        for i in 0..p.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a[i] += FD_STEP;
            b[i] -= FD_STEP;
            let fd = (f(&a, &c) - f(&b, &c)) / (2.0 * FD_STEP);
            if fd.abs() > 1e-6 {
                worst = worst.max(rel_err(fd, g.d_patch[i]));
            }
            let mut a = c.clone();
            let mut b = c.clone();
            a[i] += FD_STEP;
            b[i] -= FD_STEP;
            let fd = (f(&p, &a) - f(&p, &b)) / (2.0 * FD_STEP);
            if fd.abs() > 1e-6 {
                worst = worst.max(rel_err(fd, g.d_center[i]));
            }
        }
        let balls: Vec<PrototypeBall> = (0..3)
            .map(|_| {
                PrototypeBall::new(vec![0.0], rng.gen_range(0.05..3.0), Geometry::Log).unwrap()
            })
            .collect();
        let grad = radius_loss_gradient(&balls, &cfg());
        for j in 0..balls.len() {
            let mut a = balls.clone();
            let mut b = balls.clone();
            a[j].radius_param += FD_STEP;
            b[j].radius_param -= FD_STEP;
            let fd = (radius_loss(&a, &cfg()) - radius_loss(&b, &cfg())) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, grad[j]));
        }
    }
    outcome(
        worst < GRAD_REL_TOL,
        format!("{GRAD_POINTS} points, max relative error {worst:.2e} (tol {GRAD_REL_TOL:e})"),
    )
}

fn c6_straight_through() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut radius_ok = true;
    for i in 0..200 {
        let geometry = if i % 2 == 0 {
            Geometry::Log
        } else {
            Geometry::Cosine
        };
        let c = random_vec(&mut rng, 5, 1.0);
        let r = rng.gen_range(0.05..1.0);
        let ball = PrototypeBall::new(c.clone(), r, geometry).unwrap();
        let u = random_vec(&mut rng, 5, 1.0);
        let s = match geometry {
            Geometry::Log => 0.5 * r.sqrt() / norm(&u),
            Geometry::Cosine => 0.5 * (r / 2.0).tan() * norm(&c) / norm(&u),
        };
        let p: Vec<f64> = c.iter().zip(&u).map(|(a, b)| a + s * b).collect();
        assert!(is_member(&p, &ball, &cfg()).unwrap());
        let g = similarity_gradient(&p, &ball, &cfg()).unwrap();
        // gradient of the unclamped activation, written out by hand
        let (dp, dc): (Vec<f64>, Vec<f64>) = match geometry {
            Geometry::Log => {
                let d = d2(&p, &c);
                let slope = 1.0 / (d + 1.0) - 1.0 / (d + EPS);
                p.iter()
                    .zip(&c)
                    .map(|(a, b)| (slope * 2.0 * (a - b), -slope * 2.0 * (a - b)))
                    .unzip()
            }
            Geometry::Cosine => {
                let (np, nc, cs) = (norm(&p), norm(&c), cosine(&p, &c));
                p.iter()
                    .zip(&c)
                    .map(|(a, b)| {
                        (
                            b / (np * nc) - cs * a / (np * np),
                            a / (np * nc) - cs * b / (nc * nc),
                        )
                    })
                    .unzip()
            }
        };
        for k in 0..p.len() {
            worst = worst
                .max((dp[k] - g.d_patch[k]).abs())
                .max((dc[k] - g.d_center[k]).abs());
        }
        let expected_radius = match geometry {
            Geometry::Log => 1.0 / (r + 1.0) - 1.0 / (r + EPS),
            Geometry::Cosine => -r.sin(),
        };
        radius_ok &= (g.d_radius_param - expected_radius).abs() < 1e-12 && g.d_radius_param != 0.0;

        // outside the ball the radius gets nothing from the similarity
        let far: Vec<f64> = c.iter().zip(&u).map(|(a, b)| a + 10.0 * s * b).collect();
        if !is_member(&far, &ball, &cfg()).unwrap() {
            radius_ok &= similarity_gradient(&far, &ball, &cfg())
                .unwrap()
                .d_radius_param
                == 0.0;
        }
        radius_ok &= radius_loss_gradient(std::slice::from_ref(&ball), &cfg())[0] == 2.0 * r;
    }
    outcome(
        worst < 1e-12 && radius_ok,
        format!("max |Δ| vs unclamped gradient {worst:.1e}; radius gradient only from clamp and radius loss: {radius_ok}"),
    )
}

struct Run {
    dir: PathBuf,
    net: ProtoConceptsNet,
    report: PipelineReport,
    elapsed: Duration,
}

fn train(config: &Config, data: &Dataset, dir: &Path) -> Result<Run, String> {
    let start = Instant::now();
    let (net, report) = run_pipeline(config, data, dir, false).map_err(|e| e.to_string())?;
    Ok(Run {
        dir: dir.to_path_buf(),
        net,
        report,
        elapsed: start.elapsed(),
    })
}

fn accuracy_before(r: &Run) -> f64 {
    r.report.before_prune.as_ref().map_or(0.0, |e| e.accuracy)
}

fn accuracy_after(r: &Run) -> f64 {
    r.report.after_finetune.as_ref().map_or(0.0, |e| e.accuracy)
}

fn c7_prune_correctness(runs: &[Run], data: &Dataset) -> Outcome {
    let test = prepare_splits(data).test;
    let mut worst: f64 = 0.0;
    let mut removed_total = 0;
    for run in runs {
        let joint = checkpoint::load(&run.dir.join("joint.ckpt")).unwrap();
        let pruned = checkpoint::load(&run.dir.join("prune.ckpt")).unwrap();
        let removed: Vec<usize> = (0..joint.num_prototypes())
            .filter(|&j| !pruned.evidence.mask[j])
            .collect();
        removed_total += removed.len();
        for x in &test.inputs {
            let before = joint.logit_decomposition(x).unwrap();
            let after = pruned.forward_one(x, "").unwrap().logits;
            for ev in before {
                let gone: f64 = ev
                    .rows
                    .iter()
                    .filter(|r| removed.contains(&r.prototype))
                    .map(|r| r.contribution)
                    .sum();
                worst = worst.max((after[ev.class] - (ev.logit - gone)).abs());
            }
        }
    }
    outcome(
        worst < PRUNE_TOL && removed_total > 0,
        format!(
            "{} runs, {removed_total} pruned balls, {} test images each, max |Δ logit| = {worst:.1e} (tol {PRUNE_TOL:e})",
            runs.len(),
            test.len()
        ),
    )
}

fn c8_end_to_end(run: &Run, data: &Dataset) -> Outcome {
    let splits = prepare_splits(data);
    let scan = scan_members(&run.net, splits.originals()).unwrap();
    let originals: Vec<_> = data.original_train().cloned().collect();
    let summary = summarize_scan(&run.net, &scan, &originals);
    let acc = accuracy_after(run);
    let multi = summary.multi_image as f64 / summary.surviving.max(1) as f64;
    let purity = summary.mean_purity.unwrap_or(0.0);
    outcome(
        run.elapsed < E2E_BUDGET && acc >= E2E_MIN_ACCURACY && multi >= E2E_MIN_MULTI_IMAGE && purity >= E2E_MIN_PURITY,
        format!(
            "{:.1?} (budget {E2E_BUDGET:?}), test accuracy {:.2}% (≥ {:.0}%), multi-image balls {}/{} = {:.2} (≥ {E2E_MIN_MULTI_IMAGE}), mean purity {purity:.3} (≥ {E2E_MIN_PURITY})",
            run.elapsed,
            100.0 * acc,
            100.0 * E2E_MIN_ACCURACY,
            summary.multi_image,
            summary.surviving,
            multi,
        ),
    )
}

fn row(label: &str, r: &Run) -> String {
    format!(
        "{label}: {}/{} kept, {:.1}% → {:.1}%",
        r.report.surviving_prototypes,
        r.report.total_prototypes,
        100.0 * accuracy_before(r),
        100.0 * accuracy_after(r)
    )
}

fn c9_radius_trend(runs: &[Run], elapsed: Duration) -> Outcome {
    let counts: Vec<usize> = runs.iter().map(|r| r.report.surviving_prototypes).collect();
    let drop = |r: &Run| accuracy_before(r) - accuracy_after(r);
    let non_decreasing = counts.windows(2).all(|w| w[0] <= w[1]);
    let small_degrades = drop(&runs[0]) > drop(&runs[1]);
    let rows: Vec<String> = RADIUS_PRESETS
        .iter()
        .zip(runs)
        .map(|((n, v), r)| row(&format!("{n} {v}"), r))
        .collect();
    outcome(
        non_decreasing && small_degrades && elapsed < TREND_BUDGET,
        format!(
            "{}; counts non-decreasing: {non_decreasing}; small loses more accuracy than medium: {small_degrades}; {elapsed:.0?}",
            rows.join("; ")
        ),
    )
}

fn c10_topk_trend(runs: &[Run], elapsed: Duration) -> Outcome {
    let counts: Vec<usize> = runs.iter().map(|r| r.report.surviving_prototypes).collect();
    let accs: Vec<f64> = runs.iter().map(accuracy_after).collect();
    let counts_ok = counts.windows(2).all(|w| w[0] <= w[1]);
    let accs_ok = accs.windows(2).all(|w| w[0] <= w[1]);
    let rows: Vec<String> = K_VALUES
        .iter()
        .zip(runs)
        .map(|(k, r)| row(&format!("k={k}"), r))
        .collect();
    outcome(
        counts_ok && accs_ok && elapsed < TREND_BUDGET,
        format!(
            "{}; counts non-decreasing: {counts_ok}; accuracy non-decreasing: {accs_ok}; {elapsed:.0?}",
            rows.join("; ")
        ),
    )
}

fn c11_determinism(first: &Run, second: &Run, data: &Dataset) -> Outcome {
    let same_metrics = std::fs::read(first.dir.join("metrics.txt")).unwrap()
        == std::fs::read(second.dir.join("metrics.txt")).unwrap();
    let loaded = checkpoint::load(&first.dir.join("finetune.ckpt")).unwrap();
    let test = prepare_splits(data).test;
    let exact = test.inputs.iter().all(|x| {
        let a = first.net.forward_one(x, "").unwrap();
        let b = loaded.forward_one(x, "").unwrap();
        a.logits
            .iter()
            .zip(&b.logits)
            .all(|(u, v)| u.to_bits() == v.to_bits())
            && a.similarities
                .iter()
                .zip(&b.similarities)
                .all(|(u, v)| u.to_bits() == v.to_bits())
    });
    outcome(
        same_metrics && exact,
        format!("identical metrics sidecars: {same_metrics}; reloaded checkpoint forward bit-exact: {exact}"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "baseline recovery", c1_baseline_recovery()),
        (2, "scalar fidelity", c2_scalar_fidelity()),
        (3, "clamp plateau", c3_clamp_plateau()),
        (4, "top-k oracle", c4_topk_oracle()),
        (5, "gradient audit", c5_gradient_audit()),
        (6, "straight-through contract", c6_straight_through()),
    ];

    let tmp = tempfile::tempdir().unwrap();
    let base = Config::load(PRESET, &[]).unwrap();
    let data = base.load_dataset().unwrap();
    let with = |overrides: &[String]| Config::load(PRESET, overrides).unwrap();
    let default = train(&base, &data, &tmp.path().join("default"));

    results.push((
        8,
        "synthetic end-to-end",
        match &default {
            Ok(run) => c8_end_to_end(run, &data),
            Err(e) => outcome(false, format!("default run failed: {e}")),
        },
    ));

    // trend sweeps reuse the default run where its settings coincide
    let sweep = |key: &str,
                 values: Vec<String>,
                 default_value: String|
     -> (Result<Vec<Run>, String>, Duration) {
        let start = Instant::now();
        let runs = values
            .iter()
            .map(|v| {
                if *v == default_value {
                    let run = default.as_ref().map_err(|e| e.clone())?;
                    Ok(Run {
                        dir: run.dir.clone(),
                        net: run.net.clone(),
                        report: run.report.clone(),
                        elapsed: run.elapsed,
                    })
                } else {
                    let dir = tmp.path().join(format!("{key}-{v}"));
                    train(&with(&[format!("{key}={v}")]), &data, &dir)
                }
            })
            .collect::<Result<Vec<_>, String>>();
        let reused = values.iter().filter(|v| **v == default_value).count() as u32;
        let extra = default
            .as_ref()
            .map_or(Duration::ZERO, |r| r.elapsed * reused);
        (runs, start.elapsed() + extra)
    };

    let radii: Vec<String> = RADIUS_PRESETS.iter().map(|(_, r)| r.to_string()).collect();
    // the radius sweep includes a run that prunes, so it also checks pruning
    let (runs, t) = sweep(
        "model.radius_init",
        radii,
        base.model.radius_init.to_string(),
    );
    let (c7, c9) = match runs {
        Ok(r) => (c7_prune_correctness(&r, &data), c9_radius_trend(&r, t)),
        Err(e) => (outcome(false, e.clone()), outcome(false, e)),
    };
    results.push((7, "prune correctness", c7));
    results.push((9, "radius trend", c9));

    let ks: Vec<String> = K_VALUES.iter().map(|k| k.to_string()).collect();
    let (runs, t) = sweep("losses.k", ks, base.losses.k.to_string());
    results.push((
        10,
        "top-k trend",
        runs.map_or_else(|e| outcome(false, e), |r| c10_topk_trend(&r, t)),
    ));

    let again = train(&base, &data, &tmp.path().join("again"));
    results.push((
        11,
        "determinism & round-trip",
        match (&default, &again) {
            (Ok(a), Ok(b)) => c11_determinism(a, b, &data),
            (Err(e), _) | (_, Err(e)) => outcome(false, e.clone()),
        },
    ));

    results.sort_by_key(|(n, _, _)| *n);
    let mut failed = 0;
    for (n, name, o) in &results {
        println!(
            "{} criterion {n:>2} ({name}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += (!o.pass) as usize;
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
