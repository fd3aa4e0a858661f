//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sharpmaml::config::RunConfig;
use sharpmaml::diffcore::{self, Activation, Dataset, ModelSpec, Quadratic};
use sharpmaml::landscape::{self, DataLoss, Directions, GridObjective};
use sharpmaml::meta::{self, InnerConfig, MetaConfig, Perturbation, TrainState};
use sharpmaml::par;
use sharpmaml::runner;
use sharpmaml::sharp::{sharp_meta_step, sharp_meta_step_with, SharpConfig, Variant};
use sharpmaml::tasks::{FamilyKind, Task, TaskFamily};
use sharpmaml::theory::{self, BoundForm, BoundInputs, ConvergenceTrace, LemmaConfig, ProbeStatus, SweepInputs};
use sharpmaml::ParamVector;

type Outcome = Result<String, String>;

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn quad_task(q: Quadratic, id: u64) -> Task {
    Task {
        support: Dataset::Quadratic(q.clone()),
        query: Dataset::Quadratic(q),
        alt_query: None,
        task_id: id,
        source_id: id,
        master_seed: 0,
    }
}

fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d).map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum()).collect()
}

fn power_lambda_max(a: &[f64], d: usize) -> f64 {
    let mut v = vec![1.0; d];
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let w = matvec(a, &v);
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = v.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() / v.iter().map(|x| x * x).sum::<f64>();
        v = w.iter().map(|x| x / n).collect();
    }
    lambda
}

// 1. One-step meta-gradient on quadratics against A(I−βA)²(θ−c).
fn quadratic_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dim in [1usize, 5] {
        let fam = TaskFamily::new(FamilyKind::Quadratic { dim, lambda_min: 0.2, lambda_max: 3.0 }).unwrap();
        let model = ModelSpec::quadratic(dim).unwrap();
        for i in 0..50u64 {
            let task = fam.sample_task(7, i).unwrap();
            let Dataset::Quadratic(q) = &task.support else { unreachable!() };
            let beta = rng.random_range(0.01..0.3);
            let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let diff: Vec<f64> = theta.iter().zip(&q.center).map(|(t, c)| t - c).collect();
            let mut v = diff;
            for _ in 0..2 {
                let av = matvec(&q.a, &v);
                v = v.iter().zip(&av).map(|(x, y)| x - beta * y).collect();
            }
            let expect = matvec(&q.a, &v);
            let inner = InnerConfig::new(beta, 1).unwrap();
            let got = meta::meta_gradient(&model, &ParamVector::from_vec(theta), &task, &inner, &Perturbation::none()).unwrap();
            worst = worst.max(rel(got.grad.as_slice(), &expect));
        }
    }
    check(worst < 1e-10, format!("100 tasks, worst rel err {worst:.2e}"))
}

fn random_regression(rng: &mut ChaCha8Rng, n: usize) -> Dataset {
    let xs: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ys: Vec<f64> = (0..n).map(|i| (xs[2 * i] - 0.5 * xs[2 * i + 1]).sin()).collect();
    Dataset::regression(xs, 2, ys, 1).unwrap()
}

fn unrolled(model: &ModelSpec, theta: &ParamVector, task: &Task, inner: &InnerConfig) -> f64 {
    let traj = meta::inner_adapt(model, theta, task, inner, &Perturbation::none()).unwrap();
    diffcore::loss(model, traj.adapted(), &task.query).unwrap()
}

fn fd_unrolled(model: &ModelSpec, theta: &ParamVector, task: &Task, inner: &InnerConfig, h: f64) -> Vec<f64> {
    (0..theta.dim())
        .map(|i| {
            let mut p = theta.clone();
            p.as_mut_slice()[i] += h;
            let up = unrolled(model, &p, task, inner);
            p.as_mut_slice()[i] -= 2.0 * h;
            let down = unrolled(model, &p, task, inner);
            (up - down) / (2.0 * h)
        })
        .collect()
}

// 2. Full meta-gradient against central differences of the unrolled objective.
fn finite_difference() -> Outcome {
    let model = ModelSpec::mlp(vec![2, 16, 1], Activation::Tanh).unwrap();
    let (mut worst, mut fo_best) = (0.0f64, f64::INFINITY);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let task = Task {
            support: random_regression(&mut rng, 6),
            query: random_regression(&mut rng, 6),
            alt_query: None,
            task_id: seed,
            source_id: seed,
            master_seed: seed,
        };
        let theta = model.init_params(seed, 1.0);
        for steps in 1..=3 {
            let inner = InnerConfig::new(0.3, steps).unwrap();
            let fd = fd_unrolled(&model, &theta, &task, &inner, 1e-5);
            let full = meta::meta_gradient(&model, &theta, &task, &inner, &Perturbation::none()).unwrap();
            worst = worst.max(rel(full.grad.as_slice(), &fd));
            let fo = meta::meta_gradient(&model, &theta, &task, &inner.clone().first_order(true), &Perturbation::none()).unwrap();
            fo_best = fo_best.min(rel(fo.grad.as_slice(), &fd));
        }
    }
    check(
        worst < 1e-4 && fo_best > 1e-4,
        format!("30 cases, worst rel err {worst:.2e}; first-order control best {fo_best:.2e} (must exceed 1e-4)"),
    )
}

fn trace_bytes(sets: &[(&str, &str)], threads: usize) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("model.hidden", "8"),
        ("train.iterations", "100"),
        ("train.meta_batch", "3"),
        ("train.inner_steps", "2"),
        ("train.beta_low", "0.05"),
        ("train.beta_up", "0.01"),
        ("seed", "5"),
    ] {
        cfg.set(k, v).unwrap();
    }
    for (k, v) in sets {
        cfg.set(k, v).unwrap();
    }
    cfg.out_dir = dir.path().to_path_buf();
    par::with_threads(threads, || runner::run_train(&cfg, false)).unwrap();
    std::fs::read(dir.path().join("trace.csv")).unwrap()
}

// 3. Reduction identities on the written trace files.
fn reductions() -> Outcome {
    let a = "0.05";
    let cases: Vec<(&str, Vec<(&str, &str)>, Vec<(&str, &str)>)> = vec![
        ("sharp_both(0,0) = maml", vec![("train.variant", "sharp_both")], vec![("train.variant", "maml")]),
        (
            "sharp_both(up=0) = sharp_low",
            vec![("train.variant", "sharp_both"), ("sharp.alpha_low", a)],
            vec![("train.variant", "sharp_low"), ("sharp.alpha_low", a)],
        ),
        (
            "sharp_both(low=0) = sharp_up",
            vec![("train.variant", "sharp_both"), ("sharp.alpha_up", a)],
            vec![("train.variant", "sharp_up"), ("sharp.alpha_up", a)],
        ),
        (
            "esam(1,1) = sharp_low",
            vec![("train.variant", "sharp_low"), ("sharp.alpha_low", a), ("esam.enabled", "true"), ("esam.xi", "1"), ("esam.mu", "1")],
            vec![("train.variant", "sharp_low"), ("sharp.alpha_low", a)],
        ),
        (
            "anil(split 0) = sharp_both",
            vec![("train.variant", "sharp_both"), ("sharp.alpha_low", a), ("sharp.alpha_up", a), ("model.head_split", "0"), ("anil.enabled", "true")],
            vec![("train.variant", "sharp_both"), ("sharp.alpha_low", a), ("sharp.alpha_up", a), ("model.head_split", "0")],
        ),
    ];
    let mut failed = Vec::new();
    for (name, lhs, rhs) in &cases {
        let reference = trace_bytes(rhs, 1);
        let same = [1, 4].iter().all(|&t| trace_bytes(lhs, t) == reference) && trace_bytes(rhs, 4) == reference;
        if !same {
            failed.push(*name);
        }
    }
    check(failed.is_empty(), format!("{} identities, threads 1 and 4, failing: {failed:?}", cases.len()))
}

// 4. Stationary points of a task loss are stationary for its adapted loss.
fn lemma() -> Outcome {
    let mut bad = Vec::new();
    for i in 0..20u64 {
        let dim = 1 + (i as usize % 6);
        let fam = TaskFamily::new(FamilyKind::Quadratic { dim, lambda_min: 0.1, lambda_max: 4.0 }).unwrap();
        let model = ModelSpec::quadratic(dim).unwrap();
        let inner = InnerConfig::new(0.05 + 0.1 * (i % 5) as f64, 1 + (i as usize % 3)).unwrap();
        let r = theory::lemma1_check(&model, &fam.sample_task(3, i).unwrap(), &inner, &LemmaConfig::default()).unwrap();
        if r.status != ProbeStatus::Verified || r.probes[0].meta_grad_norm != 0.0 {
            bad.push(format!("quadratic {i}"));
        }
    }
    let model = ModelSpec::mlp(vec![1, 8, 1], Activation::Tanh).unwrap();
    let fam = TaskFamily::new(FamilyKind::Sinusoid { shots: 5, query: 5 }).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..10u64 {
        let cfg = LemmaConfig { n_probes: 1, seed: i, ..LemmaConfig::default() };
        let r = theory::lemma1_check(&model, &fam.sample_task(9, i).unwrap(), &InnerConfig::new(0.01, 1).unwrap(), &cfg).unwrap();
        let p = &r.probes[0];
        worst = worst.max(p.meta_grad_norm);
        if p.status != ProbeStatus::Verified || !(p.grad_norm < 1e-9) || !(p.meta_grad_norm < 1e-7) {
            bad.push(format!("mlp {i} ({:?}, |g| {:.1e})", p.status, p.grad_norm));
        }
    }
    check(bad.is_empty(), format!("20 quadratic + 10 MLP, worst MLP meta-grad {worst:.1e}, failing: {bad:?}"))
}

// 5. Running average of the squared MAML gradient norm under 1/√T schedules.
fn convergence() -> Outcome {
    let t = 10_000usize;
    let s = (t as f64).sqrt();
    let (dim, pool, m) = (2, 32, 32);
    let fam = TaskFamily::new(FamilyKind::Quadratic { dim, lambda_min: 0.5, lambda_max: 1.0 }).unwrap().with_pool(pool);
    let model = ModelSpec::quadratic(dim).unwrap();
    let inner = InnerConfig::new(10.0 / s, 1).unwrap();
    let meta = MetaConfig::new(0.1 / s, m, t).unwrap();
    let sharp = SharpConfig::new(Variant::SharpBoth, 0.05, 1.0 / s).unwrap();
    let seeds = 5;
    let mut mean = vec![0.0; t];
    let mut per_seed = Vec::new();
    for seed in 0..seeds as u64 {
        let diag = fam.pool(seed).unwrap();
        let mut st = TrainState::new(model.init_params(seed, 0.5));
        for it in 0..t as u64 {
            let tasks = fam.sample_task_batch(seed, it, m).unwrap();
            st = sharp_meta_step_with(&model, st, &tasks, &inner, &meta, &sharp, Some(&diag)).unwrap();
        }
        for (acc, p) in mean.iter_mut().zip(&st.trace.points) {
            *acc += p.grad_norm_sq / seeds as f64;
        }
        per_seed.push(st.trace.running_avg());
    }
    let d = theory::convergence_diagnostic(&ConvergenceTrace::from_series(&mean)).unwrap();
    check(
        d.final_avg < 1e-3 && d.loglog_slope <= -0.4,
        format!(
            "seed-mean final avg {:.2e}, slope {:.3}; per seed {:?}",
            d.final_avg,
            d.loglog_slope,
            per_seed.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>()
        ),
    )
}

// 6. Sharpness at a quadratic's minimizer is ½λ_max α².
fn sharpness() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let dim = 2 + (i as usize % 9);
        let fam = TaskFamily::new(FamilyKind::Quadratic { dim, lambda_min: 0.1, lambda_max: 5.0 }).unwrap();
        let task = fam.sample_task(21, i).unwrap();
        let Dataset::Quadratic(q) = &task.support else { unreachable!() };
        let model = ModelSpec::quadratic(dim).unwrap();
        let alpha = [0.01, 0.1, 0.5][i as usize % 3];
        let expect = 0.5 * power_lambda_max(&q.a, dim) * alpha * alpha;
        let obj = DataLoss { model: &model, data: &task.support };
        let got = landscape::sharpness_of(&obj, &ParamVector::from_vec(q.center.clone()), alpha, 8, i).unwrap();
        worst = worst.max((got.sharpness - expect).abs() / expect);
    }
    check(worst < 0.02, format!("20 quadratics, worst rel err {worst:.2e}"))
}

// 7. Bound against the high-precision fixture, then the radius existence claim.
fn pac_bound() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/pac_bound_mp.csv");
    let text = std::fs::read_to_string(path).unwrap();
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let b = BoundInputs {
            k: f[0].parse().unwrap(),
            n: f[1].parse().unwrap(),
            m: f[2].parse().unwrap(),
            delta: f[3].parse().unwrap(),
            alpha: f[4].parse().unwrap(),
            theta_norm_sq: f[5].parse().unwrap(),
            gamma_a: f[6].parse().unwrap(),
            empirical_term: f[7].parse().unwrap(),
        };
        for (form, col) in [(BoundForm::Main, 8), (BoundForm::Detailed, 9)] {
            let expect: f64 = f[col].parse().unwrap();
            let got = theory::pac_bound_with(&b, form).unwrap();
            worst = worst.max((got - expect).abs() / expect.abs());
        }
        rows += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut qualifying, mut failures, mut worst_case) = (0usize, 0usize, 0usize);
    for _ in 0..50 {
        let inputs = SweepInputs {
            k: rng.random_range(5_000..200_000),
            n: rng.random_range(1..20),
            m: rng.random_range(2..200),
            delta: rng.random_range(0.01..0.2),
            theta_norm_sq: rng.random_range(1.0..100.0),
            gamma_a: rng.random_range(0.0..0.1),
            form: if rng.random_bool(0.5) { BoundForm::Main } else { BoundForm::Detailed },
        };
        let (l0, lambda) = (rng.random_range(0.0..0.5), rng.random_range(0.1..10.0));
        let thr = inputs.threshold();
        let alphas = theory::log_grid(thr * 1e-6, thr * 10.0, 60);
        let report = theory::bound_alpha_sweep(&inputs, &alphas, |a: f64| Ok((l0 + 0.5 * lambda * a * a).min(1.0))).unwrap();
        qualifying += report.checks.len();
        failures += report.checks.iter().filter(|c| !c.holds).count();
        worst_case += report.checks.iter().filter(|c| !c.holds_worst_case).count();
    }
    check(
        rows == 100 && worst < 1e-12 && qualifying > 0 && failures == 0,
        format!("{rows} fixture rows, worst rel err {worst:.2e}; {qualifying} qualifying radii, {failures} without a better larger radius ({worst_case} would lack one if the empirical term jumped to 1)"),
    )
}

// 8. Sharpness-aware variants against MAML on toy sinusoid regression.
fn desk_scale() -> Outcome {
    let fam = TaskFamily::new(FamilyKind::Sinusoid { shots: 5, query: 10 }).unwrap().with_pool(20);
    let model = ModelSpec::mlp(vec![1, 40, 40, 1], Activation::Tanh).unwrap();
    let inner = InnerConfig::new(0.01, 1).unwrap();
    let (t, m) = (2000usize, 4usize);
    let meta = MetaConfig::new(0.0025, m, t).unwrap();
    let train = |seed: u64, sharp: &SharpConfig| {
        let mut st = TrainState::new(model.init_params(seed, 1.0));
        for it in 0..t as u64 {
            let tasks = fam.sample_task_batch(seed, it, m).unwrap();
            st = sharp_meta_step(&model, st, &tasks, &inner, &meta, sharp).unwrap();
        }
        landscape::generalization_gap(&model, &st.theta, &fam, &inner, 100, 100, seed).unwrap()
    };
    let (mut low_wins, mut gap_maml, mut gap_both) = (0, 0.0, 0.0);
    for seed in 0..5u64 {
        let maml = train(seed, &SharpConfig::maml());
        let low = train(seed, &SharpConfig::new(Variant::SharpLow, 0.05, 0.0).unwrap());
        let both = train(seed, &SharpConfig::new(Variant::SharpBoth, 0.05, 0.05).unwrap());
        low_wins += (low.test_post <= maml.test_post) as usize;
        gap_maml += maml.gap / 5.0;
        gap_both += both.gap / 5.0;
    }
    check(
        low_wins >= 3 && gap_both <= gap_maml,
        format!("sharp_low query MSE <= MAML in {low_wins}/5 seeds; mean gap sharp_both {gap_both:.4} vs MAML {gap_maml:.4}"),
    )
}

// 9. Landscape grids: closed forms on quadratics, determinism on an MLP.
fn landscapes() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..5u64 {
        let dim = 3 + i as usize;
        let fam = TaskFamily::new(FamilyKind::Quadratic { dim, lambda_min: 0.5, lambda_max: 2.0 }).unwrap();
        let task = fam.sample_task(1, i).unwrap();
        let Dataset::Quadratic(q) = &task.support else { unreachable!() };
        let model = ModelSpec::quadratic(dim).unwrap();
        let theta = ParamVector::from_vec((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let dirs = landscape::random_directions(&model, &theta, i).unwrap();
        let grid = landscape::loss_grid(&model, &theta, &task, &dirs, 1.0, 11, GridObjective::ErmTaskLoss, 0.1).unwrap();
        for (yi, y) in grid.ys.iter().enumerate() {
            for (xj, x) in grid.xs.iter().enumerate() {
                let r: Vec<f64> = (0..dim)
                    .map(|k| theta.as_slice()[k] + x * dirs.d1.as_slice()[k] + y * dirs.d2.as_slice()[k] - q.center[k])
                    .collect();
                let expect = 0.5 * r.iter().zip(matvec(&q.a, &r)).map(|(a, b)| a * b).sum::<f64>();
                worst = worst.max((grid.values[yi][xj] - expect).abs() / expect.abs().max(1e-300));
            }
        }
    }
    let mut worst_ratio: f64 = 0.0;
    for (a, c, beta) in [(2.0, 0.3, 0.1), (0.5, -1.0, 0.4), (3.0, 0.0, 0.2)] {
        let model = ModelSpec::quadratic(1).unwrap();
        let task = quad_task(Quadratic::diagonal(&[a], &[c]).unwrap(), 0);
        let theta = ParamVector::from_vec(vec![0.7]);
        let dirs = Directions { d1: ParamVector::from_vec(vec![1.0]), d2: ParamVector::from_vec(vec![0.5]), zero_groups: vec![] };
        let erm = landscape::loss_grid(&model, &theta, &task, &dirs, 1.0, 21, GridObjective::ErmTaskLoss, beta).unwrap();
        let maml = landscape::loss_grid(&model, &theta, &task, &dirs, 1.0, 21, GridObjective::MamlTaskLoss, beta).unwrap();
        let factor = (1.0f64 - beta * a).powi(2);
        for (re, rm) in erm.values.iter().zip(&maml.values) {
            for (e, m) in re.iter().zip(rm) {
                if *e > 1e-12 {
                    worst_ratio = worst_ratio.max((m - factor * e).abs() / (factor * e));
                }
            }
        }
    }
    let model = ModelSpec::mlp(vec![1, 40, 40, 1], Activation::Tanh).unwrap();
    let fam = TaskFamily::new(FamilyKind::Sinusoid { shots: 10, query: 10 }).unwrap();
    let task = fam.sample_task(2, 0).unwrap();
    let theta = model.init_params(2, 1.0);
    let dirs = landscape::random_directions(&model, &theta, 2).unwrap();
    let start = Instant::now();
    let grids = |threads| {
        par::with_threads(threads, || {
            [GridObjective::ErmTaskLoss, GridObjective::MamlTaskLoss]
                .map(|o| landscape::loss_grid(&model, &theta, &task, &dirs, 1.0, 51, o, 0.01).unwrap().values)
        })
    };
    let one = grids(1);
    let mlp_secs = start.elapsed().as_secs_f64();
    let four = grids(4);
    let same = one.iter().zip(&four).all(|(a, b)| {
        a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    check(
        worst < 1e-12 && worst_ratio < 1e-12 && same && mlp_secs < 60.0,
        format!(
            "ERM closed form {worst:.1e}, MAML/ERM ratio {worst_ratio:.1e}, 51x51 MLP grids {mlp_secs:.1}s single-threaded, threads 1 vs 4 identical: {same}"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("quadratic meta-gradient oracle", quadratic_oracle, Duration::from_secs(1)),
        ("finite-difference meta-gradient", finite_difference, Duration::from_secs(30)),
        ("bit-exact reductions", reductions, Duration::MAX),
        ("stationary points transfer", lemma, Duration::from_secs(120)),
        ("convergence diagnostic", convergence, Duration::from_secs(300)),
        ("sharpness instrument", sharpness, Duration::from_secs(10)),
        ("PAC bound calculator", pac_bound, Duration::from_secs(5)),
        ("desk-scale benefit", desk_scale, Duration::from_secs(900)),
        ("landscape grids", landscapes, Duration::from_secs(60)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) => (took <= *limit, d),
            Err(d) => (false, d),
        };
        let limit_note = if *limit == Duration::MAX { String::new() } else { format!(", limit {}s", limit.as_secs()) };
        println!(
            "criterion {id} [{name}]: {} ({detail}) [{:.2}s{limit_note}]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        failed += !ok as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
