//! Acceptance suite: one PASS/FAIL line per criterion, tolerances and
//! runtime budgets pinned below. Red criteria are reported, not hidden;
//! set `METAGRAD_ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero
//! exit.

use std::time::{Duration, Instant};

use metagrad::experiments::{
    ablate, collapse, preset, run_train, AblationMode, ExperimentConfig, ProbeSetup, TrainOutcome,
};
use metagrad::maml::{adapt, InnerConfig};
use metagrad::metaopt::OptimizerSpec;
use metagrad::models::{build_model, Checkpoint, ModelSpec};
use metagrad::oracle::{
    deep_maml_grad, deep_maml_hessian, deep_one_step_adapt, stationary_points, DeepPoint, PointKind,
};
use metagrad::rng::{self, Stream};
use metagrad::tasks::TaskData;
use metagrad::verify::{
    diagonal_reduction_error, identity_trajectory_matches, kron_dense_error, meta_gradient_suite, monte_carlo_agreement,
};
use metagrad::{Result, Tensor};
use rand::Rng;

const ALPHA: f64 = 0.1;
const MINIMUM: f64 = 3.16228;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Line {
    id: &'static str,
    passed: bool,
    detail: String,
}

struct Report {
    lines: Vec<Line>,
}

impl Report {
    fn add(&mut self, id: &'static str, passed: bool, detail: String) {
        println!("{} {id}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.lines.push(Line { id, passed, detail });
    }

    fn timed(&mut self, id: &'static str, passed: bool, detail: String, took: Duration, budget: Duration) {
        let within = took < budget;
        self.add(
            id,
            passed && within,
            format!(
                "{detail}; runtime {:.2}s (budget {}s)",
                took.as_secs_f64(),
                budget.as_secs()
            ),
        );
    }
}

fn dist_to_minimum(a: f64, b: f64) -> f64 {
    let m = 1.0 / ALPHA.sqrt();
    [(m, 0.0), (-m, 0.0), (0.0, m), (0.0, -m)]
        .iter()
        .map(|(x, y)| (a - x).hypot(b - y))
        .fold(f64::INFINITY, f64::min)
}

fn criterion_1(rep: &mut Report) -> Result<()> {
    let t = Instant::now();
    let pts = stationary_points(ALPHA)?;
    let mut grad_max: f64 = 0.0;
    let mut hess_err: f64 = 0.0;
    let mut coord_err: f64 = 0.0;
    let (mut maxima, mut minima) = (0, 0);
    for sp in &pts {
        let (a, b) = (sp.coords.a, sp.coords.b);
        let (da, db) = deep_maml_grad(sp.coords, ALPHA);
        grad_max = grad_max.max(da.hypot(db));
        let expected = if a == 0.0 && b == 0.0 {
            maxima += (sp.kind == PointKind::LocalMax) as usize;
            [-0.4, -0.4]
        } else if b == 0.0 {
            minima += (sp.kind == PointKind::LocalMin) as usize;
            coord_err = coord_err.max((a.abs() - MINIMUM).abs());
            [0.8, 0.006]
        } else {
            minima += (sp.kind == PointKind::LocalMin) as usize;
            coord_err = coord_err.max((b.abs() - MINIMUM).abs());
            [0.006, 0.8]
        };
        let fd = deep_maml_hessian(sp.coords, ALPHA, 1e-5);
        for h in [sp.hessian, fd] {
            hess_err = hess_err
                .max((h[0][0] - expected[0]).abs())
                .max((h[1][1] - expected[1]).abs())
                .max(h[0][1].abs())
                .max(h[1][0].abs());
        }
    }
    let took = t.elapsed();
    let ok = pts.len() == 5 && maxima == 1 && minima == 4 && grad_max < 1e-12 && hess_err < 1e-6 && coord_err < 5e-6;
    rep.timed(
        "1 analytic stationary structure",
        ok,
        format!(
            "{} points ({maxima} max, {minima} min); max |grad| {grad_max:.1e} < 1e-12; Hessian error {hess_err:.1e} < 1e-6; minimum location error {coord_err:.1e}",
            pts.len()
        ),
        took,
        Duration::from_secs(1),
    );
    Ok(())
}

fn criterion_2(rep: &mut Report) -> Result<()> {
    let t = Instant::now();
    let suite = meta_gradient_suite()?;
    let took = t.elapsed();
    let worst = suite.checks.iter().map(|c| c.value).fold(0.0, f64::max);
    let detail = match suite.first_failure() {
        Some(c) => format!(
            "{} cases, first failure {} ({:.1e})",
            suite.checks.len(),
            c.name,
            c.value
        ),
        None => format!(
            "{} cases (T in 1,3,5; identity, msgd, mc, kfo), max relative error {worst:.1e} < 1e-4",
            suite.checks.len()
        ),
    };
    rep.timed(
        "2 meta-gradient correctness",
        suite.passed,
        detail,
        took,
        Duration::from_secs(30),
    );
    Ok(())
}

fn criterion_3(rep: &mut Report) -> Result<()> {
    let t = Instant::now();
    let mut r = rng::stream(2024, Stream::Eval, 3);
    let mut oracle_err: f64 = 0.0;
    let mut engine_err: f64 = 0.0;
    let base = build_model(&ModelSpec::deep1d(), 0)?;
    for _ in 0..1000 {
        let alpha: f64 = r.random_range(0.01..=0.5);
        let b = rng::normal(&mut r);
        let theta = rng::normal(&mut r);
        let a = 1.0 / alpha.sqrt();
        let q = deep_one_step_adapt(DeepPoint::new(a, b), theta, alpha, true);
        oracle_err = oracle_err.max((q.a * q.b - theta).abs());
        let m = base
            .with_flat_params(vec![Tensor::matrix(1, 1, vec![a])?, Tensor::matrix(1, 1, vec![b])?])?
            .set_freeze(&[true, false])?;
        let (m, _, _) = adapt(&m, None, &TaskData::Population { theta }, &InnerConfig::new(alpha, 1))?;
        let w = m.effective_scalar()?;
        engine_err = engine_err.max((w - theta).abs());
    }
    let took = t.elapsed();
    rep.timed(
        "3 one-step exact adaptation",
        oracle_err < 1e-12 && engine_err < 1e-12,
        format!("1000 draws; max |a*b' - theta'| closed form {oracle_err:.1e}, engine {engine_err:.1e} (< 1e-12)"),
        took,
        Duration::from_secs(1),
    );
    Ok(())
}

fn criterion_4(rep: &mut Report) -> Result<()> {
    let t = Instant::now();
    let shallow = run_train(&preset("regression-shallow")?)?;
    let deep = run_train(&preset("regression-deep")?)?;
    let took = t.elapsed();
    let mse = |o: &TrainOutcome| -> Vec<f64> {
        o.summary
            .seeds
            .iter()
            .map(|s| 2.0 * s.mean_loss.unwrap_or(f64::NAN))
            .collect()
    };
    let (ms, md) = (mse(&shallow), mse(&deep));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let dists: Vec<f64> = deep
        .records
        .iter()
        .map(|r| {
            let p: Vec<f64> = r
                .final_model
                .as_ref()
                .unwrap()
                .flat_params()
                .iter()
                .map(|t| t.data()[0])
                .collect();
            dist_to_minimum(p[0], p[1])
        })
        .collect();
    let worst = dists.iter().copied().fold(0.0, f64::max);
    let lower = md.iter().zip(&ms).all(|(d, s)| d < s) && mean(&md) < mean(&ms);
    rep.timed(
        "4 deep beats shallow after adaptation",
        lower && worst < 0.05,
        format!(
            "1-step MSE over 1000 tasks: deep {:.4} vs shallow {:.4} ({} seeds, lower on each); deep distance to nearest minimum max {worst:.1e} < 0.05",
            mean(&md),
            mean(&ms),
            md.len()
        ),
        took,
        Duration::from_secs(120),
    );
    Ok(())
}

struct Logistic {
    cfg: ExperimentConfig,
    out: TrainOutcome,
}

impl Logistic {
    fn train(name: &str) -> Result<Logistic> {
        let cfg = preset(name)?.with_overrides(&["seeds=[0, 1, 2]"])?;
        let out = run_train(&cfg)?;
        Ok(Logistic { cfg, out })
    }

    fn accuracies(&self) -> Vec<f64> {
        self.out
            .summary
            .seeds
            .iter()
            .map(|s| s.mean_accuracy.unwrap_or(0.0))
            .collect()
    }

    fn mean(&self) -> f64 {
        self.out.summary.mean_accuracy.unwrap_or(0.0)
    }

    fn checkpoint(&self, k: usize) -> Checkpoint {
        let r = &self.out.records[k];
        Checkpoint::new(r.final_model.clone().unwrap(), r.final_xi.clone())
    }
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join("/")
}

fn criterion_5(rep: &mut Report) -> Result<Logistic> {
    let t = Instant::now();
    let lr = Logistic::train("logistic-lr")?;
    let linnet = Logistic::train("logistic-linnet3")?;
    let kfo = Logistic::train("logistic-kfo0")?;
    let took = t.elapsed();
    let budget = Duration::from_secs(600);
    let steps = linnet.cfg.eval_cfg().steps;
    rep.add(
        "5a LR with MAML near chance",
        (0.45..=0.60).contains(&lr.mean()),
        format!(
            "mean accuracy {:.3} (seeds {}), band [0.45, 0.60]; {steps}-step meta-test",
            lr.mean(),
            fmt(&lr.accuracies())
        ),
    );
    rep.add(
        "5b LR+LinNet(3) rescues",
        linnet.mean() >= 0.90,
        format!(
            "mean accuracy {:.3} (seeds {}) >= 0.90",
            linnet.mean(),
            fmt(&linnet.accuracies())
        ),
    );
    rep.add(
        "5c LR with KFO(0)",
        kfo.mean() >= 0.95,
        format!(
            "mean accuracy {:.3} (seeds {}) >= 0.95",
            kfo.mean(),
            fmt(&kfo.accuracies())
        ),
    );
    let (a, b, c) = (lr.accuracies(), linnet.accuracies(), kfo.accuracies());
    let ordered: Vec<bool> = (0..SEEDS.len()).map(|k| a[k] < b[k] && b[k] <= c[k]).collect();
    rep.timed(
        "5 ordering LR < LinNet <= KFO per seed",
        ordered.iter().all(|&o| o),
        format!("holds on seeds {:?}", ordered),
        took,
        budget,
    );
    Ok(linnet)
}

fn criterion_6(rep: &mut Report, linnet: &Logistic) -> Result<()> {
    let t = Instant::now();
    let mut gaps = Vec::new();
    let mut fwd: f64 = 0.0;
    for (k, &seed) in SEEDS.iter().enumerate() {
        let r = collapse(&linnet.checkpoint(k), &ProbeSetup::from_config(&linnet.cfg, seed))?;
        gaps.push(r.original_accuracy.unwrap_or(0.0) - r.collapsed_accuracy.unwrap_or(0.0));
        fwd = fwd.max(r.forward_max_diff);
    }
    let took = t.elapsed();
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    rep.timed(
        "6 collapse destroys adaptation",
        min_gap >= 0.20 && fwd < 1e-10,
        format!(
            "accuracy gap original - collapsed {} (need >= 0.20); forward difference {fwd:.1e} < 1e-10",
            fmt(&gaps)
        ),
        took,
        Duration::from_secs(120),
    );
    Ok(())
}

fn criterion_7(rep: &mut Report) -> Result<()> {
    let t = Instant::now();
    let kron = kron_dense_error(200, 7)?;
    let diag = diagonal_reduction_error(200, 8)?;
    let specs = [
        OptimizerSpec::identity(),
        OptimizerSpec::msgd(),
        OptimizerSpec::mc(),
        OptimizerSpec::kfo(0),
        OptimizerSpec::kfo(2),
    ];
    let mut identical = true;
    for s in &specs {
        identical &= identity_trajectory_matches(s, 100)?;
    }
    let took = t.elapsed();
    rep.timed(
        "7 KFO algebra",
        kron < 1e-12 && diag < 1e-12 && identical,
        format!("kron vs dense {kron:.1e}, diagonal vs meta-sgd {diag:.1e} (< 1e-12); identity transforms bit-identical over 100 steps: {identical}"),
        took,
        Duration::from_secs(10),
    );
    Ok(())
}

fn criterion_8(rep: &mut Report) -> Result<()> {
    let t = Instant::now();
    let r = monte_carlo_agreement(ALPHA, 1_000_000, 21, -4.0, 4.0, 0)?;
    let took = t.elapsed();
    rep.timed(
        "8 oracle and engine agree",
        r.max_standard_errors < 3.0,
        format!(
            "10^6 tasks on 21x21 grid; offset {:.6}; max deviation {:.2e} = {:.2} standard errors (< 3) at {:?}",
            r.offset, r.max_abs_deviation, r.max_standard_errors, r.worst_point
        ),
        took,
        Duration::from_secs(120),
    );
    Ok(())
}

fn criterion_9(rep: &mut Report, linnet: &Logistic) -> Result<()> {
    let t = Instant::now();
    let mut found = Vec::new();
    let mut notes = Vec::new();
    for (k, &seed) in SEEDS.iter().enumerate() {
        let table = ablate(
            &linnet.checkpoint(k),
            &ProbeSetup::from_config(&linnet.cfg, seed),
            &[],
            &[AblationMode::FreezeOnly, AblationMode::AdaptOnly],
        )?;
        let crit = table.critical_layers(0.03, 0.10);
        notes.push(format!(
            "seed {seed}: {}",
            if crit.is_empty() { "none".into() } else { crit.join(",") }
        ));
        found.push(!crit.is_empty());
    }
    let took = t.elapsed();
    rep.timed(
        "9 layer ablation direction",
        found.iter().all(|&f| f),
        format!(
            "layers with adapt-only within 3 points and freeze-only >= 10 points below full: {}",
            notes.join("; ")
        ),
        took,
        Duration::from_secs(300),
    );
    Ok(())
}

fn main() -> Result<()> {
    let started = Instant::now();
    let mut rep = Report { lines: Vec::new() };
    criterion_1(&mut rep)?;
    criterion_2(&mut rep)?;
    criterion_3(&mut rep)?;
    criterion_4(&mut rep)?;
    let linnet = criterion_5(&mut rep)?;
    criterion_6(&mut rep, &linnet)?;
    criterion_7(&mut rep)?;
    criterion_8(&mut rep)?;
    criterion_9(&mut rep, &linnet)?;
    let failed: Vec<&Line> = rep.lines.iter().filter(|l| !l.passed).collect();
    println!(
        "acceptance: {}/{} lines pass in {:.1}s",
        rep.lines.len() - failed.len(),
        rep.lines.len(),
        started.elapsed().as_secs_f64()
    );
    for l in &failed {
        println!("  red: {} ({})", l.id, l.detail);
    }
    if !failed.is_empty() && std::env::var_os("METAGRAD_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
    Ok(())
}
