//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (visible with `--nocapture`; the test verdict itself carries the result).
//!
//! Full-scale pretraining numbers are out of reach at desk scale, so the
//! criteria are property-based plus directional toy experiments. The toy
//! training run used by criteria 5, 7, 9, and 10 is computed once and
//! shared.

mod common;

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::{random_instances, well_separated_instances};
use potalign::bench::{run_noise_bench, BenchSpec, LossKind};
use potalign::gradcheck::finite_diff_check;
use potalign::psat::{psat_forward, token_positional_encoding};
use potalign::solver::{partial_ot, partial_ot_dummy, plan_diagnostics, sinkhorn, SolverConfig};
use potalign::synth::{batcher, generate_world, WorldConfig};
use potalign::tensor::DenseTensor;
use potalign::train::{
    assemble_total_loss, metrics_csv, train, LossToggles, ModelConfig, ModelParams, Optimizer,
    StepNodes, TrainConfig, TrainOutcome,
};

/// Heavy runs (toy training, factorial benches) hold this lock so their
/// wall-clock budgets are measured without competing for cores.
fn heavy_lock() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "[{}] {criterion}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

// ── Shared toy run (criteria 5, 7, 9, 10) ────────────────────────────

struct ToyRun {
    outcome: TrainOutcome,
    csv: String,
    wall: Duration,
}

fn toy_world_config() -> WorldConfig {
    WorldConfig {
        seed: 1,
        n_subjects: 200,
        volume_side: 8,
        misalignment_rate: 0.0,
        noise_sigma: 0.0,
        ..Default::default()
    }
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        queries: 16,
        channels: 64,
        out_dim: 16,
        patch: 2,
    }
}

fn toy_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        learning_rate: 2e-3,
        batch_size: 25,
        epochs: 50,
        seed: 1,
        optimizer: Optimizer::Adam,
        losses: LossToggles {
            mpot: true,
            contrastive: false,
            reconstruction: true,
        },
        ..Default::default()
    };
    cfg.mpot.solver.mass = 1.0;
    cfg.mpot.solver.epsilon = 0.05;
    cfg
}

fn run_toy() -> ToyRun {
    let _guard = heavy_lock();
    let world = generate_world(&toy_world_config()).expect("world generates");
    let start = Instant::now();
    let outcome = train(&world, &toy_model_config(), &toy_train_config()).expect("training runs");
    let wall = start.elapsed();
    let csv = metrics_csv(&outcome.metrics, "{\"run\":\"acceptance-toy\"}");
    ToyRun { outcome, csv, wall }
}

fn toy() -> &'static ToyRun {
    static TOY: OnceLock<ToyRun> = OnceLock::new();
    TOY.get_or_init(run_toy)
}

// ── Criterion 1: solver feasibility, fuzzed ──────────────────────────

#[test]
fn criterion_01_solver_feasibility_fuzzed() {
    let start = Instant::now();
    let instances = random_instances(20240808, 500, 8);
    let mut worst: f64 = 0.0;
    for (cost, p, q, s) in &instances {
        let cfg = SolverConfig {
            mass: *s,
            ..Default::default()
        };
        let plan = partial_ot(cost, p, q, &cfg).expect("solvable instance");
        assert!(plan.converged, "instance failed to converge");
        assert!(plan.plan.data().iter().all(|&v| v >= 0.0));
        let d = plan_diagnostics(&plan.plan, p, q, *s);
        worst = worst
            .max(d.row_violation)
            .max(d.col_violation)
            .max(d.mass_error);
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-9 && elapsed < Duration::from_secs(30);
    verdict(
        "criterion 1 (solver feasibility, 500 instances)",
        pass,
        &format!("worst violation {worst:.3e} (<= 1e-9), elapsed {elapsed:?} (< 30 s)"),
    );
    assert!(worst <= 1e-9, "worst violation {worst:.3e} exceeds 1e-9");
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
}

// ── Criterion 2: oracle agreement ────────────────────────────────────

#[test]
fn criterion_02_oracle_agreement() {
    let start = Instant::now();
    let instances = well_separated_instances(20240809, 50, 5);
    let mut worst_gap: f64 = 0.0;
    let mut worst_route: f64 = 0.0;
    for inst in &instances {
        let cfg = SolverConfig {
            epsilon: 0.004,
            mass: inst.s,
            max_iterations: 500_000,
            tolerance: 1e-10,
        };
        let dykstra = partial_ot(&inst.cost, &inst.p, &inst.q, &cfg).expect("solves");
        let dummy = partial_ot_dummy(&inst.cost, &inst.p, &inst.q, &cfg).expect("solves");
        assert!(dykstra.converged && dummy.converged);
        worst_gap = worst_gap.max(dykstra.objective(&inst.cost) - inst.lp.objective);
        worst_route = worst_route.max(dykstra.plan.max_abs_diff(&dummy.plan));
    }
    let elapsed = start.elapsed();
    let pass = worst_gap < 1e-2 && worst_route < 1e-6 && elapsed < Duration::from_secs(60);
    verdict(
        "criterion 2 (oracle agreement, 50 instances)",
        pass,
        &format!(
            "worst objective gap {worst_gap:.3e} (< 1e-2), worst route disagreement {worst_route:.3e} (< 1e-6), elapsed {elapsed:?} (< 60 s)"
        ),
    );
    assert!(worst_gap < 1e-2, "objective gap {worst_gap:.3e}");
    assert!(worst_route < 1e-6, "route disagreement {worst_route:.3e}");
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
}

// ── Criterion 3: full-mass reduction ─────────────────────────────────

#[test]
fn criterion_03_full_mass_reduction() {
    let mut rng = potalign::rng::Rng::new(20240810);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 2 + rng.below(5);
        let m = 2 + rng.below(5);
        let cost = potalign::metric::CostMatrix::new(
            DenseTensor::from_vec(vec![n, m], (0..n * m).map(|_| rng.range(0.0, 1.0)).collect())
                .unwrap(),
        )
        .unwrap();
        let mut p: Vec<f64> = (0..n).map(|_| rng.range(0.1, 1.0)).collect();
        let mut q: Vec<f64> = (0..m).map(|_| rng.range(0.1, 1.0)).collect();
        let sp: f64 = p.iter().sum();
        let sq: f64 = q.iter().sum();
        p.iter_mut().for_each(|v| *v /= sp);
        q.iter_mut().for_each(|v| *v /= sq);

        let cfg = SolverConfig {
            mass: 1.0,
            ..Default::default()
        };
        let partial = partial_ot(&cost, &p, &q, &cfg).unwrap();
        let balanced = sinkhorn(&cost, &p, &q, &cfg).unwrap();
        assert!(partial.converged && balanced.converged);
        worst = worst.max(partial.plan.max_abs_diff(&balanced.plan));
    }
    let pass = worst < 1e-6;
    verdict(
        "criterion 3 (full-mass reduction, 100 instances)",
        pass,
        &format!("worst entrywise difference {worst:.3e} (< 1e-6)"),
    );
    assert!(pass, "difference {worst:.3e}");
}

// ── Criterion 4: end-to-end gradient integrity ───────────────────────

#[test]
fn criterion_04_gradient_integrity_full_loss() {
    let start = Instant::now();
    // b = 2, D = 4, C = 8 instance as stated.
    let world = generate_world(&WorldConfig {
        seed: 11,
        n_subjects: 4,
        volume_side: 4,
        embed_dim: 6,
        ..Default::default()
    })
    .unwrap();
    let model = ModelConfig {
        queries: 3,
        channels: 8,
        out_dim: 6,
        patch: 2,
    };
    let mut cfg = TrainConfig {
        batch_size: 2,
        ..Default::default()
    };
    cfg.mpot.solver.epsilon = 0.1;
    cfg.mpot.solver.mass = 0.8;
    // The unroll count is pinned so the loss stays a smooth function of the
    // parameters across the finite-difference evaluations.
    cfg.mpot.fixed_unroll = Some(30);

    let params = ModelParams::init(3, &model, world.config.volume_side).unwrap();
    let batch = &batcher(&world.triplets, 2, 5, 0).unwrap()[0];
    let named = params.named();
    let tensors: Vec<DenseTensor> = named[1..].iter().map(|(_, t)| t.clone()).collect();

    let err = finite_diff_check(
        |tape, ids| {
            let nodes = StepNodes {
                encoder: potalign::psat::EncoderNodes {
                    patch_w: ids[0],
                    patch_b: ids[1],
                    dec_w: ids[2],
                    dec_b: ids[3],
                },
                psat: potalign::psat::PsatNodes {
                    queries: ids[4],
                    self_wq: ids[5],
                    self_wk: ids[6],
                    self_wv: ids[7],
                    self_wo: ids[8],
                    cross_wq: ids[9],
                    cross_wk: ids[10],
                    cross_wv: ids[11],
                    cross_wo: ids[12],
                    pspe: ids[13],
                    mlp_w1: ids[14],
                    mlp_b1: ids[15],
                    mlp_w2: ids[16],
                    mlp_b2: ids[17],
                },
                metric_m: ids[18],
            };
            let (total, _) = assemble_total_loss(tape, &params, &nodes, batch, &world, &cfg)?;
            Ok(total)
        },
        &tensors,
        1e-5,
    )
    .expect("loss builds");
    let elapsed = start.elapsed();
    let pass = err < 1e-4 && elapsed < Duration::from_secs(60);
    verdict(
        "criterion 4 (gradient integrity of the full objective)",
        pass,
        &format!("max relative error {err:.3e} (< 1e-4), elapsed {elapsed:?} (< 60 s)"),
    );
    assert!(err < 1e-4, "max relative error {err:.3e}");
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
}

// ── Criterion 5: PSD maintenance across training ─────────────────────

#[test]
fn criterion_05_psd_maintained_every_step() {
    let run = toy();
    let min_eig = run
        .outcome
        .psd_min_eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let steps = run.outcome.psd_min_eigenvalues.len();
    let pass = min_eig >= -1e-10 && steps > 0;
    verdict(
        "criterion 5 (PSD maintenance)",
        pass,
        &format!("smallest eigenvalue over {steps} steps: {min_eig:.3e} (>= -1e-10)"),
    );
    assert!(pass, "min eigenvalue {min_eig:.3e} over {steps} steps");
}

// ── Criterion 6: PSPE causality ──────────────────────────────────────

#[test]
fn criterion_06_pspe_causality() {
    // Fresh parameters: the table is zero-initialized, so the output is
    // exactly independent of (plane, slice).
    let model = toy_model_config();
    let fresh = ModelParams::init(1, &model, 8).unwrap();
    let mut rng = potalign::rng::Rng::new(77);
    let tokens_raw =
        DenseTensor::from_vec(vec![64, model.channels], rng.normal_vec(64 * model.channels))
            .unwrap();
    let pe = token_positional_encoding(4, model.channels);
    let tokens = DenseTensor::from_vec(
        vec![64, model.channels],
        tokens_raw
            .data()
            .iter()
            .zip(pe.data())
            .map(|(a, b)| a + b)
            .collect(),
    )
    .unwrap();
    let a = psat_forward(&tokens, &fresh.psat, 0, 0).unwrap();
    let b = psat_forward(&tokens, &fresh.psat, 2, 7).unwrap();
    let exact_independent = a.data() == b.data();

    // Trained parameters: the table has moved, so distinct positions give
    // distinct outputs.
    let trained = &toy().outcome.params;
    let ta = psat_forward(&tokens, &trained.psat, 0, 0).unwrap();
    let tb = psat_forward(&tokens, &trained.psat, 2, 7).unwrap();
    let diff: f64 = ta
        .data()
        .iter()
        .zip(tb.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let pass = exact_independent && diff > 1e-6;
    verdict(
        "criterion 6 (plane-slice embedding causality)",
        pass,
        &format!("zero table exactly position-independent: {exact_independent}; trained outputs differ by {diff:.3e} (> 1e-6)"),
    );
    assert!(exact_independent, "zero-table outputs differ");
    assert!(diff > 1e-6, "trained outputs differ by only {diff:.3e}");
}

// ── Criterion 7: learnability on the clean toy task ──────────────────

#[test]
fn criterion_07_toy_learnability() {
    let run = toy();
    let first = run.outcome.metrics.first().expect("metrics");
    let last = run.outcome.metrics.last().expect("metrics");
    let mpot_first = first.kl_vs + first.kl_vt;
    let mpot_last = last.kl_vs + last.kl_vt;
    let halved = mpot_last <= 0.5 * mpot_first;
    let retrieval = last.top1_s;
    let retrieval_ok = retrieval >= 0.8;
    let in_time = run.wall < Duration::from_secs(300);

    verdict(
        "criterion 7 (toy learnability)",
        halved && retrieval_ok && in_time,
        &format!(
            "mPOT loss {mpot_first:.4} -> {mpot_last:.4} (halved: {halved}); volume->slice top-1 {retrieval:.3} (>= 0.8: {retrieval_ok}); elapsed {:?} (< 5 min: {in_time})",
            run.wall
        ),
    );
    assert!(
        halved,
        "mPOT loss not halved: {mpot_first:.4} -> {mpot_last:.4}"
    );
    assert!(in_time, "toy run took {:?}", run.wall);
    assert!(
        retrieval_ok,
        "volume->slice top-1 retrieval {retrieval:.3} below the required 0.8 \
         (best achieved by this architecture family within the pinned budget; \
         see the acceptance notes in README)"
    );
}

// ── Criterion 8: noise tolerance (directional) ───────────────────────

fn bench_world() -> WorldConfig {
    toy_world_config()
}

fn bench_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        learning_rate: 2e-3,
        batch_size: 8,
        epochs: 30,
        optimizer: Optimizer::Adam,
        ..Default::default()
    };
    cfg.mpot.solver.mass = 0.7;
    cfg.mpot.solver.epsilon = 0.05;
    cfg
}

fn bench_spec() -> BenchSpec {
    BenchSpec {
        rhos: vec![0.3],
        losses: vec![LossKind::Mpot, LossKind::Contrastive],
        seeds: vec![1, 2, 3],
        jobs: 6,
    }
}

#[test]
fn criterion_08_noise_tolerance_directional() {
    let guard = heavy_lock();
    let start = Instant::now();
    let table = run_noise_bench(&bench_world(), &ModelConfig::default(), &bench_train_config(), &bench_spec())
        .expect("bench runs");
    let elapsed = start.elapsed();
    drop(guard);

    let find = |loss: LossKind| {
        table
            .aggregates
            .iter()
            .find(|a| a.loss == loss)
            .expect("aggregate present")
    };
    let mpot = find(LossKind::Mpot);
    let contrastive = find(LossKind::Contrastive);
    let direction_ok = mpot.top1_s_mean >= contrastive.top1_s_mean;
    let mass_ok = mpot.mispair_mass_partial_mean < mpot.mispair_mass_full_mean;
    let in_time = elapsed < Duration::from_secs(1200);

    verdict(
        "criterion 8 (noise tolerance at rho = 0.3, s = 0.7)",
        direction_ok && mass_ok && in_time,
        &format!(
            "mPOT top-1 {:.3} vs contrastive {:.3} (mPOT >= contrastive: {direction_ok}); mispaired-column mass {:.4} at s=0.7 vs {:.4} at s=1.0 (strictly lower: {mass_ok}); elapsed {elapsed:?} (< 20 min)",
            mpot.top1_s_mean,
            contrastive.top1_s_mean,
            mpot.mispair_mass_partial_mean,
            mpot.mispair_mass_full_mean
        ),
    );
    assert!(
        direction_ok,
        "mPOT {:.3} below contrastive {:.3}",
        mpot.top1_s_mean, contrastive.top1_s_mean
    );
    assert!(
        mass_ok,
        "mispaired mass not reduced: {:.4} vs {:.4}",
        mpot.mispair_mass_partial_mean, mpot.mispair_mass_full_mean
    );
    assert!(in_time, "bench took {elapsed:?}");
}

// ── Criterion 9: modality-gap trend ──────────────────────────────────

#[test]
fn criterion_09_modality_gap_shrinks() {
    let run = toy();
    let first = run.outcome.metrics.first().unwrap().gap;
    let last = run.outcome.metrics.last().unwrap().gap;
    let pass = last < first;
    verdict(
        "criterion 9 (modality-gap trend)",
        pass,
        &format!("gap {first:.4} at epoch 1 -> {last:.4} at the final epoch (decreased: {pass})"),
    );
    assert!(pass, "gap did not decrease: {first:.4} -> {last:.4}");
}

// ── Criterion 10: determinism ────────────────────────────────────────

#[test]
fn criterion_10_determinism_byte_identical() {
    // Repeat the toy run and the noise bench with identical seeds; the
    // emitted CSVs must match byte for byte.
    let first_csv = &toy().csv;
    let again = run_toy();
    let toy_identical = *first_csv == again.csv;

    let guard = heavy_lock();
    let bench_a = run_noise_bench(
        &bench_world(),
        &ModelConfig::default(),
        &bench_train_config(),
        &bench_spec(),
    )
    .expect("bench runs")
    .to_csv("{\"run\":\"acceptance-bench\"}");
    let bench_b = run_noise_bench(
        &bench_world(),
        &ModelConfig::default(),
        &bench_train_config(),
        &bench_spec(),
    )
    .expect("bench runs")
    .to_csv("{\"run\":\"acceptance-bench\"}");
    drop(guard);
    let bench_identical = bench_a == bench_b;

    let pass = toy_identical && bench_identical;
    verdict(
        "criterion 10 (determinism)",
        pass,
        &format!("toy metrics byte-identical: {toy_identical}; bench table byte-identical: {bench_identical}"),
    );
    assert!(toy_identical, "toy metrics differ between reruns");
    assert!(bench_identical, "bench tables differ between reruns");
}
