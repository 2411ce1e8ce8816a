//! The four experiments. Each returns its rows in parameter order.

use std::time::{Duration, Instant};

use knn_attention::backward::{BackwardConfig, BackwardContext, ErrorBudget};
use knn_attention::forward::{approximate_attention, Estimator, ForwardConfig, IndexBackend};
use knn_attention::mips::LshParams;
use knn_attention::oracle::{exact_attention, exact_dk_parts, exact_gradients};
use knn_attention::sampling::{build_cdf_tables, ShiftBound};
use knn_attention::{AttentionProblem, Matrix, RngStream, UpstreamGradient};

use crate::data::{normal_matrix, normal_problem, uniform_problem, Target};
use crate::error::{BenchError, BenchResult};
use crate::results::ResultRow;
use crate::spec::{Experiment, ExperimentSpec, Gradient, IndexChoice, Upstream};

pub fn run(spec: &ExperimentSpec) -> BenchResult<Vec<ResultRow>> {
    match spec.experiment {
        Experiment::ErrorVsK => run_error_vs_k(spec),
        Experiment::RuntimeVsN => run_runtime_vs_n(spec),
        Experiment::GradBounds => run_grad_bounds(spec),
        Experiment::GradDescent => run_grad_descent(spec),
    }
}

fn millis(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn check_cap(n: usize, cap: usize) -> BenchResult<()> {
    if n > cap {
        Err(BenchError::OracleTooLarge { n, cap })
    } else {
        Ok(())
    }
}

/// Exact attention with the oracle cap enforced.
pub fn exact_attention_capped(p: &AttentionProblem, cap: usize) -> BenchResult<Matrix> {
    check_cap(p.n(), cap)?;
    Ok(exact_attention(p))
}

/// Wall time of one exact forward pass.
pub fn time_exact(p: &AttentionProblem, cap: usize) -> BenchResult<Duration> {
    let start = Instant::now();
    let out = exact_attention_capped(p, cap)?;
    let elapsed = start.elapsed();
    std::hint::black_box(out);
    Ok(elapsed)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// Seed for the estimator at one parameter point, independent of the input
/// stream.
fn point_seed(seed: u64, rep: usize, n: usize, salt: u64) -> u64 {
    let mut rng = RngStream::new(seed, 1000 + salt).substream(rep as u64).substream(n as u64);
    rand_core_next(&mut rng)
}

fn rand_core_next(rng: &mut RngStream) -> u64 {
    use knn_attention::rng::RngCore;
    rng.next_u64()
}

fn input_stream(spec: &ExperimentSpec, seed: u64, rep: usize, n: usize) -> RngStream {
    RngStream::new(seed, spec.experiment.stream()).substream(rep as u64).substream(n as u64)
}

fn index_backend(spec: &ExperimentSpec, n: usize, k: usize, seed: u64) -> BenchResult<IndexBackend> {
    Ok(match spec.index {
        IndexChoice::Exact => IndexBackend::Exact,
        IndexChoice::Lsh { tables } => IndexBackend::Lsh(LshParams::for_size(n, k, tables, seed)?),
    })
}

fn forward_config(spec: &ExperimentSpec, n: usize, k: usize, l: usize, seed: u64) -> BenchResult<ForwardConfig> {
    let base = match spec.estimator {
        Estimator::Weighted => ForwardConfig::weighted(k, l, seed),
        Estimator::MedianOfMeans => ForwardConfig::median_of_means(k, spec.epsilon, spec.delta, seed),
    };
    let mut cfg = base.with_index(index_backend(spec, n, k, seed)?);
    cfg.epsilon = spec.epsilon;
    cfg.delta = spec.delta;
    Ok(cfg)
}

fn maybe_prefold(spec: &ExperimentSpec, p: AttentionProblem) -> AttentionProblem {
    if spec.prefold_scale {
        p.prefold_scale()
    } else {
        p
    }
}

/// Mean and max absolute entry error of the forward estimator against the
/// oracle, swept over `n`, `B` and `k`.
pub fn run_error_vs_k(spec: &ExperimentSpec) -> BenchResult<Vec<ResultRow>> {
    spec.validate()?;
    for &n in &spec.n {
        check_cap(n, spec.oracle_cap)?;
    }
    let tag = spec.experiment.tag();
    let mut rows = Vec::new();
    for &n in &spec.n {
        for &b in &spec.b {
            for &seed in &spec.seeds {
                for rep in 0..spec.reps {
                    let mut rng = input_stream(spec, seed, rep, n).substream(b.to_bits());
                    let p = maybe_prefold(spec, uniform_problem(n, spec.d, b, spec.causal, &mut rng));
                    let exact = exact_attention_capped(&p, spec.oracle_cap)?;
                    for choice in &spec.k {
                        let (k, l) = choice.resolve(n, spec.epsilon, spec.delta, spec.l)?;
                        let cfg = forward_config(spec, n, k, l, point_seed(seed, rep, n, k as u64))?;
                        let out = approximate_attention(&p, &cfg)?;
                        let wall = (!spec.omit_timing).then(|| millis(out.diagnostics.wall_time));
                        let mut row = ResultRow::new(tag, seed, rep);
                        row.n = Some(n);
                        row.d = Some(spec.d);
                        row.b = Some(b);
                        row.k = Some(k);
                        row.l = Some(l);
                        row.epsilon = Some(spec.epsilon);
                        row.delta = Some(spec.delta);
                        rows.push(row.metric("mean_abs_error", out.output.mean_abs_diff(&exact), wall));
                        rows.push(row.metric("max_abs_error", out.output.max_abs_diff(&exact), wall));
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Wall time of the forward estimator and of the exact oracle over `n`,
/// with fitted log-log slopes. Timings are medians over seeds and reps.
/// The oracle is skipped above the cap.
pub fn run_runtime_vs_n(spec: &ExperimentSpec) -> BenchResult<Vec<ResultRow>> {
    spec.validate()?;
    let tag = spec.experiment.tag();
    let b = spec.b[0];
    let mut rows = Vec::new();
    for choice in &spec.k {
        let mut est_points = Vec::new();
        let mut exact_points = Vec::new();
        for &n in &spec.n {
            let (k, l) = choice.resolve(n, spec.epsilon, spec.delta, spec.l)?;
            let mut est_times = Vec::new();
            let mut exact_times = Vec::new();
            for &seed in &spec.seeds {
                for rep in 0..spec.reps {
                    let mut rng = input_stream(spec, seed, rep, n);
                    let p = maybe_prefold(spec, uniform_problem(n, spec.d, b, spec.causal, &mut rng));
                    let cfg = forward_config(spec, n, k, l, point_seed(seed, rep, n, k as u64))?;
                    let start = Instant::now();
                    let out = approximate_attention(&p, &cfg)?;
                    let est_ms = millis(start.elapsed());
                    est_times.push(est_ms);
                    let mut row = ResultRow::new(tag, seed, rep);
                    row.n = Some(n);
                    row.d = Some(spec.d);
                    row.b = Some(b);
                    row.k = Some(k);
                    row.l = Some(l);
                    let samples = out.diagnostics.samples_per_row.iter().sum::<usize>() as f64 / n as f64;
                    rows.push(row.metric("mean_samples_per_row", samples, None));
                    if !spec.omit_timing {
                        rows.push(row.metric("estimator_ms", est_ms, Some(est_ms)));
                    }
                    if n <= spec.oracle_cap {
                        let ms = millis(time_exact(&p, spec.oracle_cap)?);
                        exact_times.push(ms);
                        if !spec.omit_timing {
                            rows.push(row.metric("exact_ms", ms, Some(ms)));
                        }
                    }
                }
            }
            est_points.push((n as f64, median(&mut est_times)));
            if !exact_times.is_empty() {
                exact_points.push((n as f64, median(&mut exact_times)));
            }
        }
        if !spec.omit_timing {
            let mut row = ResultRow::new(tag, spec.seeds[0], 0);
            row.d = Some(spec.d);
            row.b = Some(b);
            if let Some(s) = log_log_slope(&est_points) {
                rows.push(row.metric(format!("estimator_slope[k={choice}]"), s, None));
            }
            if let Some(s) = log_log_slope(&exact_points) {
                rows.push(row.metric("exact_slope", s, None));
            }
        }
    }
    Ok(rows)
}

fn backward_config(spec: &ExperimentSpec, n: usize, seed: u64) -> BenchResult<BackwardConfig> {
    let (k, _) = spec.k[0].resolve(n, spec.epsilon, spec.delta, Some(0))?;
    let mut cfg = BackwardConfig::new(spec.epsilon, spec.delta, seed);
    cfg.k = Some(k);
    cfg.index = index_backend(spec, n, k, seed)?;
    Ok(cfg)
}

/// The key gradient with both halves kept so they can be checked alone.
pub struct KeyGradientParts {
    pub a: (Matrix, ErrorBudget),
    pub b: (Matrix, ErrorBudget),
}

impl KeyGradientParts {
    pub fn estimate(ctx: &BackwardContext<'_>, p: &AttentionProblem, d_o: &UpstreamGradient) -> BenchResult<Self> {
        let tables = build_cdf_tables(&p.q, d_o.matrix())?;
        let shift = ShiftBound::bound_for_y(&p.q, d_o.matrix(), &p.v);
        Ok(Self { a: ctx.dk_part_a(d_o, &tables, shift)?, b: ctx.dk_part_b(d_o)? })
    }

    pub fn combined(&self) -> (Matrix, ErrorBudget) {
        let estimate = self.a.0.sub(&self.b.0).expect("matching shapes");
        let bound = self.a.1.bound.add(&self.b.1.bound).expect("matching shapes");
        (estimate, ErrorBudget { bound, guarantee_void: self.a.1.guarantee_void || self.b.1.guarantee_void })
    }
}

/// Fraction of gradient entries within their recorded budgets.
pub fn run_grad_bounds(spec: &ExperimentSpec) -> BenchResult<Vec<ResultRow>> {
    spec.validate()?;
    for &n in &spec.n {
        check_cap(n, spec.oracle_cap)?;
    }
    let tag = spec.experiment.tag();
    let mut rows = Vec::new();
    for &n in &spec.n {
        for &seed in &spec.seeds {
            for rep in 0..spec.reps {
                let mut rng = input_stream(spec, seed, rep, n);
                let p = normal_problem(n, spec.d, spec.causal, &mut rng);
                let d_o = match spec.upstream {
                    Upstream::Normal => normal_matrix(n, spec.d, &mut rng),
                    Upstream::Zero => Matrix::zeros(n, spec.d),
                };
                let d_o = UpstreamGradient::new(d_o)?;
                let exact = exact_gradients(&p, &d_o)?;
                let cfg = backward_config(spec, n, point_seed(seed, rep, n, 0))?;
                let ctx = BackwardContext::new(&p, &cfg)?;
                let mut row = ResultRow::new(tag, seed, rep);
                row.n = Some(n);
                row.d = Some(spec.d);
                row.k = cfg.k;
                row.epsilon = Some(spec.epsilon);
                row.delta = Some(spec.delta);
                let mut emit = |name: &str, est: &Matrix, budget: &ErrorBudget, truth: &Matrix, ms: f64| {
                    let wall = (!spec.omit_timing).then_some(ms);
                    rows.push(row.metric(format!("{name}_within_budget"), budget.fraction_within(est, truth), wall));
                    rows.push(row.metric(format!("{name}_max_abs_error"), est.max_abs_diff(truth), wall));
                    rows.push(row.metric(format!("{name}_mean_budget"), budget.bound.mean_abs_diff(&Matrix::zeros(n, spec.d)), wall));
                    rows.push(row.metric(format!("{name}_guarantee_void"), f64::from(u8::from(budget.guarantee_void)), wall));
                };
                for g in &spec.gradients {
                    let start = Instant::now();
                    match g {
                        Gradient::Dv => {
                            let (est, budget) = ctx.dv(&d_o)?;
                            emit("dv", &est, &budget, &exact.dv, millis(start.elapsed()));
                        }
                        Gradient::Dq => {
                            let (est, budget) = ctx.dq(&d_o)?;
                            emit("dq", &est, &budget, &exact.dq, millis(start.elapsed()));
                        }
                        Gradient::Dk => {
                            let parts = KeyGradientParts::estimate(&ctx, &p, &d_o)?;
                            let ms = millis(start.elapsed());
                            let (a, b) = exact_dk_parts(&p, &d_o)?;
                            emit("dk_a", &parts.a.0, &parts.a.1, &a, ms);
                            emit("dk_b", &parts.b.0, &parts.b.1, &b, ms);
                            let (est, budget) = parts.combined();
                            emit("dk", &est, &budget, &exact.dk, ms);
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Parallel gradient-descent runs on `(Q, K, V)`, one with exact gradients
/// and one with the selected gradients replaced by estimates. The loss is
/// always evaluated exactly.
pub fn run_grad_descent(spec: &ExperimentSpec) -> BenchResult<Vec<ResultRow>> {
    spec.validate()?;
    for &n in &spec.n {
        check_cap(n, spec.oracle_cap)?;
    }
    let tag = spec.experiment.tag();
    let mut rows = Vec::new();
    for &n in &spec.n {
        for &lr in &spec.lr {
            for &seed in &spec.seeds {
                for rep in 0..spec.reps {
                    let mut rng = input_stream(spec, seed, rep, n);
                    let start_problem = normal_problem(n, spec.d, spec.causal, &mut rng);
                    let target = Target::random(spec.loss, n, spec.d, &mut rng);
                    let mut row = ResultRow::new(tag, seed, rep);
                    row.n = Some(n);
                    row.d = Some(spec.d);
                    row.epsilon = Some(spec.epsilon);
                    row.delta = Some(spec.delta);
                    row.lr = Some(lr);
                    row.loss = Some(spec.loss.tag());
                    let mut finals = [0.0; 2];
                    for (slot, approx) in [false, true].into_iter().enumerate() {
                        let start = Instant::now();
                        let losses = descend(spec, &start_problem, &target, lr, approx, point_seed(seed, rep, n, 1))?;
                        let wall = (!spec.omit_timing).then(|| millis(start.elapsed()));
                        let name = if approx { "approx" } else { "exact" };
                        for (it, loss) in losses.iter().enumerate() {
                            rows.push(row.metric(format!("{name}_loss[{it}]"), *loss, None));
                        }
                        finals[slot] = *losses.last().expect("at least one loss");
                        rows.push(row.metric(format!("{name}_final_loss"), finals[slot], wall));
                    }
                    let gap = if finals[0] != 0.0 { (finals[1] - finals[0]).abs() / finals[0].abs() } else { (finals[1] - finals[0]).abs() };
                    rows.push(row.metric("final_loss_gap_ratio", gap, None));
                }
            }
        }
    }
    Ok(rows)
}

/// Loss after each of `0..=iterations` steps.
fn descend(
    spec: &ExperimentSpec,
    start: &AttentionProblem,
    target: &Target,
    lr: f64,
    approx: bool,
    seed: u64,
) -> BenchResult<Vec<f64>> {
    let n = start.n();
    let mut p = start.clone();
    let mut losses = Vec::with_capacity(spec.iterations + 1);
    let seeds = RngStream::new(seed, 2000);
    for it in 0..=spec.iterations {
        let (loss, grad) = target.loss_and_grad(&exact_attention_capped(&p, spec.oracle_cap)?);
        losses.push(loss);
        if it == spec.iterations || lr == 0.0 {
            if lr == 0.0 {
                losses.resize(spec.iterations + 1, loss);
                break;
            }
            continue;
        }
        let d_o = UpstreamGradient::new(grad)?;
        let mut g = exact_gradients(&p, &d_o)?;
        if approx {
            let cfg = backward_config(spec, n, rand_core_next(&mut seeds.substream(it as u64)))?;
            let ctx = BackwardContext::new(&p, &cfg)?;
            for which in &spec.gradients {
                match which {
                    Gradient::Dq => g.dq = ctx.dq(&d_o)?.0,
                    Gradient::Dk => g.dk = ctx.dk(&d_o)?.0,
                    Gradient::Dv => g.dv = ctx.dv(&d_o)?.0,
                }
            }
        }
        p.q.axpy_in_place(lr, &g.dq);
        p.k.axpy_in_place(lr, &g.dk);
        p.v.axpy_in_place(lr, &g.dv);
    }
    Ok(losses)
}
