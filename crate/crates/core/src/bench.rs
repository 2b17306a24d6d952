//! Per-step solve-time comparison of the closed-form filter against the dense QP baseline.
//!
//! Timing pairs the two safety layers as they would be used: the closed form
//! handles the composite single-constraint program, the baseline handles the
//! original `I`-row program. The correctness gate compares both on the same
//! composite program before any timing is accepted.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::barriers::{BarrierSet, CircularObstacle};
use crate::dynamics::{ActionVec, SingleIntegrator2D, StateVec};
use crate::error::{Error, Result};
use crate::filter::{filter_pipeline, ClassKLinear};
use crate::qp::{build_cbf_qp, kkt_residual, solve_dual_ascent, PolytopeQp, SolverConfig};

pub const WARMUP_CALLS: usize = 100;
pub const GATE_INSTANCES: usize = 1000;
pub const GATE_TOLERANCE: f64 = 1e-6;
/// Fraction of non-converged baseline solves above which a cell is invalid.
pub const MAX_FAILURE_RATE: f64 = 0.01;

pub const CAVEAT: &str = "note: the QP baseline is timed on forward solves only; \
differentiable QP layers also pay for a backward pass, so the reported speedup is a conservative floor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    ClosedForm,
    QpBaseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ClosedForm => "closed_form",
            Method::QpBaseline => "qp_baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "closed_form" => Some(Method::ClosedForm),
            "qp_baseline" => Some(Method::QpBaseline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub constraint_counts: Vec<usize>,
    /// Timed calls per cell.
    pub repetitions: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub kappa: f64,
    pub alpha: ClassKLinear,
    pub solver: SolverConfig,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            constraint_counts: vec![3, 10, 30],
            repetitions: 10_000,
            methods: vec![Method::ClosedForm, Method::QpBaseline],
            seed: 0,
            kappa: 2.0,
            alpha: ClassKLinear::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.constraint_counts.is_empty() || self.constraint_counts.contains(&0) {
            return Err(Error::Parameter {
                name: "constraint_counts",
                reason: "need at least one count, each at least 1".into(),
            });
        }
        if self.repetitions < 100 {
            return Err(Error::Parameter {
                name: "repetitions",
                reason: format!("at least 100 repetitions required, got {}", self.repetitions),
            });
        }
        if self.methods.is_empty() {
            return Err(Error::Parameter {
                name: "methods",
                reason: "no method selected".into(),
            });
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchInstance {
    pub barriers: BarrierSet,
    pub state: StateVec,
    pub nominal: ActionVec,
}

/// Random scenes: `I` obstacles with centers in `[−3, 3]²` and radii in
/// `[0.2, 0.6]`, a state outside every obstacle, and a nominal action in `[−3, 3]²`.
pub fn generate_instances(count: usize, constraints: usize, seed: u64) -> Result<Vec<BenchInstance>> {
    if constraints == 0 {
        return Err(Error::Parameter {
            name: "constraints",
            reason: "at least one constraint required".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let obstacles: Vec<CircularObstacle> = (0..constraints)
            .map(|_| CircularObstacle {
                center: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
                radius: rng.random_range(0.2..0.6),
            })
            .collect();
        let barriers = BarrierSet::new(obstacles)?;
        // Crowded scenes can leave little free space; redraw the scene in that case.
        let state = (0..1000).find_map(|_| {
            let p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let x = StateVec::new(p.to_vec()).ok()?;
            barriers.values(&x).ok()?.iter().all(|&h| h > 0.0).then_some(x)
        });
        let Some(state) = state else { continue };
        let nominal = ActionVec::new(vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])?;
        out.push(BenchInstance {
            barriers,
            state,
            nominal,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub constraint_count: usize,
    pub atts_seconds: f64,
    pub stddev_seconds: f64,
    /// Largest per-component gap between closed form and QP on the composite program.
    pub correctness_max_gap: f64,
    /// Largest KKT residual of the closed-form answer on the composite program.
    pub closed_form_kkt: f64,
    /// Non-converged baseline solves among the timed calls.
    pub failures: usize,
    pub valid: bool,
}

/// Result of the correctness gate for one constraint count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateResult {
    pub max_gap: f64,
    pub max_kkt: f64,
    pub passed: bool,
}

/// Solves the composite single-constraint program both ways on each instance.
pub fn correctness_gate(instances: &[BenchInstance], spec: &BenchSpec) -> Result<GateResult> {
    let mut max_gap: f64 = 0.0;
    let mut max_kkt: f64 = 0.0;
    let mut all_converged = true;
    for inst in instances {
        let out = filter_pipeline(
            &inst.barriers,
            spec.kappa,
            &SingleIntegrator2D,
            spec.alpha,
            &inst.state,
            &inst.nominal,
        )?;
        let c = &out.composite;
        let qp = PolytopeQp::single_constraint(c.lie_f, &c.lie_g, c.value, spec.alpha, &inst.nominal)?;
        let sol = solve_dual_ascent(&qp, spec.solver);
        all_converged &= sol.converged;
        for (a, b) in out.result.safe_action.iter().zip(&sol.solution) {
            max_gap = max_gap.max((a - b).abs());
        }
        let dual = [out.result.eta.max(0.0)];
        max_kkt = max_kkt.max(kkt_residual(&qp, &out.result.safe_action, &dual));
    }
    Ok(GateResult {
        max_gap,
        max_kkt,
        passed: all_converged && max_gap <= GATE_TOLERANCE && max_kkt <= spec.solver.tolerance,
    })
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn time_closed_form(instances: &[BenchInstance], spec: &BenchSpec) -> Result<Vec<f64>> {
    let mut samples = Vec::with_capacity(instances.len());
    for inst in instances {
        let start = Instant::now();
        let out = filter_pipeline(
            black_box(&inst.barriers),
            spec.kappa,
            &SingleIntegrator2D,
            spec.alpha,
            black_box(&inst.state),
            black_box(&inst.nominal),
        );
        let elapsed = start.elapsed();
        black_box(out?);
        samples.push(elapsed.as_secs_f64());
    }
    Ok(samples)
}

fn time_qp(instances: &[BenchInstance], spec: &BenchSpec) -> Result<(Vec<f64>, usize)> {
    let mut samples = Vec::with_capacity(instances.len());
    let mut failures = 0;
    for inst in instances {
        let start = Instant::now();
        let sol = build_cbf_qp(
            black_box(&inst.barriers),
            black_box(&inst.state),
            &SingleIntegrator2D,
            spec.alpha,
            black_box(&inst.nominal),
        )
        .map(|qp| solve_dual_ascent(&qp, spec.solver));
        let elapsed = start.elapsed();
        let sol = black_box(sol?);
        failures += usize::from(!sol.converged);
        samples.push(elapsed.as_secs_f64());
    }
    Ok((samples, failures))
}

/// Runs every `(method, I)` cell sequentially on the current thread.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &count in &spec.constraint_counts {
        let cell_seed = spec.seed ^ (count as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let instances = generate_instances(WARMUP_CALLS + spec.repetitions, count, cell_seed)?;
        let (warmup, timed) = instances.split_at(WARMUP_CALLS);
        let gate = correctness_gate(&timed[..GATE_INSTANCES.min(timed.len())], spec)?;

        for &method in &spec.methods {
            let (samples, failures) = match method {
                Method::ClosedForm => {
                    time_closed_form(warmup, spec)?;
                    (time_closed_form(timed, spec)?, 0)
                }
                Method::QpBaseline => {
                    time_qp(warmup, spec)?;
                    time_qp(timed, spec)?
                }
            };
            let (mean, std) = mean_std(&samples);
            let failure_rate = failures as f64 / timed.len() as f64;
            rows.push(BenchRow {
                method,
                constraint_count: count,
                atts_seconds: mean,
                stddev_seconds: std,
                correctness_max_gap: gate.max_gap,
                closed_form_kkt: gate.max_kkt,
                failures,
                valid: gate.passed && failure_rate <= MAX_FAILURE_RATE,
            });
        }
    }
    Ok(rows)
}

/// Closed-form speedup over the baseline at each count where both were timed.
pub fn speedup(rows: &[BenchRow], count: usize) -> Option<f64> {
    let find = |m: Method| {
        rows.iter()
            .find(|r| r.method == m && r.constraint_count == count)
            .map(|r| r.atts_seconds)
    };
    Some(find(Method::QpBaseline)? / find(Method::ClosedForm)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub csv: String,
    pub summary: String,
}

/// CSV table plus a plain-text summary that opens with [`CAVEAT`].
pub fn emit_report(rows: &[BenchRow]) -> Result<BenchReport> {
    if rows.is_empty() {
        return Err(Error::Parameter {
            name: "rows",
            reason: "no benchmark rows to report".into(),
        });
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Parse {
        what: "benchmark report",
        reason: e.to_string(),
    };
    writer
        .write_record([
            "method",
            "I",
            "atts_mean_s",
            "atts_std_s",
            "speedup_vs_qp",
            "correctness_max_gap",
        ])
        .map_err(csv_err)?;
    for row in rows {
        let speed = speedup(rows, row.constraint_count)
            .map(|s| format!("{s:.6}"))
            .unwrap_or_default();
        writer
            .write_record([
                row.method.name().to_string(),
                row.constraint_count.to_string(),
                format!("{:.6e}", row.atts_seconds),
                format!("{:.6e}", row.stddev_seconds),
                speed,
                format!("{:.3e}", row.correctness_max_gap),
            ])
            .map_err(csv_err)?;
    }
    let csv = String::from_utf8(writer.into_inner().map_err(|e| Error::Parse {
        what: "benchmark report",
        reason: e.to_string(),
    })?)
    .expect("csv output is utf-8");

    let mut summary = String::new();
    writeln!(summary, "{CAVEAT}").unwrap();
    for row in rows {
        writeln!(
            summary,
            "{:<12} I={:<3} ATTS {:>10.3} us (sd {:>8.3} us)  gap {:.1e}  failures {}{}",
            row.method.name(),
            row.constraint_count,
            row.atts_seconds * 1e6,
            row.stddev_seconds * 1e6,
            row.correctness_max_gap,
            row.failures,
            if row.valid { "" } else { "  INVALID" },
        )
        .unwrap();
    }
    let mut counts: Vec<usize> = rows.iter().map(|r| r.constraint_count).collect();
    counts.dedup();
    for count in counts {
        if let Some(s) = speedup(rows, count) {
            writeln!(summary, "speedup at I={count}: {s:.2}x").unwrap();
        }
    }
    Ok(BenchReport { csv, summary })
}
