//! Scaling benchmark: wall-clock and peak-memory measurements of the model
//! across sequence lengths, an exponent fit on the timings, and a naive
//! quadratic mixer that serves as the comparison baseline.
//!
//! Memory numbers come from [`crate::telemetry`], i.e. instrumented allocator
//! peaks rather than OS RSS; binaries that want them must register the
//! counting allocator. The timed region is single-threaded by construction —
//! nothing here spawns.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{HgError, Result};
use crate::model::{backward, forward, ModelConfig, ModelParams, ModelState};
use crate::numerics::{Scalar, Tensor};
use crate::telemetry;
use crate::train::smoothed_ce_loss;

/// Header of the scaling CSV, preceded in the file by `# `-prefixed env lines.
pub const SCALING_CSV_HEADER: &str =
    "seq_len,batch,forward_ms,fwd_bwd_ms,peak_bytes,tokens_per_s,status";

#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub seq_len: usize,
    pub batch: usize,
    /// Median forward wall time over the configured repetitions.
    pub forward_ms: f64,
    /// Median forward+backward wall time over the configured repetitions.
    pub fwd_bwd_ms: f64,
    /// Instrumented allocator peak during one forward+backward pass. Zero when
    /// the counting allocator is not registered in the running binary.
    pub peak_bytes: usize,
    pub tokens_per_s: f64,
    /// Row skipped because the footprint estimate exceeded the memory budget.
    pub oom: bool,
}

#[derive(Debug, Clone)]
pub struct EnvBlock {
    pub cpu_model: String,
    pub threads: usize,
    pub build_flags: String,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub env: EnvBlock,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Sequence lengths to measure, strictly increasing.
    pub t_list: Vec<usize>,
    /// Repetitions per measurement; the median is reported.
    pub reps: usize,
    /// Divisor applied to the derived batch size, for desk-scale runs.
    pub batch_divisor: usize,
    /// Overrides the derived batch size entirely.
    pub fixed_batch: Option<usize>,
    /// Rows whose estimated footprint exceeds this are marked OOM and skipped
    /// instead of taking the process down.
    pub mem_budget_bytes: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            t_list: (8..=15).map(|e| 1usize << e).collect(),
            reps: 3,
            batch_divisor: 1,
            fixed_batch: None,
            mem_budget_bytes: 12 << 30,
            seed: 0x5ca1ab1e,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.t_list.is_empty() {
            return Err(HgError::Config("empty sequence-length list".into()));
        }
        if !self.t_list.windows(2).all(|w| w[0] < w[1]) {
            return Err(HgError::Config(
                "sequence lengths must be strictly increasing".into(),
            ));
        }
        if self.t_list[0] < config.kernel_dim {
            return Err(HgError::Config(format!(
                "shortest sequence {} is below the kernel size {}",
                self.t_list[0], config.kernel_dim
            )));
        }
        if self.reps == 0 {
            return Err(HgError::Config("reps must be at least 1".into()));
        }
        if self.batch_divisor == 0 {
            return Err(HgError::Config("batch divisor must be at least 1".into()));
        }
        if self.fixed_batch == Some(0) {
            return Err(HgError::Config("fixed batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Batch size for a sequence length: 2^16 / T tokens-per-step kept roughly
/// constant, floored at one, then reduced by the desk-scale divisor.
pub fn scaling_batch(t: usize, divisor: usize, fixed: Option<usize>) -> usize {
    if let Some(b) = fixed {
        return b;
    }
    ((1usize << 16) / t.max(1)).max(1) / divisor.max(1)
}

/// Rough upper bound on the live footprint of one forward+backward pass:
/// per-layer activation caches plus gradient transients (~10 B×T×H tensors per
/// layer plus ~8 at the model level) and three parameter-sized blocks
/// (parameters, gradients, headroom for temporaries).
pub fn estimate_peak_bytes<F: Scalar>(config: &ModelConfig, batch: usize, t: usize) -> usize {
    let bth = batch * t * config.feature_dim * F::BYTE_WIDTH;
    let params = config.param_count() * F::BYTE_WIDTH;
    (10 * config.num_layers + 8) * bth + 3 * params
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn synth_batch(b: usize, t: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Batch {
    // Keep the pad id out of the stream: every position is live.
    let live_vocab = (vocab - 1).max(1) as u16;
    Batch {
        tokens: (0..b * t).map(|_| rng.gen_range(0..live_vocab)).collect(),
        mask: vec![1; b * t],
        labels: vec![0; b],
        indices: (0..b).collect(),
        seq_len: t,
    }
}

fn config_for_t(template: &ModelConfig, t: usize) -> ModelConfig {
    let mut c = template.clone();
    c.max_seq_len = t;
    // Dropout adds nothing to a timing run and would demand seed plumbing.
    c.dropout = 0.0;
    c
}

/// Measures forward and forward+backward wall time plus allocator peak for
/// each configured sequence length, one fresh model per length. Rows whose
/// estimated footprint exceeds the budget are marked OOM and skipped; the run
/// continues with the remaining lengths.
pub fn run_scaling<F: Scalar>(template: &ModelConfig, opts: &BenchOptions) -> Result<ScalingReport> {
    opts.validate(&config_for_t(template, *opts.t_list.last().unwrap_or(&1)))?;
    let mut rows = Vec::with_capacity(opts.t_list.len());
    for &t in &opts.t_list {
        let b = scaling_batch(t, opts.batch_divisor, opts.fixed_batch).max(1);
        let config = config_for_t(template, t);
        config.validate()?;
        let est = estimate_peak_bytes::<F>(&config, b, t);
        if est > opts.mem_budget_bytes {
            rows.push(ScalingRow {
                seq_len: t,
                batch: b,
                forward_ms: 0.0,
                fwd_bwd_ms: 0.0,
                peak_bytes: est,
                tokens_per_s: 0.0,
                oom: true,
            });
            continue;
        }
        rows.push(measure_one::<F>(&config, b, t, opts)?);
    }
    Ok(ScalingReport {
        rows,
        env: env_block(),
    })
}

fn measure_one<F: Scalar>(
    config: &ModelConfig,
    b: usize,
    t: usize,
    opts: &BenchOptions,
) -> Result<ScalingRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ t as u64);
    let params: ModelParams<F> = ModelParams::init(config, &mut rng)?;
    let mut state = ModelState::new(config);
    let batch = synth_batch(b, t, config.vocab_size, &mut rng);

    // One untimed pass warms caches and page tables.
    forward(&batch, &params, config, true, 0, Some(&mut state))?;

    let mut fwd = Vec::with_capacity(opts.reps);
    for _ in 0..opts.reps {
        let start = Instant::now();
        let out = forward(&batch, &params, config, true, 0, Some(&mut state))?;
        fwd.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&out.0);
    }

    let mut both = Vec::with_capacity(opts.reps);
    let mut peak = 0usize;
    for rep in 0..opts.reps {
        telemetry::reset_peak();
        let start = Instant::now();
        let (logits, caches) = forward(&batch, &params, config, true, 0, Some(&mut state))?;
        let (_, grad) = smoothed_ce_loss(&logits, &batch.labels, 0.0)?;
        let grads = backward(&grad, &caches, &params, config)?;
        both.push(start.elapsed().as_secs_f64() * 1e3);
        if rep == 0 {
            peak = telemetry::peak_bytes();
        }
        std::hint::black_box(&grads.head_b);
    }

    let fwd_bwd_ms = median(&mut both);
    Ok(ScalingRow {
        seq_len: t,
        batch: b,
        forward_ms: median(&mut fwd),
        fwd_bwd_ms,
        peak_bytes: peak,
        tokens_per_s: (b * t) as f64 / (fwd_bwd_ms / 1e3),
        oom: false,
    })
}

/// Least-squares slope of log(time) against log(T): the empirical scaling
/// exponent. Needs at least four usable points to say anything.
pub fn fit_exponent(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 4 {
        return Err(HgError::Data(format!(
            "exponent fit needs at least 4 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(t, y)| t <= 0.0 || y <= 0.0) {
        return Err(HgError::Data(
            "exponent fit needs positive lengths and times".into(),
        ));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(t, y)| (t.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in logs {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        return Err(HgError::Data(
            "exponent fit needs at least two distinct lengths".into(),
        ));
    }
    Ok(num / den)
}

/// (T, forward+backward ms) pairs from the measured rows, OOM rows excluded.
pub fn fwd_bwd_points(report: &ScalingReport) -> Vec<(f64, f64)> {
    report
        .rows
        .iter()
        .filter(|r| !r.oom)
        .map(|r| (r.seq_len as f64, r.fwd_bwd_ms))
        .collect()
}

/// (time ratio, memory ratio) for each consecutive pair of measured rows where
/// the sequence length exactly doubles at the same batch size.
pub fn doubling_ratios(report: &ScalingReport) -> Vec<(f64, f64)> {
    report
        .rows
        .windows(2)
        .filter(|w| {
            !w[0].oom && !w[1].oom && w[1].seq_len == 2 * w[0].seq_len && w[1].batch == w[0].batch
        })
        .map(|w| {
            let mem = if w[0].peak_bytes == 0 {
                f64::NAN
            } else {
                w[1].peak_bytes as f64 / w[0].peak_bytes as f64
            };
            (w[1].fwd_bwd_ms / w[0].fwd_bwd_ms, mem)
        })
        .collect()
}

/// One pass of a dense circular mixer: every output position attends to every
/// input position through a length-T kernel, O(T² · H). This is the quadratic
/// baseline the fast path is compared against.
fn naive_mix_once<F: Scalar>(x: &Tensor<F>, w: &[F], out: &mut Tensor<F>) {
    let (t, h) = (x.shape()[0], x.shape()[1]);
    for v in out.data_mut() {
        *v = F::ZERO;
    }
    for ti in 0..t {
        for j in 0..t {
            let wv = w[(ti + t - j) % t];
            let xr = x.row(j);
            let or = out.row_mut(ti);
            for c in 0..h {
                or[c] = or[c] + xr[c] * wv;
            }
        }
    }
}

/// Times the quadratic mixer across sequence lengths with the same median-of-R
/// protocol as the main harness. Returns (T, ms) points for the exponent fit.
pub fn run_naive_control<F: Scalar>(
    t_list: &[usize],
    h: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if t_list.is_empty() || reps == 0 || h == 0 {
        return Err(HgError::Config("control needs lengths, reps, width".into()));
    }
    let mut points = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ t as u64);
        let x = Tensor::from_vec(
            &[t, h],
            (0..t * h)
                .map(|_| F::from_f64(rng.gen::<f64>() - 0.5))
                .collect(),
        )?;
        let w: Vec<F> = (0..t).map(|_| F::from_f64(rng.gen::<f64>() - 0.5)).collect();
        let mut out = Tensor::zeros(&[t, h]);
        naive_mix_once(&x, &w, &mut out);
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            naive_mix_once(&x, &w, &mut out);
            times.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out.data());
        }
        points.push((t as f64, median(&mut times)));
    }
    Ok(points)
}

pub fn env_block() -> EnvBlock {
    EnvBlock {
        cpu_model: cpu_model(),
        threads: std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
        build_flags: if cfg!(debug_assertions) {
            "debug".into()
        } else {
            "release (opt-level 3)".into()
        },
    }
}

fn cpu_model() -> String {
    if let Ok(info) = std::fs::read_to_string("/proc/cpuinfo") {
        for line in info.lines() {
            if let Some(rest) = line.strip_prefix("model name") {
                if let Some((_, v)) = rest.split_once(':') {
                    return v.trim().to_string();
                }
            }
        }
    }
    "unknown".into()
}

/// Renders the report: `# `-prefixed env lines, the fixed header, one row per
/// measured length. OOM rows carry the footprint estimate and status `oom`.
pub fn scaling_csv(report: &ScalingReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("# cpu: {}\n", report.env.cpu_model));
    out.push_str(&format!("# threads: {}\n", report.env.threads));
    out.push_str(&format!("# build: {}\n", report.env.build_flags));
    out.push_str(SCALING_CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{:.3},{:.3},{},{:.1},{}\n",
            r.seq_len,
            r.batch,
            r.forward_ms,
            r.fwd_bwd_ms,
            r.peak_bytes,
            r.tokens_per_s,
            if r.oom { "oom" } else { "ok" }
        ));
    }
    out
}
