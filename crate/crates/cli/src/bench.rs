//! Wall-clock comparison of `X W_k` against the fused BDA projection.

use std::io::Write;
use std::time::{Duration, Instant};

use bda_core::verify::gen_input;
use bda_core::{fused_kv_proj, rand_gaussian, BasisTag, Geometry, Precision, Rng, Tensor2D};

use crate::CliError;

pub const CSV_HEADER: [&str; 11] = [
    "operator",
    "seq_len",
    "d",
    "d_h",
    "n_heads",
    "precision",
    "threads",
    "median_ns",
    "tokens_per_sec",
    "speedup",
    "flop_ratio",
];

pub const BASELINE: &str = "baseline_k_proj";
pub const FUSED: &str = "bda_fused_k_proj";

/// Largest single output the bench will allocate.
pub const MAX_OUTPUT_BYTES: usize = 2 << 30;

pub const DEFAULT_SEQ_LENS: [usize; 7] = [64, 128, 256, 512, 1024, 2048, 4096];

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub geometry: Geometry,
    pub seq_lens: Vec<usize>,
    pub precision: Precision,
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(geometry: Geometry) -> Self {
        Self {
            geometry,
            seq_lens: DEFAULT_SEQ_LENS.to_vec(),
            precision: Precision::P32,
            reps: 5,
            warmup: 2,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub operator: &'static str,
    pub seq_len: usize,
    pub geometry: Geometry,
    pub precision: Precision,
    pub threads: usize,
    pub reps: usize,
    pub warmup_reps: usize,
    pub median_ns: u128,
    pub tokens_per_sec: f64,
    /// Baseline median over this operator's median.
    pub speedup: f64,
    /// `d / (d - d_h)` for the geometry.
    pub flop_ratio: f64,
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Runs `warmup` untimed rounds, then `reps` timed rounds of every operator,
/// interleaved so slow drift affects all of them alike. Returns one median
/// per operator.
pub fn time_interleaved(ops: &mut [&mut dyn FnMut()], reps: usize, warmup: usize) -> Vec<Duration> {
    for _ in 0..warmup {
        ops.iter_mut().for_each(|op| op());
    }
    let mut samples = vec![Vec::with_capacity(reps); ops.len()];
    for _ in 0..reps {
        for (op, s) in ops.iter_mut().zip(&mut samples) {
            let t = Instant::now();
            op();
            s.push(t.elapsed());
        }
    }
    samples.into_iter().map(median).collect()
}

fn validate(cfg: &BenchConfig) -> Result<(), CliError> {
    if cfg.reps < 5 || cfg.warmup < 2 {
        return Err(CliError::Usage(format!(
            "timing needs at least 5 reps and 2 warmup reps, got {} and {}",
            cfg.reps, cfg.warmup
        )));
    }
    if cfg.threads == 0 {
        return Err(CliError::Usage("thread count must be positive".into()));
    }
    if cfg.seq_lens.is_empty() || cfg.seq_lens.contains(&0) {
        return Err(CliError::Usage("sequence lengths must be positive".into()));
    }
    let g = cfg.geometry;
    for &l in &cfg.seq_lens {
        let bytes = l
            .checked_mul(g.inner())
            .and_then(|n| n.checked_mul(cfg.precision.element_size()));
        if bytes.is_none_or(|b| b > MAX_OUTPUT_BYTES) {
            return Err(CliError::Usage(format!(
                "seq_len {l} needs a {l}x{} output, above the {} GiB limit",
                g.inner(),
                MAX_OUTPUT_BYTES >> 30
            )));
        }
    }
    Ok(())
}

/// Times both operators for every sequence length on a pool of `cfg.threads` workers.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>, CliError> {
    validate(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| bench_in_pool(cfg))
}

fn bench_in_pool(cfg: &BenchConfig) -> Result<Vec<BenchRecord>, CliError> {
    let g = cfg.geometry;
    let mut rng = Rng::new(cfg.seed);
    let w_k = rand_gaussian(&mut rng, g.d, g.inner(), cfg.precision)?;
    let c = rand_gaussian(&mut rng, g.d - g.d_h, g.inner(), cfg.precision)?;
    let mut out = Vec::with_capacity(cfg.seq_lens.len() * 2);
    for (i, &l) in cfg.seq_lens.iter().enumerate() {
        let x = gen_input(&mut rng.fork(i as u64), l, g.d, cfg.precision)?;
        let mut err = None;
        let mut baseline = || {
            if let Err(e) = x.matmul(&w_k).map(drop) {
                err = Some(e);
            }
        };
        let mut fused_err = None;
        let mut fused = || {
            if let Err(e) = fused_kv_proj(&x, &c, g.d_h, g.n_heads, BasisTag::First).map(drop) {
                fused_err = Some(e);
            }
        };
        let medians = time_interleaved(&mut [&mut baseline, &mut fused], cfg.reps, cfg.warmup);
        if let Some(e) = err.or(fused_err) {
            return Err(e.into());
        }
        let base_ns = medians[0].as_nanos().max(1);
        for (op, m) in [BASELINE, FUSED].into_iter().zip(medians) {
            let ns = m.as_nanos().max(1);
            out.push(BenchRecord {
                operator: op,
                seq_len: l,
                geometry: g,
                precision: cfg.precision,
                threads: cfg.threads,
                reps: cfg.reps,
                warmup_reps: cfg.warmup,
                median_ns: ns,
                tokens_per_sec: l as f64 / (ns as f64 * 1e-9),
                speedup: base_ns as f64 / ns as f64,
                flop_ratio: g.flop_ratio(),
            });
        }
    }
    Ok(out)
}

pub fn write_csv<W: Write>(records: &[BenchRecord], w: W) -> Result<(), CliError> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(CSV_HEADER)?;
    for r in records {
        csv.write_record([
            r.operator.to_string(),
            r.seq_len.to_string(),
            r.geometry.d.to_string(),
            r.geometry.d_h.to_string(),
            r.geometry.n_heads.to_string(),
            r.precision.to_string(),
            r.threads.to_string(),
            r.median_ns.to_string(),
            format!("{:.1}", r.tokens_per_sec),
            format!("{:.4}", r.speedup),
            format!("{:.6}", r.flop_ratio),
        ])?;
    }
    csv.flush().map_err(|e| CliError::Io {
        path: "csv output".into(),
        source: e,
    })?;
    Ok(())
}

/// Checks the fused output against `X W` for a `W` assembled from the same
/// coefficients, so a benchmark never times a wrong kernel.
pub fn sanity_check(g: Geometry, precision: Precision, seed: u64) -> Result<f64, CliError> {
    let mut rng = Rng::new(seed);
    let x = gen_input(&mut rng, 8, g.d, precision)?;
    let c = rand_gaussian(&mut rng, g.d - g.d_h, g.inner(), precision)?;
    let eye = Tensor2D::identity(g.d_h, precision).repeat_cols(g.n_heads)?;
    let w = Tensor2D::concat_rows(&[eye, c.clone()])?;
    let want = x.matmul(&w)?;
    let got = fused_kv_proj(&x, &c, g.d_h, g.n_heads, BasisTag::First)?;
    Ok(got.max_rel_diff(&want)?)
}
