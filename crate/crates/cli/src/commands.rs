//! Argument parsing and the subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bda_core::attention::{bda_prepare_with, PrepareOptions};
use bda_core::bd;
use bda_core::verify::{
    compare_pair, equivalence_threshold, gen_input, gen_random_mha, reconstruction_error_report,
    ErrorReport, TrialSummary,
};
use bda_core::{Axis, BdaWeights, Geometry, MhaWeights, Precision, Product, Rng};
use clap::{Args, Parser, Subcommand};

use crate::bench::{run_bench, sanity_check, write_csv, BenchConfig, DEFAULT_SEQ_LENS, FUSED};
use crate::format::{load_tensor, save_tensor};
use crate::manifest::{load_bda, load_mha, save_bda, save_mha};
use crate::{CliError, EXIT_OK, EXIT_VERIFY_FAILED};

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: bda_core::Error| e.to_string())
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse().map_err(|e: bda_core::Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "bda", version, about = "Basis decomposition tools for multi-head attention")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Element precision (p32 or p64); the default depends on the command.
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Worker threads for the numerical kernels.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct GeometryArgs {
    /// Model width.
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Head width.
    #[arg(long = "d-h", default_value_t = 16)]
    pub d_h: usize,
    #[arg(long = "n-heads", default_value_t = 4)]
    pub n_heads: usize,
}

impl GeometryArgs {
    fn geometry(self) -> Result<Geometry, CliError> {
        Ok(Geometry::new(self.d, self.d_h, self.n_heads)?)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write random MHA weights (default p64) and their manifest.
    Generate {
        #[command(flatten)]
        geometry: GeometryArgs,
        /// Manifest path; tensor files go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose an MHA bundle into a BDA bundle.
    Prepare {
        input: PathBuf,
        output: PathBuf,
        /// Use the first-d_h basis for every head instead of the residual-min choice.
        #[arg(long)]
        force_first: bool,
        /// Run the decomposition in p64 even for p32 weights.
        #[arg(long)]
        prepare_p64: bool,
    },
    /// Check a BDA bundle against its MHA source on random inputs.
    Verify {
        mha: PathBuf,
        bda: PathBuf,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Time `X W_k` against the fused BDA projection and write CSV (default p32).
    Bench {
        #[arg(long, default_value_t = 512)]
        d: usize,
        #[arg(long = "d-h", default_value_t = 128)]
        d_h: usize,
        #[arg(long = "n-heads", default_value_t = 128)]
        n_heads: usize,
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEQ_LENS)]
        seq_lens: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate, prepare, verify and benchmark a small model in one go.
    Demo {
        #[command(flatten)]
        geometry: GeometryArgs,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
    },
    /// Basis-decompose a single tensor file.
    Decompose {
        input: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long, default_value = "column", value_parser = parse_axis)]
        axis: Axis,
        /// Write `<prefix>.basis.bdt` and `<prefix>.coeff.bdt`.
        #[arg(long)]
        out_prefix: Option<PathBuf>,
    },
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<i32, CliError> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli, out))
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    match &cli.command {
        Command::Generate { geometry, out: path } => {
            let g = geometry.geometry()?;
            let p = cli.precision.unwrap_or(Precision::P64);
            cmd_generate(path, g, p, cli.seed, out)
        }
        Command::Prepare {
            input,
            output,
            force_first,
            prepare_p64,
        } => {
            let opts = PrepareOptions {
                force_first: *force_first,
                prepare_in_p64: *prepare_p64,
            };
            cmd_prepare(input, output, opts, out)
        }
        Command::Verify {
            mha,
            bda,
            seq_len,
            trials,
        } => cmd_verify(mha, bda, *seq_len, cli.seed, *trials, out),
        Command::Bench {
            d,
            d_h,
            n_heads,
            seq_lens,
            reps,
            warmup,
            out: csv_path,
        } => {
            let mut cfg = BenchConfig::new(Geometry::new(*d, *d_h, *n_heads)?);
            cfg.seq_lens = seq_lens.clone();
            cfg.precision = cli.precision.unwrap_or(Precision::P32);
            cfg.reps = *reps;
            cfg.warmup = *warmup;
            cfg.threads = cli.threads;
            cfg.seed = cli.seed;
            cmd_bench(&cfg, csv_path.as_deref(), out)
        }
        Command::Demo { geometry, seq_len } => {
            let g = geometry.geometry()?;
            let p = cli.precision.unwrap_or(Precision::P64);
            cmd_demo(g, *seq_len, p, cli.seed, cli.threads, out)
        }
        Command::Decompose {
            input,
            rank,
            axis,
            out_prefix,
        } => cmd_decompose(input, *rank, *axis, out_prefix.as_deref(), out),
    }
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(|e| CliError::Io { path: "output".into(), source: e })?
    };
}

pub fn cmd_generate(
    path: &Path,
    g: Geometry,
    precision: Precision,
    seed: u64,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let w = gen_random_mha(&mut Rng::new(seed), g.d, g.d_h, g.n_heads, precision)?;
    save_mha(path, &w)?;
    say!(
        out,
        "wrote {} (d={}, d_h={}, n_heads={}, {precision}, seed {seed})",
        path.display(),
        g.d,
        g.d_h,
        g.n_heads
    );
    Ok(EXIT_OK)
}

fn percent_fewer(base: u64, new: u64) -> f64 {
    100.0 * (base as f64 - new as f64) / base as f64
}

fn print_preparation(bda: &BdaWeights, mha: &MhaWeights, out: &mut dyn Write) -> Result<(), CliError> {
    let g = bda.geometry;
    say!(out, "qk tag: {} (mean residual {:.3e})", bda.qk_tag, bda.mean_residual_qk);
    say!(out, "vo tag: {} (mean residual {:.3e})", bda.vo_tag, bda.mean_residual_vo);
    if bda.warnings.is_empty() {
        say!(out, "rank-deficient heads: none");
    }
    for w in &bda.warnings {
        say!(out, "warning: head {} {:?} basis is numerically rank deficient", w.head, w.product);
    }
    say!(
        out,
        "parameters: mha {} -> bda {} ({:.2}% fewer); k/v projections {} -> {} ({:.2}% fewer)",
        mha.param_count(),
        bda.param_count(),
        percent_fewer(mha.param_count(), bda.param_count()),
        g.kv_params_baseline(),
        g.kv_params_bda(),
        percent_fewer(g.kv_params_baseline(), g.kv_params_bda())
    );
    Ok(())
}

pub fn cmd_prepare(
    input: &Path,
    output: &Path,
    opts: PrepareOptions,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let mha = load_mha(input)?;
    let g = mha.geometry;
    let t = Instant::now();
    let bda = bda_prepare_with(&mha, opts)?;
    let elapsed = t.elapsed();
    save_bda(output, &bda)?;
    say!(
        out,
        "prepared {} heads (d={}, d_h={}, {}) in {:.1} ms{}",
        g.n_heads,
        g.d,
        g.d_h,
        mha.precision(),
        elapsed.as_secs_f64() * 1e3,
        if opts.force_first { ", first basis forced" } else { "" }
    );
    print_preparation(&bda, &mha, out)?;
    say!(out, "wrote {}", output.display());
    Ok(EXIT_OK)
}

fn print_report(name: &str, r: &ErrorReport, out: &mut dyn Write) -> Result<(), CliError> {
    say!(
        out,
        "{name} reconstruction ({}): mse {:.3e}  nmse {:.3e}  max rel {:.3e}",
        r.precision,
        r.mse,
        r.nmse,
        r.max_rel
    );
    Ok(())
}

/// Compares a prepared pair on `trials` random inputs. Trial `t` draws its
/// input from stream `t` of `seed`.
pub fn check_pair(
    mha: &MhaWeights,
    bda: &BdaWeights,
    seq_len: usize,
    seed: u64,
    trials: usize,
) -> Result<TrialSummary, CliError> {
    let threshold = equivalence_threshold(mha.precision());
    let root = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for t in 0..trials {
        let x = gen_input(&mut root.fork(t as u64), seq_len, mha.geometry.d, mha.precision())?;
        let e = compare_pair(&x, mha, bda)?;
        let err = e.output.max(e.scores);
        // NaN compares false, so count it explicitly.
        if err.is_nan() || err > threshold {
            failures += 1;
        }
        worst = worst.max(err);
    }
    Ok(TrialSummary {
        trials,
        failures,
        worst_value: worst,
        threshold,
    })
}

fn print_summary(s: &TrialSummary, out: &mut dyn Write) -> Result<(), CliError> {
    say!(
        out,
        "equivalence: {} trials, {} failures, worst max-rel error {:.3e} (threshold {:.0e})",
        s.trials,
        s.failures,
        s.worst_value,
        s.threshold
    );
    Ok(())
}

pub fn cmd_verify(
    mha_path: &Path,
    bda_path: &Path,
    seq_len: usize,
    seed: u64,
    trials: usize,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    if seq_len == 0 {
        return Err(CliError::Usage("--seq-len must be positive".into()));
    }
    let mha = load_mha(mha_path)?;
    let bda = load_bda(bda_path)?;
    if mha.geometry != bda.geometry {
        return Err(CliError::Usage(format!(
            "geometry mismatch: {:?} vs {:?}",
            mha.geometry, bda.geometry
        )));
    }
    if mha.precision() != bda.precision() {
        return Err(CliError::Usage(format!(
            "precision mismatch: mha {} vs bda {}",
            mha.precision(),
            bda.precision()
        )));
    }
    print_report("qk", &reconstruction_error_report(&mha, &bda, Product::Qk)?, out)?;
    print_report("vo", &reconstruction_error_report(&mha, &bda, Product::Vo)?, out)?;
    let s = check_pair(&mha, &bda, seq_len, seed, trials)?;
    print_summary(&s, out)?;
    if s.passed() {
        say!(out, "PASS");
        Ok(EXIT_OK)
    } else {
        say!(out, "FAIL");
        Ok(EXIT_VERIFY_FAILED)
    }
}

pub fn cmd_bench(cfg: &BenchConfig, csv: Option<&Path>, out: &mut dyn Write) -> Result<i32, CliError> {
    let check = sanity_check(cfg.geometry, cfg.precision, cfg.seed)?;
    if check > equivalence_threshold(cfg.precision) {
        return Err(CliError::Usage(format!("fused kernel self-check failed ({check:.3e})")));
    }
    let records = run_bench(cfg)?;
    match csv {
        Some(path) => {
            let f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
            write_csv(&records, f)?;
            for r in records.iter().filter(|r| r.operator == FUSED) {
                say!(
                    out,
                    "seq_len {:>6}: speedup {:.3}x (flop bound {:.3}x)",
                    r.seq_len,
                    r.speedup,
                    r.flop_ratio
                );
            }
            say!(out, "wrote {}", path.display());
        }
        None => write_csv(&records, &mut *out)?,
    }
    Ok(EXIT_OK)
}

pub fn cmd_demo(
    g: Geometry,
    seq_len: usize,
    precision: Precision,
    seed: u64,
    threads: usize,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    say!(
        out,
        "model: d={} d_h={} n_heads={} {precision} seed {seed}",
        g.d,
        g.d_h,
        g.n_heads
    );
    let mha = gen_random_mha(&mut Rng::new(seed), g.d, g.d_h, g.n_heads, precision)?;
    let t = Instant::now();
    let bda = bda_prepare_with(&mha, PrepareOptions::default())?;
    say!(out, "prepared in {:.1} ms", t.elapsed().as_secs_f64() * 1e3);
    print_preparation(&bda, &mha, out)?;
    say!(
        out,
        "k/v projection saving d_h/d = {}/{} = {:.2}%",
        g.d_h,
        g.d,
        100.0 * g.d_h as f64 / g.d as f64
    );
    print_report("qk", &reconstruction_error_report(&mha, &bda, Product::Qk)?, out)?;
    print_report("vo", &reconstruction_error_report(&mha, &bda, Product::Vo)?, out)?;
    let s = check_pair(&mha, &bda, seq_len, seed, 3)?;
    print_summary(&s, out)?;

    let mut cfg = BenchConfig::new(g);
    cfg.seq_lens = vec![64, 256];
    cfg.precision = precision;
    cfg.threads = threads;
    cfg.seed = seed;
    for r in run_bench(&cfg)?.iter().filter(|r| r.operator == FUSED) {
        say!(
            out,
            "bench seq_len {}: fused k-projection {:.3}x vs baseline (flop bound {:.3}x)",
            r.seq_len,
            r.speedup,
            r.flop_ratio
        );
    }
    if s.passed() {
        say!(out, "PASS");
        Ok(EXIT_OK)
    } else {
        say!(out, "FAIL");
        Ok(EXIT_VERIFY_FAILED)
    }
}

pub fn cmd_decompose(
    input: &Path,
    rank: usize,
    axis: Axis,
    out_prefix: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let w = load_tensor(input)?;
    let f = bd::decompose(&w, rank, axis)?;
    let norm = w.frobenius_norm();
    say!(
        out,
        "{}x{} {} rank {rank}, {} axis: tag {}",
        w.rows(),
        w.cols(),
        w.precision(),
        axis.name(),
        f.tag
    );
    say!(
        out,
        "residual {:.3e} (relative {:.3e}){}",
        f.residual,
        if norm > 0.0 { f.residual / norm } else { 0.0 },
        if f.rank_deficient { ", basis rank deficient" } else { "" }
    );
    say!(out, "stored elements {} of {}", f.stored_params(), w.len());
    if let Some(prefix) = out_prefix {
        let with = |ext: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        let (bp, cp) = (with(".basis.bdt"), with(".coeff.bdt"));
        save_tensor(&bp, &f.basis)?;
        save_tensor(&cp, &f.coeff)?;
        say!(out, "wrote {} and {}", bp.display(), cp.display());
    }
    Ok(EXIT_OK)
}
