//! Runnable numerical checks: random models, oracle equivalence, product
//! reconstruction error, Gaussian rank trials and the rotary-embedding
//! counterexample.

use rayon::prelude::*;

use crate::attention::{
    attention_scores, bda_forward, bda_prepare, mha_forward, BdaWeights, Geometry, MhaWeights,
    Product,
};
use crate::bd::{self, Axis, BasisTag, BdFactors};
use crate::error::{Error, Result};
use crate::rng::{rand_gaussian, rand_gaussian_scaled, Rng};
use crate::tensor::{singular_values, Precision, Tensor2D};

/// Pass thresholds on max relative error for `bda_forward` vs `mha_forward`.
pub fn equivalence_threshold(precision: Precision) -> f64 {
    match precision {
        Precision::P64 => 1e-10,
        Precision::P32 => 1e-4,
    }
}

/// Smallest-to-largest singular value ratio below which a matrix counts as rank deficient.
pub const RANK_RATIO_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Mean over heads of the per-head MSE.
    pub mse: f64,
    /// Mean over heads of the per-head NMSE.
    pub nmse: f64,
    /// Largest per-head `max|diff| / max|ref|`.
    pub max_rel: f64,
    /// `(mse, nmse)` of every head.
    pub per_head: Vec<(f64, f64)>,
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSummary {
    pub trials: usize,
    pub failures: usize,
    /// Worst observed metric; 0 when no trial ran.
    pub worst_value: f64,
    pub threshold: f64,
}

impl TrialSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random MHA weights with i.i.d. `N(0, 1/d)` entries.
pub fn gen_random_mha(
    rng: &mut Rng,
    d: usize,
    d_h: usize,
    n_heads: usize,
    precision: Precision,
) -> Result<MhaWeights> {
    let g = Geometry::new(d, d_h, n_heads)?;
    let nd = g.inner();
    let s = 1.0 / (d as f64).sqrt();
    let w_q = rand_gaussian_scaled(rng, d, nd, s, precision)?;
    let w_k = rand_gaussian_scaled(rng, d, nd, s, precision)?;
    let w_v = rand_gaussian_scaled(rng, d, nd, s, precision)?;
    let w_o = rand_gaussian_scaled(rng, nd, d, s, precision)?;
    MhaWeights::new(g, w_q, w_k, w_v, w_o)
}

/// Standard normal activations, `seq_len x d`.
pub fn gen_input(rng: &mut Rng, seq_len: usize, d: usize, precision: Precision) -> Result<Tensor2D> {
    rand_gaussian(rng, seq_len, d, precision)
}

/// Compares each head's product rebuilt from `prepared` with the product of
/// `w`. The reference is formed in f64 from the stored weights, the
/// reconstruction in the prepared precision; errors accumulate in f64.
pub fn reconstruction_error_report(
    w: &MhaWeights,
    prepared: &BdaWeights,
    target: Product,
) -> Result<ErrorReport> {
    if w.geometry != prepared.geometry {
        return Err(Error::arg(format!(
            "geometry mismatch: weights {:?}, prepared {:?}",
            w.geometry, prepared.geometry
        )));
    }
    let wide = w.cast(Precision::P64);
    let n = w.geometry.n_heads;
    let mut per_head = Vec::with_capacity(n);
    let mut max_rel = 0.0f64;
    for h in 0..n {
        let (reference, factors) = match target {
            Product::Qk => (wide.qk_product(h)?, prepared.qk_factors(h)?),
            Product::Vo => (wide.vo_product(h)?, prepared.vo_factors(h)?),
        };
        let rebuilt = bd::reconstruct(&factors)?.cast(Precision::P64);
        let diff = rebuilt.sub(&reference)?;
        let count = reference.len() as f64;
        let mse = diff.frobenius_norm().powi(2) / count;
        let ref_ms = reference.frobenius_norm().powi(2) / count;
        let nmse = if mse == 0.0 { 0.0 } else { mse / ref_ms };
        max_rel = max_rel.max(rebuilt.max_rel_diff(&reference)?);
        per_head.push((mse, nmse));
    }
    let mean = |f: fn(&(f64, f64)) -> f64| per_head.iter().map(f).sum::<f64>() / n as f64;
    Ok(ErrorReport {
        mse: mean(|p| p.0),
        nmse: mean(|p| p.1),
        max_rel,
        per_head,
        precision: prepared.precision(),
    })
}

/// Worst relative error of one prepared pair on one input: forward output
/// and every head's pre-softmax scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairErrors {
    pub output: f64,
    pub scores: f64,
}

pub fn compare_pair(x: &Tensor2D, mha: &MhaWeights, bda: &BdaWeights) -> Result<PairErrors> {
    if mha.geometry != bda.geometry {
        return Err(Error::arg(format!(
            "geometry mismatch: {:?} vs {:?}",
            mha.geometry, bda.geometry
        )));
    }
    let output = bda_forward(x, bda)?.max_rel_diff(&mha_forward(x, mha)?)?;
    let mut scores = 0.0f64;
    for h in 0..mha.geometry.n_heads {
        let s = attention_scores(x, mha, h)?;
        scores = scores.max(attention_scores(x, bda, h)?.max_rel_diff(&s)?);
    }
    Ok(PairErrors { output, scores })
}

pub fn equivalence_check(
    rng: &Rng,
    geometry: Geometry,
    seq_len: usize,
    precision: Precision,
    trials: usize,
) -> Result<TrialSummary> {
    equivalence_check_with(rng, geometry, seq_len, precision, trials, equivalence_threshold(precision))
}

/// Trial `t` draws its model and input from `rng.fork(t)`; a trial passes iff
/// its max relative error is `<= threshold`.
pub fn equivalence_check_with(
    rng: &Rng,
    geometry: Geometry,
    seq_len: usize,
    precision: Precision,
    trials: usize,
    threshold: f64,
) -> Result<TrialSummary> {
    let Geometry { d, d_h, n_heads } = geometry;
    let errors: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.fork(t as u64);
            let w = gen_random_mha(&mut r, d, d_h, n_heads, precision)?;
            let x = gen_input(&mut r, seq_len, d, precision)?;
            let bda = bda_prepare(&w)?;
            bda_forward(&x, &bda)?.max_rel_diff(&mha_forward(&x, &w)?)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&errors, threshold, |e| e > threshold, f64::max))
}

fn summarize(values: &[f64], threshold: f64, fails: impl Fn(f64) -> bool, worst: fn(f64, f64) -> f64) -> TrialSummary {
    TrialSummary {
        trials: values.len(),
        failures: values.iter().filter(|&&v| fails(v)).count(),
        worst_value: values.iter().copied().reduce(worst).unwrap_or(0.0),
        threshold,
    }
}

/// `sigma_min / sigma_max`; 0 for the zero matrix.
pub fn singular_ratio(a: &Tensor2D) -> f64 {
    let sv = singular_values(a);
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if hi > 0.0 => lo / hi,
        _ => 0.0,
    }
}

/// Rank summary of given square matrices; `worst_value` is the smallest ratio.
pub fn rank_trials_on(matrices: &[Tensor2D]) -> TrialSummary {
    let ratios: Vec<f64> = matrices.par_iter().map(singular_ratio).collect();
    summarize(&ratios, RANK_RATIO_THRESHOLD, |r| r < RANK_RATIO_THRESHOLD, f64::min)
}

/// Draws `trials` Gaussian `r x r` matrices (trial `t` from `rng.fork(t)`) and
/// counts those with singular value ratio below [`RANK_RATIO_THRESHOLD`].
pub fn full_rank_trials(rng: &Rng, r: usize, trials: usize) -> Result<TrialSummary> {
    if r == 0 {
        return Err(Error::arg("rank trials need r >= 1"));
    }
    let ratios: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let m = rand_gaussian(&mut rng.fork(t as u64), r, r, Precision::P64)?;
            Ok(singular_ratio(&m))
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&ratios, RANK_RATIO_THRESHOLD, |v| v < RANK_RATIO_THRESHOLD, f64::min))
}

/// Block-diagonal rotary matrix over `d_h` channels for relative offset `offset`:
/// pair `j` rotates by `offset * 10000^(-2j/d_h)`.
pub fn rotary_matrix(d_h: usize, offset: f64) -> Result<Tensor2D> {
    if d_h == 0 || !d_h.is_multiple_of(2) {
        return Err(Error::arg(format!("rotary matrix needs even d_h, got {d_h}")));
    }
    let mut r = vec![0.0; d_h * d_h];
    for j in 0..d_h / 2 {
        let theta = offset * 10000f64.powf(-2.0 * j as f64 / d_h as f64);
        let (s, c) = theta.sin_cos();
        let (a, b) = (2 * j, 2 * j + 1);
        r[a * d_h + a] = c;
        r[a * d_h + b] = -s;
        r[b * d_h + a] = s;
        r[b * d_h + b] = c;
    }
    Tensor2D::from_vec(d_h, d_h, r)
}

/// `‖W_q R W_kᵀ − B R [I, C]‖_F / ‖W_q R W_kᵀ‖_F`, where `(B, C)` is the
/// column-axis BD of `W_q W_kᵀ` and `[I, C]` follows the selected tag.
pub fn rope_break_deviation(w_q: &Tensor2D, w_k: &Tensor2D, offset: f64) -> Result<f64> {
    let d_h = w_q.cols();
    let rot = rotary_matrix(d_h, offset)?.cast(w_q.precision());
    let rotated = w_q.matmul(&rot)?.matmul(&w_k.transpose())?;
    let plain = bd::decompose(&w_q.matmul(&w_k.transpose())?, d_h, Axis::Column)?;
    let naive = BdFactors::new(
        Axis::Column,
        plain.tag,
        plain.basis.matmul(&rot)?,
        plain.coeff.clone(),
        plain.orig_rows,
        plain.orig_cols,
    )?;
    let diff = bd::reconstruct(&naive)?.sub(&rotated)?;
    Ok(diff.frobenius_norm() / rotated.frobenius_norm())
}

/// Single-head rotary counterexample on random `d x d_h` weights.
pub fn rope_break_demo(rng: &mut Rng, d: usize, d_h: usize, offset: u64) -> Result<f64> {
    if !d_h.is_multiple_of(2) {
        return Err(Error::arg(format!("rotary pairs need even d_h, got {d_h}")));
    }
    let w = gen_random_mha(rng, d, d_h, 1, Precision::P64)?;
    rope_break_deviation(&w.w_q, &w.w_k, offset as f64)
}

/// Tag the column-axis BD of `w_q w_kᵀ` would select; exposed for reports.
pub fn qk_tag(w_q: &Tensor2D, w_k: &Tensor2D) -> Result<BasisTag> {
    Ok(bd::decompose(&w_q.matmul(&w_k.transpose())?, w_q.cols(), Axis::Column)?.tag)
}
