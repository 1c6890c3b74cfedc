//! Multi-head attention and its BD reformulation.
//!
//! Per head, `W_q^i (W_k^i)ᵀ` and `W_v^i W_o^i` are `d x d` products of rank
//! `d_h`. Preparation decomposes QK along columns and VO along rows, forces
//! one basis tag across all heads (chosen by mean residual) and merges the
//! per-head factors so inference needs no per-head slicing of the input:
//!
//! ```text
//! Q' = X B_qk
//! K' = [X_rep]^{×n} + X_mul C_qk
//! V' = [X_rep]^{×n} + X_mul C_vo
//! Y  = [softmax(Q'_i K'_iᵀ / √d_h) V'_i]_i B_vo
//! ```
//!
//! With tag `First`, `X_rep = X[:, :d_h]` and `X_mul = X[:, d_h:]`; with tag
//! `Last`, `X_rep = X[:, d-d_h:]` and `X_mul = X[:, :d-d_h]`.

use rayon::prelude::*;

use crate::bd::{self, Axis, BasisTag, BdFactors};
use crate::error::{Error, Result};
use crate::tensor::{fused_repeat_matmul, Precision, Tensor2D};

/// Head layout shared by both weight sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub d: usize,
    pub d_h: usize,
    pub n_heads: usize,
}

impl Geometry {
    pub fn new(d: usize, d_h: usize, n_heads: usize) -> Result<Self> {
        if d_h == 0 || n_heads == 0 {
            return Err(Error::arg("head dimension and head count must be positive"));
        }
        if d_h >= d {
            return Err(Error::arg(format!(
                "BD needs d_h < d, got d_h = {d_h}, d = {d}"
            )));
        }
        Ok(Self { d, d_h, n_heads })
    }

    /// `n · d_h`, the width of the projected Q/K/V.
    pub fn inner(&self) -> usize {
        self.n_heads * self.d_h
    }

    pub fn mha_params(&self) -> u64 {
        4 * (self.inner() * self.d) as u64
    }

    pub fn bda_params(&self) -> u64 {
        let nd = self.inner() as u64;
        2 * nd * self.d as u64 + 2 * nd * (self.d - self.d_h) as u64
    }

    /// Stored elements of `W_k` (equivalently `W_v`).
    pub fn kv_params_baseline(&self) -> u64 {
        (self.d * self.inner()) as u64
    }

    /// Stored elements of `C_qk` (equivalently `C_vo`).
    pub fn kv_params_bda(&self) -> u64 {
        ((self.d - self.d_h) * self.inner()) as u64
    }

    /// Multiply-add FLOPs of `X W_k` for `seq_len` rows.
    pub fn k_proj_flops_baseline(&self, seq_len: usize) -> u64 {
        2 * (seq_len * self.d * self.inner()) as u64
    }

    /// Multiply-add FLOPs of the fused projection, excluding the repeat additions.
    pub fn k_proj_flops_fused(&self, seq_len: usize) -> u64 {
        2 * (seq_len * (self.d - self.d_h) * self.inner()) as u64
    }

    /// Additions of the repeated block in the fused projection.
    pub fn k_proj_adds_fused(&self, seq_len: usize) -> u64 {
        (seq_len * self.inner()) as u64
    }

    /// Baseline over fused multiply FLOPs, `d / (d - d_h)`.
    pub fn flop_ratio(&self) -> f64 {
        self.d as f64 / (self.d - self.d_h) as f64
    }
}

fn expect_shape(t: &Tensor2D, shape: (usize, usize), what: &'static str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::dim(
            what,
            format!("got {:?}, expected {shape:?}", t.shape()),
        ));
    }
    Ok(())
}

fn expect_precision(ts: &[&Tensor2D], op: &'static str) -> Result<Precision> {
    let p = ts[0].precision();
    for t in ts {
        if t.precision() != p {
            return Err(Error::Precision {
                op,
                left: p,
                right: t.precision(),
            });
        }
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct MhaWeights {
    pub geometry: Geometry,
    /// `d x n·d_h`
    pub w_q: Tensor2D,
    pub w_k: Tensor2D,
    pub w_v: Tensor2D,
    /// `n·d_h x d`
    pub w_o: Tensor2D,
}

impl MhaWeights {
    pub fn new(
        geometry: Geometry,
        w_q: Tensor2D,
        w_k: Tensor2D,
        w_v: Tensor2D,
        w_o: Tensor2D,
    ) -> Result<Self> {
        let (d, nd) = (geometry.d, geometry.inner());
        expect_shape(&w_q, (d, nd), "w_q")?;
        expect_shape(&w_k, (d, nd), "w_k")?;
        expect_shape(&w_v, (d, nd), "w_v")?;
        expect_shape(&w_o, (nd, d), "w_o")?;
        expect_precision(&[&w_q, &w_k, &w_v, &w_o], "MhaWeights::new")?;
        Ok(Self {
            geometry,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    pub fn precision(&self) -> Precision {
        self.w_q.precision()
    }

    pub fn param_count(&self) -> u64 {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
            .iter()
            .map(|t| t.len() as u64)
            .sum()
    }

    fn head_cols(&self, head: usize) -> (usize, usize) {
        let d_h = self.geometry.d_h;
        (head * d_h, (head + 1) * d_h)
    }

    /// `W_q^i (W_k^i)ᵀ`, `d x d`.
    pub fn qk_product(&self, head: usize) -> Result<Tensor2D> {
        let (a, b) = self.head_cols(head);
        self.w_q
            .slice_cols(a, b)?
            .matmul(&self.w_k.slice_cols(a, b)?.transpose())
    }

    /// `W_v^i W_o^i`, `d x d`.
    pub fn vo_product(&self, head: usize) -> Result<Tensor2D> {
        let (a, b) = self.head_cols(head);
        self.w_v.slice_cols(a, b)?.matmul(&self.w_o.slice_rows(a, b)?)
    }

    pub fn cast(&self, precision: Precision) -> Self {
        Self {
            geometry: self.geometry,
            w_q: self.w_q.cast(precision),
            w_k: self.w_k.cast(precision),
            w_v: self.w_v.cast(precision),
            w_o: self.w_o.cast(precision),
        }
    }
}

/// Which per-head product a preparation warning refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Product {
    Qk,
    Vo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadWarning {
    pub head: usize,
    pub product: Product,
}

#[derive(Debug, Clone)]
pub struct BdaWeights {
    pub geometry: Geometry,
    /// `d x n·d_h`
    pub b_qk: Tensor2D,
    /// `(d - d_h) x n·d_h`
    pub c_qk: Tensor2D,
    /// `(d - d_h) x n·d_h`
    pub c_vo: Tensor2D,
    /// `n·d_h x d`
    pub b_vo: Tensor2D,
    pub qk_tag: BasisTag,
    pub vo_tag: BasisTag,
    pub mean_residual_qk: f64,
    pub mean_residual_vo: f64,
    /// Heads whose selected basis was numerically rank deficient.
    pub warnings: Vec<HeadWarning>,
}

impl BdaWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        geometry: Geometry,
        b_qk: Tensor2D,
        c_qk: Tensor2D,
        c_vo: Tensor2D,
        b_vo: Tensor2D,
        qk_tag: BasisTag,
        vo_tag: BasisTag,
    ) -> Result<Self> {
        let (d, nd, rest) = (geometry.d, geometry.inner(), geometry.d - geometry.d_h);
        expect_shape(&b_qk, (d, nd), "b_qk")?;
        expect_shape(&c_qk, (rest, nd), "c_qk")?;
        expect_shape(&c_vo, (rest, nd), "c_vo")?;
        expect_shape(&b_vo, (nd, d), "b_vo")?;
        expect_precision(&[&b_qk, &c_qk, &c_vo, &b_vo], "BdaWeights::new")?;
        Ok(Self {
            geometry,
            b_qk,
            c_qk,
            c_vo,
            b_vo,
            qk_tag,
            vo_tag,
            mean_residual_qk: 0.0,
            mean_residual_vo: 0.0,
            warnings: Vec::new(),
        })
    }

    pub fn precision(&self) -> Precision {
        self.b_qk.precision()
    }

    pub fn param_count(&self) -> u64 {
        [&self.b_qk, &self.c_qk, &self.c_vo, &self.b_vo]
            .iter()
            .map(|t| t.len() as u64)
            .sum()
    }

    /// Per-head column-axis factors of `W_q^i (W_k^i)ᵀ`.
    pub fn qk_factors(&self, head: usize) -> Result<BdFactors> {
        let Geometry { d, d_h, n_heads } = self.geometry;
        if head >= n_heads {
            return Err(head_range(head, n_heads));
        }
        let (a, b) = (head * d_h, (head + 1) * d_h);
        BdFactors::new(
            Axis::Column,
            self.qk_tag,
            self.b_qk.slice_cols(a, b)?,
            self.c_qk.slice_cols(a, b)?.transpose(),
            d,
            d,
        )
    }

    /// Per-head row-axis factors of `W_v^i W_o^i`.
    pub fn vo_factors(&self, head: usize) -> Result<BdFactors> {
        let Geometry { d, d_h, n_heads } = self.geometry;
        if head >= n_heads {
            return Err(head_range(head, n_heads));
        }
        let (a, b) = (head * d_h, (head + 1) * d_h);
        BdFactors::new(
            Axis::Row,
            self.vo_tag,
            self.b_vo.slice_rows(a, b)?,
            self.c_vo.slice_cols(a, b)?,
            d,
            d,
        )
    }
}

fn head_range(head: usize, n_heads: usize) -> Error {
    Error::Range {
        op: "head",
        from: head,
        to: head + 1,
        extent: n_heads,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PrepareOptions {
    /// Always use the first-`d_h` basis (the "First-r" comparison mode).
    pub force_first: bool,
    /// Prepare P32 weights in P64, then round the factors to P32.
    pub prepare_in_p64: bool,
}

pub fn bda_prepare(w: &MhaWeights) -> Result<BdaWeights> {
    bda_prepare_with(w, PrepareOptions::default())
}

struct HeadCandidates {
    qk: (BdFactors, BdFactors),
    vo: (BdFactors, BdFactors),
}

fn mean_residuals(pairs: impl Iterator<Item = (f64, f64)>, n: usize) -> (f64, f64) {
    let (f, l) = pairs.fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    (f / n as f64, l / n as f64)
}

pub fn bda_prepare_with(w: &MhaWeights, opts: PrepareOptions) -> Result<BdaWeights> {
    let out_precision = w.precision();
    let work = if opts.prepare_in_p64 {
        w.cast(Precision::P64)
    } else {
        w.clone()
    };
    let Geometry { d_h, n_heads, .. } = work.geometry;

    let heads: Vec<HeadCandidates> = (0..n_heads)
        .into_par_iter()
        .map(|i| {
            let qk = bd::decompose_both(&work.qk_product(i)?, d_h, Axis::Column)?;
            let vo = bd::decompose_both(&work.vo_product(i)?, d_h, Axis::Row)?;
            Ok(HeadCandidates { qk, vo })
        })
        .collect::<Result<_>>()?;

    let (qk_first, qk_last) =
        mean_residuals(heads.iter().map(|h| (h.qk.0.residual, h.qk.1.residual)), n_heads);
    let (vo_first, vo_last) =
        mean_residuals(heads.iter().map(|h| (h.vo.0.residual, h.vo.1.residual)), n_heads);
    let choose = |first: f64, last: f64| {
        if opts.force_first || first <= last {
            BasisTag::First
        } else {
            BasisTag::Last
        }
    };
    let qk_tag = choose(qk_first, qk_last);
    let vo_tag = choose(vo_first, vo_last);
    let pick = |pair: &(BdFactors, BdFactors), tag: BasisTag| -> BdFactors {
        match tag {
            BasisTag::First => pair.0.clone(),
            BasisTag::Last => pair.1.clone(),
        }
    };

    let mut warnings = Vec::new();
    let mut b_qk = Vec::with_capacity(n_heads);
    let mut c_qk = Vec::with_capacity(n_heads);
    let mut c_vo = Vec::with_capacity(n_heads);
    let mut b_vo = Vec::with_capacity(n_heads);
    for (i, h) in heads.iter().enumerate() {
        let qk = pick(&h.qk, qk_tag);
        let vo = pick(&h.vo, vo_tag);
        if qk.rank_deficient {
            warnings.push(HeadWarning { head: i, product: Product::Qk });
        }
        if vo.rank_deficient {
            warnings.push(HeadWarning { head: i, product: Product::Vo });
        }
        b_qk.push(qk.basis.cast(out_precision));
        c_qk.push(qk.coeff.transpose().cast(out_precision));
        c_vo.push(vo.coeff.cast(out_precision));
        b_vo.push(vo.basis.cast(out_precision));
    }

    let mut out = BdaWeights::new(
        work.geometry,
        Tensor2D::concat_cols(&b_qk)?,
        Tensor2D::concat_cols(&c_qk)?,
        Tensor2D::concat_cols(&c_vo)?,
        Tensor2D::concat_rows(&b_vo)?,
        qk_tag,
        vo_tag,
    )?;
    out.mean_residual_qk = match qk_tag {
        BasisTag::First => qk_first,
        BasisTag::Last => qk_last,
    };
    out.mean_residual_vo = match vo_tag {
        BasisTag::First => vo_first,
        BasisTag::Last => vo_last,
    };
    out.warnings = warnings;
    Ok(out)
}

/// Mean first/last residuals of every head, without building the merged weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanResiduals {
    pub qk_first: f64,
    pub qk_last: f64,
    pub vo_first: f64,
    pub vo_last: f64,
}

pub fn mean_candidate_residuals(w: &MhaWeights) -> Result<MeanResiduals> {
    let Geometry { d_h, n_heads, .. } = w.geometry;
    let mut sums = [0.0f64; 4];
    for i in 0..n_heads {
        let (f, l) = bd::decompose_both(&w.qk_product(i)?, d_h, Axis::Column)?;
        sums[0] += f.residual;
        sums[1] += l.residual;
        let (f, l) = bd::decompose_both(&w.vo_product(i)?, d_h, Axis::Row)?;
        sums[2] += f.residual;
        sums[3] += l.residual;
    }
    let n = n_heads as f64;
    Ok(MeanResiduals {
        qk_first: sums[0] / n,
        qk_last: sums[1] / n,
        vo_first: sums[2] / n,
        vo_last: sums[3] / n,
    })
}

/// `[x_rep]^{×n} + x_mul · c`, computed in one pass over the output.
///
/// With `First`, `x_rep = x[:, :d_h]` and `x_mul = x[:, d_h:]`; with `Last`,
/// `x_rep = x[:, d-d_h:]` and `x_mul = x[:, :d-d_h]`. Each output element is
/// the same dot product an unfused `matmul` would produce, plus the repeated
/// entry, so the result is bit-identical to the unfused composition.
pub fn fused_kv_proj(
    x: &Tensor2D,
    c: &Tensor2D,
    d_h: usize,
    n_heads: usize,
    tag: BasisTag,
) -> Result<Tensor2D> {
    let d = x.cols();
    if d_h == 0 || d_h >= d {
        return Err(Error::arg(format!("need 0 < d_h < d, got d_h = {d_h}, d = {d}")));
    }
    if c.rows() != d - d_h || c.cols() != n_heads * d_h {
        return Err(Error::dim(
            "fused_kv_proj",
            format!(
                "coefficients {:?}, expected ({}, {})",
                c.shape(),
                d - d_h,
                n_heads * d_h
            ),
        ));
    }
    let (mul_off, rep_off) = match tag {
        BasisTag::First => (d_h, 0),
        BasisTag::Last => (0, d - d_h),
    };
    fused_repeat_matmul(x, c, mul_off, rep_off, d_h)
}

/// Unfused reference composition of [`fused_kv_proj`].
pub fn unfused_kv_proj(
    x: &Tensor2D,
    c: &Tensor2D,
    d_h: usize,
    n_heads: usize,
    tag: BasisTag,
) -> Result<Tensor2D> {
    let d = x.cols();
    let (rep, mul) = match tag {
        BasisTag::First => (x.slice_cols(0, d_h)?, x.slice_cols(d_h, d)?),
        BasisTag::Last => (x.slice_cols(d - d_h, d)?, x.slice_cols(0, d - d_h)?),
    };
    rep.repeat_cols(n_heads)?.add(&mul.matmul(c)?)
}

/// Anything that can produce per-head queries and keys.
pub trait AttentionWeights {
    fn geometry(&self) -> Geometry;
    fn precision(&self) -> Precision;
    /// Full-width `(Q, K)`, each `L x n·d_h`.
    fn project_qk(&self, x: &Tensor2D) -> Result<(Tensor2D, Tensor2D)>;
}

impl AttentionWeights for MhaWeights {
    fn geometry(&self) -> Geometry {
        self.geometry
    }
    fn precision(&self) -> Precision {
        MhaWeights::precision(self)
    }
    fn project_qk(&self, x: &Tensor2D) -> Result<(Tensor2D, Tensor2D)> {
        Ok((x.matmul(&self.w_q)?, x.matmul(&self.w_k)?))
    }
}

impl AttentionWeights for BdaWeights {
    fn geometry(&self) -> Geometry {
        self.geometry
    }
    fn precision(&self) -> Precision {
        BdaWeights::precision(self)
    }
    fn project_qk(&self, x: &Tensor2D) -> Result<(Tensor2D, Tensor2D)> {
        let g = self.geometry;
        Ok((
            x.matmul(&self.b_qk)?,
            fused_kv_proj(x, &self.c_qk, g.d_h, g.n_heads, self.qk_tag)?,
        ))
    }
}

fn check_input(x: &Tensor2D, g: Geometry, p: Precision) -> Result<()> {
    if x.cols() != g.d || x.rows() == 0 {
        return Err(Error::dim(
            "attention input",
            format!("got {:?}, expected (L >= 1, {})", x.shape(), g.d),
        ));
    }
    if x.precision() != p {
        return Err(Error::Precision {
            op: "attention input",
            left: x.precision(),
            right: p,
        });
    }
    Ok(())
}

/// Pre-softmax scores `Q_i K_iᵀ` of one head, without the `1/√d_h` scale.
pub fn attention_scores<W: AttentionWeights + ?Sized>(
    x: &Tensor2D,
    w: &W,
    head: usize,
) -> Result<Tensor2D> {
    let g = w.geometry();
    if head >= g.n_heads {
        return Err(head_range(head, g.n_heads));
    }
    check_input(x, g, w.precision())?;
    let (q, k) = w.project_qk(x)?;
    let (a, b) = (head * g.d_h, (head + 1) * g.d_h);
    q.slice_cols(a, b)?.matmul(&k.slice_cols(a, b)?.transpose())
}

/// `[softmax(Q_i K_iᵀ / √d_h) V_i]_i`, `L x n·d_h`.
fn attend(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D, g: Geometry) -> Result<Tensor2D> {
    let scale = 1.0 / (g.d_h as f64).sqrt();
    let heads: Vec<Tensor2D> = (0..g.n_heads)
        .into_par_iter()
        .map(|i| {
            let (a, b) = (i * g.d_h, (i + 1) * g.d_h);
            let scores = q.slice_cols(a, b)?.matmul(&k.slice_cols(a, b)?.transpose())?;
            scores.scale(scale).softmax_rows().matmul(&v.slice_cols(a, b)?)
        })
        .collect::<Result<_>>()?;
    Tensor2D::concat_cols(&heads)
}

pub fn mha_forward(x: &Tensor2D, w: &MhaWeights) -> Result<Tensor2D> {
    check_input(x, w.geometry, w.precision())?;
    let q = x.matmul(&w.w_q)?;
    let k = x.matmul(&w.w_k)?;
    let v = x.matmul(&w.w_v)?;
    attend(&q, &k, &v, w.geometry)?.matmul(&w.w_o)
}

pub fn bda_forward(x: &Tensor2D, w: &BdaWeights) -> Result<Tensor2D> {
    let g = w.geometry;
    check_input(x, g, w.precision())?;
    let q = x.matmul(&w.b_qk)?;
    let k = fused_kv_proj(x, &w.c_qk, g.d_h, g.n_heads, w.qk_tag)?;
    let v = fused_kv_proj(x, &w.c_vo, g.d_h, g.n_heads, w.vo_tag)?;
    attend(&q, &k, &v, g)?.matmul(&w.b_vo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{gen_input, gen_random_mha};
    use crate::Rng;

    fn model(seed: u64, d: usize, d_h: usize, n: usize) -> MhaWeights {
        gen_random_mha(&mut Rng::new(seed), d, d_h, n, Precision::P64).unwrap()
    }

    /// Independent per-head loop over plain vectors.
    fn naive_mha(x: &Tensor2D, w: &MhaWeights) -> Vec<f64> {
        let Geometry { d, d_h, n_heads } = w.geometry;
        let l = x.rows();
        let nd = n_heads * d_h;
        let xv = x.to_f64_vec();
        let proj = |wt: &Tensor2D| {
            let wv = wt.to_f64_vec();
            let mut out = vec![0.0; l * nd];
            for t in 0..l {
                for j in 0..nd {
                    out[t * nd + j] = (0..d).map(|p| xv[t * d + p] * wv[p * nd + j]).sum();
                }
            }
            out
        };
        let (q, k, v) = (proj(&w.w_q), proj(&w.w_k), proj(&w.w_v));
        let mut o = vec![0.0; l * nd];
        for h in 0..n_heads {
            for t in 0..l {
                let mut s: Vec<f64> = (0..l)
                    .map(|u| {
                        (0..d_h)
                            .map(|c| q[t * nd + h * d_h + c] * k[u * nd + h * d_h + c])
                            .sum::<f64>()
                            / (d_h as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                s.iter_mut().for_each(|e| *e = (*e - m).exp());
                let z: f64 = s.iter().sum();
                for c in 0..d_h {
                    o[t * nd + h * d_h + c] =
                        (0..l).map(|u| s[u] / z * v[u * nd + h * d_h + c]).sum();
                }
            }
        }
        let wo = w.w_o.to_f64_vec();
        let mut y = vec![0.0; l * d];
        for t in 0..l {
            for j in 0..d {
                y[t * d + j] = (0..nd).map(|p| o[t * nd + p] * wo[p * d + j]).sum();
            }
        }
        y
    }

    #[test]
    fn single_token_reduces_to_value_path() {
        let w = model(1, 12, 4, 1);
        let x = gen_input(&mut Rng::new(2), 1, 12, Precision::P64).unwrap();
        let y = mha_forward(&x, &w).unwrap();
        let vo = x.matmul(&w.w_v).unwrap().matmul(&w.w_o).unwrap();
        assert!(y.max_abs_diff(&vo).unwrap() <= 1e-14);

        let bda = bda_prepare(&w).unwrap();
        let yb = bda_forward(&x, &bda).unwrap();
        assert!(yb.max_rel_diff(&y).unwrap() <= 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let w = model(3, 16, 4, 2);
        let x = Tensor2D::zeros(5, 16, Precision::P64);
        assert_eq!(mha_forward(&x, &w).unwrap(), Tensor2D::zeros(5, 16, Precision::P64));
        let bda = bda_prepare(&w).unwrap();
        assert_eq!(bda_forward(&x, &bda).unwrap(), Tensor2D::zeros(5, 16, Precision::P64));
    }

    #[test]
    fn mha_matches_naive_loop() {
        let w = model(11, 64, 16, 4);
        let x = gen_input(&mut Rng::new(12), 32, 64, Precision::P64).unwrap();
        let y = mha_forward(&x, &w).unwrap().to_f64_vec();
        let want = naive_mha(&x, &w);
        let worst = y.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn identity_block_prepares_exactly() {
        let d = 6;
        let d_h = 2;
        let sel = Tensor2D::identity(d, Precision::P64).slice_cols(0, d_h).unwrap();
        let g = Geometry::new(d, d_h, 1).unwrap();
        let w = MhaWeights::new(g, sel.clone(), sel.clone(), sel.clone(), sel.transpose()).unwrap();
        let bda = bda_prepare(&w).unwrap();
        assert_eq!(bda.qk_tag, BasisTag::First);
        assert_eq!(bda.mean_residual_qk, 0.0);
        assert!(bda.c_qk.to_f64_vec().iter().all(|&c| c == 0.0));
        assert_eq!(bda.b_qk, sel);
        assert!(bda.warnings.is_empty());
    }

    #[test]
    fn per_head_factors_rebuild_products() {
        let w = model(7, 64, 16, 4);
        let bda = bda_prepare(&w).unwrap();
        for h in 0..4 {
            let qk = bd::reconstruct(&bda.qk_factors(h).unwrap()).unwrap();
            assert!(qk.max_rel_diff(&w.qk_product(h).unwrap()).unwrap() <= 1e-11);
            let vo = bd::reconstruct(&bda.vo_factors(h).unwrap()).unwrap();
            assert!(vo.max_rel_diff(&w.vo_product(h).unwrap()).unwrap() <= 1e-11);
        }
    }

    #[test]
    fn tag_is_argmin_of_mean_residuals() {
        let w = model(7, 64, 16, 4);
        let bda = bda_prepare(&w).unwrap();
        let means = mean_candidate_residuals(&w).unwrap();
        let want_qk = if means.qk_first <= means.qk_last { BasisTag::First } else { BasisTag::Last };
        let want_vo = if means.vo_first <= means.vo_last { BasisTag::First } else { BasisTag::Last };
        assert_eq!(bda.qk_tag, want_qk);
        assert_eq!(bda.vo_tag, want_vo);
        assert_eq!(bda.mean_residual_qk, means.qk_first.min(means.qk_last));
        assert_eq!(bda.mean_residual_vo, means.vo_first.min(means.vo_last));

        let forced = bda_prepare_with(&w, PrepareOptions { force_first: true, ..Default::default() }).unwrap();
        assert_eq!(forced.qk_tag, BasisTag::First);
        assert_eq!(forced.vo_tag, BasisTag::First);
    }

    #[test]
    fn bda_matches_mha_seed_7() {
        let w = model(7, 64, 16, 4);
        let bda = bda_prepare(&w).unwrap();
        let x = gen_input(&mut Rng::new(70), 32, 64, Precision::P64).unwrap();
        let y = mha_forward(&x, &w).unwrap();
        let yb = bda_forward(&x, &bda).unwrap();
        assert!(yb.max_rel_diff(&y).unwrap() <= 1e-10);
    }

    #[test]
    fn scores_are_preserved() {
        let w = model(8, 32, 8, 3);
        let bda = bda_prepare(&w).unwrap();
        let x = gen_input(&mut Rng::new(80), 10, 32, Precision::P64).unwrap();
        for h in 0..3 {
            let s = attention_scores(&x, &w, h).unwrap();
            let sb = attention_scores(&x, &bda, h).unwrap();
            assert!(sb.max_rel_diff(&s).unwrap() <= 1e-10);
        }
        assert!(matches!(attention_scores(&x, &w, 3), Err(Error::Range { .. })));
    }

    #[test]
    fn single_token_score_is_inner_product() {
        let w = model(9, 8, 2, 2);
        let x = gen_input(&mut Rng::new(90), 1, 8, Precision::P64).unwrap();
        let q = x.matmul(&w.w_q).unwrap();
        let k = x.matmul(&w.w_k).unwrap();
        let s = attention_scores(&x, &w, 1).unwrap();
        let dot: f64 = (2..4).map(|c| q.get(0, c) * k.get(0, c)).sum();
        assert_eq!(s.shape(), (1, 1));
        assert!((s.get(0, 0) - dot).abs() <= 1e-14);
    }

    #[test]
    fn orthogonal_query_key_scores_zero() {
        // q uses the first input channel, k the second; x = e0 + e1.
        let d = 4;
        let mut wq = vec![0.0; d];
        let mut wk = vec![0.0; d];
        wq[0] = 1.0;
        wk[1] = 1.0;
        let g = Geometry::new(d, 1, 1).unwrap();
        let col = |v: Vec<f64>| Tensor2D::from_vec(d, 1, v).unwrap();
        let w = MhaWeights::new(
            g,
            col(wq.clone()),
            col(wk.clone()),
            col(wq.clone()),
            col(wq).transpose(),
        )
        .unwrap();
        let x = Tensor2D::from_rows(&[&[1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(attention_scores(&x, &w, 0).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn fused_examples() {
        let x = gen_input(&mut Rng::new(5), 4, 6, Precision::P64).unwrap();
        let zeros = Tensor2D::zeros(4, 6, Precision::P64);
        let out = fused_kv_proj(&x, &zeros, 2, 3, BasisTag::First).unwrap();
        assert_eq!(out, x.slice_cols(0, 2).unwrap().repeat_cols(3).unwrap());
        let out = fused_kv_proj(&x, &zeros, 2, 3, BasisTag::Last).unwrap();
        assert_eq!(out, x.slice_cols(4, 6).unwrap().repeat_cols(3).unwrap());

        let x = Tensor2D::from_rows(&[&[2.0, 5.0]]).unwrap();
        let c = Tensor2D::from_rows(&[&[3.0]]).unwrap();
        let out = fused_kv_proj(&x, &c, 1, 1, BasisTag::First).unwrap();
        assert_eq!(out.to_f64_vec(), vec![2.0 + 3.0 * 5.0]);

        let bad = Tensor2D::zeros(3, 6, Precision::P64);
        assert!(fused_kv_proj(&x, &bad, 1, 1, BasisTag::First).is_err());
    }

    #[test]
    fn fused_is_bit_identical_both_tags() {
        for (seed, tag) in [(1, BasisTag::First), (2, BasisTag::Last)] {
            let mut rng = Rng::new(seed);
            let x = gen_input(&mut rng, 19, 40, Precision::P64).unwrap();
            let c = gen_input(&mut rng, 30, 5 * 10, Precision::P64).unwrap();
            let fused = fused_kv_proj(&x, &c, 10, 5, tag).unwrap();
            let unfused = unfused_kv_proj(&x, &c, 10, 5, tag).unwrap();
            assert!(fused.bit_eq(&unfused));
            let (x, c) = (x.cast(Precision::P32), c.cast(Precision::P32));
            let fused = fused_kv_proj(&x, &c, 10, 5, tag).unwrap();
            assert!(fused.bit_eq(&unfused_kv_proj(&x, &c, 10, 5, tag).unwrap()));
        }
    }

    #[test]
    fn geometry_rejects_degenerate() {
        assert!(Geometry::new(8, 8, 2).is_err());
        assert!(Geometry::new(8, 0, 2).is_err());
        assert!(Geometry::new(8, 2, 0).is_err());
    }

    #[test]
    fn parameter_and_flop_accounting() {
        let g = Geometry::new(512, 128, 4).unwrap();
        assert_eq!(g.mha_params(), 4 * 4 * 128 * 512);
        assert_eq!(g.bda_params(), 2 * 4 * 128 * 512 + 2 * 4 * 128 * 384);
        assert_eq!(4 * (g.kv_params_baseline() - g.kv_params_bda()), g.kv_params_baseline());
        assert_eq!(3 * g.k_proj_flops_baseline(100), 4 * g.k_proj_flops_fused(100));
        assert_eq!(g.k_proj_adds_fused(100), 100 * 512);

        let w = model(1, 16, 4, 2);
        let bda = bda_prepare(&w).unwrap();
        assert_eq!(w.param_count(), w.geometry.mha_params());
        assert_eq!(bda.param_count(), bda.geometry.bda_params());
    }

    #[test]
    fn mixed_precision_rejected() {
        let w = model(1, 16, 4, 2);
        let x = gen_input(&mut Rng::new(1), 3, 16, Precision::P32).unwrap();
        assert!(matches!(mha_forward(&x, &w), Err(Error::Precision { .. })));
        let x = gen_input(&mut Rng::new(1), 3, 15, Precision::P64).unwrap();
        assert!(matches!(mha_forward(&x, &w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn p64_preparation_of_p32_weights() {
        let w = gen_random_mha(&mut Rng::new(4), 32, 8, 2, Precision::P32).unwrap();
        let opts = PrepareOptions { prepare_in_p64: true, ..Default::default() };
        let bda = bda_prepare_with(&w, opts).unwrap();
        assert_eq!(bda.precision(), Precision::P32);
        let x = gen_input(&mut Rng::new(5), 8, 32, Precision::P32).unwrap();
        let y = mha_forward(&x, &w).unwrap();
        assert!(bda_forward(&x, &bda).unwrap().max_rel_diff(&y).unwrap() <= 1e-4);
    }
}
