//! Basis Decomposition.
//!
//! A rank-`r` matrix `W` (m x n) is stored as `r` of its own contiguous rows or
//! columns (the basis `B`) plus the coefficients `C` that rebuild the rest:
//!
//! | axis   | tag   | identity          |
//! |--------|-------|-------------------|
//! | Row    | First | `W = [I; C] · B`  |
//! | Row    | Last  | `W = [C; I] · B`  |
//! | Column | First | `W = B · [I, C]`  |
//! | Column | Last  | `W = B · [C, I]`  |
//!
//! Decomposition solves for `C` by least squares against both contiguous
//! candidates and keeps the one whose full reconstruction has the smaller
//! Frobenius residual (first wins ties).

use crate::error::{Error, Result};
use crate::tensor::{lstsq, SolveSide, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Row,
    Column,
}

/// Which contiguous block of rows/columns forms the basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisTag {
    First,
    Last,
}

impl BasisTag {
    pub fn name(self) -> &'static str {
        match self {
            BasisTag::First => "first",
            BasisTag::Last => "last",
        }
    }
}

impl std::fmt::Display for BasisTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BasisTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "first" => Ok(BasisTag::First),
            "last" => Ok(BasisTag::Last),
            other => Err(Error::arg(format!("unknown basis tag '{other}'"))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Row => "row",
            Axis::Column => "column",
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "row" => Ok(Axis::Row),
            "column" | "col" => Ok(Axis::Column),
            other => Err(Error::arg(format!("unknown axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BdFactors {
    pub axis: Axis,
    pub tag: BasisTag,
    /// Row axis: `r x n`. Column axis: `m x r`.
    pub basis: Tensor2D,
    /// Row axis: `(m - r) x r`. Column axis: `r x (n - r)`.
    pub coeff: Tensor2D,
    pub orig_rows: usize,
    pub orig_cols: usize,
    pub rank: usize,
    /// `‖W - reconstruct(self)‖_F` measured at decomposition time.
    pub residual: f64,
    pub rank_deficient: bool,
}

impl BdFactors {
    /// Assembles factors, checking the shape invariants. The residual is left at 0.
    pub fn new(
        axis: Axis,
        tag: BasisTag,
        basis: Tensor2D,
        coeff: Tensor2D,
        orig_rows: usize,
        orig_cols: usize,
    ) -> Result<Self> {
        let rank = match axis {
            Axis::Row => basis.rows(),
            Axis::Column => basis.cols(),
        };
        check_axis_rank(orig_rows, orig_cols, rank, axis)?;
        let (want_basis, want_coeff) = match axis {
            Axis::Row => ((rank, orig_cols), (orig_rows - rank, rank)),
            Axis::Column => ((orig_rows, rank), (rank, orig_cols - rank)),
        };
        if basis.shape() != want_basis || coeff.shape() != want_coeff {
            return Err(Error::dim(
                "BdFactors::new",
                format!(
                    "basis {:?} / coeff {:?}, expected {want_basis:?} / {want_coeff:?}",
                    basis.shape(),
                    coeff.shape()
                ),
            ));
        }
        if basis.precision() != coeff.precision() {
            return Err(Error::Precision {
                op: "BdFactors::new",
                left: basis.precision(),
                right: coeff.precision(),
            });
        }
        Ok(Self {
            axis,
            tag,
            basis,
            coeff,
            orig_rows,
            orig_cols,
            rank,
            residual: 0.0,
            rank_deficient: false,
        })
    }

    /// Stored element count, `r (m + n - r)`.
    pub fn stored_params(&self) -> usize {
        self.basis.len() + self.coeff.len()
    }
}

/// Decomposition needs at least one non-basis row (column) and a basis that
/// can be independent: `1 <= r < m` and `r <= n` on the row axis, mirrored on
/// the column axis. Cost savings additionally need `r < min(m, n)`.
fn check_axis_rank(m: usize, n: usize, rank: usize, axis: Axis) -> Result<()> {
    let (along, across) = match axis {
        Axis::Row => (m, n),
        Axis::Column => (n, m),
    };
    if rank == 0 || rank >= along || rank > across {
        return Err(Error::arg(format!(
            "rank {rank} invalid for {axis:?}-axis decomposition of {m}x{n}"
        )));
    }
    Ok(())
}

fn check_rank(m: usize, n: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank >= m.min(n) {
        return Err(Error::arg(format!(
            "rank must satisfy 1 <= r < min(m, n); got r = {rank} for {m}x{n}"
        )));
    }
    Ok(())
}

/// Builds one candidate (`tag` fixed) without selection.
pub fn decompose_with_tag(w: &Tensor2D, rank: usize, axis: Axis, tag: BasisTag) -> Result<BdFactors> {
    let (m, n) = w.shape();
    check_axis_rank(m, n, rank, axis)?;
    let (basis, coeff, deficient) = match axis {
        Axis::Row => {
            let (basis, rest) = match tag {
                BasisTag::First => (w.slice_rows(0, rank)?, w.slice_rows(rank, m)?),
                BasisTag::Last => (w.slice_rows(m - rank, m)?, w.slice_rows(0, m - rank)?),
            };
            let sol = lstsq(&basis, &rest, SolveSide::SolveLeft)?;
            (basis, sol.coeff, sol.rank_deficient)
        }
        Axis::Column => {
            let (basis, rest) = match tag {
                BasisTag::First => (w.slice_cols(0, rank)?, w.slice_cols(rank, n)?),
                BasisTag::Last => (w.slice_cols(n - rank, n)?, w.slice_cols(0, n - rank)?),
            };
            let sol = lstsq(&basis, &rest, SolveSide::SolveRight)?;
            (basis, sol.coeff, sol.rank_deficient)
        }
    };
    let mut f = BdFactors::new(axis, tag, basis, coeff, m, n)?;
    f.rank_deficient = deficient;
    f.residual = reconstruct(&f)?.sub(w)?.frobenius_norm();
    Ok(f)
}

/// Both contiguous candidates, unselected: `(first, last)`.
pub fn decompose_both(w: &Tensor2D, rank: usize, axis: Axis) -> Result<(BdFactors, BdFactors)> {
    let first = decompose_with_tag(w, rank, axis, BasisTag::First)?;
    let last = decompose_with_tag(w, rank, axis, BasisTag::Last)?;
    Ok((first, last))
}

/// Residual-min decomposition.
pub fn decompose(w: &Tensor2D, rank: usize, axis: Axis) -> Result<BdFactors> {
    let (first, last) = decompose_both(w, rank, axis)?;
    Ok(if first.residual <= last.residual { first } else { last })
}

/// Rebuilds the `m x n` matrix from its factors.
pub fn reconstruct(f: &BdFactors) -> Result<Tensor2D> {
    let out = match (f.axis, f.tag) {
        (Axis::Row, BasisTag::First) => {
            Tensor2D::concat_rows(&[f.basis.clone(), f.coeff.matmul(&f.basis)?])?
        }
        (Axis::Row, BasisTag::Last) => {
            Tensor2D::concat_rows(&[f.coeff.matmul(&f.basis)?, f.basis.clone()])?
        }
        (Axis::Column, BasisTag::First) => {
            Tensor2D::concat_cols(&[f.basis.clone(), f.basis.matmul(&f.coeff)?])?
        }
        (Axis::Column, BasisTag::Last) => {
            Tensor2D::concat_cols(&[f.basis.matmul(&f.coeff)?, f.basis.clone()])?
        }
    };
    debug_assert_eq!(out.shape(), (f.orig_rows, f.orig_cols));
    Ok(out)
}

/// Closed-form storage and reconstruction costs for an `m x n` rank-`r` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub full_params: u64,
    pub lowrank_params: u64,
    pub bd_params: u64,
    pub lowrank_recon_flops: u64,
    pub bd_recon_flops: u64,
}

pub fn cost_report(m: usize, n: usize, rank: usize) -> Result<CostReport> {
    check_rank(m, n, rank)?;
    let (m, n, r) = (m as u64, n as u64, rank as u64);
    Ok(CostReport {
        full_params: m * n,
        lowrank_params: r * (m + n),
        bd_params: r * (m + n - r),
        lowrank_recon_flops: 2 * r * m * n,
        bd_recon_flops: 2 * r * (m - r) * n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{rand_gaussian, Precision, Rng};

    fn low_rank(m: usize, n: usize, r: usize, seed: u64, p: Precision) -> Tensor2D {
        let mut rng = Rng::new(seed);
        let u = rand_gaussian(&mut rng, m, r, Precision::P64).unwrap();
        let v = rand_gaussian(&mut rng, n, r, Precision::P64).unwrap();
        u.matmul(&v.transpose()).unwrap().cast(p)
    }

    #[test]
    fn exact_combination_picks_first() {
        let w = Tensor2D::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).unwrap();
        let f = decompose(&w, 2, Axis::Row).unwrap();
        assert_eq!(f.tag, BasisTag::First);
        assert_eq!(f.basis, Tensor2D::identity(2, Precision::P64));
        assert_eq!(f.coeff.to_f64_vec(), vec![1.0, 1.0]);
        assert_eq!(f.residual, 0.0);
    }

    #[test]
    fn rank_structure_forces_last() {
        let w = Tensor2D::from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let (first, last) = decompose_both(&w, 2, Axis::Row).unwrap();
        assert!(first.residual > 0.0);
        assert!(first.rank_deficient);
        assert_eq!(last.residual, 0.0);
        let f = decompose(&w, 2, Axis::Row).unwrap();
        assert_eq!(f.tag, BasisTag::Last);
    }

    #[test]
    fn symmetric_structure_gives_equal_residuals_and_first_wins() {
        // Rows mirror each other, so first-2 and last-2 are equally good.
        let w = Tensor2D::from_rows(&[
            &[1.0, 2.0, 3.0, 4.0],
            &[0.5, -1.0, 2.0, 1.0],
            &[1.5, 1.0, 5.0, 5.0],
            &[0.5, -1.0, 2.0, 1.0],
            &[1.0, 2.0, 3.0, 4.0],
        ])
        .unwrap();
        let (first, last) = decompose_both(&w, 2, Axis::Row).unwrap();
        assert!((first.residual - last.residual).abs() <= 1e-12);
        if first.residual == last.residual {
            assert_eq!(decompose(&w, 2, Axis::Row).unwrap().tag, BasisTag::First);
        }
    }

    #[test]
    fn reconstruct_examples() {
        let f = BdFactors::new(
            Axis::Row,
            BasisTag::First,
            Tensor2D::identity(2, Precision::P64),
            Tensor2D::from_rows(&[&[1.0, 1.0]]).unwrap(),
            3,
            2,
        )
        .unwrap();
        assert_eq!(
            reconstruct(&f).unwrap().to_f64_vec(),
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );

        let f = BdFactors::new(
            Axis::Column,
            BasisTag::First,
            Tensor2D::from_rows(&[&[2.0], &[4.0]]).unwrap(),
            Tensor2D::from_rows(&[&[3.0]]).unwrap(),
            2,
            2,
        )
        .unwrap();
        assert_eq!(reconstruct(&f).unwrap().to_f64_vec(), vec![2.0, 6.0, 4.0, 12.0]);

        let f = BdFactors::new(
            Axis::Row,
            BasisTag::First,
            Tensor2D::from_rows(&[&[1.0, 0.0, 2.0]]).unwrap(),
            Tensor2D::from_rows(&[&[3.0], &[-1.0]]).unwrap(),
            3,
            3,
        )
        .unwrap();
        assert_eq!(
            reconstruct(&f).unwrap().to_f64_vec(),
            vec![1.0, 0.0, 2.0, 3.0, 0.0, 6.0, -1.0, 0.0, -2.0]
        );
    }

    #[test]
    fn low_rank_round_trip_seed_42() {
        let w = low_rank(6, 8, 3, 42, Precision::P64);
        for axis in [Axis::Row, Axis::Column] {
            let f = decompose(&w, 3, axis).unwrap();
            let rel = reconstruct(&f).unwrap().sub(&w).unwrap().frobenius_norm() / w.frobenius_norm();
            assert!(rel <= 1e-12, "{axis:?}: {rel}");
        }
    }

    #[test]
    fn selection_is_min_of_both() {
        for seed in 0..10 {
            let w = low_rank(12, 9, 4, seed, Precision::P64);
            for axis in [Axis::Row, Axis::Column] {
                let (a, b) = decompose_both(&w, 4, axis).unwrap();
                let f = decompose(&w, 4, axis).unwrap();
                assert_eq!(f.residual, a.residual.min(b.residual));
            }
        }
    }

    #[test]
    fn rank_out_of_range() {
        let w = Tensor2D::zeros(4, 5, Precision::P64);
        assert!(decompose(&w, 0, Axis::Row).is_err());
        assert!(decompose(&w, 4, Axis::Row).is_err());
        assert!(decompose(&w, 5, Axis::Column).is_err());
        assert!(decompose(&w, 4, Axis::Column).is_ok());
        assert!(cost_report(4, 5, 4).is_err());
        assert!(cost_report(4, 5, 0).is_err());
    }

    #[test]
    fn p32_residual_not_below_p64() {
        for seed in 0..5 {
            let w64 = low_rank(32, 24, 6, seed, Precision::P64);
            let w32 = w64.cast(Precision::P32);
            for axis in [Axis::Row, Axis::Column] {
                let r64 = decompose(&w64, 6, axis).unwrap().residual;
                let r32 = decompose(&w32, 6, axis).unwrap().residual;
                assert!(r32 >= r64, "seed {seed} {axis:?}: {r32} < {r64}");
            }
        }
    }

    #[test]
    fn cost_examples() {
        let c = cost_report(4, 4, 2).unwrap();
        assert_eq!(
            c,
            CostReport {
                full_params: 16,
                lowrank_params: 16,
                bd_params: 12,
                lowrank_recon_flops: 64,
                bd_recon_flops: 32,
            }
        );
        let c = cost_report(512, 512, 128).unwrap();
        assert_eq!(c.bd_params, 114_688);
        assert_eq!(c.lowrank_params, 131_072);
        // Reduction r / (m + n) = 1/8.
        assert_eq!((c.lowrank_params - c.bd_params) * 8, c.lowrank_params);
    }

    #[test]
    fn stored_params_match_formula() {
        let w = low_rank(10, 7, 3, 1, Precision::P64);
        for axis in [Axis::Row, Axis::Column] {
            let f = decompose(&w, 3, axis).unwrap();
            assert_eq!(f.stored_params() as u64, cost_report(10, 7, 3).unwrap().bd_params);
        }
    }
}
