//! Least squares through Householder QR of the basis.
//!
//! Both sides reduce to a tall problem `A X ≈ Y` with `A` of shape `m x r`,
//! `m >= r`. `A` is kept column-major so reflector updates stream contiguous
//! memory; `Y` stays row-major and is updated once per panel of reflectors
//! in compact WY form, so that work goes through the blocked GEMM.

use super::kernel::gemm;
use super::{Data, Element, Precision, Tensor2D};
use crate::error::{Error, Result};

/// Which unknown the basis multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveSide {
    /// `C · basis ≈ targets`; basis `r x n`, targets `k x n`, result `k x r`.
    SolveLeft,
    /// `basis · C ≈ targets`; basis `m x r`, targets `m x k`, result `r x k`.
    SolveRight,
}

#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub coeff: Tensor2D,
    /// Set when `min |R_jj| < tol * max |R_jj|` (tol = 1e-10 for P64, 1e-6 for P32).
    pub rank_deficient: bool,
    /// `min |R_jj| / max |R_jj|`; 0 for an all-zero basis.
    pub diag_ratio: f64,
}

pub(crate) fn rank_tolerance(p: Precision) -> f64 {
    match p {
        Precision::P64 => 1e-10,
        Precision::P32 => 1e-6,
    }
}

pub fn lstsq(basis: &Tensor2D, targets: &Tensor2D, side: SolveSide) -> Result<LstsqSolution> {
    if basis.precision() != targets.precision() {
        return Err(Error::Precision {
            op: "lstsq",
            left: basis.precision(),
            right: targets.precision(),
        });
    }
    // Tall system: a_colmajor is m x r stored by columns, y is m x k row-major.
    let (m, r, k, a_colmajor, y) = match side {
        SolveSide::SolveLeft => {
            let (r, n) = basis.shape();
            if targets.cols() != n {
                return Err(Error::dim(
                    "lstsq",
                    format!("basis {r}x{n} vs targets {:?}", targets.shape()),
                ));
            }
            (n, r, targets.rows(), basis.clone(), targets.transpose())
        }
        SolveSide::SolveRight => {
            let (m, r) = basis.shape();
            if targets.rows() != m {
                return Err(Error::dim(
                    "lstsq",
                    format!("basis {m}x{r} vs targets {:?}", targets.shape()),
                ));
            }
            (m, r, targets.cols(), basis.transpose(), targets.clone())
        }
    };
    if r == 0 || m < r {
        return Err(Error::dim(
            "lstsq",
            format!("basis needs 1 <= rank <= length, got rank {r}, length {m}"),
        ));
    }
    let tol = rank_tolerance(basis.precision());
    let mut flags = (false, 0.0);
    let data = match (a_colmajor.data(), y.data()) {
        (Data::F32(a), Data::F32(b)) => Data::F32(solve(a, b, m, r, k, tol, &mut flags)),
        (Data::F64(a), Data::F64(b)) => Data::F64(solve(a, b, m, r, k, tol, &mut flags)),
        _ => unreachable!("precision checked above"),
    };
    let x = Tensor2D::from_parts_unchecked(r, k, data);
    let coeff = match side {
        SolveSide::SolveLeft => x.transpose(),
        SolveSide::SolveRight => x,
    };
    Ok(LstsqSolution {
        coeff,
        rank_deficient: flags.0,
        diag_ratio: flags.1,
    })
}

/// Reflectors accumulated before each blocked update of the right-hand side.
const PANEL: usize = 32;

fn solve<T: Element>(
    a_cols: &[T],
    y: &[T],
    m: usize,
    r: usize,
    k: usize,
    tol: f64,
    flags: &mut (bool, f64),
) -> Vec<T> {
    let mut a = a_cols.to_vec();
    let mut y = y.to_vec();
    let mut diag = vec![T::zero(); r];
    let two = T::from_f64(2.0);

    let mut j0 = 0;
    while j0 < r {
        let nb = PANEL.min(r - j0);
        let len = m - j0;
        // vt: the panel's reflectors as rows, zero above their pivot.
        let mut vt = vec![T::zero(); nb * len];
        let mut betas = vec![T::zero(); nb];

        for i in 0..nb {
            let j = j0 + i;
            let col = &a[j * m..(j + 1) * m];
            let norm = col[j..].iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
            if norm == T::zero() {
                continue;
            }
            let x0 = col[j];
            let alpha = if x0 >= T::zero() { -norm } else { norm };
            let v = &mut vt[i * len + i..(i + 1) * len];
            v.copy_from_slice(&col[j..]);
            v[0] = x0 - alpha;
            let vtv = v.iter().fold(T::zero(), |s, &x| s + x * x);
            diag[j] = alpha;
            if vtv == T::zero() {
                v.fill(T::zero());
                continue;
            }
            let beta = two / vtv;
            betas[i] = beta;
            for l in j + 1..r {
                let c = &mut a[l * m + j..(l + 1) * m];
                let s = beta * v.iter().zip(c.iter()).fold(T::zero(), |s, (&vi, &ci)| s + vi * ci);
                for (ci, &vi) in c.iter_mut().zip(v.iter()) {
                    *ci = *ci - s * vi;
                }
            }
        }

        // H_1 ... H_nb = I - V T Vᵀ with T upper triangular.
        let mut t = vec![T::zero(); nb * nb];
        for i in 0..nb {
            t[i * nb + i] = betas[i];
            if betas[i] == T::zero() {
                continue;
            }
            let vi = &vt[i * len..(i + 1) * len];
            let dots: Vec<T> = (0..i)
                .map(|p| {
                    let vp = &vt[p * len..(p + 1) * len];
                    vp.iter().zip(vi).fold(T::zero(), |s, (&x, &z)| s + x * z)
                })
                .collect();
            for row in 0..i {
                let s = (row..i).fold(T::zero(), |s, p| s + t[row * nb + p] * dots[p]);
                t[row * nb + i] = T::zero() - betas[i] * s;
            }
        }

        // Y[j0..] -= V (Tᵀ (Vᵀ Y[j0..])).
        let ysub = &mut y[j0 * k..];
        let w = gemm(nb, len, k, &vt, len, 0, ysub, None);
        let mut tt = vec![T::zero(); nb * nb];
        for row in 0..nb {
            for col in 0..nb {
                tt[row * nb + col] = t[col * nb + row];
            }
        }
        let w2 = gemm(nb, nb, k, &tt, nb, 0, &w, None);
        let mut v = vec![T::zero(); len * nb];
        for i in 0..nb {
            for row in 0..len {
                v[row * nb + i] = vt[i * len + row];
            }
        }
        let u = gemm(len, nb, k, &v, nb, 0, &w2, None);
        for (yc, &uc) in ysub.iter_mut().zip(&u) {
            *yc = *yc - uc;
        }
        j0 += nb;
    }

    let max_d = diag.iter().fold(0.0f64, |mx, d| mx.max(Element::to_f64(*d).abs()));
    let min_d = diag.iter().fold(f64::INFINITY, |mn, d| mn.min(Element::to_f64(*d).abs()));
    let ratio = if max_d > 0.0 { min_d / max_d } else { 0.0 };
    *flags = (ratio < tol, ratio);
    let cutoff = tol * max_d;

    // Back substitution on the leading r rows of Q^T y. Pivots under the cutoff
    // contribute a zero row (basic solution) so the output stays finite.
    let mut x = vec![T::zero(); r * k];
    for j in (0..r).rev() {
        let d = diag[j];
        if d.to_f64().abs() <= cutoff || d == T::zero() {
            continue;
        }
        let mut acc: Vec<T> = y[j * k..(j + 1) * k].to_vec();
        for l in j + 1..r {
            let rjl = a[l * m + j];
            let xl = &x[l * k..(l + 1) * k];
            for (s, &v) in acc.iter_mut().zip(xl) {
                *s = *s - rjl * v;
            }
        }
        for (dst, s) in x[j * k..(j + 1) * k].iter_mut().zip(acc) {
            *dst = s / d;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{rand_gaussian, Rng};

    #[test]
    fn trivial_left_and_right() {
        let i2 = Tensor2D::identity(2, Precision::P64);
        let t = Tensor2D::from_rows(&[&[5.0, 7.0]]).unwrap();
        let s = lstsq(&i2, &t, SolveSide::SolveLeft).unwrap();
        assert_eq!(s.coeff.to_f64_vec(), vec![5.0, 7.0]);
        assert!(!s.rank_deficient);

        let b = Tensor2D::from_rows(&[&[1.0], &[0.0]]).unwrap();
        let t = Tensor2D::from_rows(&[&[3.0], &[0.0]]).unwrap();
        let s = lstsq(&b, &t, SolveSide::SolveRight).unwrap();
        assert_eq!(s.coeff.shape(), (1, 1));
        assert!((s.coeff.get(0, 0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn recovers_constructed_coefficients() {
        let mut rng = Rng::new(99);
        for _ in 0..10 {
            let basis = rand_gaussian(&mut rng, 6, 20, Precision::P64).unwrap();
            let c0 = rand_gaussian(&mut rng, 9, 6, Precision::P64).unwrap();
            let t = c0.matmul(&basis).unwrap();
            let s = lstsq(&basis, &t, SolveSide::SolveLeft).unwrap();
            assert!(s.coeff.max_abs_diff(&c0).unwrap() <= 1e-10);

            let basis_r = basis.transpose();
            let c1 = rand_gaussian(&mut rng, 6, 4, Precision::P64).unwrap();
            let t = basis_r.matmul(&c1).unwrap();
            let s = lstsq(&basis_r, &t, SolveSide::SolveRight).unwrap();
            assert!(s.coeff.max_abs_diff(&c1).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn flags_rank_deficiency_and_stays_finite() {
        let b = Tensor2D::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]).unwrap();
        let t = Tensor2D::from_rows(&[&[1.0, 1.0, 1.0]]).unwrap();
        let s = lstsq(&b, &t, SolveSide::SolveLeft).unwrap();
        assert!(s.rank_deficient);
        assert!(s.coeff.to_f64_vec().iter().all(|x| x.is_finite()));

        let z = Tensor2D::zeros(3, 2, Precision::P32);
        let t = Tensor2D::zeros(3, 1, Precision::P32);
        let s = lstsq(&z, &t, SolveSide::SolveRight).unwrap();
        assert!(s.rank_deficient);
        assert_eq!(s.diag_ratio, 0.0);
    }

    #[test]
    fn shape_and_precision_errors() {
        let b = Tensor2D::identity(3, Precision::P64);
        let t = Tensor2D::zeros(2, 2, Precision::P64);
        assert!(lstsq(&b, &t, SolveSide::SolveLeft).is_err());
        let t32 = Tensor2D::zeros(1, 3, Precision::P32);
        assert!(matches!(
            lstsq(&b, &t32, SolveSide::SolveLeft),
            Err(Error::Precision { .. })
        ));
        // Underdetermined: more unknown coefficients than equations.
        let wide = Tensor2D::zeros(2, 3, Precision::P64);
        let t = Tensor2D::zeros(2, 1, Precision::P64);
        assert!(lstsq(&wide, &t, SolveSide::SolveRight).is_err());
    }
}
