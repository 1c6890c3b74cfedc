use super::Tensor2D;

/// Singular values in descending order, by one-sided (Hestenes) Jacobi in f64.
///
/// Independent of the QR path in `lstsq`; used for rank checks and as a test oracle.
pub fn singular_values(a: &Tensor2D) -> Vec<f64> {
    // Orthogonalize the columns of whichever orientation has fewer of them.
    let t = if a.rows() >= a.cols() { a.transpose() } else { a.clone() };
    // Rows of `t` are the columns being rotated.
    let (ncols, len) = t.shape();
    let mut cols = t.to_f64_vec();
    const EPS: f64 = 1e-15;

    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..ncols {
            for q in p + 1..ncols {
                let (head, tail) = cols.split_at_mut(q * len);
                let cp = &mut head[p * len..(p + 1) * len];
                let cq = &mut tail[..len];
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for (x, y) in cp.iter().zip(cq.iter()) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xv, yv) = (*x, *y);
                    *x = c * xv - s * yv;
                    *y = s * xv + c * yv;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = cols
        .chunks_exact(len.max(1))
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{rand_gaussian, Precision, Rng};

    #[test]
    fn diagonal_and_orthogonal_cases() {
        let d = Tensor2D::from_rows(&[&[3.0, 0.0], &[0.0, -4.0]]).unwrap();
        let sv = singular_values(&d);
        assert!((sv[0] - 4.0).abs() < 1e-14 && (sv[1] - 3.0).abs() < 1e-14);
        let r = Tensor2D::from_rows(&[&[0.6, -0.8], &[0.8, 0.6]]).unwrap();
        for s in singular_values(&r) {
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn frobenius_identity_and_rank() {
        let mut rng = Rng::new(3);
        let u = rand_gaussian(&mut rng, 12, 4, Precision::P64).unwrap();
        let v = rand_gaussian(&mut rng, 4, 9, Precision::P64).unwrap();
        let w = u.matmul(&v).unwrap();
        let sv = singular_values(&w);
        assert_eq!(sv.len(), 9);
        let ss: f64 = sv.iter().map(|s| s * s).sum();
        assert!((ss.sqrt() - w.frobenius_norm()).abs() < 1e-10 * w.frobenius_norm());
        let rank = sv.iter().filter(|&&s| s > 1e-10 * sv[0]).count();
        assert_eq!(rank, 4);
    }
}
