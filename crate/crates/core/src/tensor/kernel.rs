//! Blocked GEMM with a register-tiled micro-kernel.
//!
//! Invariant: every output element is `0 + a[i,0]*b[0,j] + a[i,1]*b[1,j] + ...`
//! accumulated strictly in `p` order, then (optionally) plus one addend. Tiling
//! and threading only change which elements are computed together, never the
//! order of any single reduction.

use rayon::prelude::*;

use super::{Element, Precision};

/// Columns of `b` packed per tile; a multiple of every NR.
const NC: usize = 256;
/// Output rows handed to one task; a multiple of every MR.
const MC: usize = 96;

/// Per-element addend `src[i * ld + offset + (j % width)]`, applied after the
/// reduction. Used by the fused repeat-plus-product projection.
#[derive(Clone, Copy)]
pub(crate) struct Addend<'a, T> {
    pub src: &'a [T],
    pub ld: usize,
    pub offset: usize,
    pub width: usize,
}

/// `out[m x n] = a[:, a_off..a_off+k] * b[k x n] (+ addend)`.
///
/// `a` is row-major with leading dimension `lda`; `b` is dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    a_off: usize,
    b: &[T],
    addend: Option<Addend<'_, T>>,
) -> Vec<T> {
    // Register tiles (rows x lanes) tuned per element width for 512-bit vectors.
    match T::PRECISION {
        Precision::P32 => gemm_tiled::<T, 12, 16>(m, k, n, a, lda, a_off, b, addend),
        Precision::P64 => gemm_tiled::<T, 4, 32>(m, k, n, a, lda, a_off, b, addend),
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_tiled<T: Element, const MR: usize, const NR: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    a_off: usize,
    b: &[T],
    addend: Option<Addend<'_, T>>,
) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if m == 0 || n == 0 {
        return out;
    }
    let simd = simd::usable::<T, NR>();
    out.par_chunks_mut(MC * n)
        .enumerate()
        .for_each(|(chunk, block)| {
            let row0 = chunk * MC;
            let rows = block.len() / n;
            let mut panel = vec![T::zero(); k * NC];
            let mut j0 = 0;
            while j0 < n {
                let nc = NC.min(n - j0);
                pack_panel::<T, NR>(b, k, n, j0, nc, &mut panel);
                let mut i = 0;
                while i < rows {
                    let mr = MR.min(rows - i);
                    if mr == MR {
                        let arows: [&[T]; MR] = std::array::from_fn(|r| {
                            let s = (row0 + i + r) * lda + a_off;
                            &a[s..s + k]
                        });
                        tile::<T, MR, NR>(&arows, &panel, k, nc, &mut block[i * n..], n, j0, row0 + i, addend, simd);
                    } else {
                        for r in 0..mr {
                            let s = (row0 + i + r) * lda + a_off;
                            let arow = [&a[s..s + k]];
                            tile::<T, 1, NR>(&arow, &panel, k, nc, &mut block[(i + r) * n..], n, j0, row0 + i + r, addend, simd);
                        }
                    }
                    i += mr;
                }
                j0 += nc;
            }
        });
    out
}

/// Copies `b[0..k, j0..j0+nc]` into NR-wide column panels, zero padded.
fn pack_panel<T: Element, const NR: usize>(b: &[T], k: usize, n: usize, j0: usize, nc: usize, panel: &mut [T]) {
    let panels = nc.div_ceil(NR);
    for jp in 0..panels {
        let c0 = j0 + jp * NR;
        let w = NR.min(j0 + nc - c0);
        let dst = &mut panel[jp * k * NR..(jp + 1) * k * NR];
        for p in 0..k {
            let row = &b[p * n + c0..p * n + c0 + w];
            let d = &mut dst[p * NR..p * NR + NR];
            d[..w].copy_from_slice(row);
            d[w..].fill(T::zero());
        }
    }
}

/// Computes R rows of one packed column tile and stores them.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile<T: Element, const R: usize, const NR: usize>(
    arows: &[&[T]; R],
    panel: &[T],
    k: usize,
    nc: usize,
    out: &mut [T],
    n: usize,
    j0: usize,
    global_row: usize,
    addend: Option<Addend<'_, T>>,
    simd: bool,
) {
    let panels = nc.div_ceil(NR);
    for jp in 0..panels {
        let pan = &panel[jp * k * NR..(jp + 1) * k * NR];
        let mut acc = [[T::zero(); NR]; R];
        if simd {
            // SAFETY: `usable` verified the CPU feature and that T/NR match a
            // vector kernel.
            unsafe { simd::micro::<T, R, NR>(arows, pan, k, &mut acc) };
        } else {
            micro::<T, R, NR>(arows, pan, k, &mut acc);
        }
        let c0 = j0 + jp * NR;
        let w = NR.min(j0 + nc - c0);
        for (r, acc_row) in acc.iter().enumerate() {
            let dst = &mut out[r * n + c0..r * n + c0 + w];
            match addend {
                None => dst.copy_from_slice(&acc_row[..w]),
                Some(ad) => {
                    let base = (global_row + r) * ad.ld + ad.offset;
                    let src = &ad.src[base..base + ad.width];
                    // Walk the repeated row in contiguous segments.
                    let mut pos = c0 % ad.width;
                    let mut c = 0;
                    while c < w {
                        let seg = (w - c).min(ad.width - pos);
                        for ((o, &v), &s) in dst[c..c + seg]
                            .iter_mut()
                            .zip(&acc_row[c..c + seg])
                            .zip(&src[pos..pos + seg])
                        {
                            *o = v + s;
                        }
                        c += seg;
                        pos = 0;
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn micro<T: Element, const R: usize, const NR: usize>(
    arows: &[&[T]; R],
    panel: &[T],
    k: usize,
    acc: &mut [[T; NR]; R],
) {
    for p in 0..k {
        let b: &[T; NR] = panel[p * NR..p * NR + NR].try_into().unwrap();
        for r in 0..R {
            let av = arows[r][p];
            for c in 0..NR {
                acc[r][c] = acc[r][c] + av * b[c];
            }
        }
    }
}

/// AVX-512 versions of [`micro`]: one vector multiply then one vector add per
/// step, never fused, so each lane performs exactly the scalar sequence.
#[cfg(target_arch = "x86_64")]
mod simd {
    use std::any::TypeId;
    use std::arch::x86_64::*;

    use super::Element;

    // Full-mask loads: plain `loadu` goes through `read_unaligned`, which debug
    // builds turn into a checked copy through the stack.
    const ALL8: __mmask8 = 0xff;
    const ALL16: __mmask16 = 0xffff;

    pub(super) fn usable<T: Element, const NR: usize>() -> bool {
        let shape_ok = (TypeId::of::<T>() == TypeId::of::<f32>() && NR == 16)
            || (TypeId::of::<T>() == TypeId::of::<f64>() && NR == 32);
        shape_ok && std::arch::is_x86_feature_detected!("avx512f")
    }

    /// # Safety
    /// Requires `usable::<T, NR>()`.
    #[inline(always)]
    pub(super) unsafe fn micro<T: Element, const R: usize, const NR: usize>(
        arows: &[&[T]; R],
        panel: &[T],
        k: usize,
        acc: &mut [[T; NR]; R],
    ) {
        if TypeId::of::<T>() == TypeId::of::<f32>() {
            let arows = &*(arows as *const [&[T]; R] as *const [&[f32]; R]);
            let acc = &mut *(acc as *mut [[T; NR]; R] as *mut [[f32; 16]; R]);
            micro_f32::<R>(arows, &*(panel as *const [T] as *const [f32]), k, acc);
        } else {
            let arows = &*(arows as *const [&[T]; R] as *const [&[f64]; R]);
            let acc = &mut *(acc as *mut [[T; NR]; R] as *mut [[f64; 32]; R]);
            micro_f64::<R>(arows, &*(panel as *const [T] as *const [f64]), k, acc);
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn micro_f32<const R: usize>(
        arows: &[&[f32]; R],
        panel: &[f32],
        k: usize,
        acc: &mut [[f32; 16]; R],
    ) {
        let arows = arows.map(|row| &row[..k]);
        let mut c = [_mm512_setzero_ps(); R];
        for (p, b) in panel[..k * 16].chunks_exact(16).enumerate() {
            let b = _mm512_maskz_loadu_ps(ALL16, b.as_ptr());
            for r in 0..R {
                let a = _mm512_set1_ps(arows[r][p]);
                c[r] = _mm512_add_ps(c[r], _mm512_mul_ps(a, b));
            }
        }
        for r in 0..R {
            _mm512_storeu_ps(acc[r].as_mut_ptr(), c[r]);
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn micro_f64<const R: usize>(
        arows: &[&[f64]; R],
        panel: &[f64],
        k: usize,
        acc: &mut [[f64; 32]; R],
    ) {
        let arows = arows.map(|row| &row[..k]);
        let mut c = [[_mm512_setzero_pd(); 4]; R];
        for (p, b) in panel[..k * 32].chunks_exact(32).enumerate() {
            let bv = [
                _mm512_maskz_loadu_pd(ALL8, b.as_ptr()),
                _mm512_maskz_loadu_pd(ALL8, b[8..].as_ptr()),
                _mm512_maskz_loadu_pd(ALL8, b[16..].as_ptr()),
                _mm512_maskz_loadu_pd(ALL8, b[24..].as_ptr()),
            ];
            for r in 0..R {
                let a = _mm512_set1_pd(arows[r][p]);
                for v in 0..4 {
                    c[r][v] = _mm512_add_pd(c[r][v], _mm512_mul_pd(a, bv[v]));
                }
            }
        }
        for r in 0..R {
            for v in 0..4 {
                _mm512_storeu_pd(acc[r][8 * v..].as_mut_ptr(), c[r][v]);
            }
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod simd {
    use super::Element;

    pub(super) fn usable<T: Element, const NR: usize>() -> bool {
        false
    }

    pub(super) unsafe fn micro<T: Element, const R: usize, const NR: usize>(
        arows: &[&[T]; R],
        panel: &[T],
        k: usize,
        acc: &mut [[T; NR]; R],
    ) {
        super::micro::<T, R, NR>(arows, panel, k, acc)
    }
}
