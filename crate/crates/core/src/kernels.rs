//! Dense kernels behind the differentiable ops.
//!
//! Summation order is part of the contract here. Every output element of
//! [`matmul`] is accumulated from zero over the inner index in ascending
//! order, no matter how rows and columns are tiled. A product computed one
//! row at a time is therefore bit-identical to the same rows computed in one
//! batched call, which is what lets the two schedulers agree exactly.
//! [`accumulate_at_b`] folds rows into the gradient slot in descending row
//! order, matching a reverse sweep over per-step products.

use crate::tensor::Scalar;

const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let m_full = m - m % MR;
    let n_full = n - n % NR;

    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[F::ZERO; NR]; MR];
            for kk in 0..k {
                let brow: &[F; NR] = b[kk * n + j0..kk * n + j0 + NR].try_into().unwrap();
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + kk];
                    for c in 0..NR {
                        acc_row[c] += av * brow[c];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_row);
            }
        }
        matmul_edge(a, b, out, i0..i0 + MR, n_full..n, k, n);
    }
    for i in m_full..m {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [F::ZERO; NR];
            let arow = &a[i * k..(i + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                let brow: &[F; NR] = b[kk * n + j0..kk * n + j0 + NR].try_into().unwrap();
                for c in 0..NR {
                    acc[c] += av * brow[c];
                }
            }
            out[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
        }
        matmul_edge(a, b, out, i..i + 1, n_full..n, k, n);
    }
}

fn matmul_edge<F: Scalar>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        for j in cols.clone() {
            let mut acc = F::ZERO;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// `slot[k×n] += Σ_i a[i,:]ᵀ · g[i,:]`, folding rows `i = m-1 … 0` into each
/// slot element in that order.
pub fn accumulate_at_b<F: Scalar>(a: &[F], g: &[F], slot: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(slot.len(), k * n);
    let k_full = k - k % MR;
    let n_full = n - n % NR;
    for r0 in (0..k_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[F::ZERO; NR]; MR];
            for (r, acc_row) in acc.iter_mut().enumerate() {
                acc_row.copy_from_slice(&slot[(r0 + r) * n + j0..(r0 + r) * n + j0 + NR]);
            }
            for i in (0..m).rev() {
                let grow: &[F; NR] = g[i * n + j0..i * n + j0 + NR].try_into().unwrap();
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[i * k + r0 + r];
                    for c in 0..NR {
                        acc_row[c] += av * grow[c];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                slot[(r0 + r) * n + j0..(r0 + r) * n + j0 + NR].copy_from_slice(acc_row);
            }
        }
        accumulate_edge(a, g, slot, r0..r0 + MR, n_full..n, m, k, n);
    }
    accumulate_edge(a, g, slot, k_full..k, 0..n, m, k, n);
}

#[allow(clippy::too_many_arguments)]
fn accumulate_edge<F: Scalar>(
    a: &[F],
    g: &[F],
    slot: &mut [F],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    m: usize,
    k: usize,
    n: usize,
) {
    for r in rows {
        for j in cols.clone() {
            let mut acc = slot[r * n + j];
            for i in (0..m).rev() {
                acc += a[i * k + r] * g[i * n + j];
            }
            slot[r * n + j] = acc;
        }
    }
}

pub fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of one 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent along one spatial axis, or `None` if the kernel does not
    /// fit inside the padded input.
    pub fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if k > padded || stride == 0 {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    }

    pub fn h_out(&self) -> usize {
        Self::out_extent(self.h, self.k, self.stride, self.pad).unwrap()
    }

    pub fn w_out(&self) -> usize {
        Self::out_extent(self.w, self.k, self.stride, self.pad).unwrap()
    }

    /// Rows of the patch matrix: one per (input channel, kernel row, kernel col).
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out() * self.w_out()
    }
}

/// Unfolds one `[c_in×h×w]` image into a `[patch_len × (h_out·w_out)]` matrix.
pub fn im2col<F: Scalar>(img: &[F], g: &ConvGeom) -> Vec<F> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let p = ho * wo;
    let mut col = vec![F::ZERO; g.patch_len() * p];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                for oy in 0..ho {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x < 0 || x >= g.w as isize {
                            continue;
                        }
                        col[row * p + oy * wo + ox] =
                            img[(c * g.h + y as usize) * g.w + x as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch-matrix gradient back into an image gradient.
pub fn col2im_add<F: Scalar>(col: &[F], g: &ConvGeom, img_grad: &mut [F]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let p = ho * wo;
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                for oy in 0..ho {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x < 0 || x >= g.w as isize {
                            continue;
                        }
                        img_grad[(c * g.h + y as usize) * g.w + x as usize] +=
                            col[row * p + oy * wo + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
            })
            .collect()
    }

    #[test]
    fn tiled_matmul_is_bit_identical_to_naive() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 8, 8), (9, 13, 17), (16, 3, 24)] {
            let a = pseudo(m * k, 1);
            let b = pseudo(k * n, 2);
            let mut out = vec![0.0; m * n];
            matmul(&a, &b, &mut out, m, k, n);
            assert_eq!(out, naive(&a, &b, m, k, n), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn rows_computed_separately_match_batch() {
        let (m, k, n) = (11, 19, 21);
        let a = pseudo(m * k, 3);
        let b = pseudo(k * n, 4);
        let mut batch = vec![0.0; m * n];
        matmul(&a, &b, &mut batch, m, k, n);
        for i in 0..m {
            let mut row = vec![0.0; n];
            matmul(&a[i * k..(i + 1) * k], &b, &mut row, 1, k, n);
            assert_eq!(&batch[i * n..(i + 1) * n], &row[..]);
        }
    }

    #[test]
    fn accumulate_matches_reverse_row_fold() {
        let (m, k, n) = (7, 9, 10);
        let a = pseudo(m * k, 5);
        let g = pseudo(m * n, 6);
        let mut slot = pseudo(k * n, 7);
        let mut expect = slot.clone();
        for i in (0..m).rev() {
            for r in 0..k {
                for j in 0..n {
                    expect[r * n + j] += a[i * k + r] * g[i * n + j];
                }
            }
        }
        accumulate_at_b(&a, &g, &mut slot, m, k, n);
        assert_eq!(slot, expect);
    }

    #[test]
    fn conv_extent() {
        assert_eq!(ConvGeom::out_extent(17, 7, 2, 0), Some(6));
        assert_eq!(ConvGeom::out_extent(3, 2, 1, 0), Some(2));
        assert_eq!(ConvGeom::out_extent(2, 3, 1, 0), None);
        assert_eq!(ConvGeom::out_extent(2, 3, 1, 1), Some(2));
    }
}
