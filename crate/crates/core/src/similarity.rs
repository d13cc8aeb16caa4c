//! Dot-product kernels shared by the clustering code.
//!
//! Every parallel routine here splits work into fixed-size blocks that do not
//! depend on the worker count, so results are bit-identical for any pool size.

use rayon::prelude::*;

/// Query rows handled per GEMM call.
const QUERY_BLOCK: usize = 64;

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let x = &a[8 * k..8 * k + 8];
        let y = &b[8 * k..8 * k + 8];
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for k in 8 * chunks..a.len() {
        tail += a[k] * b[k];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// `out[m × c] = queries[m × d] · base[c × d]ᵀ`.
pub fn gemm_abt(queries: &[f32], base: &[f32], d: usize, out: &mut [f32]) {
    let m = queries.len() / d;
    let c = base.len() / d;
    assert_eq!(out.len(), m * c);
    if m == 0 || c == 0 {
        return;
    }
    // SAFETY: slices are sized m×d, c×d and m×c as asserted above, and the
    // strides describe exactly those row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            d,
            c,
            1.0,
            queries.as_ptr(),
            d as isize,
            1,
            base.as_ptr(),
            1,
            d as isize,
            0.0,
            out.as_mut_ptr(),
            c as isize,
            1,
        );
    }
}

/// For each query row, the base row with the largest dot product, skipping
/// `exclude[q]`. Ties go to the lowest base index. `None` when nothing is left
/// to choose from.
pub fn nearest_by_dot(
    queries: &[f32],
    base: &[f32],
    d: usize,
    exclude: &[Option<usize>],
) -> Vec<Option<(usize, f32)>> {
    let m = queries.len() / d;
    let c = base.len() / d;
    assert_eq!(exclude.len(), m);
    queries
        .par_chunks(QUERY_BLOCK * d)
        .zip(exclude.par_chunks(QUERY_BLOCK))
        .flat_map_iter(|(block, excl)| {
            let rows = block.len() / d;
            let mut sims = vec![0f32; rows * c];
            gemm_abt(block, base, d, &mut sims);
            (0..rows)
                .map(|r| argmax_excluding(&sims[r * c..(r + 1) * c], excl[r]))
                .collect::<Vec<_>>()
        })
        .collect()
}

#[inline]
fn argmax_excluding(row: &[f32], skip: Option<usize>) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for (j, &s) in row.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((j, s)),
        }
    }
    best
}
