//! Batch pairwise dynamic time warping with the slope-constrained symmetric
//! step pattern (P = 2):
//!
//! ```text
//! g(i,j) = min( g(i-2,j-3) + 2 d(i-1,j-2) + 2 d(i,j-1) + d(i,j),
//!               g(i-1,j-1) + 2 d(i,j),
//!               g(i-3,j-2) + 2 d(i-2,j-1) + 2 d(i-1,j) + d(i,j) )
//! ```
//!
//! with g(1,1) = 2 d(1,1), pairwise L2 distances, and the final cost
//! normalized by N + M. Pairs with no feasible path cost +infinity.
//!
//! Inputs are dense row-major 32-bit float matrices; costs come back as
//! 64-bit floats with all accumulation done in f64. The recurrence reaches
//! back at most three rows, so the DP keeps three distance rows and four
//! cost rows instead of full tables. The kernel is stateless and reentrant;
//! batch results do not depend on the number of worker threads.

use rayon::prelude::*;

/// Alignment cost between two sequences of `dim`-dimensional frames.
///
/// `a` and `b` are row-major `(len * dim)` slices. Returns +infinity when
/// the slope constraint admits no warping path.
pub fn dtw_cost(a: &[f32], b: &[f32], dim: usize) -> f64 {
    assert!(dim > 0, "dim must be positive");
    assert!(a.len() % dim == 0 && b.len() % dim == 0, "ragged input");
    let n = a.len() / dim;
    let m = b.len() / dim;
    assert!(n > 0 && m > 0, "empty sequence");
    if n > 2 * m || m > 2 * n {
        return f64::INFINITY;
    }

    const INF: f64 = f64::INFINITY;
    let width = m + 3; // columns 1..=m live at j + 2; cols 0..3 are sentinels
    let mut d_rows = vec![vec![INF; width]; 3]; // rows i, i-1, i-2 keyed i % 3
    let mut g_rows = vec![vec![INF; width]; 4]; // rows i-1..i-3 keyed i % 4

    for i in 1..=n {
        let av = &a[(i - 1) * dim..i * dim];
        {
            let row = &mut d_rows[i % 3];
            for j in 1..=m {
                let bv = &b[(j - 1) * dim..j * dim];
                let mut acc = 0.0f64;
                for k in 0..dim {
                    let diff = av[k] as f64 - bv[k] as f64;
                    acc += diff * diff;
                }
                row[j + 2] = acc.sqrt();
            }
        }
        let (d_cur, d_m1, d_m2) = (
            d_rows[i % 3].clone(),
            d_rows[(i + 2) % 3].clone(),
            d_rows[(i + 1) % 3].clone(),
        );
        let g_m1 = g_rows[(i + 3) % 4].clone();
        let g_m2 = g_rows[(i + 2) % 4].clone();
        let g_m3 = g_rows[(i + 1) % 4].clone();
        let out = &mut g_rows[i % 4];
        for j in 1..=m {
            let c = j + 2;
            if i == 1 && j == 1 {
                out[c] = 2.0 * d_cur[c];
                continue;
            }
            let b1 = g_m2[c - 3] + 2.0 * d_m1[c - 2] + 2.0 * d_cur[c - 1] + d_cur[c];
            let b2 = g_m1[c - 1] + 2.0 * d_cur[c];
            let b3 = g_m3[c - 2] + 2.0 * d_m2[c - 1] + 2.0 * d_m1[c] + d_cur[c];
            out[c] = b1.min(b2).min(b3);
        }
    }
    g_rows[n % 4][m + 2] / (n + m) as f64
}

/// All-pairs costs between `queries` and `index`, parallel over pairs.
pub fn batch_pairwise(
    queries: &[&[f32]],
    index: &[&[f32]],
    dim: usize,
) -> Vec<f64> {
    let ni = index.len();
    let mut out = vec![0.0f64; queries.len() * ni];
    out.par_iter_mut().enumerate().for_each(|(cell, slot)| {
        let q = queries[cell / ni];
        let ix = index[cell % ni];
        *slot = dtw_cost(q, ix, dim);
    });
    out
}

fn split_sequences<'d>(data: &'d [f32], lens: &[u64], dim: usize) -> Option<Vec<&'d [f32]>> {
    let mut out = Vec::with_capacity(lens.len());
    let mut offset = 0usize;
    for &len in lens {
        let count = (len as usize).checked_mul(dim)?;
        let end = offset.checked_add(count)?;
        if end > data.len() || len == 0 {
            return None;
        }
        out.push(&data[offset..end]);
        offset = end;
    }
    if offset == data.len() {
        Some(out)
    } else {
        None
    }
}

/// C ABI: single-pair cost. Returns +infinity for infeasible pairs and NaN
/// on malformed arguments.
///
/// # Safety
/// `a` must point to `n * dim` floats and `b` to `m * dim` floats.
#[no_mangle]
pub unsafe extern "C" fn vpd_dtw_cost(
    a: *const f32,
    n: u64,
    b: *const f32,
    m: u64,
    dim: u64,
) -> f64 {
    if a.is_null() || b.is_null() || n == 0 || m == 0 || dim == 0 {
        return f64::NAN;
    }
    let av = std::slice::from_raw_parts(a, (n * dim) as usize);
    let bv = std::slice::from_raw_parts(b, (m * dim) as usize);
    dtw_cost(av, bv, dim as usize)
}

/// C ABI: all-pairs cost matrix, row-major `(nq x ni)` into `out`.
///
/// Sequence data arrives concatenated row-major with per-sequence frame
/// counts. Returns 0 on success, -1 on malformed arguments.
///
/// # Safety
/// Data pointers must cover the sums promised by the length arrays and
/// `out` must hold `nq * ni` doubles.
#[no_mangle]
pub unsafe extern "C" fn vpd_batch_pairwise(
    q_data: *const f32,
    q_lens: *const u64,
    nq: u64,
    i_data: *const f32,
    i_lens: *const u64,
    ni: u64,
    dim: u64,
    out: *mut f64,
) -> i32 {
    if q_data.is_null() || q_lens.is_null() || i_data.is_null() || i_lens.is_null()
        || out.is_null() || dim == 0 || nq == 0 || ni == 0
    {
        return -1;
    }
    let q_lens = std::slice::from_raw_parts(q_lens, nq as usize);
    let i_lens = std::slice::from_raw_parts(i_lens, ni as usize);
    let q_total: u64 = q_lens.iter().sum();
    let i_total: u64 = i_lens.iter().sum();
    let q_flat = std::slice::from_raw_parts(q_data, (q_total * dim) as usize);
    let i_flat = std::slice::from_raw_parts(i_data, (i_total * dim) as usize);
    let (queries, index) = match (
        split_sequences(q_flat, q_lens, dim as usize),
        split_sequences(i_flat, i_lens, dim as usize),
    ) {
        (Some(q), Some(i)) => (q, i),
        _ => return -1,
    };
    let costs = batch_pairwise(&queries, &index, dim as usize);
    std::slice::from_raw_parts_mut(out, costs.len()).copy_from_slice(&costs);
    0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Straightforward full-table implementation used as the in-crate oracle.
    fn dtw_full_table(a: &[f32], b: &[f32], dim: usize) -> f64 {
        let n = a.len() / dim;
        let m = b.len() / dim;
        const INF: f64 = f64::INFINITY;
        let d = |i: usize, j: usize| -> f64 {
            let mut acc = 0.0;
            for k in 0..dim {
                let diff = a[(i - 1) * dim + k] as f64 - b[(j - 1) * dim + k] as f64;
                acc += diff * diff;
            }
            acc.sqrt()
        };
        // 1-indexed with +2 padding
        let w = m + 3;
        let mut g = vec![vec![INF; w]; n + 3];
        let mut dist = vec![vec![INF; w]; n + 3];
        for i in 1..=n {
            for j in 1..=m {
                dist[i + 2][j + 2] = d(i, j);
            }
        }
        g[3][3] = 2.0 * dist[3][3];
        for i in 1..=n {
            for j in 1..=m {
                if i == 1 && j == 1 {
                    continue;
                }
                let (r, c) = (i + 2, j + 2);
                let b1 = g[r - 2][c - 3] + 2.0 * dist[r - 1][c - 2] + 2.0 * dist[r][c - 1]
                    + dist[r][c];
                let b2 = g[r - 1][c - 1] + 2.0 * dist[r][c];
                let b3 = g[r - 3][c - 2] + 2.0 * dist[r - 2][c - 1] + 2.0 * dist[r - 1][c]
                    + dist[r][c];
                g[r][c] = b1.min(b2).min(b3);
            }
        }
        g[n + 2][m + 2] / (n + m) as f64
    }

    fn random_seq(rng: &mut StdRng, len: usize, dim: usize) -> Vec<f32> {
        (0..len * dim).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn identical_sequences_cost_zero() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = random_seq(&mut rng, 17, 8);
        assert_eq!(dtw_cost(&a, &a, 8), 0.0);
    }

    #[test]
    fn infeasible_ratio_is_infinite() {
        let mut rng = StdRng::seed_from_u64(2);
        let a = random_seq(&mut rng, 5, 3);
        let b = random_seq(&mut rng, 11, 3);
        assert!(dtw_cost(&a, &b, 3).is_infinite());
        assert!(dtw_cost(&b, &a, 3).is_infinite());
    }

    #[test]
    fn one_by_two_is_infeasible() {
        let a = vec![0.0f32, 0.0];
        let b = vec![1.0f32, 1.0, 2.0, 2.0];
        assert!(dtw_cost(&a, &b, 2).is_infinite());
    }

    #[test]
    fn rolling_rows_match_full_table() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..300 {
            let n = rng.gen_range(1..=24);
            let m = rng.gen_range(1..=24);
            let dim = rng.gen_range(1..=6);
            let a = random_seq(&mut rng, n, dim);
            let b = random_seq(&mut rng, m, dim);
            let fast = dtw_cost(&a, &b, dim);
            let slow = dtw_full_table(&a, &b, dim);
            if slow.is_infinite() {
                assert!(fast.is_infinite(), "n={n} m={m}");
            } else {
                assert!((fast - slow).abs() < 1e-12, "n={n} m={m}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn symmetry() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(4..=20);
            let m = rng.gen_range(4..=20);
            let a = random_seq(&mut rng, n, 4);
            let b = random_seq(&mut rng, m, 4);
            let x = dtw_cost(&a, &b, 4);
            let y = dtw_cost(&b, &a, 4);
            if x.is_finite() || y.is_finite() {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn batch_matches_sequential_loop() {
        let mut rng = StdRng::seed_from_u64(5);
        let queries: Vec<Vec<f32>> = (0..6)
            .map(|_| {
                let len = rng.gen_range(3..=12);
                random_seq(&mut rng, len, 5)
            })
            .collect();
        let index: Vec<Vec<f32>> = (0..7)
            .map(|_| {
                let len = rng.gen_range(3..=12);
                random_seq(&mut rng, len, 5)
            })
            .collect();
        let q_refs: Vec<&[f32]> = queries.iter().map(|v| v.as_slice()).collect();
        let i_refs: Vec<&[f32]> = index.iter().map(|v| v.as_slice()).collect();
        let batch = batch_pairwise(&q_refs, &i_refs, 5);
        for (qi, q) in q_refs.iter().enumerate() {
            for (ii, ix) in i_refs.iter().enumerate() {
                let want = dtw_cost(q, ix, 5);
                let got = batch[qi * i_refs.len() + ii];
                if want.is_infinite() {
                    assert!(got.is_infinite());
                } else {
                    assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn c_abi_roundtrip() {
        let mut rng = StdRng::seed_from_u64(6);
        let a = random_seq(&mut rng, 9, 3);
        let b = random_seq(&mut rng, 8, 3);
        let via_c = unsafe { vpd_dtw_cost(a.as_ptr(), 9, b.as_ptr(), 8, 3) };
        assert_eq!(via_c, dtw_cost(&a, &b, 3));

        let q_lens = [9u64];
        let i_lens = [8u64];
        let mut out = [0.0f64];
        let status = unsafe {
            vpd_batch_pairwise(
                a.as_ptr(), q_lens.as_ptr(), 1,
                b.as_ptr(), i_lens.as_ptr(), 1,
                3, out.as_mut_ptr(),
            )
        };
        assert_eq!(status, 0);
        assert_eq!(out[0], dtw_cost(&a, &b, 3));
    }
}
