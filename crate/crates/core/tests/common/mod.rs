//! Brute-force oracles and random instance builders shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use boostret::eval::Metrics;
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = normal(rng, rows, cols);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

/// Small integers in `[-levels, levels]`, so every dot product is exact
/// and ties are common.
pub fn quantized(rng: &mut ChaCha8Rng, rows: usize, cols: usize, levels: i32) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-levels..=levels) as f64)
}

/// Triple-loop similarity.
pub fn naive_dot(q: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((q.nrows(), g.nrows()));
    for i in 0..q.nrows() {
        for j in 0..g.nrows() {
            let mut s = 0.0;
            for k in 0..q.ncols() {
                s += q[[i, k]] * g[[j, k]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// Gallery indices sorted by descending score, ties by ascending index.
pub fn sorted_gallery(row: ArrayView1<'_, f64>) -> Vec<usize> {
    let mut items: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
    items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    items.into_iter().map(|(_, j)| j).collect()
}

pub fn oracle_rank(row: ArrayView1<'_, f64>, gallery: usize) -> usize {
    sorted_gallery(row).iter().position(|&j| j == gallery).unwrap() + 1
}

/// `(query, paired gallery index, rank-1 gallery index)` for every query
/// whose pair sits at rank exactly `k` behind a rank-1 item of another
/// identity.
pub fn oracle_mine(
    sim: ArrayView2<'_, f64>,
    query_ids: &[u64],
    gallery_ids: &[u64],
    paired: &[usize],
    k: usize,
) -> BTreeSet<(usize, usize, usize)> {
    let mut out = BTreeSet::new();
    for q in 0..sim.nrows() {
        let order = sorted_gallery(sim.row(q));
        let rank = order.iter().position(|&j| j == paired[q]).unwrap() + 1;
        let first = order[0];
        if rank == k && gallery_ids[first] != query_ids[q] {
            out.insert((q, paired[q], first));
        }
    }
    out
}

/// Per-query AP by the literal definition, plus the summary metrics.
pub fn oracle_metrics(
    sim: ArrayView2<'_, f64>,
    query_ids: &[u64],
    gallery_ids: &[u64],
) -> (Metrics, Vec<f64>) {
    let n = sim.nrows();
    let mut hits = [0usize; 3];
    let mut aps = Vec::with_capacity(n);
    for (q, &id) in query_ids.iter().enumerate().take(n) {
        let order = sorted_gallery(sim.row(q));
        let relevant: Vec<bool> = order.iter().map(|&j| gallery_ids[j] == id).collect();
        for (slot, k) in [1usize, 5, 10].into_iter().enumerate() {
            if relevant.iter().take(k).any(|&r| r) {
                hits[slot] += 1;
            }
        }
        let n_rel = relevant.iter().filter(|&&r| r).count();
        let mut sum = 0.0;
        for r in 1..=order.len() {
            if relevant[r - 1] {
                let in_top = relevant[..r].iter().filter(|&&x| x).count();
                sum += in_top as f64 / r as f64;
            }
        }
        aps.push(sum / n_rel as f64);
    }
    let nf = n as f64;
    let metrics = Metrics {
        r1: hits[0] as f64 / nf,
        r5: hits[1] as f64 / nf,
        r10: hits[2] as f64 / nf,
        map: aps.iter().sum::<f64>() / nf,
    };
    (metrics, aps)
}

pub const FD_STEP: f64 = 1e-6;

/// Relative error with a floor on the denominator, so components that are
/// zero up to rounding are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-2;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` at every entry of `x`, compared with
/// `analytic`; returns the worst relative error.
pub fn check_gradient(
    x: &mut Array2<f64>,
    analytic: ArrayView2<'_, f64>,
    mut f: impl FnMut(&Array2<f64>) -> f64,
) -> f64 {
    assert_eq!(x.dim(), analytic.dim());
    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = x[[r, c]];
        x[[r, c]] = orig + FD_STEP;
        let up = f(x);
        x[[r, c]] = orig - FD_STEP;
        let down = f(x);
        x[[r, c]] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[[r, c]], numeric));
    }
    worst
}

/// Random identity labels where every label appears at least twice, or
/// all-distinct labels when `distinct`.
pub fn labels(rng: &mut ChaCha8Rng, b: usize, distinct: bool) -> Vec<u64> {
    if distinct {
        return (0..b as u64).collect();
    }
    (0..b)
        .map(|_| rng.random_range(0..(b as u64 / 2).max(1)))
        .collect()
}

pub fn weights(rng: &mut ChaCha8Rng, b: usize) -> Vec<f64> {
    (0..b)
        .map(|_| if rng.random_bool(0.4) { 1.6 } else { 1.0 })
        .collect()
}
