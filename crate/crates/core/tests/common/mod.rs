//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;
pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut TestRng, n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| rng.random::<f64>())
}

pub fn random_symmetric(rng: &mut TestRng, n: usize) -> Array2<f64> {
    let a = random_matrix(rng, n, n);
    (&a + &a.t()) / 2.0
}

/// Strictly positive random histogram.
pub fn random_histogram(rng: &mut TestRng, n: usize) -> Array1<f64> {
    let x: Array1<f64> = (0..n).map(|_| 0.1 + rng.random::<f64>()).collect();
    let s = x.sum();
    x / s
}

/// Random point on the simplex (Dirichlet(1) via normalized exponentials).
pub fn random_simplex(rng: &mut TestRng, n: usize) -> Array1<f64> {
    let x: Array1<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s = x.sum();
    x / s
}

/// Zero-sum random direction.
pub fn random_tangent(rng: &mut TestRng, n: usize) -> Array1<f64> {
    let x: Array1<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let mean = x.mean().unwrap();
    let d = x.mapv(|v| v - mean);
    let norm = d.dot(&d).sqrt();
    d / norm
}

/// `Σ_ijkl (C1_ij - C2_kl)^2 T_ik T_jl` by quadruple loop.
pub fn naive_gw(c1: &Array2<f64>, c2: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let (n, m) = (c1.nrows(), c2.nrows());
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..m {
                for l in 0..m {
                    let d = c1[[i, j]] - c2[[k, l]];
                    s += d * d * t[[i, k]] * t[[j, l]];
                }
            }
        }
    }
    s
}

/// `(Σ_kl (C1_ik - C2_jl)^2 T_kl)_ij` by loops.
pub fn naive_linearized(c1: &Array2<f64>, c2: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
    let (n, m) = (c1.nrows(), c2.nrows());
    Array2::from_shape_fn((n, m), |(i, j)| {
        let mut s = 0.0;
        for k in 0..n {
            for l in 0..m {
                let d = c1[[i, k]] - c2[[j, l]];
                s += d * d * t[[k, l]];
            }
        }
        s
    })
}

/// `Σ_ij ||a_i - b_j||^2 T_ij` by loops.
pub fn naive_feature_cost(a1: &Array2<f64>, a2: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a1.nrows() {
        for j in 0..a2.nrows() {
            let d2: f64 = (0..a1.ncols()).map(|f| (a1[[i, f]] - a2[[j, f]]).powi(2)).sum();
            s += d2 * t[[i, j]];
        }
    }
    s
}

pub fn naive_fgw(
    c1: &Array2<f64>,
    a1: &Array2<f64>,
    c2: &Array2<f64>,
    a2: &Array2<f64>,
    t: &Array2<f64>,
    alpha: f64,
) -> f64 {
    alpha * naive_gw(c1, c2, t) + (1.0 - alpha) * naive_feature_cost(a1, a2, t)
}

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

pub fn permutation_coupling(p: &[usize]) -> Array2<f64> {
    let n = p.len();
    let mut t = Array2::zeros((n, n));
    for (i, &j) in p.iter().enumerate() {
        t[[i, j]] = 1.0 / n as f64;
    }
    t
}

/// Minimum of a linear OT problem by enumerating every basis of the
/// transportation polytope (spanning trees of the bipartite graph).
pub fn brute_force_ot(cost: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let (n, m) = (a.len(), b.len());
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let k = n + m - 1;
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let subset: Vec<(usize, usize)> = idx.iter().map(|&c| cells[c]).collect();
        if let Some(flow) = tree_flow(&subset, a, b) {
            if flow.iter().all(|&x| x >= -1e-12) {
                let c: f64 = subset.iter().zip(&flow).map(|(&(i, j), x)| cost[[i, j]] * x).sum();
                best = best.min(c);
            }
        }
        // next combination
        let mut p = k;
        while p > 0 && idx[p - 1] == cells.len() - k + p - 1 {
            p -= 1;
        }
        if p == 0 {
            break;
        }
        idx[p - 1] += 1;
        for q in p..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
    best
}

/// Unique flow supported on `cells` if they form a spanning tree.
fn tree_flow(cells: &[(usize, usize)], a: &Array1<f64>, b: &Array1<f64>) -> Option<Vec<f64>> {
    let (n, m) = (a.len(), b.len());
    let mut ra = a.to_vec();
    let mut rb = b.to_vec();
    let mut flow = vec![f64::NAN; cells.len()];
    let mut done = vec![false; cells.len()];
    let mut remaining = cells.len();
    while remaining > 0 {
        let mut progressed = false;
        for node in 0..(n + m) {
            let incident: Vec<usize> = (0..cells.len())
                .filter(|&e| !done[e] && (if node < n { cells[e].0 == node } else { cells[e].1 == node - n }))
                .collect();
            if incident.len() == 1 {
                let e = incident[0];
                let (i, j) = cells[e];
                let x = if node < n { ra[i] } else { rb[j] };
                flow[e] = x;
                ra[i] -= x;
                rb[j] -= x;
                done[e] = true;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            return None; // contains a cycle
        }
    }
    let ok = ra.iter().chain(rb.iter()).all(|r| r.abs() < 1e-12);
    ok.then_some(flow)
}
