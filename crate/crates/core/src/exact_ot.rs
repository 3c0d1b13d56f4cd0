//! Exact discrete optimal transport by the transportation (network) simplex.
//!
//! The basis is a spanning tree of the complete bipartite graph between
//! source rows and target columns. Duals are read off the tree, entering
//! cells are priced by Dantzig's rule and the solver falls back to Bland's
//! rule after a long run of degenerate pivots so it cannot cycle.
//!
//! At degenerate optima the duals are not unique; the returned pair is the
//! one attached to the basis the solver terminates on.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{GdlError, Result};
use crate::model::Histogram;

/// Marginal mass mismatch absorbed by rescaling the target marginal.
pub const MASS_TOL: f64 = 1e-9;

/// Nonnegative transport plan between two histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling(pub Array2<f64>);

impl Coupling {
    /// Product coupling `a bᵀ`.
    pub fn product(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Self {
        let mut t = Array2::zeros((a.len(), b.len()));
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in b.iter().enumerate() {
                t[[i, j]] = ai * bj;
            }
        }
        Coupling(t)
    }

    /// `diag(h)`, the identity alignment between two graphs sharing `h`.
    pub fn diagonal(h: ArrayView1<'_, f64>) -> Self {
        Coupling(Array2::from_diag(&h.to_owned()))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.nrows(), self.0.ncols())
    }

    /// Largest violation among nonnegativity and both marginal constraints.
    pub fn marginal_error(&self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
        let rows = self.0.sum_axis(ndarray::Axis(1));
        let cols = self.0.sum_axis(ndarray::Axis(0));
        let mut err = self.0.iter().fold(0.0_f64, |e, &x| e.max(-x));
        for (r, ai) in rows.iter().zip(a.iter()) {
            err = err.max((r - ai).abs());
        }
        for (c, bj) in cols.iter().zip(b.iter()) {
            err = err.max((c - bj).abs());
        }
        err
    }

    pub fn transpose(&self) -> Coupling {
        Coupling(self.0.t().to_owned())
    }
}

/// Dual potentials of a linear OT problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPair {
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
}

impl DualPair {
    /// Shifts the potentials so both sides carry the same dual mass.
    pub fn centered(mut self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Self {
        let shift = (self.beta.dot(&b) - self.alpha.dot(&a)) / 2.0;
        self.alpha.mapv_inplace(|x| x + shift);
        self.beta.mapv_inplace(|x| x - shift);
        self
    }
}

/// Optimal plan, its cost and centered duals.
#[derive(Debug, Clone)]
pub struct OtSolution {
    pub coupling: Coupling,
    pub cost: f64,
    pub duals: DualPair,
    pub pivots: usize,
}

/// Solves `min_{T ∈ U(h1, h2)} <M, T>` exactly.
pub fn solve_linear_ot(cost: ArrayView2<'_, f64>, h1: &Histogram, h2: &Histogram) -> Result<OtSolution> {
    solve_linear_ot_masses(cost, h1.view(), h2.view())
}

/// As [`solve_linear_ot`] on raw nonnegative mass vectors of equal total.
pub fn solve_linear_ot_masses(
    cost: ArrayView2<'_, f64>,
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> Result<OtSolution> {
    let (n, m) = (a.len(), b.len());
    if cost.nrows() != n || cost.ncols() != m {
        return Err(GdlError::ShapeMismatch(format!(
            "cost is {:?}, marginals are {n} and {m}",
            cost.shape()
        )));
    }
    if n == 0 || m == 0 {
        return Err(GdlError::ShapeMismatch("empty marginal".into()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(GdlError::NumericalFailure("non-finite cost".into()));
    }
    if a.iter().chain(b.iter()).any(|&x| !(x >= 0.0)) {
        return Err(GdlError::BadHistogram("negative or NaN marginal entry".into()));
    }
    let (sa, sb) = (a.sum(), b.sum());
    if (sa - sb).abs() > MASS_TOL {
        return Err(GdlError::InfeasibleMarginals(sa, sb));
    }
    let b_scaled: Array1<f64> = if sa == sb { b.to_owned() } else { b.mapv(|x| x * sa / sb) };

    let mut simplex = TransportSimplex::new(cost, a, b_scaled.view());
    simplex.run()?;
    Ok(simplex.into_solution(a, b_scaled.view()))
}

struct TransportSimplex<'a> {
    cost: ArrayView2<'a, f64>,
    n: usize,
    m: usize,
    /// Flow on every cell, row-major.
    flow: Vec<f64>,
    is_basic: Vec<bool>,
    basis: Vec<(usize, usize)>,
    u: Vec<f64>,
    v: Vec<f64>,
    pivots: usize,
    eps: f64,
}

impl<'a> TransportSimplex<'a> {
    fn new(cost: ArrayView2<'a, f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Self {
        let (n, m) = (a.len(), b.len());
        let scale = cost.iter().fold(0.0_f64, |s, c| s.max(c.abs())).max(1.0);
        let mut s = TransportSimplex {
            cost,
            n,
            m,
            flow: vec![0.0; n * m],
            is_basic: vec![false; n * m],
            basis: Vec::with_capacity(n + m - 1),
            u: vec![0.0; n],
            v: vec![0.0; m],
            pivots: 0,
            eps: 1e-12 * scale,
        };
        s.northwest_corner(a, b);
        s
    }

    /// Initial spanning-tree basis with exactly `n + m - 1` cells.
    fn northwest_corner(&mut self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
        let (mut i, mut j) = (0, 0);
        let mut ra = a[0];
        let mut rb = b[0];
        loop {
            let x = ra.min(rb);
            self.set_basic(i, j, x);
            ra -= x;
            rb -= x;
            if i == self.n - 1 && j == self.m - 1 {
                break;
            }
            if (ra <= rb && i < self.n - 1) || j == self.m - 1 {
                i += 1;
                ra = a[i];
            } else {
                j += 1;
                rb = b[j];
            }
        }
        debug_assert_eq!(self.basis.len(), self.n + self.m - 1);
    }

    fn set_basic(&mut self, i: usize, j: usize, x: f64) {
        let k = i * self.m + j;
        self.is_basic[k] = true;
        self.flow[k] = x.max(0.0);
        self.basis.push((i, j));
    }

    /// Tree adjacency over nodes `0..n` (rows) and `n..n+m` (columns).
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n + self.m];
        for (e, &(i, j)) in self.basis.iter().enumerate() {
            adj[i].push((self.n + j, e));
            adj[self.n + j].push((i, e));
        }
        adj
    }

    fn compute_duals(&mut self, adj: &[Vec<(usize, usize)>]) -> Result<()> {
        let total = self.n + self.m;
        let mut seen = vec![false; total];
        let mut pot = vec![0.0; total];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut visited = 1;
        while let Some(x) = queue.pop_front() {
            for &(y, e) in &adj[x] {
                if seen[y] {
                    continue;
                }
                let (i, j) = self.basis[e];
                let c = self.cost[[i, j]];
                // u_i + v_j = c_ij
                pot[y] = c - pot[x];
                seen[y] = true;
                visited += 1;
                queue.push_back(y);
            }
        }
        if visited != total {
            return Err(GdlError::NumericalFailure("basis is not a spanning tree".into()));
        }
        self.u.copy_from_slice(&pot[..self.n]);
        self.v.copy_from_slice(&pot[self.n..]);
        Ok(())
    }

    fn entering(&self, bland: bool) -> Option<(usize, usize)> {
        let mut best = None;
        let mut best_r = -self.eps;
        for i in 0..self.n {
            let ui = self.u[i];
            let row = i * self.m;
            for j in 0..self.m {
                if self.is_basic[row + j] {
                    continue;
                }
                let r = self.cost[[i, j]] - ui - self.v[j];
                if r < best_r {
                    if bland {
                        return Some((i, j));
                    }
                    best_r = r;
                    best = Some((i, j));
                }
            }
        }
        best
    }

    fn run(&mut self) -> Result<()> {
        let size = self.n + self.m;
        let max_pivots = 50 * self.n * self.m + 10 * size + 1000;
        let degenerate_limit = 2 * size + 50;
        let mut degenerate_run = 0usize;
        let mut adj = self.adjacency();
        self.compute_duals(&adj)?;
        loop {
            let bland = degenerate_run > degenerate_limit;
            let Some((ei, ej)) = self.entering(bland) else {
                return Ok(());
            };
            if self.pivots >= max_pivots {
                return Err(GdlError::NumericalFailure(format!(
                    "no convergence after {max_pivots} pivots"
                )));
            }
            let theta = self.pivot(&adj, ei, ej)?;
            self.pivots += 1;
            if theta <= 0.0 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            adj = self.adjacency();
            self.compute_duals(&adj)?;
        }
    }

    /// Pushes flow around the cycle closed by `(ei, ej)`; returns the step.
    fn pivot(&mut self, adj: &[Vec<(usize, usize)>], ei: usize, ej: usize) -> Result<f64> {
        let total = self.n + self.m;
        let target = self.n + ej;
        // Tree path from row node ei to column node ej.
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; total];
        let mut seen = vec![false; total];
        seen[ei] = true;
        let mut queue = VecDeque::from([ei]);
        while let Some(x) = queue.pop_front() {
            if x == target {
                break;
            }
            for &(y, e) in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    parent[y] = Some((x, e));
                    queue.push_back(y);
                }
            }
        }
        if !seen[target] {
            return Err(GdlError::NumericalFailure("entering cell closes no cycle".into()));
        }
        // Walking back from the column node, edges alternate -, +, -, ...
        let mut path = Vec::new();
        let mut node = target;
        while let Some((prev, e)) = parent[node] {
            path.push(e);
            node = prev;
        }
        let mut theta = f64::INFINITY;
        let mut leave: Option<usize> = None;
        for (k, &e) in path.iter().enumerate() {
            if k % 2 == 1 {
                continue;
            }
            let (i, j) = self.basis[e];
            let x = self.flow[i * self.m + j];
            let better = match leave {
                None => true,
                Some(l) => {
                    let (li, lj) = self.basis[l];
                    x < theta || (x == theta && i * self.m + j < li * self.m + lj)
                }
            };
            if better {
                theta = x;
                leave = Some(e);
            }
        }
        let leave = leave.expect("cycle has at least one decreasing edge");
        for (k, &e) in path.iter().enumerate() {
            let (i, j) = self.basis[e];
            let cell = &mut self.flow[i * self.m + j];
            if k % 2 == 0 {
                *cell = (*cell - theta).max(0.0);
            } else {
                *cell += theta;
            }
        }
        let (li, lj) = self.basis[leave];
        self.flow[li * self.m + lj] = 0.0;
        self.is_basic[li * self.m + lj] = false;
        self.basis[leave] = (ei, ej);
        self.is_basic[ei * self.m + ej] = true;
        self.flow[ei * self.m + ej] = theta;
        Ok(theta)
    }

    fn into_solution(self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> OtSolution {
        let t = Array2::from_shape_vec((self.n, self.m), self.flow).expect("flow has n*m cells");
        let cost = (&t * &self.cost).sum();
        let duals = DualPair { alpha: Array1::from(self.u), beta: Array1::from(self.v) }.centered(a, b);
        OtSolution { coupling: Coupling(t), cost, duals, pivots: self.pivots }
    }
}
