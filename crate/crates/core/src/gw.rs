//! (Fused) Gromov-Wasserstein objectives and conditional-gradient solvers.
//!
//! For symmetric `C1` (n×n), `C2` (m×m) and a coupling `T` with marginals
//! `(h1, h2)` the GW objective factorizes as
//!
//! ```text
//! E(T) = <(C1∘C1) h1 1ᵀ + 1 ((C2∘C2) h2)ᵀ - 2 C1 T C2ᵀ, T>
//! ```
//!
//! so neither the objective nor its linearization ever touches the 4-D cost
//! tensor: each evaluation costs `O(n²m + m²n)`. The fused variant adds
//! `(1-α) <D, T>` with `D_ij = ||a_i - b_j||²` and weights the structure
//! term by `α`.
//!
//! The linear subproblem of each CG iteration is solved exactly with
//! [`crate::exact_ot`] using the gradient `α·2M(T) + (1-α)D` as cost, so the
//! duals of the final iteration satisfy `<u, h1> + <ũ, h2> = 2·E(T)` at a
//! stationary GW coupling and `ũ` is a subgradient of the optimal value
//! with respect to `h2`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GdlError, Result};
use crate::exact_ot::{solve_linear_ot_masses, Coupling, DualPair};
use crate::model::Histogram;

/// Conditional-gradient settings.
#[derive(Debug, Clone)]
pub struct GwOptions {
    pub max_iter: usize,
    /// Relative objective decrease below which CG stops.
    pub tol: f64,
    /// Starting coupling of the first run; the product coupling if `None`.
    pub init: Option<Coupling>,
    /// Total number of CG runs; runs after the first start from random
    /// vertices of the coupling polytope. The best value is returned.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for GwOptions {
    fn default() -> Self {
        GwOptions { max_iter: 200, tol: 1e-7, init: None, restarts: 1, seed: 0 }
    }
}

impl GwOptions {
    pub fn with_init(mut self, init: Coupling) -> Self {
        self.init = Some(init);
        self
    }
}

/// Outcome of a (F)GW solve.
#[derive(Debug, Clone)]
pub struct GwResult {
    /// Objective at `coupling`.
    pub value: f64,
    pub coupling: Coupling,
    /// Duals of the linearized OT problem at `coupling`.
    pub duals: DualPair,
    pub iterations: usize,
    /// Objective at every CG iterate of the retained run.
    pub trace: Vec<f64>,
}

fn check_square(c: ArrayView2<'_, f64>, name: &str) -> Result<usize> {
    if c.nrows() != c.ncols() {
        return Err(GdlError::ShapeMismatch(format!("{name} is {:?}, not square", c.shape())));
    }
    Ok(c.nrows())
}

fn check_coupling_shape(c1: ArrayView2<'_, f64>, c2: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>) -> Result<()> {
    let n = check_square(c1, "C1")?;
    let m = check_square(c2, "C2")?;
    if t.nrows() != n || t.ncols() != m {
        return Err(GdlError::ShapeMismatch(format!(
            "coupling is {:?}, expected ({n}, {m})",
            t.shape()
        )));
    }
    Ok(())
}

/// `(Σ_j C_ij·(C_ij·h_j))_i`.
fn squared_marginal(c: ArrayView2<'_, f64>, h: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = c.nrows();
    let mut out = Array1::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            let cij = c[[i, j]];
            acc += cij * (cij * h[j]);
        }
        out[i] = acc;
    }
    out
}

/// `C1 · (T · C2ᵀ)` with a fixed summation order.
pub(crate) fn sandwich(c1: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>, c2: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, m) = (t.nrows(), t.ncols());
    let c1 = c1.as_standard_layout();
    let c2 = c2.as_standard_layout();
    let t = t.as_standard_layout();
    let (c1s, c2s, ts) = (
        c1.as_slice().expect("standard layout"),
        c2.as_slice().expect("standard layout"),
        t.as_slice().expect("standard layout"),
    );
    let mut w = vec![0.0; n * m];
    for j in 0..n {
        let trow = &ts[j * m..(j + 1) * m];
        for k in 0..m {
            let crow = &c2s[k * m..(k + 1) * m];
            let mut acc = 0.0;
            for l in 0..m {
                acc += trow[l] * crow[l];
            }
            w[j * m + k] = acc;
        }
    }
    let mut x = vec![0.0; n * m];
    for i in 0..n {
        let xrow = &mut x[i * m..(i + 1) * m];
        for j in 0..n {
            let a = c1s[i * n + j];
            if a == 0.0 {
                continue;
            }
            let wrow = &w[j * m..(j + 1) * m];
            for k in 0..m {
                xrow[k] += a * wrow[k];
            }
        }
    }
    Array2::from_shape_vec((n, m), x).expect("n*m entries")
}

fn frobenius(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `M(T) = (Σ_kl (C1_ik - C2_jl)² T_kl)_ij` for given marginals of `T`.
fn linearized_with_marginals(
    c1: ArrayView2<'_, f64>,
    c2: ArrayView2<'_, f64>,
    h1: ArrayView1<'_, f64>,
    h2: ArrayView1<'_, f64>,
    t: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let a = squared_marginal(c1, h1);
    let b = squared_marginal(c2, h2);
    let mut x = sandwich(c1, t, c2);
    for ((i, k), v) in x.indexed_iter_mut() {
        *v = (a[i] + b[k]) - 2.0 * *v;
    }
    x
}

fn marginals(t: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    (t.sum_axis(ndarray::Axis(1)), t.sum_axis(ndarray::Axis(0)))
}

/// Linearized GW cost `M(T)`; `<M(T), T>` is the GW objective at `T`.
pub fn gw_linearized_cost(c1: ArrayView2<'_, f64>, c2: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_coupling_shape(c1, c2, t)?;
    let (h1, h2) = marginals(t);
    Ok(linearized_with_marginals(c1, c2, h1.view(), h2.view(), t))
}

/// GW objective `Σ_ijkl (C1_ij - C2_kl)² T_ik T_jl`.
pub fn gw_objective(c1: ArrayView2<'_, f64>, c2: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>) -> Result<f64> {
    let m = gw_linearized_cost(c1, c2, t)?;
    Ok(frobenius(m.view(), t))
}

/// Squared Euclidean distances between the rows of `a1` and `a2`.
pub fn feature_cost(a1: ArrayView2<'_, f64>, a2: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a1.ncols() != a2.ncols() {
        return Err(GdlError::ShapeMismatch(format!(
            "feature dimensions differ: {} vs {}",
            a1.ncols(),
            a2.ncols()
        )));
    }
    Ok(Array2::from_shape_fn((a1.nrows(), a2.nrows()), |(i, j)| {
        a1.row(i).iter().zip(a2.row(j).iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    }))
}

/// FGW objective `α·E(T) + (1-α)·<D, T>`.
pub fn fgw_objective(
    c1: ArrayView2<'_, f64>,
    a1: ArrayView2<'_, f64>,
    c2: ArrayView2<'_, f64>,
    a2: ArrayView2<'_, f64>,
    t: ArrayView2<'_, f64>,
    alpha: f64,
) -> Result<f64> {
    check_coupling_shape(c1, c2, t)?;
    if a1.nrows() != c1.nrows() || a2.nrows() != c2.nrows() {
        return Err(GdlError::ShapeMismatch("feature rows do not match graph orders".into()));
    }
    let d = feature_cost(a1, a2)?;
    let structure = if alpha == 0.0 { 0.0 } else { gw_objective(c1, c2, t)? };
    Ok(alpha * structure + (1.0 - alpha) * frobenius(d.view(), t))
}

/// Closed-form minimizer of `a γ² + b γ` on `[0, 1]`.
///
/// For `a <= 0` the restriction is concave and the smaller endpoint wins.
pub fn quadratic_line_search(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        (-b / (2.0 * a)).clamp(0.0, 1.0)
    } else if a + b < 0.0 {
        1.0
    } else {
        0.0
    }
}

struct Problem<'a> {
    c1: ArrayView2<'a, f64>,
    c2: ArrayView2<'a, f64>,
    h1: ArrayView1<'a, f64>,
    h2: ArrayView1<'a, f64>,
    features: Option<Array2<f64>>,
    alpha: f64,
}

impl Problem<'_> {
    /// Objective and gradient `α·2M(T) + (1-α)D` at `t`.
    fn evaluate(&self, t: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
        let mut grad = if self.alpha > 0.0 {
            linearized_with_marginals(self.c1, self.c2, self.h1, self.h2, t)
        } else {
            Array2::zeros(t.raw_dim())
        };
        let mut value = self.alpha * frobenius(grad.view(), t);
        grad.mapv_inplace(|x| 2.0 * self.alpha * x);
        if let Some(d) = &self.features {
            value += (1.0 - self.alpha) * frobenius(d.view(), t);
            grad.scaled_add(1.0 - self.alpha, d);
        }
        (value, grad)
    }

    fn curvature(&self, delta: ArrayView2<'_, f64>) -> f64 {
        if self.alpha == 0.0 {
            return 0.0;
        }
        -2.0 * self.alpha * frobenius(sandwich(self.c1, delta, self.c2).view(), delta)
    }

    fn run(&self, init: Coupling, opts: &GwOptions) -> Result<GwResult> {
        let mut t = init.0;
        let mut trace = Vec::new();
        let mut previous: Option<f64> = None;
        let mut iterations = 0;
        loop {
            let (value, grad) = self.evaluate(t.view());
            trace.push(value);
            let lp = solve_linear_ot_masses(grad.view(), self.h1, self.h2)?;
            let stalled = previous
                .is_some_and(|p| p - value <= opts.tol * p.abs().max(f64::MIN_POSITIVE));
            if stalled || iterations >= opts.max_iter {
                return Ok(self.finish(value, t, lp.duals, iterations, trace));
            }
            let delta = &lp.coupling.0 - &t;
            let slope = frobenius(grad.view(), delta.view());
            let scale = value.abs().max(1e-300);
            if slope >= -1e-15 * scale.max(1.0) {
                // Frank-Wolfe gap is zero: t is stationary
                return Ok(self.finish(value, t, lp.duals, iterations, trace));
            }
            let curvature = self.curvature(delta.view());
            let gamma = quadratic_line_search(curvature, slope);
            if gamma <= 0.0 {
                return Ok(self.finish(value, t, lp.duals, iterations, trace));
            }
            t.scaled_add(gamma, &delta);
            t.mapv_inplace(|x| x.max(0.0));
            previous = Some(value);
            iterations += 1;
        }
    }

    fn finish(&self, value: f64, t: Array2<f64>, duals: DualPair, iterations: usize, trace: Vec<f64>) -> GwResult {
        GwResult { value, coupling: Coupling(t), duals, iterations, trace }
    }

    fn random_vertex(&self, rng: &mut ChaCha8Rng) -> Result<Coupling> {
        let cost = Array2::from_shape_fn((self.h1.len(), self.h2.len()), |_| rng.random::<f64>());
        Ok(solve_linear_ot_masses(cost.view(), self.h1, self.h2)?.coupling)
    }

    fn solve(&self, opts: &GwOptions) -> Result<GwResult> {
        let first = match &opts.init {
            Some(init) => {
                if init.shape() != (self.h1.len(), self.h2.len()) {
                    return Err(GdlError::ShapeMismatch("initial coupling has the wrong shape".into()));
                }
                init.clone()
            }
            None => Coupling::product(self.h1, self.h2),
        };
        let mut best = self.run(first, opts)?;
        if opts.restarts > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            for _ in 1..opts.restarts {
                let start = self.random_vertex(&mut rng)?;
                let candidate = self.run(start, opts)?;
                if candidate.value < best.value {
                    best = candidate;
                }
            }
        }
        Ok(best)
    }
}

fn check_inputs(c1: ArrayView2<'_, f64>, c2: ArrayView2<'_, f64>, h1: &Histogram, h2: &Histogram) -> Result<()> {
    let n = check_square(c1, "C1")?;
    let m = check_square(c2, "C2")?;
    if h1.len() != n {
        return Err(GdlError::LengthMismatch { expected: n, got: h1.len() });
    }
    if h2.len() != m {
        return Err(GdlError::LengthMismatch { expected: m, got: h2.len() });
    }
    Ok(())
}

/// Squared GW distance by conditional gradient.
pub fn gw_solve(
    c1: ArrayView2<'_, f64>,
    c2: ArrayView2<'_, f64>,
    h1: &Histogram,
    h2: &Histogram,
    opts: &GwOptions,
) -> Result<GwResult> {
    check_inputs(c1, c2, h1, h2)?;
    Problem { c1, c2, h1: h1.view(), h2: h2.view(), features: None, alpha: 1.0 }.solve(opts)
}

/// Squared FGW distance by conditional gradient.
#[allow(clippy::too_many_arguments)]
pub fn fgw_solve(
    c1: ArrayView2<'_, f64>,
    a1: ArrayView2<'_, f64>,
    c2: ArrayView2<'_, f64>,
    a2: ArrayView2<'_, f64>,
    h1: &Histogram,
    h2: &Histogram,
    alpha: f64,
    opts: &GwOptions,
) -> Result<GwResult> {
    check_inputs(c1, c2, h1, h2)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GdlError::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if a1.nrows() != c1.nrows() || a2.nrows() != c2.nrows() {
        return Err(GdlError::ShapeMismatch("feature rows do not match graph orders".into()));
    }
    let features = Some(feature_cost(a1, a2)?);
    Problem { c1, c2, h1: h1.view(), h2: h2.view(), features, alpha }.solve(opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn order_one_objective() {
        let t = array![[1.0]];
        assert_eq!(gw_objective(array![[0.0]].view(), array![[0.0]].view(), t.view()).unwrap(), 0.0);
        assert_eq!(gw_objective(array![[2.0]].view(), array![[5.0]].view(), t.view()).unwrap(), 9.0);
        let m = gw_linearized_cost(array![[2.0]].view(), array![[5.0]].view(), t.view()).unwrap();
        assert_eq!(m, array![[9.0]]);
    }

    #[test]
    fn constant_matrices_give_constant_linearization() {
        let c1 = Array2::from_elem((3, 3), 2.0);
        let c2 = Array2::from_elem((4, 4), 2.0);
        let t = Coupling::product(Histogram::uniform(3).view(), Histogram::uniform(4).view());
        let m = gw_linearized_cost(c1.view(), c2.view(), t.0.view()).unwrap();
        let first = m[[0, 0]];
        assert!(m.iter().all(|&x| (x - first).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_reported() {
        let err = gw_objective(Array2::zeros((2, 2)).view(), Array2::zeros((3, 3)).view(), Array2::zeros((2, 2)).view());
        assert!(matches!(err, Err(GdlError::ShapeMismatch(_))));
    }

    #[test]
    fn line_search_cases() {
        assert_eq!(quadratic_line_search(1.0, -1.0), 0.5);
        assert_eq!(quadratic_line_search(1.0, -5.0), 1.0);
        assert_eq!(quadratic_line_search(1.0, 1.0), 0.0);
        assert_eq!(quadratic_line_search(-1.0, 0.5), 1.0);
        assert_eq!(quadratic_line_search(-1.0, 2.0), 0.0);
        assert_eq!(quadratic_line_search(0.0, -1.0), 1.0);
    }

    #[test]
    fn order_one_solve() {
        let h = Histogram::uniform(1);
        let r = gw_solve(array![[2.0]].view(), array![[5.0]].view(), &h, &h, &GwOptions::default()).unwrap();
        assert_eq!(r.value, 9.0);
    }

    #[test]
    fn self_distance_from_identity_is_exactly_zero() {
        let c = array![[0.0, 0.3, 0.7], [0.3, 0.0, 0.1], [0.7, 0.1, 0.0]];
        let h = Histogram::from_vec(vec![0.2, 0.5, 0.3]).unwrap();
        let opts = GwOptions::default().with_init(Coupling::diagonal(h.view()));
        let r = gw_solve(c.view(), c.view(), &h, &h, &opts).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn fgw_requires_matching_feature_dims() {
        let h = Histogram::uniform(2);
        let c = Array2::zeros((2, 2));
        let err = fgw_solve(
            c.view(),
            Array2::zeros((2, 3)).view(),
            c.view(),
            Array2::zeros((2, 2)).view(),
            &h,
            &h,
            0.5,
            &GwOptions::default(),
        );
        assert!(matches!(err, Err(GdlError::ShapeMismatch(_))));
    }
}
