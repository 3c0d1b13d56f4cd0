//! Projection of graphs onto the span of a dictionary.
//!
//! Unmixing alternates between the (F)GW coupling `T` between the input
//! graph and its reconstruction, and the simplex embedding `w`. With `T`
//! fixed the structure objective only depends on `w` through
//!
//! ```text
//! E(w) = wᵀ Q w - 2 gᵀ w + const,   Q_st = <C̄_s ∘ C̄_t, h̃ h̃ᵀ>,   g_s = <Tᵀ C T, C̄_s>
//! ```
//!
//! (plus the analogous feature terms for FGW), so the conditional-gradient
//! steps on `w` run on `S×S` quantities only.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{GdlError, Result};
use crate::exact_ot::{Coupling, DualPair};
use crate::gw::{fgw_solve, gw_solve, quadratic_line_search, sandwich, GwOptions, GwResult};
use crate::model::{Dictionary, Embedding, GraphRepr, Histogram};

#[derive(Debug, Clone)]
pub struct UnmixOptions {
    /// Maximum number of BCD sweeps.
    pub max_bcd: usize,
    /// Relative loss change below which BCD stops.
    pub tol: f64,
    /// Maximum conditional-gradient steps per embedding update.
    pub max_inner: usize,
    pub gw: GwOptions,
    pub init_w: Option<Histogram>,
    pub init_v: Option<Histogram>,
    /// Also start BCD from every vertex of the simplex and keep the best run.
    pub vertex_restarts: bool,
}

impl Default for UnmixOptions {
    fn default() -> Self {
        UnmixOptions {
            max_bcd: 20,
            tol: 1e-6,
            max_inner: 200,
            gw: GwOptions::default(),
            init_w: None,
            init_v: None,
            vertex_restarts: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnmixResult {
    pub embedding: Embedding,
    pub coupling: Coupling,
    /// Duals of the final linearized OT problem (input side, atom side).
    pub duals: DualPair,
    /// Regularized loss at the returned embedding and coupling.
    pub loss: f64,
    pub bcd_iterations: usize,
    /// Loss after every coupling update.
    pub loss_trace: Vec<f64>,
}

impl UnmixResult {
    /// Unregularized (F)GW reconstruction error.
    pub fn reconstruction_error(&self, lambda: f64, mu: f64) -> f64 {
        let w = self.embedding.w.as_array();
        let mut e = self.loss + lambda * w.dot(w);
        if let Some(v) = &self.embedding.v {
            e += mu * v.as_array().dot(v.as_array());
        }
        e
    }
}

/// Graph `(C̃(w), h̃(v), Ã(w))` spanned by an embedding.
pub fn reconstruct(d: &Dictionary, e: &Embedding) -> Result<GraphRepr> {
    let s = d.n_atoms();
    if e.w.len() != s {
        return Err(GdlError::LengthMismatch { expected: s, got: e.w.len() });
    }
    if let Some(v) = &e.v {
        if v.len() != s {
            return Err(GdlError::LengthMismatch { expected: s, got: v.len() });
        }
    }
    let c = d.structure(e.w.view());
    let h = d.node_weights(e.v.as_ref().map(|v| v.view()));
    Ok(GraphRepr { c, h, features: d.features(e.w.view()), label: None })
}

/// Quadratic model of the `w`-subproblem at a fixed coupling.
///
/// Represents `wᵀ Q w - 2 gᵀ w - λ ||w||²`, which equals the (F)GW objective
/// at the fixed coupling up to a constant.
#[derive(Debug, Clone)]
pub struct WeightProblem {
    pub q: Array2<f64>,
    pub g: Array1<f64>,
    pub lambda: f64,
}

impl WeightProblem {
    /// Builds the model for input `(C, A)` against `d` with coupling `t`
    /// and atom-side node weights `h_atoms`.
    pub fn new(
        c: ArrayView2<'_, f64>,
        features: Option<ArrayView2<'_, f64>>,
        d: &Dictionary,
        t: ArrayView2<'_, f64>,
        h_atoms: ArrayView1<'_, f64>,
        lambda: f64,
    ) -> Result<Self> {
        let s = d.n_atoms();
        let n_atoms = d.order();
        if t.nrows() != c.nrows() || t.ncols() != n_atoms || h_atoms.len() != n_atoms {
            return Err(GdlError::ShapeMismatch(format!(
                "coupling {:?} incompatible with graph of order {} and atoms of order {n_atoms}",
                t.shape(),
                c.nrows()
            )));
        }
        // Tᵀ C T on the atom side
        let ct = sandwich(c, t, Array2::eye(n_atoms).view());
        let g_atoms = t.t().dot(&ct);
        let alpha = if d.has_features() { d.alpha } else { 1.0 };

        let weighted: Vec<Array2<f64>> = d
            .atoms
            .iter()
            .map(|cs| {
                Array2::from_shape_fn((n_atoms, n_atoms), |(i, j)| cs[[i, j]] * h_atoms[i] * h_atoms[j])
            })
            .collect();
        let mut q = Array2::from_shape_fn((s, s), |(p, r)| alpha * inner(weighted[p].view(), d.atoms[r].view()));
        let mut g: Array1<f64> = d.atoms.iter().map(|cs| alpha * inner(g_atoms.view(), cs.view())).collect();

        if let Some(fa) = &d.feature_atoms {
            let a = features.ok_or(GdlError::MissingFeatures)?;
            if a.nrows() != c.nrows() || a.ncols() != fa[0].ncols() {
                return Err(GdlError::ShapeMismatch("graph features do not match feature atoms".into()));
            }
            let ta = t.t().dot(&a);
            let beta = 1.0 - alpha;
            for p in 0..s {
                for r in 0..s {
                    let mut acc = 0.0;
                    for j in 0..n_atoms {
                        acc += h_atoms[j] * fa[p].row(j).dot(&fa[r].row(j));
                    }
                    q[[p, r]] += beta * acc;
                }
                g[p] += beta * inner(ta.view(), fa[p].view());
            }
        }
        Ok(WeightProblem { q, g, lambda })
    }

    /// Objective without the constant term.
    pub fn value(&self, w: ArrayView1<'_, f64>) -> f64 {
        w.dot(&self.q.dot(&w)) - 2.0 * self.g.dot(&w) - self.lambda * w.dot(&w)
    }

    /// Gradient of the (F)GW term alone.
    pub fn data_gradient(&self, w: ArrayView1<'_, f64>) -> Array1<f64> {
        2.0 * self.q.dot(&w) - 2.0 * &self.g
    }

    /// Gradient including the `-2λw` term.
    pub fn gradient(&self, w: ArrayView1<'_, f64>) -> Array1<f64> {
        self.data_gradient(w) - 2.0 * self.lambda * &w
    }

    /// Coefficients `(a, b)` with `value(w + γ(x - w)) = value(w) + aγ² + bγ`.
    pub fn line_search_coefficients(&self, w: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> (f64, f64) {
        let delta = &x - &w;
        let qd = self.q.dot(&delta);
        let a = delta.dot(&qd) - self.lambda * delta.dot(&delta);
        let b = 2.0 * w.dot(&qd) - 2.0 * self.g.dot(&delta) - 2.0 * self.lambda * w.dot(&delta);
        (a, b)
    }

    /// One conditional-gradient step; returns the new point and the step size.
    pub fn step(&self, w: ArrayView1<'_, f64>) -> (Array1<f64>, f64) {
        let grad = self.gradient(w);
        let k = argmin(grad.view());
        let mut x = Array1::zeros(w.len());
        x[k] = 1.0;
        let (a, b) = self.line_search_coefficients(w, x.view());
        let gamma = quadratic_line_search(a, b);
        if gamma <= 0.0 {
            return (w.to_owned(), 0.0);
        }
        let z = &w * (1.0 - gamma) + &x * gamma;
        (z, gamma)
    }

    /// Runs conditional gradient from `w0` until it stalls.
    pub fn solve(&self, w0: ArrayView1<'_, f64>, max_iter: usize) -> Array1<f64> {
        let mut w = w0.to_owned();
        let mut f = self.value(w.view());
        for _ in 0..max_iter {
            let (z, gamma) = self.step(w.view());
            if gamma <= 0.0 {
                break;
            }
            let fz = self.value(z.view());
            if fz > f {
                break;
            }
            let stalled = f - fz <= 1e-15 * f.abs().max(1.0);
            w = z;
            f = fz;
            if stalled {
                break;
            }
        }
        w
    }
}

fn inner(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Index of the smallest entry, lowest index on ties.
pub(crate) fn argmin(x: ArrayView1<'_, f64>) -> usize {
    let mut k = 0;
    for (i, &v) in x.iter().enumerate() {
        if v < x[k] {
            k = i;
        }
    }
    k
}

/// Gradient of the (F)GW objective w.r.t. `w` at a fixed coupling.
///
/// Atom-side weights are the column marginals of `t`; the `-2λw` term of
/// the regularized loss is not included.
pub fn weights_gradient(
    c: ArrayView2<'_, f64>,
    features: Option<ArrayView2<'_, f64>>,
    d: &Dictionary,
    w: ArrayView1<'_, f64>,
    t: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    if w.len() != d.n_atoms() {
        return Err(GdlError::LengthMismatch { expected: d.n_atoms(), got: w.len() });
    }
    let h = t.sum_axis(ndarray::Axis(0));
    let problem = WeightProblem::new(c, features, d, t, h.view(), 0.0)?;
    Ok(problem.data_gradient(w))
}

/// One conditional-gradient update of `w` at a fixed coupling.
pub fn weights_cg_step(
    c: ArrayView2<'_, f64>,
    features: Option<ArrayView2<'_, f64>>,
    d: &Dictionary,
    w: &Histogram,
    t: ArrayView2<'_, f64>,
    lambda: f64,
) -> Result<Histogram> {
    if w.len() != d.n_atoms() {
        return Err(GdlError::LengthMismatch { expected: d.n_atoms(), got: w.len() });
    }
    let h = t.sum_axis(ndarray::Axis(0));
    let problem = WeightProblem::new(c, features, d, t, h.view(), lambda)?;
    Ok(Histogram::from_simplex_point(problem.step(w.view()).0))
}

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    Gw,
    Fgw,
    Extended,
}

struct Bcd<'a> {
    c: ArrayView2<'a, f64>,
    features: Option<ArrayView2<'a, f64>>,
    h: &'a Histogram,
    d: &'a Dictionary,
    lambda: f64,
    mu: f64,
    variant: Variant,
    opts: &'a UnmixOptions,
}

impl Bcd<'_> {
    fn coupling(&self, w: ArrayView1<'_, f64>, h_atoms: &Histogram, init: Option<Coupling>) -> Result<GwResult> {
        let mut gw = self.opts.gw.clone();
        if init.is_some() {
            gw.init = init;
        }
        let c_tilde = self.d.structure(w);
        match self.variant {
            Variant::Fgw => {
                let a = self.features.ok_or(GdlError::MissingFeatures)?;
                let a_tilde = self.d.features(w).ok_or(GdlError::MissingFeatures)?;
                fgw_solve(self.c, a, c_tilde.view(), a_tilde.view(), self.h, h_atoms, self.d.alpha, &gw)
            }
            _ => gw_solve(self.c, c_tilde.view(), self.h, h_atoms, &gw),
        }
    }

    fn run(&self, w0: Array1<f64>, v0: Option<Array1<f64>>) -> Result<UnmixResult> {
        let s = self.d.n_atoms();
        let mut w = w0;
        let mut v = v0;
        let mut warm: Option<Coupling> = None;
        let mut trace = Vec::new();
        let mut sweeps = 0;
        let mut accepted: Option<UnmixResult> = None;
        loop {
            let h_atoms = self.d.node_weights(v.as_ref().map(|v| v.view()));
            let res = self.coupling(w.view(), &h_atoms, warm.take())?;
            let mut loss = res.value - self.lambda * w.dot(&w);
            if let Some(v) = &v {
                loss -= self.mu * v.dot(v);
            }
            // the dual-based v-step is not a guaranteed descent step; keep the last accepted triple
            if let Some(mut prev) = accepted.take().filter(|p: &UnmixResult| loss > p.loss) {
                prev.loss_trace = trace;
                return Ok(prev);
            }
            let converged = trace.last().is_some_and(|&prev: &f64| {
                (prev - loss).abs() <= self.opts.tol * prev.abs().max(f64::MIN_POSITIVE)
            });
            trace.push(loss);
            let current = UnmixResult {
                embedding: Embedding {
                    w: Histogram::from_simplex_point(w.clone()),
                    v: v.clone().map(Histogram::from_simplex_point),
                },
                coupling: res.coupling,
                duals: res.duals,
                loss,
                bcd_iterations: sweeps,
                loss_trace: Vec::new(),
            };
            if converged || sweeps >= self.opts.max_bcd || s == 1 && self.variant != Variant::Extended {
                return Ok(UnmixResult { loss_trace: trace, ..current });
            }
            sweeps += 1;

            let mut h_next = h_atoms;
            let mut v_changed = false;
            if let Some(v_cur) = v.as_mut() {
                let v_new = self.update_node_weights(v_cur.view(), &current.duals.beta);
                v_changed = v_new != *v_cur;
                *v_cur = v_new;
                h_next = self.d.node_weights(Some(v_cur.view()));
            }
            let problem = WeightProblem::new(
                self.c,
                self.features.filter(|_| self.variant == Variant::Fgw),
                self.d,
                current.coupling.0.view(),
                h_next.view(),
                self.lambda,
            )?;
            w = problem.solve(w.view(), self.opts.max_inner);
            // the coupling stays feasible only if the atom-side marginal is unchanged
            if !v_changed {
                warm = Some(current.coupling.clone());
            }
            accepted = Some(current);
        }
    }

    /// Minimizes `<ũ, h̃(v)> - μ ||v||²` over the simplex by conditional gradient.
    fn update_node_weights(&self, v: ArrayView1<'_, f64>, atom_duals: &Array1<f64>) -> Array1<f64> {
        let weight_atoms = self.d.weight_atoms.as_ref().expect("extended variant has weight atoms");
        let lin: Array1<f64> = weight_atoms.iter().map(|hs| atom_duals.dot(hs.as_array())).collect();
        let mu = self.mu;
        let value = |v: &Array1<f64>| lin.dot(v) - mu * v.dot(v);
        let mut v = v.to_owned();
        for _ in 0..self.opts.max_inner {
            let grad = &lin - &(2.0 * mu * &v);
            let k = argmin(grad.view());
            let mut x = Array1::zeros(v.len());
            x[k] = 1.0;
            let delta = &x - &v;
            let a = -mu * delta.dot(&delta);
            let b = lin.dot(&delta) - 2.0 * mu * v.dot(&delta);
            let gamma = quadratic_line_search(a, b);
            if gamma <= 0.0 {
                break;
            }
            let z = &v + &(gamma * &delta);
            if value(&z) >= value(&v) {
                break;
            }
            v = z;
        }
        v
    }

    fn best_of_starts(&self) -> Result<UnmixResult> {
        let s = self.d.n_atoms();
        let uniform = Array1::from_elem(s, 1.0 / s as f64);
        let w0 = self.opts.init_w.as_ref().map_or(uniform.clone(), |w| w.as_array().clone());
        let v0 = (self.variant == Variant::Extended)
            .then(|| self.opts.init_v.as_ref().map_or(uniform.clone(), |v| v.as_array().clone()));
        if w0.len() != s || v0.as_ref().is_some_and(|v| v.len() != s) {
            return Err(GdlError::LengthMismatch { expected: s, got: w0.len() });
        }
        let mut best = self.run(w0, v0)?;
        if self.opts.vertex_restarts && s > 1 {
            for k in 0..s {
                let vertex = Histogram::vertex(s, k).into_inner();
                let v = (self.variant == Variant::Extended).then(|| vertex.clone());
                let candidate = self.run(vertex, v)?;
                if candidate.loss < best.loss {
                    best = candidate;
                }
            }
        }
        Ok(best)
    }
}

fn check_graph_inputs(c: ArrayView2<'_, f64>, h: &Histogram, d: &Dictionary) -> Result<()> {
    if c.nrows() != c.ncols() {
        return Err(GdlError::ShapeMismatch(format!("C is {:?}", c.shape())));
    }
    if h.len() != c.nrows() {
        return Err(GdlError::LengthMismatch { expected: c.nrows(), got: h.len() });
    }
    d.validate()
}

/// GW unmixing `min_w GW²(C, C̃(w)) - λ||w||²` by block coordinate descent.
pub fn unmix_gw(
    c: ArrayView2<'_, f64>,
    h: &Histogram,
    d: &Dictionary,
    lambda: f64,
    opts: &UnmixOptions,
) -> Result<UnmixResult> {
    check_graph_inputs(c, h, d)?;
    Bcd { c, features: None, h, d, lambda, mu: 0.0, variant: Variant::Gw, opts }.best_of_starts()
}

/// FGW unmixing of a labeled graph; `Ã(w)` shares the embedding of `C̃(w)`.
pub fn unmix_fgw(
    c: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    h: &Histogram,
    d: &Dictionary,
    lambda: f64,
    opts: &UnmixOptions,
) -> Result<UnmixResult> {
    check_graph_inputs(c, h, d)?;
    if !d.has_features() {
        return Err(GdlError::MissingFeatures);
    }
    if a.nrows() != c.nrows() {
        return Err(GdlError::FeatureShapeMismatch { rows: a.nrows(), expected: c.nrows() });
    }
    Bcd { c, features: Some(a), h, d, lambda, mu: 0.0, variant: Variant::Fgw, opts }.best_of_starts()
}

/// Joint unmixing of structure `w` and node weights `v`.
pub fn unmix_extended(
    c: ArrayView2<'_, f64>,
    h: &Histogram,
    d: &Dictionary,
    lambda: f64,
    mu: f64,
    opts: &UnmixOptions,
) -> Result<UnmixResult> {
    check_graph_inputs(c, h, d)?;
    if d.weight_atoms.is_none() {
        return Err(GdlError::MissingWeightAtoms);
    }
    Bcd { c, features: None, h, d, lambda, mu, variant: Variant::Extended, opts }.best_of_starts()
}

/// Unmixes `g` with the variant implied by the dictionary: extended when it
/// carries weight atoms, fused when it carries feature atoms, plain GW
/// otherwise. Regularizers come from the dictionary.
pub fn unmix(g: &GraphRepr, d: &Dictionary, opts: &UnmixOptions) -> Result<UnmixResult> {
    if d.weight_atoms.is_some() {
        unmix_extended(g.c.view(), &g.h, d, d.lambda, d.mu, opts)
    } else if d.has_features() {
        let a = g.features.as_ref().ok_or(GdlError::MissingFeatures)?;
        unmix_fgw(g.c.view(), a.view(), &g.h, d, d.lambda, opts)
    } else {
        unmix_gw(g.c.view(), &g.h, d, d.lambda, opts)
    }
}

/// Unmixes every graph of a dataset (concurrently, results in input order).
pub fn unmix_all(graphs: &[GraphRepr], d: &Dictionary, opts: &UnmixOptions) -> Result<Vec<UnmixResult>> {
    use rayon::prelude::*;
    graphs.par_iter().map(|g| unmix(g, d, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_atoms() -> Dictionary {
        Dictionary::new(vec![Array2::zeros((2, 2)), Array2::ones((2, 2))], 0.0).unwrap()
    }

    #[test]
    fn reconstruct_single_and_vertices() {
        let d = two_atoms();
        let g = reconstruct(&d, &Embedding::structure_only(Histogram::vertex(2, 1))).unwrap();
        assert_eq!(g.c, Array2::<f64>::ones((2, 2)));
        let g = reconstruct(&d, &Embedding::structure_only(Histogram::uniform(2))).unwrap();
        assert_eq!(g.c, Array2::from_elem((2, 2), 0.5));
        let err = reconstruct(&d, &Embedding::structure_only(Histogram::uniform(3))).unwrap_err();
        assert_eq!(err, GdlError::LengthMismatch { expected: 2, got: 3 });

        let single = Dictionary::new(vec![array![[0.0, 2.0], [2.0, 1.0]]], 0.0).unwrap();
        let g = reconstruct(&single, &Embedding::structure_only(Histogram::uniform(1))).unwrap();
        assert_eq!(g.c, single.atoms[0]);
        assert_eq!(g.h, Histogram::uniform(2));
    }

    #[test]
    fn direction_is_argmin_vertex() {
        assert_eq!(argmin(array![3.0, 1.0, 2.0].view()), 1);
        assert_eq!(argmin(array![1.0, 1.0, 2.0].view()), 0);
    }

    #[test]
    fn cg_step_keeps_optimal_vertex() {
        // C equals atom 0 exactly: w = e_0 is optimal for T = diag(h) with λ = 0.
        let c = array![[0.0, 1.0], [1.0, 0.0]];
        let d = Dictionary::new(vec![c.clone(), Array2::ones((2, 2))], 0.0).unwrap();
        let t = Array2::from_diag(&array![0.5, 0.5]);
        let w = Histogram::vertex(2, 0);
        let next = weights_cg_step(c.view(), None, &d, &w, t.view(), 0.0).unwrap();
        assert_eq!(next, w);
    }

    #[test]
    fn single_atom_embedding_is_trivial() {
        let d = Dictionary::new(vec![array![[0.0, 1.0], [1.0, 0.0]]], 0.1).unwrap();
        let c = array![[0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let res = unmix_gw(c.view(), &Histogram::uniform(3), &d, 0.1, &UnmixOptions::default()).unwrap();
        assert_eq!(res.embedding.w.to_vec(), vec![1.0]);
    }

    #[test]
    fn fgw_needs_feature_atoms() {
        let d = two_atoms();
        let c = Array2::zeros((2, 2));
        let err = unmix_fgw(c.view(), Array2::zeros((2, 1)).view(), &Histogram::uniform(2), &d, 0.0, &UnmixOptions::default());
        assert_eq!(err.unwrap_err(), GdlError::MissingFeatures);
    }

    #[test]
    fn extended_needs_weight_atoms() {
        let d = two_atoms();
        let c = Array2::zeros((2, 2));
        let err = unmix_extended(c.view(), &Histogram::uniform(2), &d, 0.0, 0.0, &UnmixOptions::default());
        assert_eq!(err.unwrap_err(), GdlError::MissingWeightAtoms);
    }
}
