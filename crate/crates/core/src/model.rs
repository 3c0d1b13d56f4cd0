//! Data model: node histograms, graphs, dictionaries and embeddings.
//!
//! A graph is a pairwise relation matrix `C` (adjacency, shortest paths, ...)
//! together with a probability histogram `h` over its nodes and optional node
//! features. A dictionary stores `S` atoms of a common order `N`; graphs are
//! represented by convex combinations of these atoms.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{GdlError, Result};

/// Tolerance on `|C_ij - C_ji|` for a matrix to count as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Maximal deviation of a histogram's mass from one.
pub const HISTOGRAM_TOL: f64 = 1e-12;

/// Histograms whose mass deviates from one by at most this much are
/// renormalized instead of rejected.
pub const RENORMALIZE_TOL: f64 = 1e-9;

/// Probability vector over a finite set of nodes (or atoms).
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram(Array1<f64>);

impl Histogram {
    /// Builds a histogram, renormalizing small deviations of the total mass.
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(GdlError::BadHistogram("empty histogram".into()));
        }
        if let Some(x) = values.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(GdlError::BadHistogram(format!("invalid entry {x}")));
        }
        let total: f64 = values.sum();
        if (total - 1.0).abs() > RENORMALIZE_TOL {
            return Err(GdlError::BadHistogram(format!("entries sum to {total}")));
        }
        // already normalized up to the histogram invariant: keep the exact values
        if (total - 1.0).abs() <= HISTOGRAM_TOL {
            return Ok(Histogram(values));
        }
        Ok(Histogram(values / total))
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(values))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "uniform histogram needs at least one entry");
        Histogram(Array1::from_elem(n, 1.0 / n as f64))
    }

    /// Vertex `e_k` of the simplex of dimension `n`.
    pub fn vertex(n: usize, k: usize) -> Self {
        let mut v = Array1::zeros(n);
        v[k] = 1.0;
        Histogram(v)
    }

    /// Wraps a vector that is already known to lie on the simplex up to
    /// rounding. Tiny negative entries are clipped and the mass renormalized.
    pub(crate) fn from_simplex_point(mut values: Array1<f64>) -> Self {
        values.mapv_inplace(|x| x.max(0.0));
        let total = values.sum();
        debug_assert!((total - 1.0).abs() < 1e-6, "mass {total} far from one");
        Histogram(values / total)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.to_vec()
    }
}

impl std::ops::Index<usize> for Histogram {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Uniform weights `1/n` over `n` nodes.
pub fn uniform_weights(n: usize) -> Result<Histogram> {
    if n == 0 {
        return Err(GdlError::InvalidArgument("n must be positive".into()));
    }
    Ok(Histogram::uniform(n))
}

/// Degree-based node weights `h_i ∝ (deg_i + a)^b`.
pub fn degree_weights(adjacency: ArrayView2<'_, f64>, a: f64, b: f64) -> Result<Histogram> {
    if adjacency.nrows() != adjacency.ncols() || adjacency.nrows() == 0 {
        return Err(GdlError::ShapeMismatch(format!(
            "adjacency must be square and non-empty, got {:?}",
            adjacency.shape()
        )));
    }
    if !(a >= 0.0) || !(0.0..=1.0).contains(&b) {
        return Err(GdlError::InvalidArgument(format!(
            "power law needs a >= 0 and b in [0, 1], got a={a}, b={b}"
        )));
    }
    let p: Array1<f64> = adjacency
        .rows()
        .into_iter()
        .map(|row| (row.sum() + a).powf(b))
        .collect();
    let total = p.sum();
    if total <= 0.0 {
        return Err(GdlError::AllZeroMass);
    }
    Ok(Histogram(p / total))
}

pub(crate) fn check_symmetric(c: ArrayView2<'_, f64>) -> Result<()> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(GdlError::ShapeMismatch(format!("matrix is {:?}, not square", c.shape())));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (c[[i, j]] - c[[j, i]]).abs();
            if !(gap <= SYMMETRY_TOL) {
                return Err(GdlError::AsymmetricMatrix { i, j, gap });
            }
        }
    }
    Ok(())
}

/// A graph `(C, h)` with optional node features and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphRepr {
    pub c: Array2<f64>,
    pub h: Histogram,
    pub features: Option<Array2<f64>>,
    pub label: Option<i64>,
}

impl GraphRepr {
    /// Graph with uniform node weights and no features.
    pub fn new(c: Array2<f64>) -> Result<Self> {
        let n = c.nrows();
        let g = GraphRepr { h: uniform_weights(n)?, c, features: None, label: None };
        validate_graph(&g)?;
        Ok(g)
    }

    pub fn with_weights(c: Array2<f64>, h: Histogram) -> Result<Self> {
        let g = GraphRepr { c, h, features: None, label: None };
        validate_graph(&g)?;
        Ok(g)
    }

    pub fn with_features(mut self, a: Array2<f64>) -> Result<Self> {
        self.features = Some(a);
        validate_graph(&self)?;
        Ok(self)
    }

    pub fn with_label(mut self, y: i64) -> Self {
        self.label = Some(y);
        self
    }

    pub fn order(&self) -> usize {
        self.c.nrows()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.as_ref().map(|a| a.ncols())
    }
}

/// Checks symmetry of `C`, histogram length and feature row count.
pub fn validate_graph(g: &GraphRepr) -> Result<()> {
    let n = g.c.nrows();
    if n == 0 {
        return Err(GdlError::ShapeMismatch("graph has no nodes".into()));
    }
    if g.c.iter().any(|x| !x.is_finite()) {
        return Err(GdlError::ShapeMismatch("non-finite entry in C".into()));
    }
    check_symmetric(g.c.view())?;
    if g.h.len() != n {
        return Err(GdlError::BadHistogram(format!("length {} for {n} nodes", g.h.len())));
    }
    let sum = g.h.as_array().sum();
    if g.h.as_array().iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > HISTOGRAM_TOL {
        return Err(GdlError::BadHistogram(format!("entries sum to {sum}")));
    }
    if let Some(a) = &g.features {
        if a.nrows() != n {
            return Err(GdlError::FeatureShapeMismatch { rows: a.nrows(), expected: n });
        }
    }
    Ok(())
}

/// Dictionary of `S` graph atoms of common order `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub atoms: Vec<Array2<f64>>,
    pub feature_atoms: Option<Vec<Array2<f64>>>,
    pub weight_atoms: Option<Vec<Histogram>>,
    /// Structure/feature trade-off of the fused objective.
    pub alpha: f64,
    /// Negative quadratic regularization on structure embeddings.
    pub lambda: f64,
    /// Negative quadratic regularization on node-weight embeddings.
    pub mu: f64,
}

impl Dictionary {
    pub fn new(atoms: Vec<Array2<f64>>, lambda: f64) -> Result<Self> {
        let d = Dictionary {
            atoms,
            feature_atoms: None,
            weight_atoms: None,
            alpha: 0.5,
            lambda,
            mu: 0.0,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn order(&self) -> usize {
        self.atoms.first().map_or(0, |c| c.nrows())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_atoms.as_ref().and_then(|f| f.first()).map(|a| a.ncols())
    }

    pub fn has_features(&self) -> bool {
        self.feature_atoms.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.atoms.len();
        if s == 0 {
            return Err(GdlError::InvalidArgument("dictionary needs at least one atom".into()));
        }
        let n = self.order();
        if n == 0 {
            return Err(GdlError::ShapeMismatch("atoms have order 0".into()));
        }
        for c in &self.atoms {
            if c.nrows() != n || c.ncols() != n {
                return Err(GdlError::ShapeMismatch(format!(
                    "atom of shape {:?}, expected ({n}, {n})",
                    c.shape()
                )));
            }
            check_symmetric(c.view())?;
        }
        if let Some(fa) = &self.feature_atoms {
            if fa.len() != s {
                return Err(GdlError::LengthMismatch { expected: s, got: fa.len() });
            }
            let d = fa[0].ncols();
            if fa.iter().any(|a| a.nrows() != n || a.ncols() != d) {
                return Err(GdlError::ShapeMismatch("inconsistent feature atom shapes".into()));
            }
            if !(self.alpha > 0.0 && self.alpha < 1.0) && !(self.alpha == 1.0 || self.alpha == 0.0) {
                return Err(GdlError::InvalidArgument(format!("alpha {} out of [0, 1]", self.alpha)));
            }
        }
        if let Some(wa) = &self.weight_atoms {
            if wa.len() != s {
                return Err(GdlError::LengthMismatch { expected: s, got: wa.len() });
            }
            if wa.iter().any(|h| h.len() != n) {
                return Err(GdlError::BadHistogram("weight atom of wrong length".into()));
            }
        }
        if !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return Err(GdlError::InvalidArgument("regularizers must be nonnegative".into()));
        }
        Ok(())
    }

    /// `Σ_s w_s C̄_s`.
    pub fn structure(&self, w: ArrayView1<'_, f64>) -> Array2<f64> {
        combine(&self.atoms, w)
    }

    /// `Σ_s w_s Ā_s`, if the dictionary carries feature atoms.
    pub fn features(&self, w: ArrayView1<'_, f64>) -> Option<Array2<f64>> {
        self.feature_atoms.as_ref().map(|fa| combine(fa, w))
    }

    /// `Σ_s v_s h̄_s`, or uniform weights when there are no weight atoms.
    pub fn node_weights(&self, v: Option<ArrayView1<'_, f64>>) -> Histogram {
        match (&self.weight_atoms, v) {
            (Some(wa), Some(v)) => {
                let mut h = Array1::zeros(self.order());
                for (hs, &vs) in wa.iter().zip(v.iter()) {
                    h.scaled_add(vs, hs.as_array());
                }
                Histogram::from_simplex_point(h)
            }
            _ => Histogram::uniform(self.order()),
        }
    }
}

pub(crate) fn combine(mats: &[Array2<f64>], w: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(mats[0].raw_dim());
    for (m, &ws) in mats.iter().zip(w.iter()) {
        if ws != 0.0 {
            out.scaled_add(ws, m);
        }
    }
    out
}

/// Simplex coordinates of a graph in the dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// Structure embedding.
    pub w: Histogram,
    /// Node-weight embedding, for dictionaries with weight atoms.
    pub v: Option<Histogram>,
}

impl Embedding {
    pub fn structure_only(w: Histogram) -> Self {
        Embedding { w, v: None }
    }
}
