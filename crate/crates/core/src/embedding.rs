//! Distances and clustering in the embedding space of a dictionary.
//!
//! For two graphs spanned by the same dictionary with shared node weights
//! `h`, the coupling `diag(h)` gives
//!
//! ```text
//! GW²(C̃(w1), C̃(w2)) ≤ Σ_ij h_i h_j (C̃(w1) - C̃(w2))²_ij = (w1 - w2)ᵀ M (w1 - w2)
//! ```
//!
//! with `M_pq = <D_h C̄_p, C̄_q D_h>`, so `||w1 - w2||_M` upper-bounds GW.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{GdlError, Result};
use crate::exact_ot::Coupling;
use crate::gw::{fgw_solve, gw_solve, GwOptions, GwResult};
use crate::model::{check_symmetric, Dictionary, Embedding, GraphRepr, Histogram};
use crate::unmixing::reconstruct;

/// Symmetric positive semi-definite matrix defining `||x||_M = sqrt(xᵀ M x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix(Array2<f64>);

impl MetricMatrix {
    /// Checks symmetry and `λ_min ≥ -1e-9 · trace`.
    pub fn new(m: Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(GdlError::ShapeMismatch(format!("metric matrix is {:?}", m.shape())));
        }
        check_symmetric(m.view())?;
        let min = min_eigenvalue(&m);
        let trace = m.diag().sum();
        if min < -1e-9 * trace.abs() - 1e-15 {
            return Err(GdlError::NumericalFailure(format!(
                "metric matrix not PSD: smallest eigenvalue {min:e}, trace {trace:e}"
            )));
        }
        Ok(MetricMatrix(m))
    }

    pub fn identity(s: usize) -> Self {
        MetricMatrix(Array2::eye(s))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// `xᵀ M x`, clamped at 0.
    pub fn quadratic(&self, x: ArrayView1<'_, f64>) -> f64 {
        x.dot(&self.0.dot(&x)).max(0.0)
    }
}

pub fn min_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    dm.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Structure metric `M_pq = Σ_ij h_i h_j C̄p_ij C̄q_ij`; for dictionaries with
/// feature atoms, `α M + (1-α) M₂` with `M₂_pq = Σ_i h_i <Āp_i, Āq_i>`.
pub fn mahalanobis_matrix(d: &Dictionary, h: &Histogram) -> Result<MetricMatrix> {
    let (s, n) = (d.n_atoms(), d.order());
    if h.len() != n {
        return Err(GdlError::LengthMismatch { expected: n, got: h.len() });
    }
    let hh = Array2::from_shape_fn((n, n), |(i, j)| h[i] * h[j]);
    let weighted: Vec<Array2<f64>> = d.atoms.iter().map(|c| c * &hh).collect();
    let mut m = Array2::zeros((s, s));
    for p in 0..s {
        for q in p..s {
            let v = (&weighted[p] * &d.atoms[q]).sum();
            m[[p, q]] = v;
            m[[q, p]] = v;
        }
    }
    if let Some(fa) = &d.feature_atoms {
        let alpha = d.alpha;
        let hcol = h.as_array().view().insert_axis(ndarray::Axis(1));
        let weighted: Vec<Array2<f64>> = fa.iter().map(|a| a * &hcol).collect();
        for p in 0..s {
            for q in p..s {
                let v = alpha * m[[p, q]] + (1.0 - alpha) * (&weighted[p] * &fa[q]).sum();
                m[[p, q]] = v;
                m[[q, p]] = v;
            }
        }
    }
    MetricMatrix::new(m)
}

/// `||w1 - w2||_M`.
pub fn embedding_distance(m: &MetricMatrix, w1: ArrayView1<'_, f64>, w2: ArrayView1<'_, f64>) -> Result<f64> {
    if w1.len() != m.dim() || w2.len() != m.dim() {
        return Err(GdlError::ShapeMismatch(format!(
            "embeddings of length {} and {} for a {}-dimensional metric",
            w1.len(),
            w2.len(),
            m.dim()
        )));
    }
    Ok(m.quadratic((&w1 - &w2).view()).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMode {
    /// `||w_i - w_j||_M` in the embedding space.
    Mahalanobis,
    /// (F)GW between the reconstructed graphs.
    GwEmbedded,
    /// (F)GW between the original graphs.
    GwInput,
}

impl std::str::FromStr for DistanceMode {
    type Err = GdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahalanobis" => Ok(DistanceMode::Mahalanobis),
            "gw_embedded" => Ok(DistanceMode::GwEmbedded),
            "gw_input" => Ok(DistanceMode::GwInput),
            _ => Err(GdlError::InvalidArgument(format!("unknown distance mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PairwiseOptions {
    /// Shared node weights of the Mahalanobis metric; uniform over the atom
    /// order when `None`. Required for dictionaries with weight atoms.
    pub h: Option<Histogram>,
    /// Report squared distances.
    pub squared: bool,
    pub gw: GwOptions,
}

/// (F)GW between two graphs, fused when both carry features and the
/// dictionary is labeled. When the node weights coincide, the solver is also
/// started from the identity coupling and the better value is kept.
fn graph_distance(a: &GraphRepr, b: &GraphRepr, d: &Dictionary, opts: &GwOptions) -> Result<GwResult> {
    let solve = |o: &GwOptions| match (&a.features, &b.features, d.has_features()) {
        (Some(fa), Some(fb), true) => fgw_solve(a.c.view(), fa.view(), b.c.view(), fb.view(), &a.h, &b.h, d.alpha, o),
        _ => gw_solve(a.c.view(), b.c.view(), &a.h, &b.h, o),
    };
    let mut best = solve(opts)?;
    if a.h == b.h {
        let diag = solve(&opts.clone().with_init(Coupling::diagonal(a.h.view())))?;
        if diag.value < best.value {
            best = diag;
        }
    }
    Ok(best)
}

/// Symmetric matrix of pairwise distances (GW, not GW², unless `squared`).
pub fn pairwise_matrix(
    d: &Dictionary,
    embeddings: &[Embedding],
    mode: DistanceMode,
    graphs: Option<&[GraphRepr]>,
    opts: &PairwiseOptions,
) -> Result<Array2<f64>> {
    let k = match mode {
        DistanceMode::GwInput => graphs.ok_or(GdlError::MissingGraphs)?.len(),
        _ => embeddings.len(),
    };
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| ((i + 1)..k).map(move |j| (i, j))).collect();
    let squared: Vec<f64> = match mode {
        DistanceMode::Mahalanobis => {
            let h = match (&opts.h, &d.weight_atoms) {
                (Some(h), _) => h.clone(),
                (None, None) => Histogram::uniform(d.order()),
                (None, Some(_)) => {
                    return Err(GdlError::InvalidArgument(
                        "dictionary has weight atoms; the Mahalanobis metric needs an explicit h".into(),
                    ))
                }
            };
            let m = mahalanobis_matrix(d, &h)?;
            pairs
                .iter()
                .map(|&(i, j)| Ok(embedding_distance(&m, embeddings[i].w.view(), embeddings[j].w.view())?.powi(2)))
                .collect::<Result<_>>()?
        }
        DistanceMode::GwEmbedded => {
            let rec = embeddings.iter().map(|e| reconstruct(d, e)).collect::<Result<Vec<_>>>()?;
            pairs
                .par_iter()
                .map(|&(i, j)| Ok(graph_distance(&rec[i], &rec[j], d, &opts.gw)?.value))
                .collect::<Result<_>>()?
        }
        DistanceMode::GwInput => {
            let g = graphs.ok_or(GdlError::MissingGraphs)?;
            pairs
                .par_iter()
                .map(|&(i, j)| Ok(graph_distance(&g[i], &g[j], d, &opts.gw)?.value))
                .collect::<Result<_>>()?
        }
    };
    let mut out = Array2::zeros((k, k));
    for (&(i, j), &v) in pairs.iter().zip(&squared) {
        let v = v.max(0.0);
        let x = if opts.squared { v } else { v.sqrt() };
        out[[i, j]] = x;
        out[[j, i]] = x;
    }
    Ok(out)
}

/// Entrywise `exp(-γ D)`.
pub fn kernel_matrix(dist: ArrayView2<'_, f64>, gamma: f64) -> Result<Array2<f64>> {
    if !(gamma >= 0.0) {
        return Err(GdlError::InvalidArgument(format!("gamma {gamma} must be nonnegative")));
    }
    Ok(dist.mapv(|x| (-gamma * x).exp()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Sum of squared distances to the assigned centroids.
    pub cost: f64,
}

const KMEANS_MAX_ITER: usize = 300;

fn sq_dist(metric: Option<&MetricMatrix>, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    let diff = &x - &y;
    match metric {
        Some(m) => m.quadratic(diff.view()),
        None => diff.dot(&diff),
    }
}

fn kmeans_pp(points: ArrayView2<'_, f64>, k: usize, metric: Option<&MetricMatrix>, rng: &mut impl Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centers = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(metric, points.row(i), points.row(centers[0]))).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if b > 0.0 && target < b {
                    pick = i;
                    break;
                }
                target -= b;
            }
            if best[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| best[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            (0..n).find(|i| !centers.contains(i)).unwrap_or(0)
        };
        centers.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(metric, points.row(i), points.row(next)));
        }
    }
    points.select(ndarray::Axis(0), &centers)
}

fn lloyd(points: ArrayView2<'_, f64>, mut centroids: Array2<f64>, metric: Option<&MetricMatrix>) -> KMeansResult {
    let (n, k) = (points.nrows(), centroids.nrows());
    let mut labels = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for i in 0..n {
            let (mut arg, mut best) = (0, f64::INFINITY);
            for c in 0..k {
                let v = sq_dist(metric, points.row(i), centroids.row(c));
                if v < best {
                    best = v;
                    arg = c;
                }
            }
            dist[i] = best;
            if labels[i] != arg {
                labels[i] = arg;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // reseed empty clusters from the points farthest from their centroid
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    labels[i] = c;
                    counts[c] = 1;
                    dist[i] = 0.0;
                    changed = true;
                }
            }
        }
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        for (i, &l) in labels.iter().enumerate() {
            let mut row = sums.row_mut(l);
            row += &points.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        if !changed {
            break;
        }
    }
    let cost = (0..n).map(|i| sq_dist(metric, points.row(i), centroids.row(labels[i]))).sum();
    KMeansResult { labels, centroids, cost }
}

/// Lloyd's k-means under `||·||_M` (Euclidean when `metric` is `None`), best
/// of `restarts` k-means++ initializations by within-cluster cost.
pub fn kmeans(
    points: ArrayView2<'_, f64>,
    k: usize,
    metric: Option<&MetricMatrix>,
    seed: u64,
    restarts: usize,
) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(GdlError::BadK { k, n });
    }
    if let Some(m) = metric {
        if m.dim() != points.ncols() {
            return Err(GdlError::ShapeMismatch(format!("metric of size {} for {}-dimensional points", m.dim(), points.ncols())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let init = kmeans_pp(points, k, metric, &mut rng);
        let res = lloyd(points, init, metric);
        if best.as_ref().is_none_or(|b| res.cost < b.cost) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Stacks the structure embeddings into an `n x S` matrix.
pub fn embedding_matrix(embeddings: &[Embedding]) -> Result<Array2<f64>> {
    let s = embeddings.first().map_or(0, |e| e.w.len());
    if embeddings.iter().any(|e| e.w.len() != s) {
        return Err(GdlError::ShapeMismatch("embeddings of different lengths".into()));
    }
    Ok(Array2::from_shape_fn((embeddings.len(), s), |(i, j)| embeddings[i].w[j]))
}

/// Fraction of point pairs on which two labelings agree.
pub fn rand_index<A: PartialEq, B: PartialEq>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GdlError::LengthMismatch { expected: a.len(), got: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut agree = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (n * (n - 1) / 2) as f64)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(GdlError::LengthMismatch { expected: x.len(), got: y.len() });
    }
    if x.len() < 2 {
        return Err(GdlError::DegenerateVariance);
    }
    let (x, y) = (Array1::from(x.to_vec()), Array1::from(y.to_vec()));
    let dx = &x - x.mean().unwrap();
    let dy = &y - y.mean().unwrap();
    let (sxx, syy) = (dx.dot(&dx), dy.dot(&dy));
    if sxx == 0.0 || syy == 0.0 {
        return Err(GdlError::DegenerateVariance);
    }
    Ok((dx.dot(&dy) / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Upper-triangle entries (excluding the diagonal) in row-major order.
pub fn upper_triangle(m: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = m.nrows();
    (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| m[[i, j]]).collect()
}
