//! Online estimation of dictionary atoms.
//!
//! Each step unmixes a minibatch against a frozen snapshot of the
//! dictionary, then moves the atoms along the gradient of the batch
//! (F)GW objective with couplings and embeddings held fixed, followed by
//! projection onto symmetric matrices (and the simplex for weight atoms).

use std::borrow::Borrow;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{GdlError, Result};
use crate::model::{Dictionary, GraphRepr, Histogram};
use crate::unmixing::{unmix, UnmixOptions, UnmixResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = GdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(GdlError::InvalidArgument(format!("unknown optimizer {s:?}"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub n_atoms: usize,
    pub order: usize,
    pub lambda: f64,
    pub mu: f64,
    /// Structure/feature trade-off, used when the graphs carry features.
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_c: f64,
    /// Feature-atom step; defaults to 0.1 when `alpha < 0.5` and 1.0 otherwise.
    pub lr_a: Option<f64>,
    pub lr_h: f64,
    pub optimizer: Optimizer,
    /// Learn node-weight atoms (extended model).
    pub learn_h: bool,
    /// Clip atom entries to be nonnegative after every step.
    pub nonneg: bool,
    pub seed: u64,
    /// Factor applied to `Σ_k v_s ũ_k` in the weight-atom gradient;
    /// `None` means `1/(2B)`.
    pub weight_grad_scale: Option<f64>,
    pub unmix: UnmixOptions,
}

impl TrainConfig {
    pub fn new(n_atoms: usize, order: usize) -> Self {
        TrainConfig {
            n_atoms,
            order,
            lambda: 1e-3,
            mu: 1e-3,
            alpha: 0.5,
            batch_size: 16,
            epochs: 10,
            lr_c: 0.1,
            lr_a: None,
            lr_h: 0.001,
            optimizer: Optimizer::Adam,
            learn_h: false,
            nonneg: false,
            seed: 0,
            weight_grad_scale: None,
            unmix: UnmixOptions::default(),
        }
    }

    pub fn lr_a(&self) -> f64 {
        self.lr_a.unwrap_or(if self.alpha < 0.5 { 0.1 } else { 1.0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_atoms == 0 || self.order == 0 {
            return Err(GdlError::InvalidArgument("atom count and order must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(GdlError::InvalidArgument("batch size must be at least 1".into()));
        }
        // zero steps are allowed; they freeze the corresponding atoms
        for (name, lr) in [("lr_c", self.lr_c), ("lr_a", self.lr_a()), ("lr_h", self.lr_h)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(GdlError::InvalidArgument(format!("{name} must be a nonnegative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(GdlError::InvalidArgument(format!("alpha {} out of [0, 1]", self.alpha)));
        }
        if !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return Err(GdlError::InvalidArgument("regularizers must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `order x order` relation matrix (and feature rows) drawn from `g`.
///
/// Graphs of exactly the requested order are used as-is; larger graphs
/// contribute the leading principal submatrix of a random node permutation;
/// smaller graphs are resampled with node repetition.
fn sample_atom(g: &GraphRepr, order: usize, rng: &mut impl Rng) -> (Array2<f64>, Option<Array2<f64>>) {
    let n = g.order();
    let nodes: Vec<usize> = if n == order {
        (0..n).collect()
    } else if n > order {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        p.truncate(order);
        p
    } else {
        let mut p: Vec<usize> = (0..n).collect();
        p.extend((n..order).map(|_| rng.random_range(0..n)));
        p.shuffle(rng);
        p
    };
    let c = Array2::from_shape_fn((order, order), |(i, j)| {
        if i == j { g.c[[nodes[i], nodes[i]]] } else { g.c[[nodes[i], nodes[j]]] }
    });
    let a = g.features.as_ref().map(|a| a.select(Axis(0), &nodes));
    (c, a)
}

/// Dictionary initialized from randomly sampled dataset graphs.
pub fn init_dictionary<G: Borrow<GraphRepr>>(dataset: &[G], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Dictionary> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(GdlError::EmptyDataset);
    }
    let exact: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].borrow().order() == cfg.order).collect();
    let larger: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].borrow().order() >= cfg.order).collect();
    let pool: Vec<usize> = if !exact.is_empty() {
        exact
    } else if !larger.is_empty() {
        larger
    } else {
        (0..dataset.len()).collect()
    };
    let with_features = dataset.iter().all(|g| g.borrow().features.is_some());
    let mut atoms = Vec::with_capacity(cfg.n_atoms);
    let mut feature_atoms = Vec::with_capacity(cfg.n_atoms);
    for _ in 0..cfg.n_atoms {
        let g = dataset[pool[rng.random_range(0..pool.len())]].borrow();
        let (c, a) = sample_atom(g, cfg.order, rng);
        atoms.push(project_symmetric(&c));
        if let Some(a) = a {
            feature_atoms.push(a);
        }
    }
    let d = Dictionary {
        atoms,
        feature_atoms: with_features.then_some(feature_atoms),
        weight_atoms: cfg.learn_h.then(|| vec![Histogram::uniform(cfg.order); cfg.n_atoms]),
        alpha: cfg.alpha,
        lambda: cfg.lambda,
        mu: cfg.mu,
    };
    d.validate()?;
    Ok(d)
}

/// Gradients of the batch objective w.r.t. structure and feature atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomGradients {
    pub structure: Vec<Array2<f64>>,
    pub features: Option<Vec<Array2<f64>>>,
}

/// Gradient of `(1/B) Σ_k (F)GW(graph_k, reconstruction_k)` w.r.t. the
/// structure and feature atoms, with couplings and embeddings frozen.
///
/// The atom-side node weights are the column marginals of each coupling.
pub fn atoms_gradient<G: Borrow<GraphRepr>>(batch: &[G], results: &[UnmixResult], d: &Dictionary) -> Result<AtomGradients> {
    if batch.len() != results.len() {
        return Err(GdlError::ShapeMismatch(format!("{} graphs but {} unmixings", batch.len(), results.len())));
    }
    let (s, n) = (d.n_atoms(), d.order());
    let fused = d.has_features();
    let (wc, wa) = if fused { (d.alpha, 1.0 - d.alpha) } else { (1.0, 0.0) };
    let scale = 2.0 / batch.len().max(1) as f64;
    let mut structure = vec![Array2::<f64>::zeros((n, n)); s];
    let mut features = d.feature_atoms.as_ref().map(|fa| vec![Array2::<f64>::zeros(fa[0].raw_dim()); s]);
    for (g, r) in batch.iter().zip(results) {
        let g = g.borrow();
        let t = r.coupling.matrix();
        if t.nrows() != g.order() || t.ncols() != n || r.embedding.w.len() != s {
            return Err(GdlError::ShapeMismatch(format!(
                "coupling {:?} for graph of order {} and atoms of order {n}",
                t.shape(),
                g.order()
            )));
        }
        let w = r.embedding.w.as_array();
        let h = t.sum_axis(Axis(0));
        let c_tilde = d.structure(w.view());
        let mut diff = t.t().dot(&g.c.dot(t));
        diff.zip_mut_with(&c_tilde, |x, &c| *x = c - *x);
        for i in 0..n {
            for j in 0..n {
                diff[[i, j]] += c_tilde[[i, j]] * (h[i] * h[j] - 1.0);
            }
        }
        for (grad, &ws) in structure.iter_mut().zip(w.iter()) {
            if ws != 0.0 {
                grad.scaled_add(scale * wc * ws, &diff);
            }
        }
        if let Some(fg) = features.as_mut() {
            let a = g.features.as_ref().ok_or(GdlError::MissingFeatures)?;
            let a_tilde = d.features(w.view()).ok_or(GdlError::MissingFeatures)?;
            if a.ncols() != a_tilde.ncols() {
                return Err(GdlError::ShapeMismatch(format!("feature dimension {} vs {}", a.ncols(), a_tilde.ncols())));
            }
            let mut fdiff = t.t().dot(a);
            for i in 0..n {
                for k in 0..fdiff.ncols() {
                    fdiff[[i, k]] = h[i] * a_tilde[[i, k]] - fdiff[[i, k]];
                }
            }
            for (grad, &ws) in fg.iter_mut().zip(w.iter()) {
                if ws != 0.0 {
                    grad.scaled_add(scale * wa * ws, &fdiff);
                }
            }
        }
    }
    Ok(AtomGradients { structure, features })
}

/// Gradient w.r.t. the node-weight atoms: `scale · Σ_k v_s ũ_k`, where `ũ_k`
/// are the atom-side duals of the last linearized OT problem. The default
/// scale is `1/(2B)`.
pub fn weight_atoms_gradient(results: &[UnmixResult], d: &Dictionary, scale: Option<f64>) -> Result<Vec<Array1<f64>>> {
    let (s, n) = (d.n_atoms(), d.order());
    let scale = scale.unwrap_or(1.0 / (2.0 * results.len().max(1) as f64));
    let mut grads = vec![Array1::<f64>::zeros(n); s];
    for r in results {
        let v = r.embedding.v.as_ref().ok_or(GdlError::MissingDuals)?;
        let u = &r.duals.beta;
        if u.len() != n || v.len() != s {
            return Err(GdlError::MissingDuals);
        }
        for (grad, &vs) in grads.iter_mut().zip(v.as_array().iter()) {
            if vs != 0.0 {
                grad.scaled_add(scale * vs, u);
            }
        }
    }
    Ok(grads)
}

/// `(M + Mᵀ) / 2`.
pub fn project_symmetric(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let x = 0.5 * (m[[i, j]] + m[[j, i]]);
            out[[i, j]] = x;
            out[[j, i]] = x;
        }
    }
    out
}

/// Entrywise `max(x, 0)`.
pub fn project_nonneg(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|x| x.max(0.0))
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(x: &Array1<f64>) -> Histogram {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    Histogram::from_simplex_point(x.mapv(|v| (v - theta).max(0.0)))
}

/// Per-parameter optimizer memory, owned by the training driver.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: Optimizer,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer) -> Self {
        OptimizerState { kind, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Updates `param` in place; `slot` identifies the parameter tensor.
    fn apply(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in param.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                while self.first.len() <= slot {
                    self.first.push(Vec::new());
                    self.second.push(Vec::new());
                }
                let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                if m.len() != param.len() {
                    *m = vec![0.0; param.len()];
                    *v = vec![0.0; param.len()];
                }
                let c1 = 1.0 - ADAM_BETA1.powi(self.step);
                let c2 = 1.0 - ADAM_BETA2.powi(self.step);
                for i in 0..param.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn update_matrix(state: &mut OptimizerState, slot: usize, m: &mut Array2<f64>, g: &Array2<f64>, lr: f64) {
    let mut p = m.as_standard_layout().into_owned();
    let g = g.as_standard_layout();
    state.apply(slot, p.as_slice_mut().expect("standard layout"), g.as_slice().expect("standard layout"), lr);
    *m = p;
}

/// Outcome of one stochastic update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub dictionary: Dictionary,
    /// Mean regularized unmixing loss over the batch, before the update.
    pub loss: f64,
    pub results: Vec<UnmixResult>,
}

/// Unmixes the batch against `d` and takes one projected optimizer step.
pub fn gdl_step<G: Borrow<GraphRepr> + Sync>(
    d: &Dictionary,
    batch: &[G],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(GdlError::EmptyDataset);
    }
    let results = batch.par_iter().map(|g| unmix(g.borrow(), d, &cfg.unmix)).collect::<Result<Vec<_>>>()?;
    let loss = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;

    let grads = atoms_gradient(batch, &results, d)?;
    let weight_grads = match d.weight_atoms {
        Some(_) => Some(weight_atoms_gradient(&results, d, cfg.weight_grad_scale)?),
        None => None,
    };

    let s = d.n_atoms();
    let mut next = d.clone();
    state.step += 1;
    for (k, (atom, g)) in next.atoms.iter_mut().zip(&grads.structure).enumerate() {
        update_matrix(state, k, atom, g, cfg.lr_c);
        *atom = project_symmetric(atom);
        if cfg.nonneg {
            *atom = project_nonneg(atom);
        }
    }
    if let (Some(fa), Some(fg)) = (next.feature_atoms.as_mut(), grads.features.as_ref()) {
        for (k, (a, g)) in fa.iter_mut().zip(fg).enumerate() {
            update_matrix(state, s + k, a, g, cfg.lr_a());
        }
    }
    if let (Some(wa), Some(wg)) = (next.weight_atoms.as_mut(), weight_grads.as_ref()) {
        for (k, (h, g)) in wa.iter_mut().zip(wg).enumerate() {
            let mut p = h.as_array().to_vec();
            state.apply(2 * s + k, &mut p, g.as_slice().expect("contiguous"), cfg.lr_h);
            *h = project_simplex(&Array1::from(p));
        }
    }
    Ok(StepOutput { dictionary: next, loss, results })
}

/// Per-step losses with their running mean and change events.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub window: usize,
    pub losses: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub events: Vec<bool>,
}

impl LossTrace {
    pub fn new(window: usize) -> Self {
        LossTrace { window: window.max(1), losses: Vec::new(), running_mean: Vec::new(), events: Vec::new() }
    }

    /// Appends a loss and returns the running mean over the last `window` losses.
    pub fn push(&mut self, loss: f64) -> f64 {
        self.losses.push(loss);
        let start = self.losses.len().saturating_sub(self.window);
        let tail = &self.losses[start..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        self.running_mean.push(mean);
        self.events.push(false);
        mean
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Steps at which a change event fired.
    pub fn event_steps(&self) -> Vec<usize> {
        (0..self.events.len()).filter(|&i| self.events[i]).collect()
    }

    /// CSV with header `step,loss,running_mean,event`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,running_mean,event\n");
        for i in 0..self.losses.len() {
            out.push_str(&format!(
                "{},{:?},{:?},{}\n",
                i,
                self.losses[i],
                self.running_mean[i],
                u8::from(self.events[i])
            ));
        }
        out
    }
}

/// Fires when the running mean exceeds `rho` times its minimum since the
/// last event (or since the start).
#[derive(Debug, Clone)]
pub struct ChangeDetector {
    pub rho: f64,
    floor: f64,
}

impl ChangeDetector {
    pub fn new(rho: f64) -> Self {
        ChangeDetector { rho, floor: f64::INFINITY }
    }

    pub fn observe(&mut self, running_mean: f64) -> bool {
        if running_mean > self.rho * self.floor {
            self.floor = running_mean;
            return true;
        }
        self.floor = self.floor.min(running_mean);
        false
    }
}

/// Runs the detector over a loss sequence and returns the event flags.
pub fn detect_events(losses: &[f64], window: usize, rho: f64) -> LossTrace {
    let mut trace = LossTrace::new(window);
    let mut det = ChangeDetector::new(rho);
    for &l in losses {
        let m = trace.push(l);
        *trace.events.last_mut().unwrap() = det.observe(m);
    }
    trace
}

/// Multi-epoch training on a finite dataset with shuffled minibatches.
pub fn fit<G: Borrow<GraphRepr> + Sync>(dataset: &[G], cfg: &TrainConfig) -> Result<(Dictionary, LossTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut d = init_dictionary(dataset, cfg, &mut rng)?;
    let mut state = OptimizerState::new(cfg.optimizer);
    let mut trace = LossTrace::new(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&GraphRepr> = chunk.iter().map(|&i| dataset[i].borrow()).collect();
            let out = gdl_step(&d, &batch, cfg, &mut state)?;
            trace.push(out.loss);
            d = out.dictionary;
        }
    }
    Ok((d, trace))
}

#[derive(Debug, Clone)]
pub struct StreamConfig {
    /// Running-mean window, in batches.
    pub window: usize,
    /// Event threshold relative to the trailing minimum of the running mean.
    pub rho: f64,
    /// Keep a dictionary snapshot every this many steps (0: final only).
    pub snapshot_every: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig { window: 10, rho: 1.5, snapshot_every: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct StreamOutput {
    pub dictionary: Dictionary,
    /// `(step, dictionary)` pairs; the last one is the final dictionary.
    pub snapshots: Vec<(usize, Dictionary)>,
    pub trace: LossTrace,
}

/// Single pass over a graph stream with constant-step SGD. The dictionary is
/// initialized from the first batch.
pub fn fit_stream<I>(source: I, cfg: &TrainConfig, stream: &StreamConfig) -> Result<StreamOutput>
where
    I: IntoIterator<Item = GraphRepr>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(Optimizer::Sgd);
    let mut trace = LossTrace::new(stream.window);
    let mut detector = ChangeDetector::new(stream.rho);
    let mut snapshots = Vec::new();
    let mut d: Option<Dictionary> = None;
    let mut iter = source.into_iter();
    loop {
        let batch: Vec<GraphRepr> = iter.by_ref().take(cfg.batch_size).collect();
        if batch.is_empty() {
            break;
        }
        let current = match d.take() {
            Some(d) => d,
            None => init_dictionary(&batch, cfg, &mut rng)?,
        };
        let out = gdl_step(&current, &batch, cfg, &mut state)?;
        let mean = trace.push(out.loss);
        *trace.events.last_mut().unwrap() = detector.observe(mean);
        d = Some(out.dictionary);
        if stream.snapshot_every > 0 && trace.len() % stream.snapshot_every == 0 {
            snapshots.push((trace.len(), d.clone().unwrap()));
        }
    }
    let dictionary = d.ok_or(GdlError::EmptyDataset)?;
    if snapshots.last().is_none_or(|(step, _)| *step != trace.len()) {
        snapshots.push((trace.len(), dictionary.clone()));
    }
    Ok(StreamOutput { dictionary, snapshots, trace })
}
