//! Stochastic block model graphs and the simulated D1/D2 datasets.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdlError, Result};
use crate::model::GraphRepr;

/// Inter-cluster connection probability of the simulated datasets.
pub const P_INTER: f64 = 0.1;
pub const P_INTRA: f64 = 1.0 - P_INTER;

#[derive(Debug, Clone, PartialEq)]
pub struct SbmSpec {
    pub blocks: Vec<usize>,
    pub p_intra: f64,
    pub p_inter: f64,
    pub seed: u64,
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().sum::<usize>() == 0 {
            return Err(GdlError::InvalidArgument("SBM needs at least one non-empty block".into()));
        }
        for p in [self.p_intra, self.p_inter] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GdlError::InvalidArgument(format!("probability {p} out of [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Samples an SBM adjacency matrix with uniform node weights.
pub fn gen_sbm(spec: &SbmSpec) -> Result<GraphRepr> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sample_sbm(&spec.blocks, spec.p_intra, spec.p_inter, &mut rng)
}

/// Samples an SBM adjacency matrix from an external generator.
pub fn sample_sbm(blocks: &[usize], p_intra: f64, p_inter: f64, rng: &mut impl Rng) -> Result<GraphRepr> {
    SbmSpec { blocks: blocks.to_vec(), p_intra, p_inter, seed: 0 }.validate()?;
    let membership: Vec<usize> = blocks.iter().enumerate().flat_map(|(b, &size)| std::iter::repeat_n(b, size)).collect();
    let n = membership.len();
    let mut c = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if membership[i] == membership[j] { p_intra } else { p_inter };
            if rng.random::<f64>() < p {
                c[[i, j]] = 1.0;
                c[[j, i]] = 1.0;
            }
        }
    }
    GraphRepr::new(c)
}

/// Splits `n` nodes into `k` blocks whose sizes differ by at most one.
pub fn equal_blocks(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|b| n / k + usize::from(b < n % k)).collect()
}

/// Orders `{lo, lo+5, ..., hi}`.
pub fn order_grid(lo: usize, hi: usize) -> Vec<usize> {
    (lo..=hi).step_by(5).collect()
}

/// Default orders of the simulated datasets.
pub fn default_orders() -> Vec<usize> {
    order_grid(10, 60)
}

/// D1: classes dense (label 0), two clusters (1) and three clusters (2) with
/// equal proportions, `per_class` graphs each, interleaved by class.
pub fn gen_d1(per_class: usize, orders: &[usize], seed: u64) -> Result<Vec<GraphRepr>> {
    if orders.is_empty() {
        return Err(GdlError::InvalidArgument("no graph orders given".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * per_class);
    for _ in 0..per_class {
        for class in 0..3 {
            out.push(sample_class(class, orders, &mut rng)?);
        }
    }
    Ok(out)
}

/// One D1 graph of the given class (0: dense, 1: two clusters, 2: three clusters).
pub fn sample_class(class: usize, orders: &[usize], rng: &mut impl Rng) -> Result<GraphRepr> {
    if class > 2 {
        return Err(GdlError::InvalidArgument(format!("unknown class {class}")));
    }
    let n = orders[rng.random_range(0..orders.len())];
    let g = sample_sbm(&equal_blocks(n, class + 1), P_INTRA, P_INTER, rng)?;
    Ok(g.with_label(class as i64))
}

/// D2: two clusters whose first-block proportion is uniform in [0.1, 0.9];
/// the label stores that proportion in percent.
pub fn gen_d2(count: usize, orders: &[usize], seed: u64) -> Result<Vec<GraphRepr>> {
    if orders.is_empty() {
        return Err(GdlError::InvalidArgument("no graph orders given".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = orders[rng.random_range(0..orders.len())];
            let r: f64 = rng.random_range(0.1..=0.9);
            let first = ((r * n as f64).round() as usize).clamp(1, n - 1);
            let g = sample_sbm(&[first, n - first], P_INTRA, P_INTER, &mut rng)?;
            Ok(g.with_label((100.0 * first as f64 / n as f64).round() as i64))
        })
        .collect()
}

/// One segment of a scripted stream: `count` graphs of a D1 class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub class: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub segments: Vec<Segment>,
}

impl StreamSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: StreamSpec =
            serde_json::from_str(text).map_err(|e| GdlError::ParseError { line: e.line(), msg: e.to_string() })?;
        if let Some(s) = spec.segments.iter().find(|s| s.class > 2) {
            return Err(GdlError::ValidationError { record: 1, msg: format!("unknown class {}", s.class) });
        }
        Ok(spec)
    }

    pub fn total(&self) -> usize {
        self.segments.iter().map(|s| s.count).sum()
    }

    /// Step index (in graphs) at which each segment after the first starts.
    pub fn boundaries(&self) -> Vec<usize> {
        self.segments.iter().scan(0, |acc, s| {
            *acc += s.count;
            Some(*acc)
        }).take(self.segments.len().saturating_sub(1)).collect()
    }
}

/// Lazily generated graphs following the segments of `spec`.
pub fn scripted_stream(spec: &StreamSpec, orders: &[usize], seed: u64) -> impl Iterator<Item = GraphRepr> + use<> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orders = orders.to_vec();
    let classes: Vec<usize> = spec.segments.iter().flat_map(|s| std::iter::repeat_n(s.class, s.count)).collect();
    classes.into_iter().map(move |c| sample_class(c, &orders, &mut rng).expect("validated class and orders"))
}
