//! Command-line front end: data generation, training, embedding, distances,
//! clustering, streaming runs and correlation reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array1;

use crate::dictionary::{fit, fit_stream, Optimizer, StreamConfig, TrainConfig};
use crate::embedding::{
    embedding_matrix, kmeans, mahalanobis_matrix, pairwise_matrix, pearson, rand_index, upper_triangle, DistanceMode,
    PairwiseOptions,
};
use crate::error::{GdlError, Result};
use crate::gw::GwOptions;
use crate::io::{
    load_dictionary, read_dataset, read_embeddings_csv, save_dictionary, write_dataset, write_embeddings_csv,
    write_labels_csv, write_matrix_csv,
};
use crate::model::{Embedding, GraphRepr, Histogram};
use crate::sbm::{gen_d1, gen_d2, order_grid, scripted_stream, StreamSpec};
use crate::unmixing::{unmix_all, UnmixOptions};

#[derive(Debug, Parser)]
#[command(name = "gdl", version, about = "Online graph dictionary learning with (fused) Gromov-Wasserstein")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated SBM dataset (JSON Lines).
    Gen(GenArgs),
    /// Learn a dictionary on a dataset.
    Fit(FitArgs),
    /// Unmix a dataset on a saved dictionary.
    Embed(EmbedArgs),
    /// Pairwise distance matrix.
    Dist(DistArgs),
    /// k-means on embeddings, with a Rand Index report when labels are known.
    Cluster(ClusterArgs),
    /// Single-pass learning over a scripted stream of SBM classes.
    Stream(StreamArgs),
    /// Pearson correlations between input GW, Mahalanobis and embedded GW distances.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    D1,
    D2,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(value_enum)]
    pub kind: DatasetKind,
    /// Graphs per class (D1).
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Number of graphs (D2).
    #[arg(long, default_value_t = 150)]
    pub count: usize,
    #[command(flatten)]
    pub orders: OrderArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OrderArgs {
    /// Smallest graph order; orders are drawn from {min, min+5, ..., max}.
    #[arg(long, default_value_t = 10)]
    pub min_order: usize,
    #[arg(long, default_value_t = 60)]
    pub max_order: usize,
}

impl OrderArgs {
    fn grid(&self) -> Result<Vec<usize>> {
        if self.min_order == 0 || self.min_order > self.max_order {
            return Err(GdlError::InvalidArgument(format!(
                "bad order range [{}, {}]",
                self.min_order, self.max_order
            )));
        }
        Ok(order_grid(self.min_order, self.max_order))
    }
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Number of GW solver runs per problem (extra runs start from random vertices).
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
    /// Relative tolerance of the unmixing loop.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SolverArgs {
    fn gw(&self) -> GwOptions {
        GwOptions { restarts: self.restarts.max(1), seed: self.seed, ..GwOptions::default() }
    }

    fn unmix(&self) -> UnmixOptions {
        UnmixOptions { tol: self.tol, gw: self.gw(), ..UnmixOptions::default() }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 3)]
    pub atoms: usize,
    #[arg(long, default_value_t = 6)]
    pub order: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr_c: f64,
    #[arg(long)]
    pub lr_a: Option<f64>,
    #[arg(long, default_value_t = 0.001)]
    pub lr_h: f64,
    #[arg(long, default_value = "adam")]
    pub optimizer: Optimizer,
    /// Learn node-weight atoms.
    #[arg(long)]
    pub learn_h: bool,
    /// Clip atom entries to be nonnegative.
    #[arg(long)]
    pub nonneg: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            mu: self.mu,
            alpha: self.alpha,
            batch_size: self.batch,
            epochs: self.epochs,
            lr_c: self.lr_c,
            lr_a: self.lr_a,
            lr_h: self.lr_h,
            optimizer: self.optimizer,
            learn_h: self.learn_h,
            nonneg: self.nonneg,
            seed: self.solver.seed,
            unmix: self.solver.unmix(),
            ..TrainConfig::new(self.atoms, self.order)
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Dictionary output (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace output; defaults to the dictionary path with a `.loss.csv` extension.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistArgs {
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Input graphs, required by `gw_input`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// mahalanobis | gw_embedded | gw_input
    #[arg(long, default_value = "mahalanobis")]
    pub mode: DistanceMode,
    #[arg(long)]
    pub squared: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClusterMetric {
    Mahalanobis,
    Euclidean,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Dictionary defining the Mahalanobis metric.
    #[arg(long)]
    pub dict: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ClusterMetric::Mahalanobis)]
    pub metric: ClusterMetric,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// k-means++ initializations.
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Stream spec: {"segments": [{"class": c, "count": n}, ...]}.
    #[arg(long)]
    pub spec: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub orders: OrderArgs,
    /// Running-mean window, in batches.
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    #[arg(long, default_value_t = 1.5)]
    pub rho: f64,
    /// Loss CSV with running mean and events.
    #[arg(long)]
    pub out: PathBuf,
    /// Final dictionary (JSON).
    #[arg(long)]
    pub dict_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    /// Precomputed embeddings; the dataset is unmixed when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Use only the first graphs of the dataset.
    #[arg(long)]
    pub max_graphs: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Upper-triangle distances as CSV (gw_input, mahalanobis, gw_embedded).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn labels_of(graphs: &[GraphRepr]) -> Vec<Option<i64>> {
    graphs.iter().map(|g| g.label).collect()
}

fn load_embeddings(path: &Path) -> Result<(Vec<Embedding>, Vec<Option<i64>>)> {
    read_embeddings_csv(File::open(path)?)
}

fn check_count(embeddings: &[Embedding], graphs: &[GraphRepr]) -> Result<()> {
    if embeddings.len() != graphs.len() {
        return Err(GdlError::LengthMismatch { expected: graphs.len(), got: embeddings.len() });
    }
    Ok(())
}

/// Runs a parsed command, writing reports to `stdout`.
pub fn execute(cli: Cli, stdout: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let orders = a.orders.grid()?;
            let graphs = match a.kind {
                DatasetKind::D1 => gen_d1(a.per_class, &orders, a.seed)?,
                DatasetKind::D2 => gen_d2(a.count, &orders, a.seed)?,
            };
            write_dataset(&graphs, &a.out)?;
            writeln!(stdout, "graphs={}", graphs.len())?;
        }
        Command::Fit(a) => {
            let graphs = read_dataset(&a.data)?;
            let (d, trace) = fit(&graphs, &a.train.config())?;
            save_dictionary(&d, &a.out)?;
            let loss_path = a.loss_out.unwrap_or_else(|| a.out.with_extension("loss.csv"));
            std::fs::write(&loss_path, trace.to_csv())?;
            writeln!(stdout, "steps={}", trace.len())?;
            if let Some(last) = trace.losses.last() {
                writeln!(stdout, "final_loss={last:?}")?;
            }
        }
        Command::Embed(a) => {
            let graphs = read_dataset(&a.data)?;
            let d = load_dictionary(&a.dict)?;
            let results = unmix_all(&graphs, &d, &a.solver.unmix())?;
            let embeddings: Vec<Embedding> = results.into_iter().map(|r| r.embedding).collect();
            let mut w = create(&a.out)?;
            write_embeddings_csv(&embeddings, &labels_of(&graphs), &mut w)?;
            w.flush()?;
        }
        Command::Dist(a) => {
            let d = load_dictionary(&a.dict)?;
            let graphs = a.data.as_deref().map(read_dataset).transpose()?;
            let embeddings = match &a.embeddings {
                Some(p) => load_embeddings(p)?.0,
                None if a.mode == DistanceMode::GwInput => Vec::new(),
                None => return Err(GdlError::InvalidArgument(format!("--embeddings is required for mode {:?}", a.mode))),
            };
            let opts = PairwiseOptions { h: None, squared: a.squared, gw: a.solver.gw() };
            let m = pairwise_matrix(&d, &embeddings, a.mode, graphs.as_deref(), &opts)?;
            let mut w = create(&a.out)?;
            write_matrix_csv(m.view(), &mut w)?;
            w.flush()?;
        }
        Command::Cluster(a) => {
            let (embeddings, labels) = load_embeddings(&a.embeddings)?;
            let points = embedding_matrix(&embeddings)?;
            let metric = match a.metric {
                ClusterMetric::Euclidean => None,
                ClusterMetric::Mahalanobis => {
                    let path = a.dict.as_ref().ok_or_else(|| {
                        GdlError::InvalidArgument("--dict is required for the Mahalanobis metric".into())
                    })?;
                    let d = load_dictionary(path)?;
                    Some(mahalanobis_matrix(&d, &Histogram::uniform(d.order()))?)
                }
            };
            let res = kmeans(points.view(), a.k, metric.as_ref(), a.seed, a.restarts.max(1))?;
            if let Some(out) = &a.out {
                let mut w = create(out)?;
                write_labels_csv(&res.labels, &labels, &mut w)?;
                w.flush()?;
            }
            writeln!(stdout, "cost={:?}", res.cost)?;
            if labels.iter().all(Option::is_some) {
                let truth: Vec<i64> = labels.iter().flatten().copied().collect();
                writeln!(stdout, "rand_index={:?}", rand_index(&res.labels, &truth)?)?;
            }
        }
        Command::Stream(a) => {
            let spec = StreamSpec::parse(&std::fs::read_to_string(&a.spec)?)?;
            let orders = a.orders.grid()?;
            let cfg = a.train.config();
            let stream = StreamConfig { window: a.window, rho: a.rho, snapshot_every: 0 };
            let out = fit_stream(scripted_stream(&spec, &orders, cfg.seed), &cfg, &stream)?;
            std::fs::write(&a.out, out.trace.to_csv())?;
            if let Some(p) = &a.dict_out {
                save_dictionary(&out.dictionary, p)?;
            }
            let boundaries: Vec<usize> = spec.boundaries().iter().map(|b| b / cfg.batch_size).collect();
            writeln!(stdout, "steps={}", out.trace.len())?;
            writeln!(stdout, "switch_steps={boundaries:?}")?;
            writeln!(stdout, "events={:?}", out.trace.event_steps())?;
        }
        Command::Eval(a) => {
            let mut graphs = read_dataset(&a.data)?;
            if let Some(m) = a.max_graphs {
                graphs.truncate(m);
            }
            let d = load_dictionary(&a.dict)?;
            let embeddings = match &a.embeddings {
                Some(p) => {
                    let mut e = load_embeddings(p)?.0;
                    e.truncate(graphs.len());
                    e
                }
                None => unmix_all(&graphs, &d, &a.solver.unmix())?.into_iter().map(|r| r.embedding).collect(),
            };
            check_count(&embeddings, &graphs)?;
            let opts = PairwiseOptions { h: None, squared: false, gw: a.solver.gw() };
            let dist = |mode| pairwise_matrix(&d, &embeddings, mode, Some(&graphs), &opts).map(|m| upper_triangle(m.view()));
            let gw_in = dist(DistanceMode::GwInput)?;
            let maha = dist(DistanceMode::Mahalanobis)?;
            let gw_emb = dist(DistanceMode::GwEmbedded)?;
            if let Some(out) = &a.out {
                let cols: Vec<Array1<f64>> = [&gw_in, &maha, &gw_emb].iter().map(|v| Array1::from_vec(v.to_vec())).collect();
                let table = ndarray::stack(ndarray::Axis(1), &[cols[0].view(), cols[1].view(), cols[2].view()])
                    .map_err(|e| GdlError::ShapeMismatch(e.to_string()))?;
                let mut w = create(out)?;
                write_matrix_csv(table.view(), &mut w)?;
                w.flush()?;
            }
            writeln!(stdout, "pairs={}", gw_in.len())?;
            writeln!(stdout, "pearson_gw_input_mahalanobis={:?}", pearson(&gw_in, &maha)?)?;
            writeln!(stdout, "pearson_mahalanobis_gw_embedded={:?}", pearson(&maha, &gw_emb)?)?;
            writeln!(stdout, "pearson_gw_input_gw_embedded={:?}", pearson(&gw_in, &gw_emb)?)?;
        }
    }
    Ok(())
}
