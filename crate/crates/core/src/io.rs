//! File formats: JSON-Lines datasets, JSON dictionaries, CSV outputs.
//!
//! Matrices are stored row-major as flat arrays. Floats are written with the
//! shortest representation that parses back to the same bits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{GdlError, Result};
use crate::model::{validate_graph, Dictionary, Embedding, GraphRepr, Histogram};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    n: usize,
    #[serde(rename = "C")]
    c: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<i64>,
}

fn matrix(values: Vec<f64>, rows: usize, cols: usize, what: &str) -> std::result::Result<Array2<f64>, String> {
    if values.len() != rows * cols {
        return Err(format!("{what} has {} entries, expected {}", values.len(), rows * cols));
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())
}

fn flatten(m: ArrayView2<'_, f64>) -> Vec<f64> {
    m.iter().cloned().collect()
}

impl GraphRecord {
    fn into_graph(self) -> std::result::Result<GraphRepr, String> {
        let n = self.n;
        if n == 0 {
            return Err("n must be positive".into());
        }
        let c = matrix(self.c, n, n, "C")?;
        let h = match self.h {
            Some(h) => {
                if h.len() != n {
                    return Err(format!("h has {} entries, expected {n}", h.len()));
                }
                Histogram::from_vec(h).map_err(|e| e.to_string())?
            }
            None => Histogram::uniform(n),
        };
        let features = match (self.a, self.d) {
            (Some(a), Some(d)) => Some(matrix(a, n, d, "A")?),
            (Some(a), None) if a.len() % n == 0 => {
                let d = a.len() / n;
                Some(matrix(a, n, d, "A")?)
            }
            (Some(a), None) => return Err(format!("A has {} entries, not a multiple of n={n}", a.len())),
            (None, _) => None,
        };
        let g = GraphRepr { c, h, features, label: self.y };
        validate_graph(&g).map_err(|e| e.to_string())?;
        Ok(g)
    }

    fn from_graph(g: &GraphRepr) -> Self {
        GraphRecord {
            n: g.order(),
            c: flatten(g.c.view()),
            h: Some(g.h.to_vec()),
            d: g.feature_dim(),
            a: g.features.as_ref().map(|a| flatten(a.view())),
            y: g.label,
        }
    }
}

/// Parses a JSON-Lines dataset; blank lines are skipped.
pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<GraphRepr>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GraphRecord =
            serde_json::from_str(&line).map_err(|e| GdlError::ParseError { line: idx + 1, msg: e.to_string() })?;
        let g = record.into_graph().map_err(|msg| GdlError::ValidationError { record: out.len() + 1, msg })?;
        out.push(g);
    }
    Ok(out)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<GraphRepr>> {
    parse_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset_to(graphs: &[GraphRepr], mut writer: impl Write) -> Result<()> {
    for g in graphs {
        let line = serde_json::to_string(&GraphRecord::from_graph(g)).map_err(|e| GdlError::Io(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_dataset(graphs: &[GraphRepr], path: impl AsRef<Path>) -> Result<()> {
    write_dataset_to(graphs, BufWriter::new(File::create(path)?))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DictionaryRecord {
    #[serde(rename = "S")]
    s: usize,
    #[serde(rename = "N")]
    n: usize,
    atoms: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_atoms: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_atoms: Option<Vec<Vec<f64>>>,
    lambda: f64,
    mu: f64,
}

impl DictionaryRecord {
    fn into_dictionary(self) -> std::result::Result<Dictionary, String> {
        let (s, n) = (self.s, self.n);
        if s == 0 || n == 0 {
            return Err("S and N must be positive".into());
        }
        if self.atoms.len() != s {
            return Err(format!("{} atoms, expected S={s}", self.atoms.len()));
        }
        let atoms = self.atoms.into_iter().map(|a| matrix(a, n, n, "atom")).collect::<std::result::Result<Vec<_>, _>>()?;
        let feature_atoms = match self.feature_atoms {
            Some(fa) => {
                if fa.len() != s {
                    return Err(format!("{} feature atoms, expected S={s}", fa.len()));
                }
                let d = fa[0].len() / n;
                Some(fa.into_iter().map(|a| matrix(a, n, d, "feature atom")).collect::<std::result::Result<Vec<_>, _>>()?)
            }
            None => None,
        };
        let weight_atoms = match self.weight_atoms {
            Some(wa) => {
                if wa.len() != s {
                    return Err(format!("{} weight atoms, expected S={s}", wa.len()));
                }
                Some(
                    wa.into_iter()
                        .map(|h| {
                            if h.len() != n {
                                return Err(format!("weight atom has {} entries, expected N={n}", h.len()));
                            }
                            Histogram::from_vec(h).map_err(|e| e.to_string())
                        })
                        .collect::<std::result::Result<Vec<_>, _>>()?,
                )
            }
            None => None,
        };
        let d = Dictionary {
            atoms,
            feature_atoms,
            weight_atoms,
            alpha: self.alpha.unwrap_or(0.5),
            lambda: self.lambda,
            mu: self.mu,
        };
        d.validate().map_err(|e| e.to_string())?;
        Ok(d)
    }

    fn from_dictionary(d: &Dictionary) -> Self {
        DictionaryRecord {
            s: d.n_atoms(),
            n: d.order(),
            atoms: d.atoms.iter().map(|a| flatten(a.view())).collect(),
            alpha: Some(d.alpha),
            feature_atoms: d.feature_atoms.as_ref().map(|fa| fa.iter().map(|a| flatten(a.view())).collect()),
            weight_atoms: d.weight_atoms.as_ref().map(|wa| wa.iter().map(|h| h.to_vec()).collect()),
            lambda: d.lambda,
            mu: d.mu,
        }
    }
}

pub fn parse_dictionary(text: &str) -> Result<Dictionary> {
    let record: DictionaryRecord = serde_json::from_str(text).map_err(|e| GdlError::ParseError { line: e.line(), msg: e.to_string() })?;
    record.into_dictionary().map_err(|msg| GdlError::ValidationError { record: 1, msg })
}

pub fn dictionary_to_json(d: &Dictionary) -> String {
    serde_json::to_string(&DictionaryRecord::from_dictionary(d)).expect("finite floats serialize")
}

pub fn save_dictionary(d: &Dictionary, path: impl AsRef<Path>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{}", dictionary_to_json(d))?;
    f.flush()?;
    Ok(())
}

pub fn load_dictionary(path: impl AsRef<Path>) -> Result<Dictionary> {
    parse_dictionary(&std::fs::read_to_string(path)?)
}

fn csv_error(e: csv::Error) -> GdlError {
    GdlError::Io(e.to_string())
}

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

/// Writes a matrix as CSV, one row per item, with header `0,1,...`.
pub fn write_matrix_csv(m: ArrayView2<'_, f64>, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record((0..m.ncols()).map(|j| j.to_string())).map_err(csv_error)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|&x| fmt(x))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv(reader: impl std::io::Read) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| GdlError::ParseError { line: i + 2, msg: e.to_string() })?;
        let row = rec
            .iter()
            .map(|x| x.trim().parse::<f64>().map_err(|e| GdlError::ParseError { line: i + 2, msg: e.to_string() }))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(GdlError::ShapeMismatch("ragged CSV matrix".into()));
    }
    let n = rows.len();
    Ok(Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).expect("checked shape"))
}

/// Embeddings CSV: `index,label,w0..w{S-1}` plus `v0..` for extended embeddings.
pub fn write_embeddings_csv(embeddings: &[Embedding], labels: &[Option<i64>], writer: impl Write) -> Result<()> {
    let s = embeddings.first().map_or(0, |e| e.w.len());
    let extended = embeddings.iter().any(|e| e.v.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend((0..s).map(|k| format!("w{k}")));
    if extended {
        header.extend((0..s).map(|k| format!("v{k}")));
    }
    w.write_record(&header).map_err(csv_error)?;
    for (i, e) in embeddings.iter().enumerate() {
        let mut rec = vec![i.to_string(), labels.get(i).copied().flatten().map_or(String::new(), |y| y.to_string())];
        rec.extend(e.w.as_array().iter().map(|&x| fmt(x)));
        if extended {
            match &e.v {
                Some(v) => rec.extend(v.as_array().iter().map(|&x| fmt(x))),
                None => rec.extend(std::iter::repeat_n(String::new(), s)),
            }
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads embeddings written by [`write_embeddings_csv`], with their labels.
pub fn read_embeddings_csv(reader: impl std::io::Read) -> Result<(Vec<Embedding>, Vec<Option<i64>>)> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| GdlError::ParseError { line: 1, msg: e.to_string() })?.clone();
    let w_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with('w')).collect();
    let v_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with('v')).collect();
    let label_col = (0..header.len()).find(|&i| &header[i] == "label");
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| GdlError::ParseError { line, msg: e.to_string() })?;
        let parse = |cols: &[usize]| -> Result<Array1<f64>> {
            cols.iter()
                .map(|&c| rec[c].trim().parse::<f64>().map_err(|e| GdlError::ParseError { line, msg: e.to_string() }))
                .collect()
        };
        let w = Histogram::new(parse(&w_cols)?).map_err(|e| GdlError::ValidationError { record: i + 1, msg: e.to_string() })?;
        let v = if !v_cols.is_empty() && !rec[v_cols[0]].trim().is_empty() {
            Some(Histogram::new(parse(&v_cols)?).map_err(|e| GdlError::ValidationError { record: i + 1, msg: e.to_string() })?)
        } else {
            None
        };
        let label = match label_col.map(|c| rec[c].trim()) {
            Some(s) if !s.is_empty() => {
                Some(s.parse::<i64>().map_err(|e| GdlError::ParseError { line, msg: e.to_string() })?)
            }
            _ => None,
        };
        embeddings.push(Embedding { w, v });
        labels.push(label);
    }
    Ok((embeddings, labels))
}

/// Cluster assignments CSV: `index,cluster,label`.
pub fn write_labels_csv(clusters: &[usize], labels: &[Option<i64>], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "cluster", "label"]).map_err(csv_error)?;
    for (i, c) in clusters.iter().enumerate() {
        let y = labels.get(i).copied().flatten().map_or(String::new(), |y| y.to_string());
        w.write_record([i.to_string(), c.to_string(), y]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
