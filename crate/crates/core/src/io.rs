//! Lazy CSV ingestion of records and clusters.
//!
//! Columns are selected by header name. Line numbers in errors are 1-based
//! physical lines, the header being line 1.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{Cluster, Dims, Observation, Unit};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub y_col: String,
    pub x_cols: Vec<String>,
    pub z_cols: Vec<String>,
    pub cluster_col: Option<String>,
}

impl Schema {
    pub fn new(y_col: impl Into<String>, x_cols: Vec<String>, z_cols: Vec<String>) -> Self {
        Schema { y_col: y_col.into(), x_cols, z_cols, cluster_col: None }
    }

    pub fn with_cluster(mut self, col: impl Into<String>) -> Self {
        self.cluster_col = Some(col.into());
        self
    }

    pub fn dims(&self) -> Dims {
        Dims { d_beta: self.x_cols.len(), d_g: self.z_cols.len() }
    }
}

#[derive(Debug)]
struct Columns {
    y: usize,
    x: Vec<usize>,
    z: Vec<usize>,
    cluster: Option<usize>,
    width: usize,
}

/// Iterator over the units of a CSV source.
pub struct CsvStream<R: Read> {
    reader: csv::Reader<R>,
    cols: Columns,
    dims: Dims,
    record: csv::StringRecord,
    /// Cluster being assembled: id and members.
    pending: Option<(String, Vec<Observation>)>,
    seen: HashSet<String>,
    done: bool,
}

/// Opens `path` and resolves the schema against its header.
pub fn stream_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<CsvStream<BufReader<File>>> {
    let file = File::open(path.as_ref())?;
    CsvStream::from_reader(BufReader::new(file), schema)
}

fn ingest(line: u64, message: impl Into<String>) -> Error {
    Error::Ingest { line, message: message.into() }
}

impl<R: Read> CsvStream<R> {
    pub fn from_reader(rdr: R, schema: &Schema) -> Result<Self> {
        let dims = Dims::new(schema.x_cols.len(), schema.z_cols.len())?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(rdr);
        let header = reader.headers().map_err(|e| ingest(1, e.to_string()))?.clone();
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| ingest(1, format!("missing column '{name}'")))
        };
        let cols = Columns {
            y: find(&schema.y_col)?,
            x: schema.x_cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
            z: schema.z_cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
            cluster: schema.cluster_col.as_deref().map(find).transpose()?,
            width: header.len(),
        };
        Ok(CsvStream {
            reader,
            cols,
            dims,
            record: csv::StringRecord::new(),
            pending: None,
            seen: HashSet::new(),
            done: false,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Next row as `(line, cluster id, record)`.
    fn next_row(&mut self) -> Option<Result<(u64, Option<String>, Observation)>> {
        match self.reader.read_record(&mut self.record) {
            Ok(false) => None,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                Some(Err(ingest(line, e.to_string())))
            }
            Ok(true) => {
                let line = self.record.position().map_or(0, |p| p.line());
                Some(self.parse_row(line).map(|(id, o)| (line, id, o)))
            }
        }
    }

    fn parse_row(&self, line: u64) -> Result<(Option<String>, Observation)> {
        let rec = &self.record;
        if rec.len() != self.cols.width {
            return Err(ingest(line, format!("expected {} fields, found {}", self.cols.width, rec.len())));
        }
        let num = |idx: usize| -> Result<f64> {
            let cell = rec[idx].trim();
            let v: f64 = cell.parse().map_err(|_| ingest(line, format!("non-numeric value '{cell}'")))?;
            if !v.is_finite() {
                return Err(ingest(line, format!("non-finite value '{cell}'")));
            }
            Ok(v)
        };
        let mut obs = Observation::zeros(self.dims);
        obs.y = num(self.cols.y)?;
        for (k, &c) in self.cols.x.iter().enumerate() {
            obs.x[k] = num(c)?;
        }
        for (k, &c) in self.cols.z.iter().enumerate() {
            obs.z[k] = num(c)?;
        }
        let id = self.cols.cluster.map(|c| rec[c].trim().to_string());
        Ok((id, obs))
    }

    fn next_cluster(&mut self) -> Option<Result<Unit>> {
        loop {
            match self.next_row() {
                None => {
                    self.done = true;
                    return self.pending.take().map(|(_, m)| Cluster::new(m).map(Unit::Cluster));
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                Some(Ok((line, id, obs))) => {
                    let id = id.unwrap_or_default();
                    match &mut self.pending {
                        Some((cur, members)) if *cur == id => members.push(obs),
                        _ => {
                            if !self.seen.insert(id.clone()) {
                                self.done = true;
                                return Some(Err(ingest(line, format!("cluster '{id}' is not contiguous"))));
                            }
                            let finished = self.pending.replace((id, vec![obs]));
                            if let Some((_, m)) = finished {
                                return Some(Cluster::new(m).map(Unit::Cluster));
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<R: Read> Iterator for CsvStream<R> {
    type Item = Result<Unit>;

    fn next(&mut self) -> Option<Result<Unit>> {
        if self.done {
            return None;
        }
        if self.cols.cluster.is_some() {
            return self.next_cluster();
        }
        let out = self.next_row().map(|r| r.map(|(_, _, o)| Unit::Single(o)));
        if matches!(out, None | Some(Err(_))) {
            self.done = true;
        }
        out
    }
}

/// Reads every unit of a file into memory.
pub fn read_all(path: impl AsRef<Path>, schema: &Schema) -> Result<Vec<Unit>> {
    stream_csv(path, schema)?.collect()
}
