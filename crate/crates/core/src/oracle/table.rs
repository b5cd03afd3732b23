use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::domain::{Prediction, TokenId};
use crate::scalar::Probability;

use super::{Oracle, OracleError, OracleRequest, OracleResponse};

/// One recorded prediction. `fp` is the fingerprint of the full canvas
/// (prompt and generation region) and `pos` is an absolute index into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub fp: String,
    pub pos: usize,
    pub tok: TokenId,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist: Option<Vec<f64>>,
}

/// How a table oracle reports `forward_cost`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardCost {
    /// One per predict call, whatever the batch size.
    #[default]
    PerCall,
    /// One per state in the batch, as a model server counts.
    PerState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    table: String,
    version: u32,
    #[serde(default)]
    forwards: ForwardCost,
}

const TABLE_TAG: &str = "pvf-oracle";

/// Replays recorded predictions keyed by `(fingerprint, position)`.
#[derive(Debug, Clone, Default)]
pub struct TableOracle {
    entries: BTreeMap<(String, usize), TableEntry>,
    cost: ForwardCost,
}

impl TableOracle {
    pub fn new(entries: impl IntoIterator<Item = TableEntry>) -> Result<Self, OracleError> {
        let mut table = Self::default();
        for e in entries {
            table.insert(e)?;
        }
        Ok(table)
    }

    pub fn with_forward_cost(mut self, cost: ForwardCost) -> Self {
        self.cost = cost;
        self
    }

    pub fn forward_cost(&self) -> ForwardCost {
        self.cost
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TableEntry> {
        self.entries.values()
    }

    fn insert(&mut self, e: TableEntry) -> Result<(), OracleError> {
        if !(0.0..=1.0).contains(&e.p) {
            return Err(OracleError::Table(format!("probability {} outside [0, 1]", e.p)));
        }
        let key = (e.fp.clone(), e.pos);
        match self.entries.get(&key) {
            Some(prev) if *prev != e => Err(OracleError::Table(format!(
                "conflicting entries for fingerprint {} position {}",
                e.fp, e.pos
            ))),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(key, e);
                Ok(())
            }
        }
    }

    /// Parses the JSON-lines table format. An optional first line
    /// `{"table":"pvf-oracle","version":1}` declares the cost model;
    /// blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, OracleError> {
        let mut table = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| OracleError::Table(format!("line {}: {e}", lineno + 1)))?;
            if value.get("fp").is_none() {
                if value.get("table").is_some() {
                    let header: Header = serde_json::from_value(value)
                        .map_err(|e| OracleError::Table(format!("line {}: {e}", lineno + 1)))?;
                    if header.table != TABLE_TAG || header.version != 1 {
                        return Err(OracleError::Table(format!(
                            "unsupported table header {}/{}",
                            header.table, header.version
                        )));
                    }
                    table.cost = header.forwards;
                }
                continue;
            }
            let entry: TableEntry =
                serde_json::from_value(value).map_err(|e| OracleError::Table(format!("line {}: {e}", lineno + 1)))?;
            table.insert(entry)?;
        }
        Ok(table)
    }

    /// Header line followed by one entry per line, sorted by key.
    pub fn to_table_string(&self) -> String {
        let header = Header {
            table: TABLE_TAG.into(),
            version: 1,
            forwards: self.cost,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in self.entries.values() {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), OracleError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_table_string().as_bytes())?;
        Ok(())
    }

    fn lookup<P: Probability>(
        &self,
        fp: &str,
        abs: usize,
        gen_pos: usize,
        full: bool,
    ) -> Result<Prediction<P>, OracleError> {
        let e = self
            .entries
            .get(&(fp.to_string(), abs))
            .ok_or_else(|| OracleError::MissingEntry {
                fingerprint: fp.to_string(),
                position: abs,
            })?;
        let mut pred = Prediction::top1(gen_pos, e.tok, P::from_f64_lossy(e.p));
        if full {
            pred.dist = e
                .dist
                .as_ref()
                .map(|d| d.iter().map(|&x| P::from_f64_lossy(x)).collect());
        }
        Ok(pred)
    }
}

/// Reads a table file written by [`TableOracle::write`] or [`RecordingOracle`].
pub fn load_table_oracle(path: impl AsRef<Path>) -> Result<TableOracle, OracleError> {
    let text = std::fs::read_to_string(path)?;
    TableOracle::parse(&text)
}

impl<P: Probability> Oracle<P> for TableOracle {
    fn predict(&self, request: &OracleRequest) -> Result<OracleResponse<P>, OracleError> {
        request.validate()?;
        let mut predictions = Vec::with_capacity(request.states.len());
        for (state, positions) in request.states.iter().zip(&request.query_positions) {
            let fp = state.fingerprint();
            let offset = state.prompt().len();
            predictions.push(
                positions
                    .iter()
                    .map(|&p| self.lookup(&fp, offset + p, p, request.want_full_dist))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
        let forward_cost = match self.cost {
            ForwardCost::PerCall => 1,
            ForwardCost::PerState => request.states.len() as u64,
        };
        Ok(OracleResponse {
            predictions,
            forward_cost,
        })
    }
}

/// Wraps an oracle and records every answered query, so a session can be
/// replayed later through a [`TableOracle`].
#[derive(Debug)]
pub struct RecordingOracle<O> {
    inner: O,
    recorded: Mutex<TableOracle>,
}

impl<O> RecordingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            recorded: Mutex::new(TableOracle::default()),
        }
    }

    pub fn with_forward_cost(self, cost: ForwardCost) -> Self {
        let table = self.recorded.into_inner().unwrap_or_else(|e| e.into_inner());
        Self {
            inner: self.inner,
            recorded: Mutex::new(table.with_forward_cost(cost)),
        }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    /// Snapshot of everything recorded so far.
    pub fn table(&self) -> TableOracle {
        self.recorded.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl<P: Probability, O: Oracle<P>> Oracle<P> for RecordingOracle<O> {
    fn predict(&self, request: &OracleRequest) -> Result<OracleResponse<P>, OracleError> {
        let response = self.inner.predict(request)?;
        let mut table = self.recorded.lock().unwrap_or_else(|e| e.into_inner());
        for (state, preds) in request.states.iter().zip(&response.predictions) {
            let fp = state.fingerprint();
            let offset = state.prompt().len();
            for pred in preds {
                table.insert(TableEntry {
                    fp: fp.clone(),
                    pos: offset + pred.position,
                    tok: pred.top_token,
                    p: pred.top_prob.as_f64(),
                    dist: pred.dist.as_ref().map(|d| d.iter().map(|x| x.as_f64()).collect()),
                })?;
            }
        }
        Ok(response)
    }
}
