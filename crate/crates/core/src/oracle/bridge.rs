use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::domain::{Canvas, Prediction, TokenId};
use crate::scalar::Probability;

use super::{Oracle, OracleError, OracleRequest, OracleResponse};

/// One position's answer on the wire. `pos` is an absolute index into the
/// full prompt plus generation sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePrediction {
    pub pos: usize,
    pub tok: TokenId,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist: Option<Vec<f64>>,
}

/// Vocabulary facts advertised by the server in its `info` frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub vocab: usize,
    pub mask: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
}

/// Newline-delimited JSON frames, tagged by `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Frame {
    Hello,
    Info {
        vocab: usize,
        mask: TokenId,
        eos: TokenId,
        pad: TokenId,
    },
    Predict {
        states: Vec<Vec<i64>>,
        positions: Vec<Vec<usize>>,
        full: bool,
    },
    Preds {
        preds: Vec<Vec<WirePrediction>>,
        forwards: u64,
    },
    Err {
        msg: String,
    },
}

impl Frame {
    /// Serialized frame including the trailing newline.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("frames serialize");
        s.push('\n');
        s
    }

    pub fn parse(line: &str) -> Result<Self, OracleError> {
        serde_json::from_str(line.trim_end_matches(['\r', '\n']))
            .map_err(|e| OracleError::Protocol(format!("malformed frame: {e}")))
    }
}

struct Conn {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
}

impl Conn {
    fn send(&mut self, frame: &Frame) -> Result<(), OracleError> {
        self.writer
            .write_all(frame.to_line().as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(io_to_oracle)
    }

    fn recv(&mut self) -> Result<Frame, OracleError> {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).map_err(io_to_oracle)?;
        if n == 0 {
            return Err(OracleError::Protocol("connection closed by server".into()));
        }
        Frame::parse(&line)
    }

    fn call(&mut self, frame: &Frame) -> Result<Frame, OracleError> {
        self.send(frame)?;
        match self.recv()? {
            Frame::Err { msg } => Err(OracleError::Protocol(format!("server error: {msg}"))),
            f => Ok(f),
        }
    }
}

fn io_to_oracle(e: std::io::Error) -> OracleError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => OracleError::Timeout,
        ErrorKind::BrokenPipe | ErrorKind::ConnectionReset | ErrorKind::UnexpectedEof => {
            OracleError::Protocol(format!("connection lost: {e}"))
        }
        _ => OracleError::Io(e),
    }
}

/// Client side of the bridge protocol. Frames on one connection are
/// serialized by a mutex, so a single client can be shared by sessions.
pub struct BridgeOracle {
    conn: Mutex<Conn>,
    info: ServerInfo,
    child: Option<Mutex<Child>>,
}

impl std::fmt::Debug for BridgeOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeOracle")
            .field("info", &self.info)
            .finish_non_exhaustive()
    }
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Connects to `tcp://host:port`, `host:port`, or `stdio:<command line>` and
/// performs the hello/info handshake.
pub fn bridge_connect(endpoint: &str) -> Result<BridgeOracle, OracleError> {
    BridgeOracle::connect(endpoint, DEFAULT_TIMEOUT)
}

impl BridgeOracle {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, OracleError> {
        if let Some(cmd) = endpoint.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace();
            let program = parts
                .next()
                .ok_or_else(|| OracleError::InvalidRequest("empty stdio command".into()))?;
            let mut child = Command::new(program)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            let mut oracle = Self::handshake(BufReader::new(stdout), stdin)?;
            oracle.child = Some(Mutex::new(child));
            return Ok(oracle);
        }
        let addr = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Self::handshake(reader, stream)
    }

    /// Handshake over arbitrary streams.
    pub fn handshake(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> Result<Self, OracleError> {
        let mut conn = Conn {
            reader: Box::new(reader),
            writer: Box::new(writer),
        };
        let info = match conn.call(&Frame::Hello)? {
            Frame::Info { vocab, mask, eos, pad } => ServerInfo { vocab, mask, eos, pad },
            other => return Err(OracleError::Protocol(format!("expected info frame, got {other:?}"))),
        };
        if [info.mask, info.eos, info.pad]
            .iter()
            .any(|&t| t as usize >= info.vocab)
        {
            return Err(OracleError::Protocol("info ids outside vocabulary".into()));
        }
        Ok(Self {
            conn: Mutex::new(conn),
            info,
            child: None,
        })
    }

    pub fn info(&self) -> ServerInfo {
        self.info
    }

    fn check_state(&self, state: &Canvas, index: usize) -> Result<(), OracleError> {
        if state.mask_id() != self.info.mask {
            return Err(OracleError::InvalidRequest(format!(
                "state {index} uses mask id {} but the server's is {}",
                state.mask_id(),
                self.info.mask
            )));
        }
        Ok(())
    }

    fn convert<P: Probability>(
        &self,
        request: &OracleRequest,
        preds: Vec<Vec<WirePrediction>>,
    ) -> Result<Vec<Vec<Prediction<P>>>, OracleError> {
        if preds.len() != request.states.len() {
            return Err(OracleError::Protocol(format!(
                "{} prediction lists for {} states",
                preds.len(),
                request.states.len()
            )));
        }
        let mut out = Vec::with_capacity(preds.len());
        for (s, ((state, wanted), got)) in request
            .states
            .iter()
            .zip(&request.query_positions)
            .zip(preds)
            .enumerate()
        {
            if got.len() != wanted.len() {
                return Err(OracleError::Protocol(format!(
                    "state {s}: {} predictions for {} positions",
                    got.len(),
                    wanted.len()
                )));
            }
            let offset = state.prompt().len();
            let mut list = Vec::with_capacity(got.len());
            for (&pos, w) in wanted.iter().zip(got) {
                if w.pos != offset + pos {
                    return Err(OracleError::Protocol(format!(
                        "state {s}: expected position {}, got {}",
                        offset + pos,
                        w.pos
                    )));
                }
                if w.tok as usize >= self.info.vocab || w.tok == self.info.mask {
                    return Err(OracleError::Protocol(format!("state {s}: invalid token {}", w.tok)));
                }
                if !(0.0..=1.0).contains(&w.p) {
                    return Err(OracleError::Protocol(format!(
                        "state {s}: probability {} outside [0, 1]",
                        w.p
                    )));
                }
                let mut pred = Prediction::top1(pos, w.tok, P::from_f64_lossy(w.p));
                if request.want_full_dist {
                    pred.dist = w.dist.map(|d| d.into_iter().map(P::from_f64_lossy).collect());
                }
                list.push(pred);
            }
            out.push(list);
        }
        Ok(out)
    }
}

impl<P: Probability> Oracle<P> for BridgeOracle {
    fn predict(&self, request: &OracleRequest) -> Result<OracleResponse<P>, OracleError> {
        request.validate()?;
        for (i, s) in request.states.iter().enumerate() {
            self.check_state(s, i)?;
        }
        let frame = Frame::Predict {
            states: request.states.iter().map(Canvas::to_wire).collect(),
            positions: request
                .states
                .iter()
                .zip(&request.query_positions)
                .map(|(s, ps)| ps.iter().map(|p| s.prompt().len() + p).collect())
                .collect(),
            full: request.want_full_dist,
        };
        let reply = {
            let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
            conn.call(&frame)?
        };
        match reply {
            Frame::Preds { preds, forwards } => Ok(OracleResponse {
                predictions: self.convert(request, preds)?,
                forward_cost: forwards,
            }),
            other => Err(OracleError::Protocol(format!("expected preds frame, got {other:?}"))),
        }
    }
}

impl Drop for BridgeOracle {
    fn drop(&mut self) {
        if let Some(child) = self.child.take() {
            let mut child = child.into_inner().unwrap_or_else(|e| e.into_inner());
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Settings for [`serve_connection`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeOptions {
    pub info: ServerInfo,
    /// Length of the generation region; everything before it is prompt.
    pub gen_length: usize,
}

/// Answers bridge frames from `reader` with `oracle` until end of input.
/// Malformed frames get an `err` frame and the loop continues. Each predict
/// reports one forward per state.
pub fn serve_connection<P: Probability, O: Oracle<P>>(
    oracle: &O,
    opts: ServeOptions,
    mut reader: impl BufRead,
    mut writer: impl Write,
) -> std::io::Result<()> {
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        if line.trim().is_empty() {
            continue;
        }
        let reply = match Frame::parse(&line) {
            Err(e) => Frame::Err { msg: e.to_string() },
            Ok(Frame::Hello) => Frame::Info {
                vocab: opts.info.vocab,
                mask: opts.info.mask,
                eos: opts.info.eos,
                pad: opts.info.pad,
            },
            Ok(Frame::Predict {
                states,
                positions,
                full,
            }) => match serve_predict(oracle, &opts, states, positions, full) {
                Ok(f) => f,
                Err(e) => Frame::Err { msg: e.to_string() },
            },
            Ok(other) => Frame::Err {
                msg: format!("unexpected frame from client: {}", other.to_line().trim_end()),
            },
        };
        writer.write_all(reply.to_line().as_bytes())?;
        writer.flush()?;
    }
}

fn serve_predict<P: Probability, O: Oracle<P>>(
    oracle: &O,
    opts: &ServeOptions,
    states: Vec<Vec<i64>>,
    positions: Vec<Vec<usize>>,
    full: bool,
) -> Result<Frame, OracleError> {
    let info = opts.info;
    let mut canvases = Vec::with_capacity(states.len());
    for (s, ids) in states.iter().enumerate() {
        if ids.len() < opts.gen_length {
            return Err(OracleError::InvalidRequest(format!(
                "state {s} shorter than the generation region"
            )));
        }
        let mut tokens = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = if id == -1 {
                info.mask
            } else if id >= 0 && (id as usize) < info.vocab && id as TokenId != info.mask {
                id as TokenId
            } else {
                return Err(OracleError::InvalidRequest(format!(
                    "state {s}: token id {id} out of range"
                )));
            };
            tokens.push(tok);
        }
        let gen = tokens.split_off(ids.len() - opts.gen_length);
        canvases
            .push(Canvas::from_parts(tokens, gen, info.mask).map_err(|e| OracleError::InvalidRequest(e.to_string()))?);
    }
    if positions.len() != canvases.len() {
        return Err(OracleError::InvalidRequest(
            "states and positions differ in length".into(),
        ));
    }
    let mut query = Vec::with_capacity(positions.len());
    for (c, ps) in canvases.iter().zip(&positions) {
        let offset = c.prompt().len();
        let rel = ps
            .iter()
            .map(|&p| {
                p.checked_sub(offset)
                    .ok_or_else(|| OracleError::InvalidRequest(format!("position {p} lies in the prompt")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        query.push(rel);
    }
    let n = canvases.len() as u64;
    let request = OracleRequest {
        states: canvases,
        query_positions: query,
        want_full_dist: full,
    };
    let response = oracle.predict(&request)?;
    let preds = request
        .states
        .iter()
        .zip(response.predictions)
        .map(|(c, list)| {
            list.into_iter()
                .map(|pred| WirePrediction {
                    pos: c.prompt().len() + pred.position,
                    tok: pred.top_token,
                    p: pred.top_prob.as_f64(),
                    dist: pred.dist.map(|d| d.into_iter().map(|x| x.as_f64()).collect()),
                })
                .collect()
        })
        .collect();
    Ok(Frame::Preds { preds, forwards: n })
}
