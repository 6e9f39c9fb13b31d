//! Newline-delimited JSON search service over TCP.
//!
//! On connect the server sends the banner `{"server":"hybrid-retriever","proto":1}`.
//! Each request line is an object with an `id`, an `op` and op-specific
//! fields; each gets exactly one response line
//! `{"id":...,"status":"ok"|"error","hits":[[docno,score],...],"message":...}`
//! (`hits` and `message` only when relevant). Requests on one connection
//! are answered in order; a malformed line gets an error response with a
//! null id and the connection stays open.
//!
//! Ops:
//! - `ping`
//! - `knn_query`: `k` and either `query`/`text` (vectorized like the
//!   candidate provider does) or a raw `vector` (an array of floats, or
//!   `{"ids": [...], "values": [...]}`; k-NN providers only). Returns the
//!   provider's top-k.
//! - `pipeline_query`: `k` and `query`/`text`; the full pipeline.
//! - `score`: `query`/`text` and `docnos`; scores those documents with the
//!   final (or else intermediate) model.
//!
//! `query` is a document-style object (`DOCNO` and `text` optional); `text` is shorthand
//! for `{"text": ...}`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::forward::{DocumentEntry, QueryEntry, DOCNO, TEXT};
use crate::pipeline::Pipeline;
use crate::vectors::{DenseVector, SparseVector, Vector};

pub const BANNER: &str = r#"{"server":"hybrid-retriever","proto":1}"#;
pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: Value,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hits: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

impl Response {
    fn ok(id: Value, hits: Option<Vec<(String, f64)>>) -> Self {
        Response { id, status: Status::Ok, hits, message: None }
    }

    fn error(id: Value, message: impl Into<String>) -> Self {
        Response { id, status: Status::Error, hits: None, message: Some(message.into()) }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WireVector {
    Dense(Vec<f32>),
    Sparse { ids: Vec<u32>, values: Vec<f32> },
}

fn query_of(req: &Map<String, Value>) -> Result<QueryEntry> {
    if let Some(q) = req.get("query") {
        let Value::Object(obj) = q else {
            return Err(Error::invalid("\"query\" must be an object"));
        };
        let mut obj = obj.clone();
        for key in [DOCNO, TEXT] {
            obj.entry(key).or_insert_with(|| Value::String(String::new()));
        }
        return DocumentEntry::from_json(Value::Object(obj), 1);
    }
    match req.get("text") {
        Some(Value::String(t)) => Ok(DocumentEntry::new("", t.as_str())),
        Some(_) => Err(Error::invalid("\"text\" must be a string")),
        None => Err(Error::invalid("request needs \"query\" or \"text\"")),
    }
}

fn k_of(req: &Map<String, Value>) -> Result<usize> {
    match req.get("k") {
        None => Ok(10),
        Some(v) => v
            .as_u64()
            .filter(|&k| k >= 1)
            .map(|k| k as usize)
            .ok_or_else(|| Error::invalid("\"k\" must be a positive integer")),
    }
}

fn docno_hits(p: &Pipeline, hits: &[crate::ann::SearchHit]) -> Vec<(String, f64)> {
    hits.iter().map(|h| (p.resources().docno(h.id).to_string(), h.score)).collect()
}

fn dispatch(p: &Pipeline, op: &str, req: &Map<String, Value>) -> Result<Option<Vec<(String, f64)>>> {
    match op {
        "ping" => Ok(None),
        "knn_query" => {
            let k = k_of(req)?;
            if let Some(v) = req.get("vector") {
                let knn =
                    p.provider().knn().ok_or_else(|| Error::invalid("raw vectors need a k-NN candidate provider"))?;
                let wire: WireVector = serde_json::from_value(v.clone())
                    .map_err(|_| Error::invalid("\"vector\" must be an array or {ids, values}"))?;
                let v = match wire {
                    WireVector::Dense(x) => Vector::Dense(DenseVector::new(x)?),
                    WireVector::Sparse { ids, values } => Vector::Sparse(SparseVector::new(ids, values)?),
                };
                return Ok(Some(docno_hits(p, &knn.search_vector(&v, k)?)));
            }
            let q = query_of(req)?;
            Ok(Some(docno_hits(p, &p.provider().candidates(&q, k)?)))
        }
        "pipeline_query" => {
            let k = k_of(req)?;
            let mut r = p.run(&query_of(req)?)?;
            r.hits.truncate(k);
            Ok(Some(r.hits))
        }
        "score" => {
            let q = query_of(req)?;
            let docnos: Vec<String> = serde_json::from_value(req.get("docnos").cloned().unwrap_or(Value::Null))
                .map_err(|_| Error::invalid("\"docnos\" must be an array of strings"))?;
            Ok(Some(p.score_docnos(&q, &docnos)?))
        }
        other => Err(Error::invalid(format!("unknown op \"{other}\""))),
    }
}

/// Answers one request line.
pub fn handle_line(p: &Pipeline, line: &str) -> Response {
    let req: Map<String, Value> = match serde_json::from_str(line) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Response::error(Value::Null, "request must be a JSON object"),
        Err(e) => return Response::error(Value::Null, format!("malformed JSON: {e}")),
    };
    let id = req.get("id").cloned().unwrap_or(Value::Null);
    let Some(op) = req.get("op").and_then(Value::as_str) else {
        return Response::error(id, "missing \"op\"");
    };
    match dispatch(p, op, &req) {
        Ok(hits) => Response::ok(id, hits),
        Err(e) => Response::error(id, e.to_string()),
    }
}

fn serve_connection(p: &Pipeline, stream: TcpStream) -> std::io::Result<()> {
    let mut out = BufWriter::new(stream.try_clone()?);
    writeln!(out, "{BANNER}")?;
    out.flush()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(p, &line);
        serde_json::to_writer(&mut out, &resp)?;
        out.write_all(b"\n")?;
        out.flush()?;
    }
    Ok(())
}

/// A running server; dropping it without [`ServerHandle::shutdown`] leaves it running.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections. Open connections finish on their own.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Binds `addr` and serves on a background thread, one thread per connection.
pub fn spawn(pipeline: Arc<Pipeline>, addr: impl ToSocketAddrs) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::config(format!("cannot bind: {e}")))?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let accept = thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let p = pipeline.clone();
            thread::spawn(move || {
                let _ = serve_connection(&p, stream);
            });
        }
    });
    Ok(ServerHandle { addr: local, stop, accept: Some(accept) })
}
