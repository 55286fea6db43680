//! Reading and writing policy files.
//!
//! The format is line-oriented text, versioned by its first line:
//!
//! ```text
//! nvi-policy v1
//! domain tiger
//! discount 0.95
//! actions listen,open-left,open-right
//! observations hear-left,hear-right
//! start 0
//! nodes 2
//! node 0 action 0 edges 1,0
//! node 1 action 2 edges 0,0
//! net 0
//! dims 2,32,16,1
//! xmean <base64 f64 LE>
//! xstd <base64>
//! w0 <base64 row-major>
//! b0 <base64>
//! ...
//! end
//! ```
//!
//! Network blocks are optional; a graph-only file executes identically. The
//! writer is canonical, so read-then-write reproduces a written file byte
//! for byte.

use crate::controller::{Fsc, FscNode};
use crate::nn::Mlp;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array1, Array2};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyIoError {
    #[error("failed to {action} {path}: {source}")]
    Io {
        action: &'static str,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt policy file at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("policy was solved for domain '{policy}' but '{requested}' was requested")]
    DomainMismatch { policy: String, requested: String },
}

/// A parsed policy file: the controller graph, plus per-node networks when
/// the file carried them.
#[derive(Clone, Debug)]
pub struct PolicyFile {
    pub fsc: Fsc,
    pub nets: Option<Vec<Mlp>>,
}

fn corrupt(line: usize, message: impl Into<String>) -> PolicyIoError {
    PolicyIoError::Corrupt {
        line,
        message: message.into(),
    }
}

fn encode_f64s<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64s(line_no: usize, field: &str, text: &str) -> Result<Vec<f64>, PolicyIoError> {
    let bytes = B64
        .decode(text.trim())
        .map_err(|e| corrupt(line_no, format!("{field}: bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(corrupt(
            line_no,
            format!("{field}: blob length {} is not a multiple of 8", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Renders a policy to its canonical text form.
pub fn render_policy(policy: &PolicyFile) -> String {
    let fsc = &policy.fsc;
    let mut out = String::new();
    out.push_str("nvi-policy v1\n");
    let _ = writeln!(out, "domain {}", fsc.domain_id);
    let _ = writeln!(out, "discount {}", fsc.discount);
    let _ = writeln!(out, "actions {}", fsc.action_names.join(","));
    let _ = writeln!(out, "observations {}", fsc.observation_names.join(","));
    let _ = writeln!(out, "start {}", fsc.start);
    let _ = writeln!(out, "nodes {}", fsc.nodes.len());
    for (i, node) in fsc.nodes.iter().enumerate() {
        let edges: Vec<String> = node.edges.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(out, "node {i} action {} edges {}", node.action, edges.join(","));
    }
    if let Some(nets) = &policy.nets {
        for (i, net) in nets.iter().enumerate() {
            let _ = writeln!(out, "net {i}");
            let dims: Vec<String> = net.dims().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "dims {}", dims.join(","));
            let _ = writeln!(out, "xmean {}", encode_f64s(net.x_mean.iter()));
            let _ = writeln!(out, "xstd {}", encode_f64s(net.x_std.iter()));
            for (l, layer) in net.layers.iter().enumerate() {
                let _ = writeln!(out, "w{l} {}", encode_f64s(layer.w.iter()));
                let _ = writeln!(out, "b{l} {}", encode_f64s(layer.b.iter()));
            }
            out.push_str("end\n");
        }
    }
    out
}

pub fn write_policy(path: &Path, policy: &PolicyFile) -> Result<(), PolicyIoError> {
    std::fs::write(path, render_policy(policy)).map_err(|source| PolicyIoError::Io {
        action: "write",
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_policy(path: &Path) -> Result<PolicyFile, PolicyIoError> {
    let text = std::fs::read_to_string(path).map_err(|source| PolicyIoError::Io {
        action: "read",
        path: path.to_path_buf(),
        source,
    })?;
    parse_policy(&text)
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    /// Line number of the most recently yielded line, 1-based.
    pos: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<&'a str> {
        let (i, line) = self.iter.next()?;
        self.pos = i + 1;
        Some(line)
    }

    /// Next line, required to start with `key ` (or equal `key`); returns
    /// the remainder.
    fn expect(&mut self, key: &str) -> Result<&'a str, PolicyIoError> {
        let line = self
            .next()
            .ok_or_else(|| corrupt(self.pos + 1, format!("expected '{key}', found end of file")))?;
        if line == key {
            return Ok("");
        }
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| corrupt(self.pos, format!("expected '{key} ...', found '{line}'")))
    }
}

fn parse_usize(line: usize, field: &str, text: &str) -> Result<usize, PolicyIoError> {
    text.trim()
        .parse()
        .map_err(|_| corrupt(line, format!("{field}: expected an integer, found '{text}'")))
}

fn parse_usize_list(line: usize, field: &str, text: &str) -> Result<Vec<usize>, PolicyIoError> {
    text.split(',')
        .map(|part| parse_usize(line, field, part))
        .collect()
}

/// Parses and validates policy text.
pub fn parse_policy(text: &str) -> Result<PolicyFile, PolicyIoError> {
    let mut lines = Lines {
        iter: text.lines().enumerate(),
        pos: 0,
    };
    let header = lines.next().ok_or_else(|| corrupt(1, "empty file"))?;
    if header != "nvi-policy v1" {
        return Err(corrupt(1, format!("unsupported header '{header}'")));
    }
    let domain_id = lines.expect("domain")?.trim().to_string();
    if domain_id.is_empty() {
        return Err(corrupt(lines.pos, "domain id is empty"));
    }
    let discount_text = lines.expect("discount")?;
    let discount: f64 = discount_text
        .trim()
        .parse()
        .map_err(|_| corrupt(lines.pos, format!("bad discount '{discount_text}'")))?;
    if !(discount > 0.0 && discount < 1.0) {
        return Err(corrupt(lines.pos, format!("discount {discount} not in (0, 1)")));
    }
    let action_names: Vec<String> = lines
        .expect("actions")?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let observation_names: Vec<String> = lines
        .expect("observations")?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let start_text = lines.expect("start")?;
    let start = parse_usize(lines.pos, "start", start_text)?;
    let count_text = lines.expect("nodes")?;
    let node_count = parse_usize(lines.pos, "nodes", count_text)?;
    if node_count == 0 {
        return Err(corrupt(lines.pos, "a policy needs at least one node"));
    }
    if start >= node_count {
        return Err(corrupt(
            lines.pos,
            format!("start node {start} out of range for {node_count} nodes"),
        ));
    }

    let mut nodes = Vec::with_capacity(node_count);
    for i in 0..node_count {
        let rest = lines.expect("node")?;
        let parts: Vec<&str> = rest.split_whitespace().collect();
        if parts.len() != 5 || parts[1] != "action" || parts[3] != "edges" {
            return Err(corrupt(
                lines.pos,
                format!("expected 'node {i} action A edges E,...', found 'node {rest}'"),
            ));
        }
        let id = parse_usize(lines.pos, "node id", parts[0])?;
        if id != i {
            return Err(corrupt(lines.pos, format!("node id {id} out of order, expected {i}")));
        }
        let action = parse_usize(lines.pos, "action", parts[2])?;
        if action >= action_names.len() {
            return Err(corrupt(
                lines.pos,
                format!("action {action} out of range for {} actions", action_names.len()),
            ));
        }
        let edges = parse_usize_list(lines.pos, "edges", parts[4])?;
        if edges.len() != observation_names.len() {
            return Err(corrupt(
                lines.pos,
                format!(
                    "node {i} has {} edges but the domain has {} observations",
                    edges.len(),
                    observation_names.len()
                ),
            ));
        }
        if let Some(bad) = edges.iter().find(|e| **e >= node_count) {
            return Err(corrupt(
                lines.pos,
                format!("edge target {bad} out of range for {node_count} nodes"),
            ));
        }
        nodes.push(FscNode { action, edges });
    }

    let mut nets: Vec<Mlp> = Vec::new();
    while let Some(line) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix("net ")
            .ok_or_else(|| corrupt(lines.pos, format!("expected 'net I', found '{line}'")))?;
        let id = parse_usize(lines.pos, "net id", rest)?;
        if id != nets.len() {
            return Err(corrupt(
                lines.pos,
                format!("net id {id} out of order, expected {}", nets.len()),
            ));
        }
        if id >= node_count {
            return Err(corrupt(lines.pos, format!("net {id} has no matching node")));
        }
        let dims_text = lines.expect("dims")?;
        let dims = parse_usize_list(lines.pos, "dims", dims_text)?;
        if dims.len() < 2 || *dims.last().unwrap() != 1 || dims.iter().any(|d| *d == 0) {
            return Err(corrupt(lines.pos, format!("bad layer dims {dims:?}")));
        }
        let x_mean = decode_f64s(lines.pos + 1, "xmean", lines.expect("xmean")?)?;
        let x_std = decode_f64s(lines.pos + 1, "xstd", lines.expect("xstd")?)?;
        if x_mean.len() != dims[0] || x_std.len() != dims[0] {
            return Err(corrupt(
                lines.pos,
                format!("standardization length does not match input dim {}", dims[0]),
            ));
        }
        if x_std.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(corrupt(lines.pos, "xstd entries must be positive and finite"));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let w_vals = decode_f64s(lines.pos + 1, "weights", lines.expect(&format!("w{l}"))?)?;
            if w_vals.len() != rows * cols {
                return Err(corrupt(
                    lines.pos,
                    format!("w{l} has {} values, expected {}", w_vals.len(), rows * cols),
                ));
            }
            let b_vals = decode_f64s(lines.pos + 1, "bias", lines.expect(&format!("b{l}"))?)?;
            if b_vals.len() != rows {
                return Err(corrupt(
                    lines.pos,
                    format!("b{l} has {} values, expected {rows}", b_vals.len()),
                ));
            }
            layers.push(crate::nn::Layer {
                w: Array2::from_shape_vec((rows, cols), w_vals).unwrap(),
                b: Array1::from_vec(b_vals),
            });
        }
        let end = lines
            .next()
            .ok_or_else(|| corrupt(lines.pos + 1, "expected 'end', found end of file"))?;
        if end != "end" {
            return Err(corrupt(lines.pos, format!("expected 'end', found '{end}'")));
        }
        nets.push(Mlp::from_parts(
            layers,
            Array1::from_vec(x_mean),
            Array1::from_vec(x_std),
        ));
    }
    let nets = if nets.is_empty() {
        None
    } else if nets.len() == node_count {
        Some(nets)
    } else {
        return Err(corrupt(
            lines.pos,
            format!("{} network blocks for {node_count} nodes", nets.len()),
        ));
    };

    Ok(PolicyFile {
        fsc: Fsc {
            domain_id,
            discount,
            action_names,
            observation_names,
            start,
            nodes,
        },
        nets,
    })
}
