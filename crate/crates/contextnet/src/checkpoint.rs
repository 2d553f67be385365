//! Weight files: an ASCII `CTXN1` line, one manifest line per tensor
//! (`name shape dtype byte-offset`), a blank line, then little-endian f32
//! blobs in manifest order. Running batch-norm statistics are included.

use std::fs;
use std::path::Path;

use contextnet_core::Graph;

use crate::{Error, Result};

pub const MAGIC: &str = "CTXN1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Tensors in graph order: `(node.param, shape, values)`.
fn tensors(graph: &Graph) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out = Vec::new();
    for node in graph.nodes() {
        for (info, values) in node.op.param_info().into_iter().zip(node.op.param_values()) {
            out.push((format!("{}.{}", node.name, info.name), info.dims, values));
        }
    }
    out
}

pub fn encode(graph: &Graph) -> Vec<u8> {
    let items = tensors(graph);
    let mut header = format!("{MAGIC}\n");
    let mut offset = 0;
    for (name, shape, values) in &items {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        header.push_str(&format!("{name} {} f32 {offset}\n", dims.join("x")));
        offset += values.len() * 4;
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, _, values) in &items {
        for v in *values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses the manifest; returns the entries and the blob section.
pub fn parse(bytes: &[u8]) -> Result<(Vec<Entry>, &[u8])> {
    let bad = |m: String| Error::Checkpoint(m);
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("missing blank line after manifest".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not ASCII".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("missing {MAGIC} header")));
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, dtype, offset] = f[..] else {
            return Err(bad(format!("manifest line {}: expected 4 fields", i + 2)));
        };
        if dtype != "f32" {
            return Err(bad(format!("{name}: unsupported dtype {dtype}")));
        }
        let shape = shape
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| bad(format!("{name}: bad shape")))?;
        let offset = offset.parse().map_err(|_| bad(format!("{name}: bad offset")))?;
        entries.push(Entry { name: name.into(), shape, offset });
    }
    Ok((entries, &bytes[end + 2..]))
}

/// Overwrites every parameter of `graph` from `bytes`. Names and shapes
/// must match exactly.
pub fn decode_into(graph: &mut Graph, bytes: &[u8]) -> Result<()> {
    let (entries, blob) = parse(bytes)?;
    let expected: Vec<(String, Vec<usize>)> = tensors(graph).into_iter().map(|(n, s, _)| (n, s)).collect();
    let found: Vec<(String, Vec<usize>)> = entries.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if expected != found {
        let first = expected
            .iter()
            .zip(&found)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
            .unwrap_or_else(|| format!("expected {} tensors, found {}", expected.len(), found.len()));
        return Err(Error::Checkpoint(format!("checkpoint does not match the architecture: {first}")));
    }
    let mut k = 0;
    for id in 0..graph.len() {
        for dst in graph.node_mut(id).op.param_values_mut() {
            let e = &entries[k];
            let src = blob
                .get(e.offset..e.offset + dst.len() * 4)
                .ok_or_else(|| Error::Checkpoint(format!("{}: data truncated", e.name)))?;
            for (d, b) in dst.iter_mut().zip(src.chunks_exact(4)) {
                *d = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
            k += 1;
        }
    }
    Ok(())
}

pub fn save(path: &Path, graph: &Graph) -> Result<()> {
    fs::write(path, encode(graph)).map_err(|e| Error::io(path, e))
}

pub fn load_into(path: &Path, graph: &mut Graph) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_into(graph, &bytes).map_err(|e| e.in_file(path))
}
