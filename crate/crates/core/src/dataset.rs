//! Line-delimited artifact files. The first line is a header naming the
//! artifact kind and the hash of the config that produced it; every further
//! line is one record.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::graph::{CgRecord, ComputeGraph, NodeRecord, ParseError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: String,
    pub version: u32,
    pub config_hash: String,
}

impl Header {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        Header { kind: kind.to_string(), version: FORMAT_VERSION, config_hash: config_hash.to_string() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Pseudo,
    GroundTruth,
}

/// A graph with a task label (percent) and its FLOPs (GigaFLOPs).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRecord {
    pub graph: ComputeGraph,
    pub task: String,
    pub label: f64,
    pub flops: f64,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabeledLine {
    name: String,
    space: String,
    block_count: u32,
    nodes: Vec<NodeRecord>,
    edges: Vec<[u32; 2]>,
    task: String,
    label: f64,
    flops: f64,
    provenance: Provenance,
}

impl From<&LabeledRecord> for LabeledLine {
    fn from(r: &LabeledRecord) -> Self {
        let g = CgRecord::from(&r.graph);
        LabeledLine {
            name: g.name,
            space: g.space,
            block_count: g.block_count,
            nodes: g.nodes,
            edges: g.edges,
            task: r.task.clone(),
            label: r.label,
            flops: r.flops,
            provenance: r.provenance,
        }
    }
}

impl From<LabeledLine> for LabeledRecord {
    fn from(l: LabeledLine) -> Self {
        let g = CgRecord { name: l.name, space: l.space, block_count: l.block_count, nodes: l.nodes, edges: l.edges };
        LabeledRecord { graph: g.into(), task: l.task, label: l.label, flops: l.flops, provenance: l.provenance }
    }
}

/// Header line followed by one JSON record per line.
pub fn write_records<T: Serialize>(header: &Header, items: impl Iterator<Item = T>) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for it in items {
        out.push_str(&serde_json::to_string(&it).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses a file written by `write_records`, checking its kind and version.
pub fn read_records<T: DeserializeOwned>(text: &str, kind: &str) -> Result<(Header, Vec<T>), ParseError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(ParseError { line: 1, message: "empty file; expected a header".into() })?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| ParseError { line: 1, message: format!("header: {e}") })?;
    if header.kind != kind {
        return Err(ParseError { line: 1, message: format!("expected a `{kind}` file, found `{}`", header.kind) });
    }
    if header.version != FORMAT_VERSION {
        return Err(ParseError { line: 1, message: format!("unsupported version {}", header.version) });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let rec = serde_json::from_str(line).map_err(|e| ParseError { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok((header, out))
}

pub const GRAPHS: &str = "graphs";
pub const LABELED: &str = "labeled";
pub const EVAL: &str = "eval";
pub const SEARCH_STEPS: &str = "search-steps";
pub const SEARCH_HISTORY: &str = "search-history";

pub fn write_graphs(header: &Header, graphs: &[ComputeGraph]) -> String {
    write_records(header, graphs.iter().map(CgRecord::from))
}

pub fn read_graphs(text: &str) -> Result<(Header, Vec<ComputeGraph>), ParseError> {
    let (h, recs) = read_records::<CgRecord>(text, GRAPHS)?;
    Ok((h, recs.into_iter().map(ComputeGraph::from).collect()))
}

pub fn write_labeled(header: &Header, records: &[LabeledRecord]) -> String {
    write_records(header, records.iter().map(LabeledLine::from))
}

pub fn read_labeled(text: &str) -> Result<(Header, Vec<LabeledRecord>), ParseError> {
    let (h, recs) = read_records::<LabeledLine>(text, LABELED)?;
    Ok((h, recs.into_iter().map(LabeledRecord::from).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_space, SpaceSpec};

    #[test]
    fn labeled_round_trip() {
        let g = gen_space(&SpaceSpec::preset("cell-like").unwrap(), 3).unwrap();
        let rec = LabeledRecord { graph: g, task: "t".into(), label: 61.5, flops: 0.25, provenance: Provenance::Pseudo };
        let text = write_labeled(&Header::new(LABELED, "h"), std::slice::from_ref(&rec));
        assert!(text.lines().nth(1).unwrap().contains("\"provenance\":\"pseudo\""));
        let (h, back) = read_labeled(&text).unwrap();
        assert_eq!(h.config_hash, "h");
        assert_eq!(back, vec![rec]);
    }

    #[test]
    fn header_is_checked() {
        let text = write_graphs(&Header::new(GRAPHS, "h"), &[]);
        assert!(read_labeled(&text).unwrap_err().message.contains("labeled"));
        assert!(read_graphs("").is_err());
        let bad = format!("{text}{{\"name\":1}}\n");
        assert_eq!(read_graphs(&bad).unwrap_err().line, 2);
    }
}
