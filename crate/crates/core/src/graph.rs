//! Undirected graphs stored as reciprocal arc pairs, batches, and the JSON
//! Lines dataset format.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Directed half of an undirected edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Arc {
    pub src: usize,
    pub dst: usize,
    pub edge: usize,
}

/// Simple undirected graph. Edge `e` is stored once as `(u, v)` with
/// `u < v` and as arcs `2e = u→v`, `2e+1 = v→u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    arcs: Vec<Arc>,
    features: Tensor,
}

impl Graph {
    pub fn new(num_nodes: usize, edges: &[(usize, usize)], features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.rows() != num_nodes {
            return Err(Error::ShapeMismatch {
                op: "new_graph",
                detail: format!("features {:?} for {num_nodes} nodes", features.shape()),
            });
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut canon = Vec::with_capacity(edges.len());
        let mut arcs = Vec::with_capacity(2 * edges.len());
        for (e, &(u, v)) in edges.iter().enumerate() {
            for n in [u, v] {
                if n >= num_nodes {
                    return Err(Error::IndexOutOfRange { index: n, limit: num_nodes });
                }
            }
            if u == v {
                return Err(Error::SelfLoop(u));
            }
            let key = (u.min(v), u.max(v));
            if !seen.insert(key) {
                return Err(Error::DuplicateEdge(key.0, key.1));
            }
            canon.push(key);
            arcs.push(Arc { src: key.0, dst: key.1, edge: e });
            arcs.push(Arc { src: key.1, dst: key.0, edge: e });
        }
        Ok(Self { num_nodes, edges: canon, arcs, features })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical endpoints `(i, j)` with `i < j`, indexed by edge id.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for a in &self.arcs {
            deg[a.src] += 1;
        }
        deg
    }

    pub fn incident_edges(&self, node: usize) -> Result<Vec<usize>> {
        if node >= self.num_nodes {
            return Err(Error::IndexOutOfRange { index: node, limit: self.num_nodes });
        }
        Ok(self.arcs.iter().filter(|a| a.src == node).map(|a| a.edge).collect())
    }

    pub fn arc_src(&self) -> Vec<usize> {
        self.arcs.iter().map(|a| a.src).collect()
    }

    pub fn arc_dst(&self) -> Vec<usize> {
        self.arcs.iter().map(|a| a.dst).collect()
    }

    pub fn arc_edge(&self) -> Vec<usize> {
        self.arcs.iter().map(|a| a.edge).collect()
    }

    /// Relabel node `i` as `perm[i]`. Edges of the result are sorted by
    /// their canonical endpoints; the second value maps old edge id → new
    /// edge id.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<(Graph, Vec<usize>)> {
        let n = self.num_nodes;
        if perm.len() != n {
            return Err(Error::InvalidPermutation(n));
        }
        let mut hit = vec![false; n];
        for &p in perm {
            if p >= n || std::mem::replace(&mut hit[p], true) {
                return Err(Error::InvalidPermutation(n));
            }
        }
        let mut moved: Vec<((usize, usize), usize)> = self
            .edges
            .iter()
            .enumerate()
            .map(|(e, &(u, v))| {
                let (a, b) = (perm[u], perm[v]);
                ((a.min(b), a.max(b)), e)
            })
            .collect();
        moved.sort_unstable();
        let mut edge_map = vec![0; self.edges.len()];
        for (new_id, &(_, old_id)) in moved.iter().enumerate() {
            edge_map[old_id] = new_id;
        }
        let edges: Vec<(usize, usize)> = moved.iter().map(|&(k, _)| k).collect();
        let d = self.feat_dim();
        let mut data = vec![0.0; n * d];
        for (i, &p) in perm.iter().enumerate() {
            data[p * d..(p + 1) * d].copy_from_slice(self.features.row(i));
        }
        let features = Tensor::matrix(n, d, data)?;
        Ok((Graph::new(n, &edges, features)?, edge_map))
    }

    /// Same node count, features, and undirected edge set (ids may differ).
    pub fn structurally_eq(&self, other: &Graph) -> bool {
        if self.num_nodes != other.num_nodes || self.features != other.features {
            return false;
        }
        let mut a = self.edges.clone();
        let mut b = other.edges.clone();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }
}

/// Graph with its label and optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub graph: Graph,
    pub label: usize,
    pub gt_edge_mask: Option<Vec<bool>>,
    pub gt_node_mask: Option<Vec<bool>>,
    pub node_labels: Option<Vec<usize>>,
    pub env: Option<String>,
}

impl LabeledExample {
    pub fn new(graph: Graph, label: usize) -> Self {
        Self { graph, label, gt_edge_mask: None, gt_node_mask: None, node_labels: None, env: None }
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if let Some(k) = num_classes {
            if self.label >= k {
                return Err(Error::InvalidLabel { label: self.label, num_classes: k });
            }
        }
        let check = |found: usize, expected: usize| {
            if found == expected {
                Ok(())
            } else {
                Err(Error::MaskLength { expected, found })
            }
        };
        if let Some(m) = &self.gt_edge_mask {
            check(m.len(), self.graph.num_edges())?;
        }
        if let Some(m) = &self.gt_node_mask {
            check(m.len(), self.graph.num_nodes())?;
        }
        if let Some(m) = &self.node_labels {
            check(m.len(), self.graph.num_nodes())?;
        }
        Ok(())
    }
}

/// Disjoint union of several graphs with per-node and per-edge segment ids.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub graph: Graph,
    /// `node_offsets[i]` is the first node of graph `i`; one trailing entry
    /// holds the total.
    pub node_offsets: Vec<usize>,
    pub edge_offsets: Vec<usize>,
    pub segment_of_node: Vec<usize>,
    pub segment_of_edge: Vec<usize>,
    pub labels: Vec<usize>,
    pub node_labels: Option<Vec<usize>>,
    pub gt_edge_mask: Option<Vec<bool>>,
}

impl GraphBatch {
    pub fn new(examples: &[&LabeledExample]) -> Result<Self> {
        let first = examples.first().ok_or(Error::EmptyBatch)?;
        let d = first.graph.feat_dim();
        let mut node_offsets = vec![0];
        let mut edge_offsets = vec![0];
        let mut edges = Vec::new();
        let mut feats = Vec::new();
        let mut segment_of_node = Vec::new();
        let mut segment_of_edge = Vec::new();
        let mut node_labels = Some(Vec::new());
        let mut gt_edge_mask = Some(Vec::new());
        for (gi, ex) in examples.iter().enumerate() {
            let g = &ex.graph;
            if g.feat_dim() != d {
                return Err(Error::FeatureDimMismatch { expected: d, found: g.feat_dim() });
            }
            let off = *node_offsets.last().unwrap();
            edges.extend(g.edges().iter().map(|&(u, v)| (u + off, v + off)));
            feats.extend_from_slice(g.features().data());
            segment_of_node.extend(std::iter::repeat(gi).take(g.num_nodes()));
            segment_of_edge.extend(std::iter::repeat(gi).take(g.num_edges()));
            node_offsets.push(off + g.num_nodes());
            edge_offsets.push(edge_offsets.last().unwrap() + g.num_edges());
            node_labels = match (node_labels, &ex.node_labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend_from_slice(l);
                    Some(acc)
                }
                _ => None,
            };
            gt_edge_mask = match (gt_edge_mask, &ex.gt_edge_mask) {
                (Some(mut acc), Some(m)) => {
                    acc.extend_from_slice(m);
                    Some(acc)
                }
                _ => None,
            };
        }
        let n = *node_offsets.last().unwrap();
        let graph = Graph::new(n, &edges, Tensor::matrix(n, d, feats)?)?;
        Ok(Self {
            graph,
            node_offsets,
            edge_offsets,
            segment_of_node,
            segment_of_edge,
            labels: examples.iter().map(|e| e.label).collect(),
            node_labels,
            gt_edge_mask,
        })
    }

    pub fn from_examples(examples: &[LabeledExample]) -> Result<Self> {
        let refs: Vec<&LabeledExample> = examples.iter().collect();
        Self::new(&refs)
    }

    pub fn num_graphs(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_range(&self, g: usize) -> std::ops::Range<usize> {
        self.edge_offsets[g]..self.edge_offsets[g + 1]
    }

    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        self.node_offsets[g]..self.node_offsets[g + 1]
    }

    /// Split back into member graphs.
    pub fn unbatch(&self) -> Result<Vec<Graph>> {
        let d = self.graph.feat_dim();
        (0..self.num_graphs())
            .map(|g| {
                let nodes = self.node_range(g);
                let off = nodes.start;
                let edges: Vec<(usize, usize)> =
                    self.graph.edges()[self.edge_range(g)].iter().map(|&(u, v)| (u - off, v - off)).collect();
                let feats = self.graph.features().data()[off * d..nodes.end * d].to_vec();
                Graph::new(nodes.len(), &edges, Tensor::matrix(nodes.len(), d, feats)?)
            })
            .collect()
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<Vec<f64>>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_edge_mask: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_node_mask: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<String>,
}

fn to_mask(bits: Option<Vec<u8>>) -> Result<Option<Vec<bool>>> {
    bits.map(|v| {
        v.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("mask value {other} is not 0/1"))),
            })
            .collect()
    })
    .transpose()
}

impl From<&LabeledExample> for ExampleRecord {
    fn from(ex: &LabeledExample) -> Self {
        let g = &ex.graph;
        let bits = |m: &Vec<bool>| m.iter().map(|&b| u8::from(b)).collect();
        Self {
            num_nodes: g.num_nodes(),
            edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
            features: (0..g.num_nodes()).map(|i| g.features().row(i).to_vec()).collect(),
            label: ex.label,
            gt_edge_mask: ex.gt_edge_mask.as_ref().map(bits),
            gt_node_mask: ex.gt_node_mask.as_ref().map(bits),
            node_labels: ex.node_labels.clone(),
            env: ex.env.clone(),
        }
    }
}

impl TryFrom<ExampleRecord> for LabeledExample {
    type Error = Error;

    fn try_from(rec: ExampleRecord) -> Result<Self> {
        let edges: Vec<(usize, usize)> = rec.edges.iter().map(|e| (e[0], e[1])).collect();
        let features = if rec.features.is_empty() {
            Tensor::matrix(rec.num_nodes, 0, vec![])?
        } else {
            Tensor::from_rows(&rec.features)?
        };
        let ex = LabeledExample {
            graph: Graph::new(rec.num_nodes, &edges, features)?,
            label: rec.label,
            gt_edge_mask: to_mask(rec.gt_edge_mask)?,
            gt_node_mask: to_mask(rec.gt_node_mask)?,
            node_labels: rec.node_labels,
            env: rec.env,
        };
        ex.validate(None)?;
        Ok(ex)
    }
}

pub fn write_jsonl<W: Write>(mut w: W, examples: &[LabeledExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, &ExampleRecord::from(ex))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        out.push(LabeledExample::try_from(rec)?);
    }
    Ok(out)
}

pub fn save_dataset(path: &std::path::Path, examples: &[LabeledExample]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_jsonl(&mut w, examples)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path) -> Result<Vec<LabeledExample>> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(n: usize) -> Tensor {
        Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    fn path3() -> Graph {
        Graph::new(3, &[(0, 1), (1, 2)], feats(3)).unwrap()
    }

    fn triangle() -> Graph {
        Graph::new(3, &[(0, 1), (1, 2), (2, 0)], feats(3)).unwrap()
    }

    #[test]
    fn symmetrizes_edges() {
        let g = path3();
        assert_eq!(g.arcs().len(), 4);
        assert_eq!(g.num_edges(), 2);
        for a in g.arcs() {
            assert!(g.arcs().contains(&Arc { src: a.dst, dst: a.src, edge: a.edge }));
        }
        let t = triangle();
        assert_eq!(t.arcs().len(), 6);
        assert_eq!(t.degrees(), vec![2, 2, 2]);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(Graph::new(2, &[(0, 0)], feats(2)), Err(Error::SelfLoop(0))));
        assert!(matches!(
            Graph::new(2, &[(0, 2)], feats(2)),
            Err(Error::IndexOutOfRange { index: 2, limit: 2 })
        ));
        assert!(matches!(Graph::new(2, &[(0, 1), (1, 0)], feats(2)), Err(Error::DuplicateEdge(0, 1))));
    }

    #[test]
    fn incident_edges_cases() {
        let g = path3();
        assert_eq!(g.incident_edges(1).unwrap(), vec![0, 1]);
        let iso = Graph::new(3, &[(0, 1)], feats(3)).unwrap();
        assert!(iso.incident_edges(2).unwrap().is_empty());
        for n in 0..3 {
            assert_eq!(triangle().incident_edges(n).unwrap().len(), 2);
        }
        assert!(g.incident_edges(3).is_err());
    }

    #[test]
    fn permutation_cases() {
        let g = path3();
        let (same, map) = g.permute_nodes(&[0, 1, 2]).unwrap();
        assert_eq!(same, g);
        assert_eq!(map, vec![0, 1]);

        let e = Graph::new(2, &[(0, 1)], feats(2)).unwrap();
        let (swapped, _) = e.permute_nodes(&[1, 0]).unwrap();
        assert_eq!(swapped.edges(), &[(0, 1)]);
        assert_eq!(swapped.features().data(), &[1.0, 0.0]);

        assert!(matches!(g.permute_nodes(&[0, 0, 1]), Err(Error::InvalidPermutation(3))));
        assert!(matches!(g.permute_nodes(&[0, 1]), Err(Error::InvalidPermutation(3))));
    }

    #[test]
    fn batch_offsets_and_segments() {
        let a = LabeledExample::new(path3(), 0);
        let b = LabeledExample::new(triangle(), 1);
        let batch = GraphBatch::new(&[&a, &b]).unwrap();
        assert_eq!(batch.graph.num_nodes(), 6);
        assert_eq!(batch.segment_of_node, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(batch.segment_of_edge, vec![0, 0, 1, 1, 1]);
        assert_eq!(batch.graph.arcs().len(), 4 + 6);
        assert_eq!(batch.labels, vec![0, 1]);
        let parts = batch.unbatch().unwrap();
        assert_eq!(parts[0], path3());
        assert_eq!(parts[1].edges(), triangle().edges());

        let single = GraphBatch::new(&[&a]).unwrap();
        assert_eq!(single.graph, path3());
        assert!(single.segment_of_node.iter().all(|&s| s == 0));
    }

    #[test]
    fn batch_errors() {
        assert!(matches!(GraphBatch::new(&[]), Err(Error::EmptyBatch)));
        let g4 = Graph::new(1, &[], Tensor::matrix(1, 4, vec![0.0; 4]).unwrap()).unwrap();
        let g5 = Graph::new(1, &[], Tensor::matrix(1, 5, vec![0.0; 5]).unwrap()).unwrap();
        let (a, b) = (LabeledExample::new(g4, 0), LabeledExample::new(g5, 0));
        assert!(matches!(
            GraphBatch::new(&[&a, &b]),
            Err(Error::FeatureDimMismatch { expected: 4, found: 5 })
        ));
    }

    #[test]
    fn jsonl_rejects_bad_masks() {
        let line = r#"{"num_nodes":2,"edges":[[0,1]],"features":[[1.0],[2.0]],"label":0,"gt_edge_mask":[2]}"#;
        assert!(read_jsonl(line.as_bytes()).is_err());
        let line = r#"{"num_nodes":2,"edges":[[0,1]],"features":[[1.0],[2.0]],"label":0,"gt_node_mask":[1]}"#;
        assert!(matches!(read_jsonl(line.as_bytes()), Err(Error::MaskLength { expected: 2, found: 1 })));
    }
}
