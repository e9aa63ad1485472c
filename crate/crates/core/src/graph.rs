// SPDX-License-Identifier: MIT OR Apache-2.0

//! Computational graphs over model components. Vertices are stored in
//! topological order; an edge `(source, target, slot)` says that the value of
//! `source` feeds input `slot` of `target`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    Standard,
    ResidualRewrite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VertexKind {
    Input,
    /// Attention head output before the `W_O` projection.
    ZAttn { layer: usize, head: usize },
    /// Sum of projected head outputs in one layer (standard view only).
    AttnLayer { layer: usize },
    Mlp { layer: usize },
    MResid { layer: usize },
    Resid { layer: usize },
    Out,
    /// Generic vertex of a hand-built graph.
    Unit { index: usize },
}

impl fmt::Display for VertexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VertexKind::Input => write!(f, "input"),
            VertexKind::ZAttn { layer, head } => write!(f, "a{layer}.{head}"),
            VertexKind::AttnLayer { layer } => write!(f, "attn{layer}"),
            VertexKind::Mlp { layer } => write!(f, "mlp{layer}"),
            VertexKind::MResid { layer } => write!(f, "mresid{layer}"),
            VertexKind::Resid { layer } => write!(f, "resid{layer}"),
            VertexKind::Out => write!(f, "out"),
            VertexKind::Unit { index } => write!(f, "u{index}"),
        }
    }
}

/// Which input of the target an edge feeds. Attention heads read three
/// copies of their input stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    Q,
    K,
    V,
    Main,
}

impl Slot {
    pub fn suffix(self) -> &'static str {
        match self {
            Slot::Q => "q",
            Slot::K => "k",
            Slot::V => "v",
            Slot::Main => "",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub slot: Slot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeGraph {
    pub view: Option<View>,
    vertices: Vec<VertexKind>,
    edges: Vec<Edge>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
}

impl ComputeGraph {
    /// Builds a graph from vertices in topological order and edges between them.
    pub fn new(vertices: Vec<VertexKind>, edges: Vec<Edge>) -> Result<Self> {
        let n = vertices.len();
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (id, e) in edges.iter().enumerate() {
            if e.source >= n || e.target >= n {
                return Err(Error::invalid(format!("edge {id} references a missing vertex")));
            }
            if e.source >= e.target {
                return Err(Error::invalid(format!(
                    "edge {id} ({} -> {}) violates the topological order",
                    vertices[e.source], vertices[e.target]
                )));
            }
            incoming[e.target].push(id);
            outgoing[e.source].push(id);
        }
        Ok(Self { view: None, vertices, edges, incoming, outgoing })
    }

    /// Graph of the transformer described by `config` in the requested view.
    pub fn transformer(config: &ModelConfig, view: View) -> Self {
        let (l_max, h_max) = (config.n_layers, config.n_heads);
        let mut vertices = vec![VertexKind::Input];
        let mut edges = Vec::new();
        let mut g = match view {
            View::ResidualRewrite => {
                // every earlier block writes straight into the reader's input sum
                let mut writers = vec![0usize];
                for layer in 0..l_max {
                    let mut heads = Vec::with_capacity(h_max);
                    for head in 0..h_max {
                        let id = vertices.len();
                        vertices.push(VertexKind::ZAttn { layer, head });
                        for slot in [Slot::Q, Slot::K, Slot::V] {
                            edges.extend(writers.iter().map(|&source| Edge { source, target: id, slot }));
                        }
                        heads.push(id);
                    }
                    let mlp = vertices.len();
                    vertices.push(VertexKind::Mlp { layer });
                    let mlp_readers: Vec<usize> = writers.iter().copied().chain(heads.iter().copied()).collect();
                    edges.extend(mlp_readers.iter().map(|&source| Edge { source, target: mlp, slot: Slot::Main }));
                    writers.extend(heads);
                    writers.push(mlp);
                }
                let out = vertices.len();
                vertices.push(VertexKind::Out);
                edges.extend(writers.iter().map(|&source| Edge { source, target: out, slot: Slot::Main }));
                Self::new(vertices, edges)
            }
            View::Standard => {
                let mut resid = 0usize;
                for layer in 0..l_max {
                    let first_head = vertices.len();
                    for head in 0..h_max {
                        let id = vertices.len();
                        vertices.push(VertexKind::ZAttn { layer, head });
                        for slot in [Slot::Q, Slot::K, Slot::V] {
                            edges.push(Edge { source: resid, target: id, slot });
                        }
                    }
                    let attn = vertices.len();
                    vertices.push(VertexKind::AttnLayer { layer });
                    for h in 0..h_max {
                        edges.push(Edge { source: first_head + h, target: attn, slot: Slot::Main });
                    }
                    let mresid = vertices.len();
                    vertices.push(VertexKind::MResid { layer });
                    edges.push(Edge { source: resid, target: mresid, slot: Slot::Main });
                    edges.push(Edge { source: attn, target: mresid, slot: Slot::Main });
                    let mlp = vertices.len();
                    vertices.push(VertexKind::Mlp { layer });
                    edges.push(Edge { source: mresid, target: mlp, slot: Slot::Main });
                    let next = vertices.len();
                    vertices.push(VertexKind::Resid { layer });
                    edges.push(Edge { source: mresid, target: next, slot: Slot::Main });
                    edges.push(Edge { source: mlp, target: next, slot: Slot::Main });
                    resid = next;
                }
                let out = vertices.len();
                vertices.push(VertexKind::Out);
                edges.push(Edge { source: resid, target: out, slot: Slot::Main });
                Self::new(vertices, edges)
            }
        }
        .expect("transformer graphs are built in topological order");
        g.view = Some(view);
        g
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn vertices(&self) -> &[VertexKind] {
        &self.vertices
    }

    pub fn vertex(&self, id: usize) -> VertexKind {
        self.vertices[id]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> Edge {
        self.edges[id]
    }

    /// Edge ids into `vertex`, in insertion order.
    pub fn incoming(&self, vertex: usize) -> &[usize] {
        &self.incoming[vertex]
    }

    pub fn outgoing(&self, vertex: usize) -> &[usize] {
        &self.outgoing[vertex]
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn output(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn find(&self, kind: VertexKind) -> Option<usize> {
        self.vertices.iter().position(|&v| v == kind)
    }

    /// Looks a vertex up by its display name, e.g. `a1.3` or `mlp2`.
    pub fn find_by_name(&self, name: &str) -> Option<usize> {
        self.vertices.iter().position(|v| v.to_string() == name)
    }

    pub fn edge_name(&self, id: usize) -> String {
        let e = self.edges[id];
        let suffix = e.slot.suffix();
        if suffix.is_empty() {
            format!("{}->{}", self.vertices[e.source], self.vertices[e.target])
        } else {
            format!("{}->{}.{}", self.vertices[e.source], self.vertices[e.target], suffix)
        }
    }

    pub fn find_edge(&self, source: usize, target: usize, slot: Slot) -> Option<usize> {
        self.outgoing[source].iter().copied().find(|&id| {
            let e = self.edges[id];
            e.target == target && e.slot == slot
        })
    }

    /// Components that single-component studies ablate: heads and MLPs.
    pub fn components(&self) -> Vec<usize> {
        (0..self.vertices.len())
            .filter(|&v| matches!(self.vertices[v], VertexKind::ZAttn { .. } | VertexKind::Mlp { .. }))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(l: usize, h: usize) -> ModelConfig {
        ModelConfig { n_layers: l, n_heads: h, d_model: 2 * h, d_head: 2, d_mlp: 4, d_vocab: 5, max_seq_len: 4 }
    }

    #[test]
    fn gpt2_sized_rewrite_graph_has_published_edge_count() {
        let g = ComputeGraph::transformer(&config(12, 12), View::ResidualRewrite);
        let head_to_head = g
            .edges()
            .iter()
            .filter(|e| {
                matches!(g.vertex(e.source), VertexKind::ZAttn { .. }) && matches!(g.vertex(e.target), VertexKind::ZAttn { .. })
            })
            .count();
        assert_eq!(head_to_head, 28_512);
        assert_eq!(g.num_edges(), 32_491);
        assert_eq!(g.num_vertices(), 12 * 13 + 2);
    }

    #[test]
    fn single_layer_has_no_head_to_head_edges() {
        let g = ComputeGraph::transformer(&config(1, 3), View::ResidualRewrite);
        assert!(g
            .edges()
            .iter()
            .all(|e| !(matches!(g.vertex(e.source), VertexKind::ZAttn { .. })
                && matches!(g.vertex(e.target), VertexKind::ZAttn { .. }))));
    }

    #[test]
    fn names_round_trip() {
        let g = ComputeGraph::transformer(&config(2, 2), View::Standard);
        for v in 0..g.num_vertices() {
            assert_eq!(g.find_by_name(&g.vertex(v).to_string()), Some(v));
        }
        let r = ComputeGraph::transformer(&config(2, 2), View::ResidualRewrite);
        let a = r.find_by_name("a0.1").unwrap();
        let b = r.find_by_name("a1.0").unwrap();
        let e = r.find_edge(a, b, Slot::K).unwrap();
        assert_eq!(r.edge_name(e), "a0.1->a1.0.k");
    }

    #[test]
    fn rejects_backward_edges() {
        let v = vec![VertexKind::Unit { index: 0 }, VertexKind::Unit { index: 1 }];
        assert!(ComputeGraph::new(v, vec![Edge { source: 1, target: 0, slot: Slot::Main }]).is_err());
    }
}
