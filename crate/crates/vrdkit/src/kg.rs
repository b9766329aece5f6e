//! The visual relation knowledge graph G = (V, E, R): construction from
//! extracted triplets, node/relation filtering, and canonical TSV
//! serialization.
//!
//! Graphs are immutable after construction; filters return new graphs.

use std::collections::{BTreeMap, BTreeSet};

use crate::caption::ExtractedTriplet;
use crate::error::{Result, VrdError};

/// A counted, deduplicated edge (v_i, r, v_j).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct KGEdge {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub count: u64,
}

/// Entity nodes, relation labels, and counted edges.
///
/// Invariants: every edge endpoint is in `nodes`, every edge relation is in
/// `relations`, and no relation is orphaned (each appears on at least one
/// edge) after construction or filtering.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VisualRelationKG {
    nodes: BTreeSet<String>,
    relations: BTreeSet<String>,
    edges: BTreeMap<(String, String, String), u64>,
}

/// Node filter regime: benchmark classes only, their direct neighbours, or
/// everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeFilterMode {
    ZeroHop,
    OneHop,
    All,
}

/// Relation filter regime: the k relations with the highest total edge
/// count, or everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationFilterMode {
    TopK(usize),
    All,
}

/// Filter parameters. Zero/one-hop node modes require anchor classes.
#[derive(Debug, Clone)]
pub struct FilterSpec {
    pub node_mode: NodeFilterMode,
    pub relation_mode: RelationFilterMode,
    pub anchor_classes: BTreeSet<String>,
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if matches!(
            self.node_mode,
            NodeFilterMode::ZeroHop | NodeFilterMode::OneHop
        ) && self.anchor_classes.is_empty()
        {
            return Err(VrdError::Config(
                "zero/one-hop node filtering requires a non-empty anchor class set".into(),
            ));
        }
        if let RelationFilterMode::TopK(0) = self.relation_mode {
            return Err(VrdError::Config("top-k relation filter requires k >= 1".into()));
        }
        Ok(())
    }
}

/// Graph cardinalities: |V|, |R|, |E| (distinct edges), and the total
/// occurrence count summed over edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphStats {
    pub nodes: usize,
    pub relations: usize,
    pub edges: usize,
    pub total_count: u64,
}

impl VisualRelationKG {
    pub fn nodes(&self) -> &BTreeSet<String> {
        &self.nodes
    }

    pub fn relations(&self) -> &BTreeSet<String> {
        &self.relations
    }

    pub fn edges(&self) -> impl Iterator<Item = KGEdge> + '_ {
        self.edges.iter().map(|((s, r, o), c)| KGEdge {
            subject: s.clone(),
            relation: r.clone(),
            object: o.clone(),
            count: *c,
        })
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty() && self.nodes.is_empty()
    }

    /// Merge duplicate triplets into counted edges; node and relation sets
    /// are derived from the edges. An empty triplet list gives a valid empty
    /// graph.
    pub fn build(triplets: &[ExtractedTriplet]) -> VisualRelationKG {
        let mut edges: BTreeMap<(String, String, String), u64> = BTreeMap::new();
        for t in triplets {
            *edges
                .entry((t.subject.clone(), t.predicate.clone(), t.object.clone()))
                .or_insert(0) += 1;
        }
        Self::from_edge_map(edges)
    }

    /// Merge two graphs; counts of shared edges add.
    pub fn merge(&self, other: &VisualRelationKG) -> VisualRelationKG {
        let mut edges = self.edges.clone();
        for (key, count) in &other.edges {
            *edges.entry(key.clone()).or_insert(0) += count;
        }
        Self::from_edge_map(edges)
    }

    fn from_edge_map(edges: BTreeMap<(String, String, String), u64>) -> VisualRelationKG {
        let mut nodes = BTreeSet::new();
        let mut relations = BTreeSet::new();
        for (s, r, o) in edges.keys() {
            nodes.insert(s.clone());
            nodes.insert(o.clone());
            relations.insert(r.clone());
        }
        VisualRelationKG {
            nodes,
            relations,
            edges,
        }
    }

    /// Apply the node filter regime. Zero-hop keeps anchor-class nodes;
    /// one-hop additionally keeps nodes sharing an edge with an anchor node;
    /// ALL keeps everything. Edges with a removed endpoint are dropped and
    /// the relation set is re-derived.
    pub fn filter_nodes(&self, spec: &FilterSpec) -> Result<VisualRelationKG> {
        spec.validate()?;
        let keep: BTreeSet<String> = match spec.node_mode {
            NodeFilterMode::All => return Ok(self.clone()),
            NodeFilterMode::ZeroHop => self
                .nodes
                .iter()
                .filter(|n| spec.anchor_classes.contains(*n))
                .cloned()
                .collect(),
            NodeFilterMode::OneHop => {
                let anchors: BTreeSet<&String> = self
                    .nodes
                    .iter()
                    .filter(|n| spec.anchor_classes.contains(*n))
                    .collect();
                let mut keep: BTreeSet<String> =
                    anchors.iter().map(|n| (*n).clone()).collect();
                for (s, _, o) in self.edges.keys() {
                    if anchors.contains(s) {
                        keep.insert(o.clone());
                    }
                    if anchors.contains(o) {
                        keep.insert(s.clone());
                    }
                }
                keep
            }
        };
        let edges: BTreeMap<_, _> = self
            .edges
            .iter()
            .filter(|((s, _, o), _)| keep.contains(s) && keep.contains(o))
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        let mut graph = Self::from_edge_map(edges);
        // Kept nodes survive even when all their edges were dropped.
        graph.nodes = keep;
        Ok(graph)
    }

    /// Apply the relation filter regime. Top-k keeps the k relations with
    /// the highest total edge count (ties broken lexicographically
    /// ascending); isolated nodes are dropped afterwards.
    pub fn filter_relations(&self, spec: &FilterSpec) -> Result<VisualRelationKG> {
        spec.validate()?;
        let k = match spec.relation_mode {
            RelationFilterMode::All => return Ok(self.clone()),
            RelationFilterMode::TopK(k) => k,
        };
        let mut totals: BTreeMap<&String, u64> = BTreeMap::new();
        for ((_, r, _), count) in &self.edges {
            *totals.entry(r).or_insert(0) += count;
        }
        let mut ranked: Vec<(&String, u64)> = totals.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep: BTreeSet<&String> = ranked.iter().take(k).map(|(r, _)| *r).collect();
        let edges: BTreeMap<_, _> = self
            .edges
            .iter()
            .filter(|((_, r, _), _)| keep.contains(r))
            .map(|(key, v)| (key.clone(), *v))
            .collect();
        Ok(Self::from_edge_map(edges))
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            nodes: self.nodes.len(),
            relations: self.relations.len(),
            edges: self.edges.len(),
            total_count: self.edges.values().sum(),
        }
    }

    /// Canonical TSV: `subject<TAB>relation<TAB>object<TAB>count`, rows
    /// sorted by (subject, relation, object).
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ((s, r, o), count) in &self.edges {
            out.push_str(&format!("{s}\t{r}\t{o}\t{count}\n"));
        }
        out
    }

    /// Parse the canonical TSV form. Malformed rows (wrong field count, or a
    /// count that is not a positive integer) report their line number.
    pub fn from_tsv(text: &str) -> Result<VisualRelationKG> {
        let mut edges = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(VrdError::Parse {
                    line: i + 1,
                    message: format!("expected 4 tab-separated fields, got {}", fields.len()),
                });
            }
            let count: u64 = fields[3].parse().map_err(|_| VrdError::Parse {
                line: i + 1,
                message: format!("count is not a positive integer: {:?}", fields[3]),
            })?;
            if count == 0 {
                return Err(VrdError::Parse {
                    line: i + 1,
                    message: "count must be >= 1".into(),
                });
            }
            let key = (
                fields[0].to_string(),
                fields[1].to_string(),
                fields[2].to_string(),
            );
            if edges.insert(key, count).is_some() {
                return Err(VrdError::Parse {
                    line: i + 1,
                    message: "duplicate edge row".into(),
                });
            }
        }
        Ok(Self::from_edge_map(edges))
    }
}
