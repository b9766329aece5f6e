//! Property tests for graph construction and filtering, checked against
//! brute-force set computations written independently of the graph code.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use vrdkit::caption::ExtractedTriplet;
use vrdkit::kg::{FilterSpec, NodeFilterMode, RelationFilterMode, VisualRelationKG};

fn t(s: u8, r: u8, o: u8) -> ExtractedTriplet {
    ExtractedTriplet {
        subject: format!("n{s}"),
        predicate: format!("r{r}"),
        object: format!("n{o}"),
        source: "prop".into(),
    }
}

fn arb_triplets() -> impl Strategy<Value = Vec<ExtractedTriplet>> {
    prop::collection::vec((0u8..30, 0u8..8, 0u8..30), 0..60)
        .prop_map(|v| v.into_iter().map(|(s, r, o)| t(s, r, o)).collect())
}

fn spec(node: NodeFilterMode, anchors: &BTreeSet<String>) -> FilterSpec {
    FilterSpec {
        node_mode: node,
        relation_mode: RelationFilterMode::All,
        anchor_classes: anchors.clone(),
    }
}

/// Brute-force zero-hop node set: anchors present in the graph.
fn oracle_zero_hop(graph: &VisualRelationKG, anchors: &BTreeSet<String>) -> BTreeSet<String> {
    graph
        .nodes()
        .iter()
        .filter(|n| anchors.contains(*n))
        .cloned()
        .collect()
}

/// Brute-force one-hop node set: zero-hop plus everything sharing an edge
/// with a zero-hop node.
fn oracle_one_hop(graph: &VisualRelationKG, anchors: &BTreeSet<String>) -> BTreeSet<String> {
    let zero = oracle_zero_hop(graph, anchors);
    let mut keep = zero.clone();
    for edge in graph.edges() {
        if zero.contains(&edge.subject) {
            keep.insert(edge.object.clone());
        }
        if zero.contains(&edge.object) {
            keep.insert(edge.subject.clone());
        }
    }
    keep
}

/// Brute-force edge survivors for a node keep-set.
fn oracle_edges(
    graph: &VisualRelationKG,
    keep: &BTreeSet<String>,
) -> BTreeSet<(String, String, String)> {
    graph
        .edges()
        .filter(|e| keep.contains(&e.subject) && keep.contains(&e.object))
        .map(|e| (e.subject, e.relation, e.object))
        .collect()
}

fn edge_set(graph: &VisualRelationKG) -> BTreeSet<(String, String, String)> {
    graph
        .edges()
        .map(|e| (e.subject, e.relation, e.object))
        .collect()
}

proptest! {
    #[test]
    fn filter_monotonicity_and_oracle_equivalence(
        triplets in arb_triplets(),
        anchor_ids in prop::collection::btree_set(0u8..30, 1..6),
    ) {
        let graph = VisualRelationKG::build(&triplets);
        let anchors: BTreeSet<String> = anchor_ids.iter().map(|i| format!("n{i}")).collect();

        let zero = graph.filter_nodes(&spec(NodeFilterMode::ZeroHop, &anchors)).unwrap();
        let one = graph.filter_nodes(&spec(NodeFilterMode::OneHop, &anchors)).unwrap();
        let all = graph.filter_nodes(&spec(NodeFilterMode::All, &anchors)).unwrap();

        // monotone node and edge sets
        prop_assert!(zero.nodes().is_subset(one.nodes()));
        prop_assert!(one.nodes().is_subset(all.nodes()));
        prop_assert!(edge_set(&zero).is_subset(&edge_set(&one)));
        prop_assert!(edge_set(&one).is_subset(&edge_set(&all)));

        // exact agreement with the brute-force oracles
        prop_assert_eq!(zero.nodes(), &oracle_zero_hop(&graph, &anchors));
        prop_assert_eq!(one.nodes(), &oracle_one_hop(&graph, &anchors));
        prop_assert_eq!(edge_set(&zero), oracle_edges(&graph, &oracle_zero_hop(&graph, &anchors)));
        prop_assert_eq!(edge_set(&one), oracle_edges(&graph, &oracle_one_hop(&graph, &anchors)));
        prop_assert_eq!(&all, &graph);
    }

    #[test]
    fn build_is_associative_under_concatenation(
        left in arb_triplets(),
        right in arb_triplets(),
    ) {
        let mut both = left.clone();
        both.extend(right.clone());
        let combined = VisualRelationKG::build(&both);
        let merged = VisualRelationKG::build(&left).merge(&VisualRelationKG::build(&right));
        prop_assert_eq!(combined, merged);
    }

    #[test]
    fn no_orphan_relation_after_filters(
        triplets in arb_triplets(),
        anchor_ids in prop::collection::btree_set(0u8..30, 1..6),
        k in 1usize..5,
    ) {
        let graph = VisualRelationKG::build(&triplets);
        let anchors: BTreeSet<String> = anchor_ids.iter().map(|i| format!("n{i}")).collect();
        for filtered in [
            graph.filter_nodes(&spec(NodeFilterMode::ZeroHop, &anchors)).unwrap(),
            graph.filter_nodes(&spec(NodeFilterMode::OneHop, &anchors)).unwrap(),
            graph.filter_relations(&FilterSpec {
                node_mode: NodeFilterMode::All,
                relation_mode: RelationFilterMode::TopK(k),
                anchor_classes: BTreeSet::new(),
            }).unwrap(),
        ] {
            let used: BTreeSet<String> = filtered.edges().map(|e| e.relation).collect();
            prop_assert_eq!(filtered.relations(), &used);
            for edge in filtered.edges() {
                prop_assert!(filtered.nodes().contains(&edge.subject));
                prop_assert!(filtered.nodes().contains(&edge.object));
            }
        }
    }

    #[test]
    fn serialization_is_canonical(triplets in arb_triplets(), shuffled in arb_triplets()) {
        let g1 = VisualRelationKG::build(&triplets);
        let g2 = VisualRelationKG::build(&shuffled);
        // round trip is lossless
        prop_assert_eq!(VisualRelationKG::from_tsv(&g1.to_tsv()).unwrap(), g1.clone());
        // equal serializations imply equal graphs and vice versa
        prop_assert_eq!(g1.to_tsv() == g2.to_tsv(), g1 == g2);
    }

    #[test]
    fn top_k_matches_hand_count_oracle(triplets in arb_triplets(), k in 1usize..8) {
        let graph = VisualRelationKG::build(&triplets);
        let filtered = graph.filter_relations(&FilterSpec {
            node_mode: NodeFilterMode::All,
            relation_mode: RelationFilterMode::TopK(k),
            anchor_classes: BTreeSet::new(),
        }).unwrap();

        // independent count: tally per relation, rank by (count desc, name asc)
        let mut totals: BTreeMap<String, u64> = BTreeMap::new();
        for e in graph.edges() {
            *totals.entry(e.relation).or_insert(0) += e.count;
        }
        let mut ranked: Vec<(String, u64)> = totals.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let expect: BTreeSet<String> = ranked.into_iter().take(k).map(|(r, _)| r).collect();
        // relations with zero surviving edges cannot appear
        let expect: BTreeSet<String> = expect
            .into_iter()
            .filter(|r| graph.edges().any(|e| &e.relation == r))
            .collect();
        prop_assert_eq!(filtered.relations(), &expect);
    }
}
