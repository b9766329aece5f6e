//! Exhaustive oracle equivalence for the ranking metrics: every metric is
//! recomputed from scratch (independent loops over all outcomes) on small
//! random instances and must agree exactly with the library implementation.

use std::collections::BTreeSet;

use nalgebra::DVector;
use proptest::prelude::*;

use vrdkit::eval::{
    mean_recall_at_k, recall_at_k, seen_unseen_recall, ImageForEval, RankedPrediction, SeenMode,
    SeenSets, SeenSubset,
};
use vrdkit::fusion::ObjectDescriptor;

const CLASS_NAMES: [&str; 4] = ["a", "b", "c", "d"];

#[derive(Debug, Clone)]
struct Instance {
    images: Vec<ImageForEval>,
    rankings: Vec<Vec<RankedPrediction>>,
    predicate_names: Vec<String>,
    seen: SeenSets,
}

fn obj(class: &str) -> ObjectDescriptor {
    ObjectDescriptor::new([0.0, 0.0, 0.5, 0.5], class, DVector::from_vec(vec![0.0])).unwrap()
}

/// Up to 5 images, 4 objects, 5 predicates (index 0 is no-relation).
fn arb_instance() -> impl Strategy<Value = Instance> {
    let n_preds = 2usize..=5;
    (n_preds, 1usize..=5).prop_flat_map(|(n_preds, n_images)| {
        let image = (2usize..=4).prop_flat_map(move |n_objects| {
            let classes = prop::collection::vec(0usize..CLASS_NAMES.len(), n_objects);
            let gt = prop::collection::btree_set(
                (0..n_objects, 1..n_preds, 0..n_objects),
                0..6,
            );
            let scores = prop::collection::vec(
                prop::collection::vec(0u16..1000, n_preds),
                n_objects * (n_objects - 1),
            );
            (classes, gt, scores)
        });
        let seen_pairs = prop::collection::btree_set(
            (0usize..CLASS_NAMES.len(), 0usize..CLASS_NAMES.len()),
            0..6,
        );
        let seen_trips = prop::collection::btree_set(
            (0usize..CLASS_NAMES.len(), 1usize..n_preds, 0usize..CLASS_NAMES.len()),
            0..4,
        );
        (
            prop::collection::vec(image, n_images),
            seen_pairs,
            seen_trips,
            Just(n_preds),
        )
            .prop_map(|(raw_images, seen_pairs, seen_trips, n_preds)| {
                let predicate_names: Vec<String> = (0..n_preds)
                    .map(|i| if i == 0 { "no-relation".into() } else { format!("p{i}") })
                    .collect();
                let mut images = Vec::new();
                let mut rankings = Vec::new();
                for (idx, (classes, gt, scores)) in raw_images.into_iter().enumerate() {
                    let n_objects = classes.len();
                    let gt: BTreeSet<(usize, usize, usize)> =
                        gt.into_iter().filter(|&(s, _, o)| s != o).collect();
                    let objects: Vec<ObjectDescriptor> =
                        classes.iter().map(|&c| obj(CLASS_NAMES[c])).collect();
                    // build a ranking exactly as the contract states: every
                    // ordered pair x non-no-relation predicate, sorted by
                    // score desc with (pair index, predicate index) ties
                    let mut entries = Vec::new();
                    let mut pair_index = 0;
                    for i in 0..n_objects {
                        for j in 0..n_objects {
                            if i == j {
                                continue;
                            }
                            for p in 1..n_preds {
                                let score = scores[pair_index][p] as f64 / 1000.0;
                                entries.push((score, pair_index, p, i, j));
                            }
                            pair_index += 1;
                        }
                    }
                    entries.sort_by(|a, b| {
                        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
                    });
                    let image_id = format!("img{idx}");
                    rankings.push(
                        entries
                            .into_iter()
                            .map(|(score, _, p, i, j)| RankedPrediction {
                                image_id: image_id.clone(),
                                subject_index: i,
                                predicate_index: p,
                                object_index: j,
                                score,
                            })
                            .collect(),
                    );
                    images.push(ImageForEval {
                        image_id,
                        objects,
                        gt,
                    });
                }
                let mut seen = SeenSets::default();
                for (s, o) in seen_pairs {
                    seen.pairs
                        .insert((CLASS_NAMES[s].to_string(), CLASS_NAMES[o].to_string()));
                }
                for (s, p, o) in seen_trips {
                    // keep the projection invariant: the pair must be seen too
                    seen.pairs
                        .insert((CLASS_NAMES[s].to_string(), CLASS_NAMES[o].to_string()));
                    seen.triplets.insert((
                        CLASS_NAMES[s].to_string(),
                        predicate_names[p].clone(),
                        CLASS_NAMES[o].to_string(),
                    ));
                }
                Instance {
                    images,
                    rankings,
                    predicate_names,
                    seen,
                }
            })
    })
}

/// From-scratch top-k membership test.
fn oracle_in_top_k(ranking: &[RankedPrediction], gt: (usize, usize, usize), k: usize) -> bool {
    ranking
        .iter()
        .take(k)
        .any(|p| (p.subject_index, p.predicate_index, p.object_index) == gt)
}

/// From-scratch micro recall restricted by a predicate filter.
fn oracle_recall(
    inst: &Instance,
    k: usize,
    keep: impl Fn(&ImageForEval, (usize, usize, usize)) -> bool,
) -> f64 {
    let mut num = 0usize;
    let mut den = 0usize;
    for (image, ranking) in inst.images.iter().zip(&inst.rankings) {
        for &gt in &image.gt {
            if !keep(image, gt) {
                continue;
            }
            den += 1;
            if oracle_in_top_k(ranking, gt, k) {
                num += 1;
            }
        }
    }
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

fn same(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || a == b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn recall_matches_exhaustive_recomputation(inst in arb_instance(), k in 1usize..30) {
        let got = recall_at_k(&inst.rankings, &inst.images, k).unwrap();
        let want = oracle_recall(&inst, k, |_, _| true);
        prop_assert!(same(got, want), "R@{k}: got {got}, oracle {want}");
    }

    #[test]
    fn mean_recall_matches_exhaustive_recomputation(inst in arb_instance(), k in 1usize..30) {
        let indices: Vec<usize> = (1..inst.predicate_names.len()).collect();
        let got = mean_recall_at_k(&inst.rankings, &inst.images, k, &indices).unwrap();
        // independent per-predicate averaging
        let mut values = Vec::new();
        for &p in &indices {
            let r = oracle_recall(&inst, k, |_, gt| gt.1 == p);
            if !r.is_nan() {
                values.push(r);
            }
        }
        let want = if values.is_empty() {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        prop_assert!(same(got, want), "mR@{k}: got {got}, oracle {want}");
    }

    #[test]
    fn seen_unseen_matches_exhaustive_recomputation(inst in arb_instance(), k in 1usize..30) {
        for mode in [SeenMode::Pair, SeenMode::Triplet] {
            for subset in [SeenSubset::Seen, SeenSubset::Unseen] {
                let got = seen_unseen_recall(
                    &inst.rankings, &inst.images, &inst.predicate_names,
                    &inst.seen, mode, subset, k,
                ).unwrap();
                let want = oracle_recall(&inst, k, |image, gt| {
                    let s = &image.objects[gt.0].class;
                    let o = &image.objects[gt.2].class;
                    let is_seen = match mode {
                        SeenMode::Pair => inst.seen.pairs.contains(&(s.clone(), o.clone())),
                        SeenMode::Triplet => inst.seen.triplets.contains(&(
                            s.clone(),
                            inst.predicate_names[gt.1].clone(),
                            o.clone(),
                        )),
                    };
                    matches!(subset, SeenSubset::Seen) == is_seen
                });
                prop_assert!(same(got, want), "{mode:?}/{subset:?}@{k}: got {got}, oracle {want}");
            }
        }
    }

    #[test]
    fn seen_plus_unseen_decomposition_is_exact(inst in arb_instance(), k in 1usize..30) {
        // numerators and denominators must add up exactly in both modes
        for mode in [SeenMode::Pair, SeenMode::Triplet] {
            let count = |keep: &dyn Fn(&ImageForEval, (usize, usize, usize)) -> bool| {
                let mut num = 0usize;
                let mut den = 0usize;
                for (image, ranking) in inst.images.iter().zip(&inst.rankings) {
                    for &gt in &image.gt {
                        if !keep(image, gt) { continue; }
                        den += 1;
                        if oracle_in_top_k(ranking, gt, k) { num += 1; }
                    }
                }
                (num, den)
            };
            let is_seen = |image: &ImageForEval, gt: (usize, usize, usize)| {
                let s = &image.objects[gt.0].class;
                let o = &image.objects[gt.2].class;
                match mode {
                    SeenMode::Pair => inst.seen.pairs.contains(&(s.clone(), o.clone())),
                    SeenMode::Triplet => inst.seen.triplets.contains(&(
                        s.clone(), inst.predicate_names[gt.1].clone(), o.clone(),
                    )),
                }
            };
            let (sn, sd) = count(&|i, g| is_seen(i, g));
            let (un, ud) = count(&|i, g| !is_seen(i, g));
            let (tn, td) = count(&|_, _| true);
            prop_assert_eq!(sn + un, tn);
            prop_assert_eq!(sd + ud, td);
        }
    }

    #[test]
    fn metrics_are_monotone_in_k_and_bounded(inst in arb_instance()) {
        let mut previous = 0.0f64;
        for k in 1..=25 {
            let r = recall_at_k(&inst.rankings, &inst.images, k).unwrap();
            if r.is_nan() {
                break;
            }
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r >= previous, "R@{k} = {r} < R@{} = {previous}", k - 1);
            previous = r;
        }
    }
}
