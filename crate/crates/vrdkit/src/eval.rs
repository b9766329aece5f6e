//! Ranking evaluation: Recall@k, mean Recall@k, and the pair/triplet
//! seen/unseen recall metrics over per-image ranked predictions.
//!
//! Top-k is taken per image (the field convention for Recall@k) and
//! no-relation triplets are never emitted into rankings. Metrics whose
//! restricted ground-truth set is empty are undefined and reported as NaN
//! (`None` in the JSON report) alongside a warning.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VrdError};
use crate::fusion::{FusionModel, ObjectDescriptor};

/// One scored triplet candidate inside an image ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    pub image_id: String,
    pub subject_index: usize,
    pub predicate_index: usize,
    pub object_index: usize,
    pub score: f64,
}

/// Class pairs and class triplets observed in the training support set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeenSets {
    pub pairs: BTreeSet<(String, String)>,
    pub triplets: BTreeSet<(String, String, String)>,
}

impl SeenSets {
    /// Every triplet's class pair must itself be seen.
    pub fn validate(&self) -> Result<()> {
        for (s, _, o) in &self.triplets {
            if !self.pairs.contains(&(s.clone(), o.clone())) {
                return Err(VrdError::Contract(format!(
                    "seen triplet ({s}, _, {o}) does not project into the seen pair set"
                )));
            }
        }
        Ok(())
    }
}

/// An image with its objects and instance-level labeled triplets
/// (subject object index, predicate index, object object index).
#[derive(Debug, Clone)]
pub struct ImageForEval {
    pub image_id: String,
    pub objects: Vec<ObjectDescriptor>,
    pub gt: BTreeSet<(usize, usize, usize)>,
}

impl ImageForEval {
    pub fn validate(&self, n_predicates: usize, no_relation: usize) -> Result<()> {
        for &(s, p, o) in &self.gt {
            if s >= self.objects.len() || o >= self.objects.len() || s == o {
                return Err(VrdError::Contract(format!(
                    "image {}: labeled triplet ({s},{p},{o}) has bad object indices",
                    self.image_id
                )));
            }
            if p >= n_predicates || p == no_relation {
                return Err(VrdError::Contract(format!(
                    "image {}: labeled triplet ({s},{p},{o}) has a bad predicate index",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// Anything that can score all candidate predicates for an ordered object
/// pair. Implemented by the fusion model and by the random baseline.
pub trait RelationScorer {
    fn n_candidates(&self) -> usize;
    fn no_relation_index(&self) -> usize;
    fn score_pair(
        &mut self,
        subject: &ObjectDescriptor,
        object: &ObjectDescriptor,
    ) -> Result<DVector<f64>>;
}

impl RelationScorer for FusionModel {
    fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    fn no_relation_index(&self) -> usize {
        self.candidates.no_relation_index()
    }

    fn score_pair(
        &mut self,
        subject: &ObjectDescriptor,
        object: &ObjectDescriptor,
    ) -> Result<DVector<f64>> {
        self.scores(subject, object)
    }
}

/// Uniform-random scores; the baseline row of the result tables.
#[derive(Debug, Clone)]
pub struct RandomScorer {
    pub n_candidates: usize,
    pub no_relation: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl RandomScorer {
    pub fn new(n_candidates: usize, no_relation: usize, seed: u64) -> RandomScorer {
        use rand_chacha::rand_core::SeedableRng;
        RandomScorer {
            n_candidates,
            no_relation,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl RelationScorer for RandomScorer {
    fn n_candidates(&self) -> usize {
        self.n_candidates
    }

    fn no_relation_index(&self) -> usize {
        self.no_relation
    }

    fn score_pair(
        &mut self,
        _subject: &ObjectDescriptor,
        _object: &ObjectDescriptor,
    ) -> Result<DVector<f64>> {
        use rand::Rng;
        Ok(DVector::from_fn(self.n_candidates, |_, _| {
            self.rng.gen_range(0.0..1.0)
        }))
    }
}

/// Score every ordered object pair against every non-no-relation predicate
/// and sort descending by score (ties by pair index then predicate index).
/// Fewer than two objects yield an empty ranking.
pub fn rank_image(
    scorer: &mut dyn RelationScorer,
    image_id: &str,
    objects: &[ObjectDescriptor],
    graph_constraint: bool,
) -> Result<Vec<RankedPrediction>> {
    if objects.len() < 2 {
        return Ok(Vec::new());
    }
    let norel = scorer.no_relation_index();
    // (score, pair_index, predicate_index, subject, object)
    let mut entries: Vec<(f64, usize, usize, usize, usize)> = Vec::new();
    let mut pair_index = 0usize;
    for i in 0..objects.len() {
        for j in 0..objects.len() {
            if i == j {
                continue;
            }
            let scores = scorer.score_pair(&objects[i], &objects[j])?;
            if scores.len() != scorer.n_candidates() {
                return Err(VrdError::Contract(format!(
                    "scorer returned {} scores for {} candidates",
                    scores.len(),
                    scorer.n_candidates()
                )));
            }
            let mut pair_entries: Vec<(f64, usize, usize, usize, usize)> = (0..scores.len())
                .filter(|&k| k != norel)
                .map(|k| (scores[k], pair_index, k, i, j))
                .collect();
            if graph_constraint {
                // keep only the best predicate for this pair
                pair_entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
                pair_entries.truncate(1);
            }
            entries.extend(pair_entries);
            pair_index += 1;
        }
    }
    entries.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    Ok(entries
        .into_iter()
        .map(|(score, _, k, i, j)| RankedPrediction {
            image_id: image_id.to_string(),
            subject_index: i,
            predicate_index: k,
            object_index: j,
            score,
        })
        .collect())
}

/// Recalled / total ground-truth counts over all images, restricted to
/// triplets accepted by `keep`.
fn recall_counts(
    rankings: &[Vec<RankedPrediction>],
    images: &[ImageForEval],
    k: usize,
    keep: &dyn Fn(&ImageForEval, (usize, usize, usize)) -> bool,
) -> (usize, usize) {
    let mut recalled = 0;
    let mut total = 0;
    for (ranking, image) in rankings.iter().zip(images.iter()) {
        let top: BTreeSet<(usize, usize, usize)> = ranking
            .iter()
            .take(k)
            .map(|p| (p.subject_index, p.predicate_index, p.object_index))
            .collect();
        for &gt in &image.gt {
            if !keep(image, gt) {
                continue;
            }
            total += 1;
            if top.contains(&gt) {
                recalled += 1;
            }
        }
    }
    (recalled, total)
}

fn ratio(recalled: usize, total: usize) -> f64 {
    if total == 0 {
        f64::NAN
    } else {
        recalled as f64 / total as f64
    }
}

/// R@k: the fraction of labeled triplets, summed over images, found in each
/// image's top-k predictions. NaN when there are no labeled triplets.
pub fn recall_at_k(
    rankings: &[Vec<RankedPrediction>],
    images: &[ImageForEval],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(VrdError::Contract("recall requires k >= 1".into()));
    }
    let (recalled, total) = recall_counts(rankings, images, k, &|_, _| true);
    Ok(ratio(recalled, total))
}

/// mR@k: per-predicate recall averaged (unweighted) over the predicates
/// with at least one labeled triplet.
pub fn mean_recall_at_k(
    rankings: &[Vec<RankedPrediction>],
    images: &[ImageForEval],
    k: usize,
    predicate_indices: &[usize],
) -> Result<f64> {
    if k == 0 {
        return Err(VrdError::Contract("recall requires k >= 1".into()));
    }
    let mut per_predicate = Vec::new();
    for &p in predicate_indices {
        let (recalled, total) = recall_counts(rankings, images, k, &|_, gt| gt.1 == p);
        if total > 0 {
            per_predicate.push(ratio(recalled, total));
        }
    }
    if per_predicate.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(per_predicate.iter().sum::<f64>() / per_predicate.len() as f64)
}

/// Restriction granularity for the seen/unseen metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeenMode {
    Pair,
    Triplet,
}

/// Which side of the split a metric covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeenSubset {
    Seen,
    Unseen,
}

/// Seen/unseen recall: plain recall with the ground-truth sums restricted to
/// triplets whose class pair (or full class triplet) membership in the seen
/// sets matches the requested subset.
pub fn seen_unseen_recall(
    rankings: &[Vec<RankedPrediction>],
    images: &[ImageForEval],
    predicate_names: &[String],
    seen: &SeenSets,
    mode: SeenMode,
    subset: SeenSubset,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(VrdError::Contract("recall requires k >= 1".into()));
    }
    let keep = |image: &ImageForEval, gt: (usize, usize, usize)| -> bool {
        let subject_class = &image.objects[gt.0].class;
        let object_class = &image.objects[gt.2].class;
        let is_seen = match mode {
            SeenMode::Pair => seen
                .pairs
                .contains(&(subject_class.clone(), object_class.clone())),
            SeenMode::Triplet => seen.triplets.contains(&(
                subject_class.clone(),
                predicate_names[gt.1].clone(),
                object_class.clone(),
            )),
        };
        match subset {
            SeenSubset::Seen => is_seen,
            SeenSubset::Unseen => !is_seen,
        }
    };
    let (recalled, total) = recall_counts(rankings, images, k, &keep);
    Ok(ratio(recalled, total))
}

/// JSON-serializable metric bundle. Undefined metrics are `None` (NaN).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub recall: BTreeMap<String, Option<f64>>,
    pub mean_recall: BTreeMap<String, Option<f64>>,
    pub seen: SeenUnseenBlock,
    pub unseen: SeenUnseenBlock,
    pub config: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct SeenUnseenBlock {
    pub pair: BTreeMap<String, Option<f64>>,
    pub triplet: BTreeMap<String, Option<f64>>,
}

fn slot(value: f64) -> Option<f64> {
    if value.is_nan() {
        None
    } else {
        Some(value)
    }
}

/// Rank every image and compute the full metric suite at each k.
pub fn evaluate(
    scorer: &mut dyn RelationScorer,
    images: &[ImageForEval],
    predicate_names: &[String],
    seen: &SeenSets,
    ks: &[usize],
    graph_constraint: bool,
) -> Result<MetricsReport> {
    seen.validate()?;
    for image in images {
        image.validate(scorer.n_candidates(), scorer.no_relation_index())?;
    }
    let norel = scorer.no_relation_index();
    let rankings: Vec<Vec<RankedPrediction>> = images
        .iter()
        .map(|img| rank_image(scorer, &img.image_id, &img.objects, graph_constraint))
        .collect::<Result<_>>()?;
    let predicate_indices: Vec<usize> =
        (0..predicate_names.len()).filter(|&i| i != norel).collect();

    let mut report = MetricsReport {
        recall: BTreeMap::new(),
        mean_recall: BTreeMap::new(),
        seen: SeenUnseenBlock::default(),
        unseen: SeenUnseenBlock::default(),
        config: BTreeMap::new(),
        warnings: Vec::new(),
    };
    for &k in ks {
        let key = k.to_string();
        let r = recall_at_k(&rankings, images, k)?;
        let mr = mean_recall_at_k(&rankings, images, k, &predicate_indices)?;
        report.recall.insert(key.clone(), slot(r));
        report.mean_recall.insert(key.clone(), slot(mr));
        for (mode, subset, bucket) in [
            (SeenMode::Pair, SeenSubset::Seen, &mut report.seen.pair),
            (SeenMode::Triplet, SeenSubset::Seen, &mut report.seen.triplet),
            (SeenMode::Pair, SeenSubset::Unseen, &mut report.unseen.pair),
            (SeenMode::Triplet, SeenSubset::Unseen, &mut report.unseen.triplet),
        ] {
            let value =
                seen_unseen_recall(&rankings, images, predicate_names, seen, mode, subset, k)?;
            if value.is_nan() {
                report.warnings.push(format!(
                    "{}-{subset:?}@{k} undefined: empty restricted ground-truth set",
                    if matches!(mode, SeenMode::Pair) { "pair" } else { "triplet" },
                ));
            }
            bucket.insert(key.clone(), slot(value));
        }
        if r.is_nan() {
            report
                .warnings
                .push(format!("recall@{k} undefined: no labeled triplets"));
        }
    }
    Ok(report)
}

/// Aligned text table over the report's k values.
pub fn render_table(report: &MetricsReport) -> String {
    fn cell(v: &Option<f64>) -> String {
        match v {
            Some(x) => format!("{:7.4}", x),
            None => format!("{:>7}", "NaN"),
        }
    }
    let mut ks: Vec<usize> = report
        .recall
        .keys()
        .filter_map(|k| k.parse().ok())
        .collect();
    ks.sort_unstable();
    let mut out = String::new();
    out.push_str(&format!(
        "{:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "k", "R@k", "mR@k", "psR", "tsR", "puR", "tuR"
    ));
    for k in ks {
        let key = k.to_string();
        out.push_str(&format!(
            "{:>6} {} {} {} {} {} {}\n",
            k,
            cell(report.recall.get(&key).unwrap_or(&None)),
            cell(report.mean_recall.get(&key).unwrap_or(&None)),
            cell(report.seen.pair.get(&key).unwrap_or(&None)),
            cell(report.seen.triplet.get(&key).unwrap_or(&None)),
            cell(report.unseen.pair.get(&key).unwrap_or(&None)),
            cell(report.unseen.triplet.get(&key).unwrap_or(&None)),
        ));
    }
    out
}
