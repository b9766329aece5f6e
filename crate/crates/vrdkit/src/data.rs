//! Dataset records, the binary feature store, and the synthetic
//! compositional benchmark generator used for desk-scale experiments.
//!
//! Real data uses the same JSONL schema, so externally extracted detector
//! features can be dropped in without code changes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::Caption;
use crate::error::{Result, VrdError};
use crate::eval::ImageForEval;
use crate::fusion::{CandidateSet, ObjectDescriptor};
use crate::text::standard_normal;
use crate::trainer::{InstancePool, RelationInstance};

/// One object inside a dataset record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class: String,
    pub feature_ref: String,
}

/// A labeled relation between two object indices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RelationRecord {
    pub subject: usize,
    pub predicate: String,
    pub object: usize,
}

/// One image: objects plus labeled relations. Object pairs without a label
/// are implicit no-relation candidates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub image_id: String,
    pub objects: Vec<ObjectRecord>,
    pub relations: Vec<RelationRecord>,
}

/// Feature vectors addressed by reference string; persisted as a sidecar
/// binary of 64-bit little-endian floats plus a text index mapping
/// `ref<TAB>byte_offset<TAB>dim`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    features: BTreeMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn new() -> FeatureStore {
        FeatureStore::default()
    }

    pub fn insert(&mut self, reference: &str, values: Vec<f64>) {
        self.features.insert(reference.to_string(), values);
    }

    pub fn get(&self, reference: &str) -> Option<&[f64]> {
        self.features.get(reference).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn save(&self, bin_path: &Path, index_path: &Path) -> Result<()> {
        let mut bin = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
        let mut index = String::new();
        let mut offset = 0usize;
        for (reference, values) in &self.features {
            index.push_str(&format!("{reference}\t{offset}\t{}\n", values.len()));
            for v in values {
                bin.write_all(&v.to_le_bytes())?;
            }
            offset += values.len() * 8;
        }
        bin.flush()?;
        std::fs::write(index_path, index)?;
        Ok(())
    }

    pub fn load(bin_path: &Path, index_path: &Path) -> Result<FeatureStore> {
        let bytes = std::fs::read(bin_path)?;
        let index = std::fs::read_to_string(index_path)?;
        let mut features = BTreeMap::new();
        for (i, line) in index.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(VrdError::Parse {
                    line: i + 1,
                    message: "feature index line is not 'ref<TAB>offset<TAB>dim'".into(),
                });
            }
            let offset: usize = fields[1].parse().map_err(|_| VrdError::Parse {
                line: i + 1,
                message: format!("bad offset {:?}", fields[1]),
            })?;
            let dim: usize = fields[2].parse().map_err(|_| VrdError::Parse {
                line: i + 1,
                message: format!("bad dimension {:?}", fields[2]),
            })?;
            let end = offset + dim * 8;
            if end > bytes.len() {
                return Err(VrdError::Parse {
                    line: i + 1,
                    message: format!(
                        "feature {:?} runs past the end of the binary file",
                        fields[0]
                    ),
                });
            }
            let values: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            features.insert(fields[0].to_string(), values);
        }
        Ok(FeatureStore { features })
    }
}

/// Parse and validate a JSONL dataset against a feature store. Schema
/// violations name the offending line and record.
pub fn parse_dataset(text: &str, store: &FeatureStore) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| VrdError::Parse {
            line: i + 1,
            message: format!("malformed record: {e}"),
        })?;
        for object in &record.objects {
            let feature = store.get(&object.feature_ref).ok_or_else(|| VrdError::Parse {
                line: i + 1,
                message: format!(
                    "record {}: missing feature reference {:?}",
                    record.image_id, object.feature_ref
                ),
            })?;
            match dim {
                None => dim = Some(feature.len()),
                Some(d) if d != feature.len() => {
                    return Err(VrdError::Parse {
                        line: i + 1,
                        message: format!(
                            "record {}: feature {:?} has dimension {}, expected {}",
                            record.image_id,
                            object.feature_ref,
                            feature.len(),
                            d
                        ),
                    })
                }
                _ => {}
            }
            let [x1, y1, x2, y2] = object.bbox;
            if !(x1 < x2 && y1 < y2) || object.bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(VrdError::Parse {
                    line: i + 1,
                    message: format!("record {}: invalid box {:?}", record.image_id, object.bbox),
                });
            }
        }
        for relation in &record.relations {
            if relation.subject >= record.objects.len()
                || relation.object >= record.objects.len()
                || relation.subject == relation.object
            {
                return Err(VrdError::Parse {
                    line: i + 1,
                    message: format!(
                        "record {}: relation ({}, {}, {}) has out-of-range object indices",
                        record.image_id, relation.subject, relation.predicate, relation.object
                    ),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Load a JSONL dataset file with its feature store.
pub fn load_dataset(path: &Path, store: &FeatureStore) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| VrdError::Config(format!("cannot read dataset {}: {e}", path.display())))?;
    parse_dataset(&text, store)
}

/// Serialize records as JSONL, one record per line.
pub fn dataset_to_jsonl(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

/// Predicate frequency over a record set (for benchmark resolution).
pub fn predicate_counts(records: &[DatasetRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for record in records {
        for relation in &record.relations {
            *counts.entry(relation.predicate.clone()).or_insert(0) += 1;
        }
    }
    counts
}

fn descriptor(object: &ObjectRecord, store: &FeatureStore) -> Result<ObjectDescriptor> {
    let feature = store
        .get(&object.feature_ref)
        .ok_or_else(|| VrdError::Config(format!("missing feature {:?}", object.feature_ref)))?;
    ObjectDescriptor::new(object.bbox, &object.class, DVector::from_vec(feature.to_vec()))
}

/// Training pool: positives for in-benchmark predicates, and the unlabeled
/// ordered pairs of each image as no-relation candidates. Pairs labeled with
/// an out-of-benchmark predicate are neither.
pub fn build_instance_pool(
    records: &[DatasetRecord],
    store: &FeatureStore,
    candidates: &CandidateSet,
) -> Result<InstancePool> {
    let mut pool = InstancePool::default();
    for record in records {
        let objects: Vec<ObjectDescriptor> = record
            .objects
            .iter()
            .map(|o| descriptor(o, store))
            .collect::<Result<_>>()?;
        let mut labeled: BTreeSet<(usize, usize)> = BTreeSet::new();
        for relation in &record.relations {
            labeled.insert((relation.subject, relation.object));
            if let Some(index) = candidates.position(&relation.predicate) {
                pool.positives.push(RelationInstance {
                    image_id: record.image_id.clone(),
                    subject: objects[relation.subject].clone(),
                    object: objects[relation.object].clone(),
                    predicate_index: index,
                });
            }
        }
        let unlabeled = pool.unlabeled.entry(record.image_id.clone()).or_default();
        for i in 0..objects.len() {
            for j in 0..objects.len() {
                if i != j && !labeled.contains(&(i, j)) {
                    unlabeled.push(RelationInstance {
                        image_id: record.image_id.clone(),
                        subject: objects[i].clone(),
                        object: objects[j].clone(),
                        predicate_index: candidates.no_relation_index(),
                    });
                }
            }
        }
    }
    Ok(pool)
}

/// Evaluation view of a record set: objects plus in-benchmark ground truth.
pub fn build_eval_images(
    records: &[DatasetRecord],
    store: &FeatureStore,
    candidates: &CandidateSet,
) -> Result<Vec<ImageForEval>> {
    let mut images = Vec::new();
    for record in records {
        let objects: Vec<ObjectDescriptor> = record
            .objects
            .iter()
            .map(|o| descriptor(o, store))
            .collect::<Result<_>>()?;
        let mut gt = BTreeSet::new();
        for relation in &record.relations {
            if let Some(index) = candidates.position(&relation.predicate) {
                gt.insert((relation.subject, index, relation.object));
            }
        }
        images.push(ImageForEval {
            image_id: record.image_id.clone(),
            objects,
            gt,
        });
    }
    Ok(images)
}

/// Class names available to the synthetic generator (all in the bundled
/// lexicon as nouns).
pub const SYNTH_CLASSES: [&str; 40] = [
    "dog", "cat", "horse", "sheep", "cow", "bird", "rabbit", "chair", "table", "sofa", "bed",
    "car", "truck", "boat", "plate", "cup", "bottle", "bowl", "apple", "banana", "bread", "cake",
    "tree", "bush", "flower", "rock", "fence", "house", "door", "window", "man", "woman", "boy",
    "girl", "child", "bag", "box", "book", "hat", "shirt",
];

/// Relation names available to the generator: participial verbs and
/// prepositions, so "the S <relation> the O" captions parse back to exactly
/// the relation name.
pub const SYNTH_RELATIONS: [&str; 28] = [
    "holding", "riding", "eating", "wearing", "carrying", "pulling", "pushing", "touching",
    "watching", "chasing", "hugging", "kicking", "lifting", "throwing", "catching", "licking",
    "feeding", "climbing", "on", "under", "near", "above", "behind", "beside", "in", "against",
    "around", "between",
];

/// Synthetic benchmark parameters. Classes are partitioned into groups; the
/// rule table fixes, per ordered group pair, which relation holds (or that
/// none does), so relations are determined compositionally and held-out
/// class pairs remain predictable from group membership.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_relations: usize,
    pub feature_dim: usize,
    /// Per-component Gaussian noise around the class centroid.
    pub noise: f64,
    pub n_groups: usize,
    /// n_groups × n_groups; entry = relation index or None.
    pub rules: Vec<Vec<Option<usize>>>,
    /// Fraction of unordered class pairs that never co-occur in training.
    pub holdout_fraction: f64,
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub objects_per_image: usize,
}

impl SyntheticSpec {
    /// A balanced spec: classes round-robin into groups, off-diagonal group
    /// pairs cycle through the relations, same-group pairs are unrelated.
    pub fn balanced(
        n_classes: usize,
        n_relations: usize,
        feature_dim: usize,
        noise: f64,
        holdout_fraction: f64,
        seed: u64,
    ) -> SyntheticSpec {
        let n_groups = (1..=n_classes)
            .find(|g| g * (g - 1) >= n_relations)
            .unwrap_or(n_classes);
        let mut rules = vec![vec![None; n_groups]; n_groups];
        let mut next = 0usize;
        for i in 0..n_groups {
            for j in 0..n_groups {
                if i != j {
                    rules[i][j] = Some(next % n_relations);
                    next += 1;
                }
            }
        }
        SyntheticSpec {
            n_classes,
            n_relations,
            feature_dim,
            noise,
            n_groups,
            rules,
            holdout_fraction,
            seed,
            train_images: 60,
            test_images: 40,
            objects_per_image: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > SYNTH_CLASSES.len() {
            return Err(VrdError::Config(format!(
                "n_classes must be in 2..={}",
                SYNTH_CLASSES.len()
            )));
        }
        if self.n_relations == 0 || self.n_relations > SYNTH_RELATIONS.len() {
            return Err(VrdError::Config(format!(
                "n_relations must be in 1..={}",
                SYNTH_RELATIONS.len()
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(VrdError::Config("holdout fraction must be in [0, 1)".into()));
        }
        if self.noise < 0.0 {
            return Err(VrdError::Config("noise must be >= 0".into()));
        }
        if self.objects_per_image < 2 || self.objects_per_image > self.n_classes {
            return Err(VrdError::Config(
                "objects_per_image must be in 2..=n_classes".into(),
            ));
        }
        if self.rules.len() != self.n_groups
            || self.rules.iter().any(|row| row.len() != self.n_groups)
        {
            return Err(VrdError::Config(format!(
                "rule table must cover all {g}x{g} group pairs",
                g = self.n_groups
            )));
        }
        let mut used = BTreeSet::new();
        for row in &self.rules {
            for entry in row.iter().flatten() {
                if *entry >= self.n_relations {
                    return Err(VrdError::Config(format!(
                        "rule table references relation {entry}, but n_relations = {}",
                        self.n_relations
                    )));
                }
                used.insert(*entry);
            }
        }
        if used.len() < self.n_relations {
            return Err(VrdError::Config(format!(
                "rule table uses {} of {} relations; every relation needs a rule",
                used.len(),
                self.n_relations
            )));
        }
        Ok(())
    }

    fn group_of(&self, class_index: usize) -> usize {
        class_index % self.n_groups
    }

    /// The relation the rule table assigns to an ordered class pair.
    pub fn rule_for(&self, subject_class: usize, object_class: usize) -> Option<usize> {
        self.rules[self.group_of(subject_class)][self.group_of(object_class)]
    }
}

/// Generator output: splits, features, the caption corpus, and the gold
/// seen/unseen partition (ordered class-name pairs).
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub train: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
    pub features: FeatureStore,
    pub captions: Vec<Caption>,
    pub class_names: Vec<String>,
    pub relation_names: Vec<String>,
    /// Ordered pairs that co-occur in at least one training image.
    pub seen_pairs: BTreeSet<(String, String)>,
    /// Ordered pairs whose unordered pair was held out of training.
    pub unseen_pairs: BTreeSet<(String, String)>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let class_names: Vec<String> = SYNTH_CLASSES[..spec.n_classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let relation_names: Vec<String> = SYNTH_RELATIONS[..spec.n_relations]
        .iter()
        .map(|s| s.to_string())
        .collect();

    // per-class feature centroids
    let centroids: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..spec.feature_dim).map(|_| standard_normal(&mut rng)).collect())
        .collect();

    // held-out unordered class pairs
    let mut unordered: Vec<(usize, usize)> = Vec::new();
    for i in 0..spec.n_classes {
        for j in (i + 1)..spec.n_classes {
            unordered.push((i, j));
        }
    }
    for i in (1..unordered.len()).rev() {
        let j = rng.gen_range(0..=i);
        unordered.swap(i, j);
    }
    let n_holdout = (spec.holdout_fraction * unordered.len() as f64).floor() as usize;
    let holdout: BTreeSet<(usize, usize)> = unordered[..n_holdout].iter().copied().collect();
    let held = |a: usize, b: usize| holdout.contains(&(a.min(b), a.max(b)));

    let mut features = FeatureStore::new();
    let mut object_counter = 0usize;

    let make_image = |image_id: String,
                          classes: &[usize],
                          rng: &mut ChaCha8Rng,
                          features: &mut FeatureStore,
                          object_counter: &mut usize|
     -> DatasetRecord {
        let mut objects = Vec::new();
        for &class in classes {
            let reference = format!("f{:06}", *object_counter);
            *object_counter += 1;
            let values: Vec<f64> = centroids[class]
                .iter()
                .map(|c| c + spec.noise * standard_normal(rng))
                .collect();
            features.insert(&reference, values);
            let x1 = rng.gen_range(0.0..0.5);
            let y1 = rng.gen_range(0.0..0.5);
            let bbox = [
                x1,
                y1,
                x1 + rng.gen_range(0.1..0.5),
                y1 + rng.gen_range(0.1..0.5),
            ];
            objects.push(ObjectRecord {
                bbox,
                class: class_names[class].clone(),
                feature_ref: reference,
            });
        }
        let mut relations = Vec::new();
        for i in 0..classes.len() {
            for j in 0..classes.len() {
                if i == j {
                    continue;
                }
                if let Some(r) = spec.rule_for(classes[i], classes[j]) {
                    relations.push(RelationRecord {
                        subject: i,
                        predicate: relation_names[r].clone(),
                        object: j,
                    });
                }
            }
        }
        DatasetRecord {
            image_id,
            objects,
            relations,
        }
    };

    // grow a distinct-class image around anchor classes; every added class
    // must keep all unordered pairs inside `allowed`. Randomized greedy with
    // restarts, so a feasible completion is found whenever one exists.
    let n_classes = spec.n_classes;
    let sample_classes = |rng: &mut ChaCha8Rng,
                          anchors: &[usize],
                          count: usize,
                          allowed: &dyn Fn(usize, usize) -> bool|
     -> Option<Vec<usize>> {
        'attempt: for _ in 0..200 {
            let mut classes: Vec<usize> = anchors.to_vec();
            while classes.len() < count {
                let viable: Vec<usize> = (0..n_classes)
                    .filter(|c| {
                        !classes.contains(c) && classes.iter().all(|&e| allowed(e, *c))
                    })
                    .collect();
                if viable.is_empty() {
                    continue 'attempt;
                }
                classes.push(viable[rng.gen_range(0..viable.len())]);
            }
            return Some(classes);
        }
        None
    };

    // training split: round-robin over relations so every relation has
    // enough instances for episode sampling; held-out pairs never co-occur
    let mut train = Vec::new();
    let mut rule_cells: Vec<(usize, usize, usize)> = Vec::new();
    for gi in 0..spec.n_groups {
        for gj in 0..spec.n_groups {
            if let Some(r) = spec.rules[gi][gj] {
                rule_cells.push((r, gi, gj));
            }
        }
    }
    rule_cells.sort_unstable();
    let members = |g: usize| -> Vec<usize> {
        (0..spec.n_classes).filter(|c| spec.group_of(*c) == g).collect()
    };
    for t in 0..spec.train_images {
        let target = t % spec.n_relations;
        let cells: Vec<&(usize, usize, usize)> =
            rule_cells.iter().filter(|(r, _, _)| *r == target).collect();
        // retry anchor pairs and completions jointly; an ill-connected
        // anchor is abandoned rather than fatal
        let mut classes = None;
        for _ in 0..500 {
            let (_, gi, gj) = *cells[rng.gen_range(0..cells.len())];
            let ms = members(gi);
            let mo = members(gj);
            let a = ms[rng.gen_range(0..ms.len())];
            let b = mo[rng.gen_range(0..mo.len())];
            if a == b || held(a, b) {
                continue;
            }
            if let Some(found) =
                sample_classes(&mut rng, &[a, b], spec.objects_per_image, &|x, y| !held(x, y))
            {
                classes = Some(found);
                break;
            }
        }
        let classes = classes.ok_or_else(|| {
            VrdError::Config(format!(
                "holdout fraction leaves no trainable image for relation {}",
                relation_names[target]
            ))
        })?;
        train.push(make_image(
            format!("train{t:04}"),
            &classes,
            &mut rng,
            &mut features,
            &mut object_counter,
        ));
    }

    // gold seen set: ordered pairs co-occurring in some training image
    let mut seen_pairs = BTreeSet::new();
    for record in &train {
        for a in &record.objects {
            for b in &record.objects {
                if a.feature_ref != b.feature_ref {
                    seen_pairs.insert((a.class.clone(), b.class.clone()));
                }
            }
        }
    }

    // test split: every pair in a test image is either seen in training or
    // designated held-out, so each ground-truth pair is cleanly classified;
    // even-indexed images are anchored on a held-out pair when possible
    let seen_idx = |a: usize, b: usize| -> bool {
        seen_pairs.contains(&(class_names[a].clone(), class_names[b].clone()))
    };
    let classified = |a: usize, b: usize| held(a, b) || seen_idx(a, b) || seen_idx(b, a);
    let holdout_list: Vec<(usize, usize)> = holdout.iter().copied().collect();
    let mut test = Vec::new();
    for t in 0..spec.test_images {
        let mut classes = None;
        if !holdout_list.is_empty() && t % 2 == 0 {
            // anchor on a held-out pair so unseen ground truth exists
            for attempt in 0..holdout_list.len() {
                let (a, b) = holdout_list[(t / 2 + attempt) % holdout_list.len()];
                let anchors = if rng.gen_range(0..2) == 0 { [a, b] } else { [b, a] };
                if let Some(found) =
                    sample_classes(&mut rng, &anchors, spec.objects_per_image, &classified)
                {
                    classes = Some(found);
                    break;
                }
            }
        }
        if classes.is_none() {
            classes = sample_classes(&mut rng, &[], spec.objects_per_image, &classified);
        }
        let classes = classes.ok_or_else(|| {
            VrdError::Config("unable to assemble test images under the pair partition".into())
        })?;
        test.push(make_image(
            format!("test{t:04}"),
            &classes,
            &mut rng,
            &mut features,
            &mut object_counter,
        ));
    }

    // caption corpus: the whole rule table, including held-out pairs —
    // captions describe the broad world the knowledge graph is built from
    let mut captions = Vec::new();
    let mut caption_counter = 0usize;
    for s in 0..spec.n_classes {
        for o in 0..spec.n_classes {
            if s == o {
                continue;
            }
            if let Some(r) = spec.rule_for(s, o) {
                for variant in 0..2 {
                    let (d1, d2) = if variant == 0 { ("the", "the") } else { ("a", "a") };
                    captions.push(Caption {
                        id: format!("cap{caption_counter:05}"),
                        text: format!(
                            "{d1} {} {} {d2} {}",
                            class_names[s], relation_names[r], class_names[o]
                        ),
                    });
                    caption_counter += 1;
                }
            }
        }
    }

    let mut unseen_pairs = BTreeSet::new();
    for (a, b) in &holdout {
        unseen_pairs.insert((class_names[*a].clone(), class_names[*b].clone()));
        unseen_pairs.insert((class_names[*b].clone(), class_names[*a].clone()));
    }

    Ok(SyntheticBundle {
        train,
        test,
        features,
        captions,
        class_names,
        relation_names,
        seen_pairs,
        unseen_pairs,
    })
}
