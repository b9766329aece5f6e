//! N-way K-shot episode sampling and end-to-end training of the fusion
//! pipeline, with deterministic seeding and binary checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint as ckpt;
use crate::error::{Result, VrdError};
use crate::eval::SeenSets;
use crate::fusion::{CandidateSet, FusionGrads, FusionModel, TextBranch, FUSION_MAGIC};

/// One labeled (or implicit no-relation) training pair.
#[derive(Debug, Clone)]
pub struct RelationInstance {
    pub image_id: String,
    pub subject: crate::fusion::ObjectDescriptor,
    pub object: crate::fusion::ObjectDescriptor,
    /// Index into the candidate set (may be the no-relation index).
    pub predicate_index: usize,
}

/// Which relationships the episode targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Benchmark {
    /// The 50 most frequent relationships in the dataset.
    Way50,
    /// The 50 most frequent with the top 25 removed (ranks 26..50).
    Way25,
    /// The 20 most frequent.
    Way20,
    /// An explicit relationship list.
    Custom(Vec<String>),
}

impl Benchmark {
    /// Resolve to a concrete relation list given dataset predicate counts.
    /// Frequency ties break lexicographically ascending.
    pub fn resolve(&self, counts: &BTreeMap<String, usize>) -> Result<Vec<String>> {
        let ranked = || {
            let mut ranked: Vec<(&String, usize)> =
                counts.iter().map(|(r, c)| (r, *c)).collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            ranked
        };
        let take = |from: usize, n: usize| -> Result<Vec<String>> {
            let ranked = ranked();
            if ranked.len() < from + n {
                return Err(VrdError::Config(format!(
                    "benchmark needs {} distinct relationships, dataset has {}",
                    from + n,
                    ranked.len()
                )));
            }
            Ok(ranked[from..from + n].iter().map(|(r, _)| (*r).clone()).collect())
        };
        match self {
            Benchmark::Way50 => take(0, 50),
            Benchmark::Way25 => take(25, 25),
            Benchmark::Way20 => take(0, 20),
            Benchmark::Custom(list) => {
                if list.is_empty() {
                    return Err(VrdError::Config("custom benchmark list is empty".into()));
                }
                Ok(list.clone())
            }
        }
    }
}

/// Episode sampling parameters.
#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub benchmark: Benchmark,
    /// Shots per relationship (K).
    pub shots: usize,
    /// No-relation samples per positive (⌈ratio · N · K⌉ total).
    pub negative_ratio: f64,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(VrdError::Config("shots must be >= 1".into()));
        }
        if self.negative_ratio < 0.0 {
            return Err(VrdError::Config("negative ratio must be >= 0".into()));
        }
        Ok(())
    }
}

/// Labeled positives plus per-image unlabeled pairs to draw negatives from.
#[derive(Debug, Clone, Default)]
pub struct InstancePool {
    pub positives: Vec<RelationInstance>,
    pub unlabeled: BTreeMap<String, Vec<RelationInstance>>,
}

/// A sampled support set with the seen pair/triplet sets it induces.
#[derive(Debug, Clone)]
pub struct SupportSet {
    pub instances: Vec<RelationInstance>,
    pub seen: SeenSets,
}

/// Deterministic sample of `k` distinct indices from `0..len`.
fn sample_indices(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..len).collect();
    for i in 0..k.min(len) {
        let j = rng.gen_range(i..len);
        indices.swap(i, j);
    }
    indices.truncate(k.min(len));
    indices
}

/// Exactly K positives per target relationship (without replacement, seeded)
/// plus ⌈negative_ratio · N · K⌉ no-relation instances drawn from unlabeled
/// object pairs in the same images. A relationship with fewer than K
/// instances is an explicit error naming it.
pub fn sample_support(
    pool: &InstancePool,
    candidates: &CandidateSet,
    config: &EpisodeConfig,
) -> Result<SupportSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let norel = candidates.no_relation_index();

    let mut by_relation: BTreeMap<usize, Vec<&RelationInstance>> = BTreeMap::new();
    for instance in &pool.positives {
        if instance.predicate_index == norel {
            return Err(VrdError::Contract(
                "positive pool contains a no-relation instance".into(),
            ));
        }
        by_relation
            .entry(instance.predicate_index)
            .or_default()
            .push(instance);
    }

    let n_way = candidates.relations().len();
    let mut instances: Vec<RelationInstance> = Vec::new();
    for (offset, relation) in candidates.relations().iter().enumerate() {
        let index = offset + 1; // candidate indices start after no-relation
        let available = by_relation.get(&index).map(Vec::len).unwrap_or(0);
        if available < config.shots {
            return Err(VrdError::InsufficientInstances {
                relation: relation.clone(),
                available,
                required: config.shots,
            });
        }
        let group = &by_relation[&index];
        for i in sample_indices(&mut rng, group.len(), config.shots) {
            instances.push(group[i].clone());
        }
    }

    // negatives come only from the images the positives were drawn from
    let support_images: BTreeSet<&String> = instances.iter().map(|i| &i.image_id).collect();
    let mut negative_pool: Vec<&RelationInstance> = Vec::new();
    for image in &support_images {
        if let Some(list) = pool.unlabeled.get(*image) {
            negative_pool.extend(list.iter());
        }
    }
    let want = (config.negative_ratio * n_way as f64 * config.shots as f64).ceil() as usize;
    for i in sample_indices(&mut rng, negative_pool.len(), want) {
        instances.push(negative_pool[i].clone());
    }

    let mut seen = SeenSets::default();
    for instance in &instances {
        seen.pairs.insert((
            instance.subject.class.clone(),
            instance.object.class.clone(),
        ));
        if instance.predicate_index != norel {
            seen.triplets.insert((
                instance.subject.class.clone(),
                candidates.name(instance.predicate_index).to_string(),
                instance.object.class.clone(),
            ));
        }
    }
    Ok(SupportSet { instances, seen })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive per-parameter steps with bias-corrected moments.
    Adam,
}

/// Training loop parameters. The knowledge switches select the Table-style
/// ablations: `use_textual = false` swaps the contextual predicate vectors
/// for static word-vector means, `use_vrk = false` drops the knowledge prior
/// and fuses the metric scores alone through the reduced head.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
    pub use_textual: bool,
    pub use_vrk: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            seed: 0,
            use_textual: true,
            use_vrk: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(VrdError::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(VrdError::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// A trained model together with the seen sets of its support episode.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: FusionModel,
    pub seen: SeenSets,
}

/// Training result: the model, the per-step loss curve, and the final
/// accuracy over the support set.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: FusionModel,
    /// (step, mean batch loss) for every optimizer step, in order.
    pub loss_curve: Vec<(usize, f64)>,
    pub support_accuracy: f64,
}

struct AdamState {
    m: FusionGrads,
    v: FusionGrads,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_mat(p: &mut DMatrix<f64>, g: &DMatrix<f64>, m: &mut DMatrix<f64>, v: &mut DMatrix<f64>, lr: f64, t: usize) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            let grad = g[(i, j)];
            m[(i, j)] = ADAM_BETA1 * m[(i, j)] + (1.0 - ADAM_BETA1) * grad;
            v[(i, j)] = ADAM_BETA2 * v[(i, j)] + (1.0 - ADAM_BETA2) * grad * grad;
            p[(i, j)] -= lr * (m[(i, j)] / c1) / ((v[(i, j)] / c2).sqrt() + ADAM_EPS);
        }
    }
}

fn adam_vec(p: &mut DVector<f64>, g: &DVector<f64>, m: &mut DVector<f64>, v: &mut DVector<f64>, lr: f64, t: usize) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..p.len() {
        let grad = g[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad * grad;
        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
    }
}

fn apply_step(
    model: &mut FusionModel,
    grads: &FusionGrads,
    config: &TrainConfig,
    adam: &mut Option<AdamState>,
) {
    match config.optimizer {
        OptimizerKind::Sgd => {
            let lr = config.learning_rate;
            model.pair.w -= lr * &grads.pair_w;
            model.pair.b -= lr * &grads.pair_b;
            model.proj.w -= lr * &grads.proj_w;
            model.proj.b -= lr * &grads.proj_b;
            model.head.w -= lr * &grads.head_w;
            model.head.b -= lr * &grads.head_b;
            if let (TextBranch::Contextual { encoder, .. }, Some(ctx)) =
                (&mut model.text, &grads.ctx)
            {
                encoder.embed -= lr * &ctx.embed;
                encoder.mixer -= lr * &ctx.mixer;
                encoder.gains -= lr * &ctx.gains;
            }
        }
        OptimizerKind::Adam => {
            let state = adam.as_mut().expect("adam state initialized");
            state.t += 1;
            let (lr, t) = (config.learning_rate, state.t);
            adam_mat(&mut model.pair.w, &grads.pair_w, &mut state.m.pair_w, &mut state.v.pair_w, lr, t);
            adam_vec(&mut model.pair.b, &grads.pair_b, &mut state.m.pair_b, &mut state.v.pair_b, lr, t);
            adam_mat(&mut model.proj.w, &grads.proj_w, &mut state.m.proj_w, &mut state.v.proj_w, lr, t);
            adam_vec(&mut model.proj.b, &grads.proj_b, &mut state.m.proj_b, &mut state.v.proj_b, lr, t);
            adam_mat(&mut model.head.w, &grads.head_w, &mut state.m.head_w, &mut state.v.head_w, lr, t);
            adam_vec(&mut model.head.b, &grads.head_b, &mut state.m.head_b, &mut state.v.head_b, lr, t);
            if let (TextBranch::Contextual { encoder, .. }, Some(g), Some(m), Some(v)) = (
                &mut model.text,
                &grads.ctx,
                &mut state.m.ctx,
                &mut state.v.ctx,
            ) {
                adam_mat(&mut encoder.embed, &g.embed, &mut m.embed, &mut v.embed, lr, t);
                adam_mat(&mut encoder.mixer, &g.mixer, &mut m.mixer, &mut v.mixer, lr, t);
                adam_vec(&mut encoder.gains, &g.gains, &mut m.gains, &mut v.gains, lr, t);
            }
        }
    }
}

/// Train every trainable tensor on the support set with the cross-entropy
/// loss. Batches are shuffled per epoch with the seeded generator and
/// reduced in a fixed order; a non-finite loss aborts with diagnostics
/// instead of corrupting the model.
pub fn train(
    mut model: FusionModel,
    support: &[RelationInstance],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if support.is_empty() {
        return Err(VrdError::Config("support set is empty".into()));
    }
    if config.use_textual != model.text.is_contextual() {
        return Err(VrdError::Config(
            "use_textual does not match the model's text branch".into(),
        ));
    }
    if config.use_vrk != model.vrk.is_some() {
        return Err(VrdError::Config(
            "use_vrk does not match the model's knowledge prior".into(),
        ));
    }

    let mut adam = match config.optimizer {
        OptimizerKind::Adam => Some(AdamState {
            m: FusionGrads::zeros_like(&model),
            v: FusionGrads::zeros_like(&model),
            t: 0,
        }),
        OptimizerKind::Sgd => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..support.len()).collect();
    let mut loss_curve = Vec::new();
    let mut step = 0usize;
    for _epoch in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(config.batch_size) {
            let mut total = FusionGrads::zeros_like(&model);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let instance = &support[idx];
                let cache = model.forward(&instance.subject, &instance.object)?;
                let (loss, _) = crate::fusion::loss_clamped(&cache.probs, instance.predicate_index)?;
                if !loss.is_finite() {
                    return Err(VrdError::Diverged {
                        context: format!(
                            "step {step}, lr {}, batch {:?}, |pair.w| {:.3e}, |head.w| {:.3e}",
                            config.learning_rate,
                            batch,
                            model.pair.w.norm(),
                            model.head.w.norm()
                        ),
                    });
                }
                batch_loss += loss;
                let grads = model.backward(&cache, instance.predicate_index)?;
                total.add_assign(&grads);
            }
            total.scale(1.0 / batch.len() as f64);
            apply_step(&mut model, &total, config, &mut adam);
            loss_curve.push((step, batch_loss / batch.len() as f64));
            step += 1;
        }
    }

    let mut hits = 0usize;
    for instance in support {
        let probs = model.scores(&instance.subject, &instance.object)?;
        if crate::fusion::predict(&probs) == instance.predicate_index {
            hits += 1;
        }
    }
    Ok(TrainOutcome {
        support_accuracy: hits as f64 / support.len() as f64,
        model,
        loss_curve,
    })
}

/// Loss curve in the CSV interchange form `step,loss`.
pub fn loss_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in curve {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}

/// Write a `KFVFUS1` checkpoint: the model body plus the support episode's
/// seen sets.
pub fn save_checkpoint(trained: &TrainedModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    ckpt::write_magic(&mut w, FUSION_MAGIC)?;
    trained.model.write_to(&mut w)?;
    ckpt::write_u32(&mut w, trained.seen.pairs.len() as u32)?;
    for (s, o) in &trained.seen.pairs {
        ckpt::write_string(&mut w, s)?;
        ckpt::write_string(&mut w, o)?;
    }
    ckpt::write_u32(&mut w, trained.seen.triplets.len() as u32)?;
    for (s, p, o) in &trained.seen.triplets {
        ckpt::write_string(&mut w, s)?;
        ckpt::write_string(&mut w, p)?;
        ckpt::write_string(&mut w, o)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    ckpt::expect_magic(&mut r, FUSION_MAGIC)?;
    let model = FusionModel::read_from(&mut r)?;
    let mut seen = SeenSets::default();
    let n_pairs = ckpt::read_u32(&mut r)? as usize;
    for _ in 0..n_pairs {
        let s = ckpt::read_string(&mut r)?;
        let o = ckpt::read_string(&mut r)?;
        seen.pairs.insert((s, o));
    }
    let n_triplets = ckpt::read_u32(&mut r)? as usize;
    for _ in 0..n_triplets {
        let s = ckpt::read_string(&mut r)?;
        let p = ckpt::read_string(&mut r)?;
        let o = ckpt::read_string(&mut r)?;
        seen.triplets.insert((s, p, o));
    }
    ckpt::expect_eof(&mut r)?;
    seen.validate()?;
    Ok(TrainedModel { model, seen })
}
