//! The visual relation knowledge encoder.
//!
//! Knowledge-graph edges are turned into masked queries ("subject [MASK]
//! object"); the encoder pools the subject and object token embeddings,
//! passes them through a two-layer feed-forward network to produce the mask
//! feature `m`, and scores each candidate predicate by the dot product of
//! `m` with the mean of the predicate tokens' output embeddings. Training
//! reconstructs each edge's relation from the graph's relation set with a
//! softmax cross-entropy loss; all gradients are analytic.
//!
//! The no-relation predicate is scored through a dedicated reserved output
//! row so the prior score vector covers the full candidate set.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::caption::tokenize;
use crate::checkpoint as ckpt;
use crate::error::{Result, VrdError};
use crate::kg::{KGEdge, VisualRelationKG};
use crate::text::standard_normal;
use crate::NO_RELATION;

/// Checkpoint magic for serialized relation encoders.
pub const VRK_MAGIC: &[u8] = b"KFVVRK1";

/// Internal vocabulary key for the reserved no-relation row. Bracketed so it
/// can never collide with a tokenizer output.
const NOREL_KEY: &str = "[NOREL]";
const UNK_KEY: &str = "[UNK]";

/// A masked relation query "c_i [MASK] c_j".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedQuery {
    pub subject_tokens: Vec<String>,
    pub object_tokens: Vec<String>,
}

impl MaskedQuery {
    /// Tokenize a class pair into a query; underscores split like spaces.
    pub fn from_classes(subject_class: &str, object_class: &str) -> Result<MaskedQuery> {
        let subject_tokens = tokenize(&subject_class.replace('_', " "));
        let object_tokens = tokenize(&object_class.replace('_', " "));
        if subject_tokens.is_empty() || object_tokens.is_empty() {
            return Err(VrdError::Contract(format!(
                "masked query needs non-empty token lists (classes {subject_class:?}, {object_class:?})"
            )));
        }
        Ok(MaskedQuery {
            subject_tokens,
            object_tokens,
        })
    }
}

/// Width configuration for the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    /// Input token embedding width.
    pub embed: usize,
    /// Hidden width of the mask-feature network.
    pub hidden: usize,
    /// Mask feature / output embedding width D_k.
    pub mask: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            embed: 64,
            hidden: 64,
            mask: 64,
        }
    }
}

/// Edge sampling distribution during reconstruction training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SamplingMode {
    UniformEdges,
    CountWeighted,
}

/// Reconstruction training parameters.
#[derive(Debug, Clone)]
pub struct ReconstructionConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub sampling: SamplingMode,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            epochs: 300,
            learning_rate: 0.05,
            seed: 0,
            sampling: SamplingMode::CountWeighted,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(VrdError::Config("reconstruction epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(VrdError::Config("reconstruction learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// The trainable masked-relation encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationEncoder {
    pub vocab: BTreeMap<String, usize>,
    /// V × embed input token embeddings.
    pub input_embed: DMatrix<f64>,
    /// hidden × 2·embed first layer of the mask-feature network.
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// mask × hidden second layer.
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    /// V × mask output relation-token embeddings (Embed_KE).
    pub out_embed: DMatrix<f64>,
}

/// Gradients mirroring [`RelationEncoder`] parameters.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub input_embed: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub out_embed: DMatrix<f64>,
}

/// Convert an edge to its natural-language token list: subject tokens,
/// relation tokens (underscores split), object tokens.
pub fn edge_to_sentence(edge: &KGEdge) -> Vec<String> {
    let mut tokens = tokenize(&edge.subject.replace('_', " "));
    tokens.extend(tokenize(&edge.relation.replace('_', " ")));
    tokens.extend(tokenize(&edge.object.replace('_', " ")));
    tokens
}

impl RelationEncoder {
    /// Build an encoder over a graph's vocabulary with seeded parameters.
    pub fn init(graph: &VisualRelationKG, dims: EncoderDims, seed: u64) -> Result<RelationEncoder> {
        if graph.edge_count() == 0 {
            return Err(VrdError::Config(
                "cannot initialize a relation encoder from an empty graph".into(),
            ));
        }
        let mut vocab: BTreeMap<String, usize> = BTreeMap::new();
        let add = |token: &str, vocab: &mut BTreeMap<String, usize>| {
            let next = vocab.len();
            vocab.entry(token.to_string()).or_insert(next);
        };
        add(UNK_KEY, &mut vocab);
        add(NOREL_KEY, &mut vocab);
        for edge in graph.edges() {
            for token in edge_to_sentence(&edge) {
                add(&token, &mut vocab);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab.len();
        let e_scale = 1.0 / (dims.embed as f64).sqrt();
        let h_scale = 1.0 / (2.0 * dims.embed as f64).sqrt();
        let m_scale = 1.0 / (dims.hidden as f64).sqrt();
        let k_scale = 1.0 / (dims.mask as f64).sqrt();
        // tensor fill order is fixed, so a seed fully determines the model
        let input_embed =
            DMatrix::from_fn(v, dims.embed, |_, _| standard_normal(&mut rng) * e_scale);
        let w1 = DMatrix::from_fn(dims.hidden, 2 * dims.embed, |_, _| {
            standard_normal(&mut rng) * h_scale
        });
        let b1 = DVector::zeros(dims.hidden);
        let w2 = DMatrix::from_fn(dims.mask, dims.hidden, |_, _| {
            standard_normal(&mut rng) * m_scale
        });
        let b2 = DVector::zeros(dims.mask);
        let out_embed =
            DMatrix::from_fn(v, dims.mask, |_, _| standard_normal(&mut rng) * k_scale);
        Ok(RelationEncoder {
            vocab,
            input_embed,
            w1,
            b1,
            w2,
            b2,
            out_embed,
        })
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            embed: self.input_embed.ncols(),
            hidden: self.w1.nrows(),
            mask: self.w2.nrows(),
        }
    }

    fn row(&self, token: &str) -> usize {
        self.vocab
            .get(token)
            .or_else(|| self.vocab.get(UNK_KEY))
            .copied()
            .expect("encoder vocabularies always contain the fallback row")
    }

    fn relation_rows(&self, predicate: &str) -> Vec<usize> {
        if predicate == NO_RELATION {
            return vec![self.row(NOREL_KEY)];
        }
        let tokens = tokenize(&predicate.replace('_', " "));
        if tokens.is_empty() {
            return vec![self.row(UNK_KEY)];
        }
        tokens.iter().map(|t| self.row(t)).collect()
    }

    /// Mask feature m for a query: the two token pools through the
    /// feed-forward network.
    pub fn encode_mask(&self, query: &MaskedQuery) -> DVector<f64> {
        self.encode_mask_cached(query).mask
    }

    fn encode_mask_cached(&self, query: &MaskedQuery) -> MaskCache {
        let e = self.input_embed.ncols();
        let subj_rows: Vec<usize> = query.subject_tokens.iter().map(|t| self.row(t)).collect();
        let obj_rows: Vec<usize> = query.object_tokens.iter().map(|t| self.row(t)).collect();
        let mut z = DVector::zeros(2 * e);
        for &row in &subj_rows {
            for d in 0..e {
                z[d] += self.input_embed[(row, d)] / subj_rows.len() as f64;
            }
        }
        for &row in &obj_rows {
            for d in 0..e {
                z[e + d] += self.input_embed[(row, d)] / obj_rows.len() as f64;
            }
        }
        let pre = &self.w1 * &z + &self.b1;
        let hidden = pre.map(f64::tanh);
        let mask = &self.w2 * &hidden + &self.b2;
        MaskCache {
            subj_rows,
            obj_rows,
            pooled: z,
            hidden,
            mask,
        }
    }

    /// Mean of the output embeddings of a predicate's tokens.
    pub fn relation_embedding(&self, predicate: &str) -> DVector<f64> {
        let rows = self.relation_rows(predicate);
        let mut mean = DVector::zeros(self.out_embed.ncols());
        for &row in &rows {
            mean += self.out_embed.row(row).transpose();
        }
        mean / rows.len() as f64
    }

    /// Prior score s^v_k = m · relation_embedding(p_k), in candidate order.
    pub fn prior_scores(
        &self,
        subject_class: &str,
        object_class: &str,
        candidates: &[String],
    ) -> Result<DVector<f64>> {
        if candidates.is_empty() {
            return Err(VrdError::Contract("prior_scores needs candidates".into()));
        }
        let query = MaskedQuery::from_classes(subject_class, object_class)?;
        let mask = self.encode_mask(&query);
        let scores: Vec<f64> = candidates
            .iter()
            .map(|p| mask.dot(&self.relation_embedding(p)))
            .collect();
        Ok(DVector::from_vec(scores))
    }

    /// Cross-entropy of reconstructing `edge`'s relation from `candidates`.
    pub fn reconstruction_loss(&self, edge: &KGEdge, candidates: &[String]) -> Result<f64> {
        let (loss, _) = self.forward_edge(edge, candidates)?;
        Ok(loss)
    }

    fn forward_edge(&self, edge: &KGEdge, candidates: &[String]) -> Result<(f64, EdgeCache)> {
        let gold = candidates
            .iter()
            .position(|c| *c == edge.relation)
            .ok_or_else(|| {
                VrdError::Contract(format!(
                    "edge relation {:?} missing from candidate set",
                    edge.relation
                ))
            })?;
        let query = MaskedQuery::from_classes(&edge.subject, &edge.object)?;
        let mask_cache = self.encode_mask_cached(&query);
        let embeddings: Vec<DVector<f64>> = candidates
            .iter()
            .map(|c| self.relation_embedding(c))
            .collect();
        let logits =
            DVector::from_iterator(candidates.len(), embeddings.iter().map(|e| mask_cache.mask.dot(e)));
        let probs = stable_softmax(&logits);
        let loss = -probs[gold].max(1e-300).ln();
        Ok((
            loss,
            EdgeCache {
                gold,
                mask_cache,
                embeddings,
                probs,
            },
        ))
    }

    /// Loss and analytic gradients for one edge.
    pub fn reconstruction_grads(
        &self,
        edge: &KGEdge,
        candidates: &[String],
    ) -> Result<(f64, EncoderGrads)> {
        let (loss, cache) = self.forward_edge(edge, candidates)?;
        let mut grads = EncoderGrads::zeros_like(self);

        // d loss / d logits = probs - onehot(gold)
        let mut dlogits = cache.probs.clone();
        dlogits[cache.gold] -= 1.0;

        let e = self.input_embed.ncols();
        let mut dmask = DVector::zeros(self.w2.nrows());
        for (k, candidate) in candidates.iter().enumerate() {
            let dk = dlogits[k];
            dmask += dk * &cache.embeddings[k];
            let rows = self.relation_rows(candidate);
            let share = dk / rows.len() as f64;
            for row in rows {
                for d in 0..self.out_embed.ncols() {
                    grads.out_embed[(row, d)] += share * cache.mask_cache.mask[d];
                }
            }
        }

        grads.b2 += &dmask;
        grads.w2 += &dmask * cache.mask_cache.hidden.transpose();
        let dhidden = self.w2.transpose() * &dmask;
        let dpre = dhidden.component_mul(
            &cache
                .mask_cache
                .hidden
                .map(|h| 1.0 - h * h),
        );
        grads.b1 += &dpre;
        grads.w1 += &dpre * cache.mask_cache.pooled.transpose();
        let dz = self.w1.transpose() * &dpre;

        let subj_n = cache.mask_cache.subj_rows.len() as f64;
        for &row in &cache.mask_cache.subj_rows {
            for d in 0..e {
                grads.input_embed[(row, d)] += dz[d] / subj_n;
            }
        }
        let obj_n = cache.mask_cache.obj_rows.len() as f64;
        for &row in &cache.mask_cache.obj_rows {
            for d in 0..e {
                grads.input_embed[(row, d)] += dz[e + d] / obj_n;
            }
        }
        Ok((loss, grads))
    }

    fn apply_step(&mut self, grads: &EncoderGrads, lr: f64) {
        self.input_embed -= lr * &grads.input_embed;
        self.w1 -= lr * &grads.w1;
        self.b1 -= lr * &grads.b1;
        self.w2 -= lr * &grads.w2;
        self.b2 -= lr * &grads.b2;
        self.out_embed -= lr * &grads.out_embed;
    }

    /// Fraction of distinct edges whose relation is the argmax prior score.
    pub fn reconstruction_accuracy(&self, graph: &VisualRelationKG) -> Result<f64> {
        let candidates: Vec<String> = graph.relations().iter().cloned().collect();
        let edges: Vec<KGEdge> = graph.edges().collect();
        if edges.is_empty() {
            return Err(VrdError::Config("empty graph".into()));
        }
        let mut hits = 0usize;
        for edge in &edges {
            let scores = self.prior_scores(&edge.subject, &edge.object, &candidates)?;
            let best = argmax(&scores);
            if candidates[best] == edge.relation {
                hits += 1;
            }
        }
        Ok(hits as f64 / edges.len() as f64)
    }

    /// Save as a `KFVVRK1` checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        ckpt::write_magic(w, VRK_MAGIC)?;
        ckpt::write_u32(w, self.vocab.len() as u32)?;
        for (token, _) in &self.vocab {
            ckpt::write_string(w, token)?;
        }
        // vocab rows follow BTreeMap insertion holes? no: row indices stored
        for (_, &row) in &self.vocab {
            ckpt::write_u32(w, row as u32)?;
        }
        ckpt::write_matrix(w, &self.input_embed)?;
        ckpt::write_matrix(w, &self.w1)?;
        ckpt::write_vector(w, &self.b1)?;
        ckpt::write_matrix(w, &self.w2)?;
        ckpt::write_vector(w, &self.b2)?;
        ckpt::write_matrix(w, &self.out_embed)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RelationEncoder> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let enc = Self::read_from(&mut r)?;
        ckpt::expect_eof(&mut r)?;
        Ok(enc)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<RelationEncoder> {
        ckpt::expect_magic(r, VRK_MAGIC)?;
        let count = ckpt::read_u32(r)? as usize;
        let mut tokens = Vec::with_capacity(count);
        for _ in 0..count {
            tokens.push(ckpt::read_string(r)?);
        }
        let mut vocab = BTreeMap::new();
        for token in &tokens {
            let row = ckpt::read_u32(r)? as usize;
            vocab.insert(token.clone(), row);
        }
        let input_embed = ckpt::read_matrix(r)?;
        let w1 = ckpt::read_matrix(r)?;
        let b1 = ckpt::read_vector(r)?;
        let w2 = ckpt::read_matrix(r)?;
        let b2 = ckpt::read_vector(r)?;
        let out_embed = ckpt::read_matrix(r)?;
        if input_embed.nrows() != vocab.len() || out_embed.nrows() != vocab.len() {
            return Err(VrdError::Format(
                "embedding row count does not match vocabulary".into(),
            ));
        }
        Ok(RelationEncoder {
            vocab,
            input_embed,
            w1,
            b1,
            w2,
            b2,
            out_embed,
        })
    }
}

impl EncoderGrads {
    pub fn zeros_like(encoder: &RelationEncoder) -> EncoderGrads {
        EncoderGrads {
            input_embed: DMatrix::zeros(encoder.input_embed.nrows(), encoder.input_embed.ncols()),
            w1: DMatrix::zeros(encoder.w1.nrows(), encoder.w1.ncols()),
            b1: DVector::zeros(encoder.b1.len()),
            w2: DMatrix::zeros(encoder.w2.nrows(), encoder.w2.ncols()),
            b2: DVector::zeros(encoder.b2.len()),
            out_embed: DMatrix::zeros(encoder.out_embed.nrows(), encoder.out_embed.ncols()),
        }
    }
}

struct MaskCache {
    subj_rows: Vec<usize>,
    obj_rows: Vec<usize>,
    pooled: DVector<f64>,
    hidden: DVector<f64>,
    mask: DVector<f64>,
}

struct EdgeCache {
    gold: usize,
    mask_cache: MaskCache,
    embeddings: Vec<DVector<f64>>,
    probs: DVector<f64>,
}

/// Result of reconstruction training.
#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    pub encoder: RelationEncoder,
    pub final_accuracy: f64,
    pub final_loss: f64,
}

/// Fine-tune an encoder by relation reconstruction over the graph's edges.
///
/// Each epoch draws `|E|` edges from the configured distribution with the
/// seeded generator and applies one SGD step per draw; the relation
/// candidate set is the graph's relation set.
pub fn train_reconstruction(
    mut encoder: RelationEncoder,
    graph: &VisualRelationKG,
    config: &ReconstructionConfig,
) -> Result<TrainedEncoder> {
    config.validate()?;
    if graph.edge_count() == 0 {
        return Err(VrdError::Config("cannot train on an empty graph".into()));
    }
    let candidates: Vec<String> = graph.relations().iter().cloned().collect();
    let edges: Vec<KGEdge> = graph.edges().collect();
    let weights: Vec<u64> = match config.sampling {
        SamplingMode::UniformEdges => vec![1; edges.len()],
        SamplingMode::CountWeighted => edges.iter().map(|e| e.count).collect(),
    };
    let total: u64 = weights.iter().sum();
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0u64;
    for w in &weights {
        acc += w;
        cumulative.push(acc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut last_loss = f64::NAN;
    for _epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..edges.len() {
            let draw = rng.gen_range(0..total);
            let idx = cumulative.partition_point(|&c| c <= draw);
            let (loss, grads) = encoder.reconstruction_grads(&edges[idx], &candidates)?;
            if !loss.is_finite() {
                return Err(VrdError::Diverged {
                    context: format!("vrk reconstruction, lr={}", config.learning_rate),
                });
            }
            encoder.apply_step(&grads, config.learning_rate);
            epoch_loss += loss;
        }
        last_loss = epoch_loss / edges.len() as f64;
    }
    let final_accuracy = encoder.reconstruction_accuracy(graph)?;
    Ok(TrainedEncoder {
        encoder,
        final_accuracy,
        final_loss: last_loss,
    })
}

pub(crate) fn stable_softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|v| (v - max).exp());
    let sum: f64 = exps.iter().sum();
    exps / sum
}

pub(crate) fn argmax(scores: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}
