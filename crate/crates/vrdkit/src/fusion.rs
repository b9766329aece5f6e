//! The classification head: visual pair encoding, metric scores against the
//! predicate representations, mixture-of-experts fusion of the metric and
//! knowledge-prior score vectors, cross-entropy loss, and inference — with
//! analytic gradients for every trainable tensor.
//!
//! Score polarity: cosine is used as a similarity (higher = closer) by
//! default so both expert score vectors agree on "higher = more likely";
//! the `distance` polarity (1 − cos) is available behind a config flag and
//! the learnable fusion layer absorbs the sign either way.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::checkpoint as ckpt;
use crate::error::{Result, VrdError};
use crate::text::{
    ContextEncoder, ContextEncoderGrads, EncodedPrompt, PromptTemplate, Projection, TemplateKind,
    TokenEmbeddingTable,
};
use crate::vrk::RelationEncoder;
use crate::NO_RELATION;

/// Checkpoint magic for serialized fusion models.
pub const FUSION_MAGIC: &[u8] = b"KFVFUS1";

/// Floor applied to the gold probability inside the loss.
pub const LOSS_FLOOR: f64 = 1e-12;

/// A detected object: normalized box, class tag, and raw detector feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDescriptor {
    /// (x1, y1, x2, y2), normalized to [0, 1].
    pub bbox: [f64; 4],
    pub class: String,
    /// Raw visual feature o^r of dimension D_v.
    pub feature: DVector<f64>,
}

impl ObjectDescriptor {
    pub fn new(bbox: [f64; 4], class: &str, feature: DVector<f64>) -> Result<ObjectDescriptor> {
        let [x1, y1, x2, y2] = bbox;
        let in_unit = bbox.iter().all(|v| (0.0..=1.0).contains(v));
        if !(x1 < x2 && y1 < y2 && in_unit) {
            return Err(VrdError::Contract(format!(
                "invalid box {bbox:?}: need 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1"
            )));
        }
        if class.is_empty() {
            return Err(VrdError::Contract("object class tag is empty".into()));
        }
        Ok(ObjectDescriptor {
            bbox,
            class: class.to_string(),
            feature,
        })
    }

    /// Feature with the box coordinates appended (D_v + 4).
    pub fn augmented(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.feature.len() + 4);
        v.rows_mut(0, self.feature.len()).copy_from(&self.feature);
        for (i, b) in self.bbox.iter().enumerate() {
            v[self.feature.len() + i] = *b;
        }
        v
    }
}

/// The candidate predicate set P with stable indices; the no-relation label
/// is always present exactly once, at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    predicates: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl CandidateSet {
    /// Build from the target relationships (no-relation is prepended).
    pub fn new(relations: &[String]) -> Result<CandidateSet> {
        let mut predicates = vec![NO_RELATION.to_string()];
        predicates.extend(relations.iter().cloned());
        let mut index = BTreeMap::new();
        for (i, p) in predicates.iter().enumerate() {
            if index.insert(p.clone(), i).is_some() {
                return Err(VrdError::Contract(format!(
                    "duplicate predicate {p:?} in candidate set"
                )));
            }
        }
        Ok(CandidateSet { predicates, index })
    }

    /// Total size n = |P| including no-relation.
    pub fn len(&self) -> usize {
        self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn no_relation_index(&self) -> usize {
        0
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn name(&self, index: usize) -> &str {
        &self.predicates[index]
    }

    pub fn position(&self, predicate: &str) -> Option<usize> {
        self.index.get(predicate).copied()
    }

    /// Target relationships (everything except no-relation).
    pub fn relations(&self) -> &[String] {
        &self.predicates[1..]
    }
}

/// Linear visual pair encoder (v_ij = W·concat(o_i, o_j) + b over
/// box-augmented features).
#[derive(Debug, Clone, PartialEq)]
pub struct PairEncoder {
    /// H × 2(D_v + 4).
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl PairEncoder {
    pub fn seeded(h: usize, d_v: usize, seed: u64) -> PairEncoder {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let input = 2 * (d_v + 4);
        let scale = 1.0 / (input as f64).sqrt();
        PairEncoder {
            w: DMatrix::from_fn(h, input, |_, _| crate::text::standard_normal(&mut rng) * scale),
            b: DVector::zeros(h),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    /// Concatenated, box-augmented input for a pair.
    pub fn pair_input(&self, o_i: &ObjectDescriptor, o_j: &ObjectDescriptor) -> Result<DVector<f64>> {
        let a = o_i.augmented();
        let b = o_j.augmented();
        if a.len() + b.len() != self.w.ncols() {
            return Err(VrdError::Contract(format!(
                "pair encoder expects concatenated input of dimension {}, got {}",
                self.w.ncols(),
                a.len() + b.len()
            )));
        }
        let mut z = DVector::zeros(a.len() + b.len());
        z.rows_mut(0, a.len()).copy_from(&a);
        z.rows_mut(a.len(), b.len()).copy_from(&b);
        Ok(z)
    }

    pub fn encode_pair(
        &self,
        o_i: &ObjectDescriptor,
        o_j: &ObjectDescriptor,
    ) -> Result<DVector<f64>> {
        Ok(&self.w * self.pair_input(o_i, o_j)? + &self.b)
    }
}

/// Whether the metric score is cosine similarity or cosine distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MetricPolarity {
    Similarity,
    Distance,
}

impl MetricPolarity {
    pub fn name(self) -> &'static str {
        match self {
            MetricPolarity::Similarity => "similarity",
            MetricPolarity::Distance => "distance",
        }
    }

    pub fn from_name(name: &str) -> Result<MetricPolarity> {
        match name {
            "similarity" => Ok(MetricPolarity::Similarity),
            "distance" => Ok(MetricPolarity::Distance),
            other => Err(VrdError::Config(format!(
                "unknown metric polarity {other:?}; expected similarity or distance"
            ))),
        }
    }
}

/// Metric score vector with degenerate (zero-norm) entries flagged.
#[derive(Debug, Clone)]
pub struct MetricScores {
    pub values: DVector<f64>,
    /// Candidate indices whose score was forced to 0 by a zero-norm vector.
    pub degenerate: Vec<usize>,
}

/// Cosine similarity; exactly 0 when either vector has zero norm.
pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Metric scores s^t against each predicate representation.
pub fn metric_scores(
    pair_feature: &DVector<f64>,
    reps: &[DVector<f64>],
    polarity: MetricPolarity,
) -> Result<MetricScores> {
    let mut values = DVector::zeros(reps.len());
    let mut degenerate = Vec::new();
    for (k, rep) in reps.iter().enumerate() {
        if rep.len() != pair_feature.len() {
            return Err(VrdError::Contract(format!(
                "metric score expects representations of dimension {}, got {}",
                pair_feature.len(),
                rep.len()
            )));
        }
        let zero = pair_feature.norm() == 0.0 || rep.norm() == 0.0;
        if zero {
            degenerate.push(k);
            values[k] = 0.0;
            continue;
        }
        let c = cosine(pair_feature, rep);
        values[k] = match polarity {
            MetricPolarity::Similarity => c,
            MetricPolarity::Distance => 1.0 - c,
        };
    }
    Ok(MetricScores { values, degenerate })
}

/// The mixture-of-experts fusion layer: an affine map over the concatenated
/// expert scores followed by softmax. Without the knowledge prior the input
/// reduces to the metric scores alone (n × n head).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    /// n × 2n with the knowledge prior, n × n without.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl FusionHead {
    pub fn seeded(n: usize, with_prior: bool, seed: u64) -> FusionHead {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let input = if with_prior { 2 * n } else { n };
        let scale = 1.0 / (input as f64).sqrt();
        FusionHead {
            w: DMatrix::from_fn(n, input, |_, _| crate::text::standard_normal(&mut rng) * scale),
            b: DVector::zeros(n),
        }
    }

    pub fn with_prior(&self) -> bool {
        self.w.ncols() == 2 * self.w.nrows()
    }

    fn input(&self, s_v: Option<&DVector<f64>>, s_t: &DVector<f64>) -> Result<DVector<f64>> {
        match s_v {
            Some(s_v) => {
                if s_v.len() != s_t.len() {
                    return Err(VrdError::Contract(format!(
                        "score vectors disagree in length: {} vs {}",
                        s_v.len(),
                        s_t.len()
                    )));
                }
                let mut z = DVector::zeros(2 * s_v.len());
                z.rows_mut(0, s_v.len()).copy_from(s_v);
                z.rows_mut(s_v.len(), s_t.len()).copy_from(s_t);
                Ok(z)
            }
            None => Ok(s_t.clone()),
        }
    }

    /// s = softmax(W·concat(s^v, s^t) + b).
    pub fn fuse(&self, s_v: Option<&DVector<f64>>, s_t: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.input(s_v, s_t)?;
        if z.len() != self.w.ncols() {
            return Err(VrdError::Contract(format!(
                "fusion head expects input of dimension {}, got {}",
                self.w.ncols(),
                z.len()
            )));
        }
        Ok(softmax(&(&self.w * z + &self.b)))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|v| (v - max).exp());
    let sum: f64 = exps.iter().sum();
    exps / sum
}

/// Cross-entropy −log(s_gold); the flag reports a floored gold probability.
pub fn loss_clamped(s: &DVector<f64>, gold: usize) -> Result<(f64, bool)> {
    if gold >= s.len() {
        return Err(VrdError::Contract(format!(
            "gold index {gold} out of range for {} candidates",
            s.len()
        )));
    }
    let p = s[gold];
    if p <= LOSS_FLOOR {
        return Ok((-(LOSS_FLOOR.ln()), true));
    }
    Ok((-p.ln(), false))
}

/// Cross-entropy value alone.
pub fn loss(s: &DVector<f64>, gold: usize) -> Result<f64> {
    Ok(loss_clamped(s, gold)?.0)
}

/// Argmax with ties broken by the lowest index.
pub fn predict(s: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..s.len() {
        if s[i] > s[best] {
            best = i;
        }
    }
    best
}

/// Textual expert: contextual prompt encoding, or frozen static word-vector
/// means (one raw D_t row per candidate).
#[derive(Debug, Clone)]
pub enum TextBranch {
    Contextual {
        encoder: ContextEncoder,
        template: PromptTemplate,
    },
    Static {
        /// n × D_t raw (unprojected) predicate vectors.
        raw: DMatrix<f64>,
    },
}

impl TextBranch {
    pub fn is_contextual(&self) -> bool {
        matches!(self, TextBranch::Contextual { .. })
    }
}

/// The full trainable model.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub candidates: CandidateSet,
    pub pair: PairEncoder,
    pub text: TextBranch,
    pub proj: Projection,
    /// Frozen knowledge encoder; absent in the no-prior ablation.
    pub vrk: Option<RelationEncoder>,
    pub head: FusionHead,
    pub polarity: MetricPolarity,
}

/// Everything recorded during a forward pass that the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pair_input: DVector<f64>,
    pub pair_feature: DVector<f64>,
    /// Per-candidate prompt caches in contextual mode.
    pub prompts: Option<Vec<(EncodedPrompt, Range<usize>)>>,
    /// Per-candidate raw predicate vectors r_k.
    pub raw_reprs: Vec<DVector<f64>>,
    /// Per-candidate projected representations q_k.
    pub projected: Vec<DVector<f64>>,
    pub s_t: DVector<f64>,
    pub s_v: Option<DVector<f64>>,
    pub probs: DVector<f64>,
    /// Candidates whose metric score was zeroed by a zero norm.
    pub degenerate: Vec<usize>,
}

/// Gradients for every trainable tensor of the pipeline.
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub pair_w: DMatrix<f64>,
    pub pair_b: DVector<f64>,
    pub proj_w: DMatrix<f64>,
    pub proj_b: DVector<f64>,
    pub head_w: DMatrix<f64>,
    pub head_b: DVector<f64>,
    pub ctx: Option<ContextEncoderGrads>,
}

impl FusionGrads {
    pub fn zeros_like(model: &FusionModel) -> FusionGrads {
        FusionGrads {
            pair_w: DMatrix::zeros(model.pair.w.nrows(), model.pair.w.ncols()),
            pair_b: DVector::zeros(model.pair.b.len()),
            proj_w: DMatrix::zeros(model.proj.w.nrows(), model.proj.w.ncols()),
            proj_b: DVector::zeros(model.proj.b.len()),
            head_w: DMatrix::zeros(model.head.w.nrows(), model.head.w.ncols()),
            head_b: DVector::zeros(model.head.b.len()),
            ctx: match &model.text {
                TextBranch::Contextual { encoder, .. } => {
                    Some(ContextEncoderGrads::zeros_like(encoder))
                }
                TextBranch::Static { .. } => None,
            },
        }
    }

    pub fn add_assign(&mut self, other: &FusionGrads) {
        self.pair_w += &other.pair_w;
        self.pair_b += &other.pair_b;
        self.proj_w += &other.proj_w;
        self.proj_b += &other.proj_b;
        self.head_w += &other.head_w;
        self.head_b += &other.head_b;
        if let (Some(a), Some(b)) = (&mut self.ctx, &other.ctx) {
            a.embed += &b.embed;
            a.mixer += &b.mixer;
            a.gains += &b.gains;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.pair_w *= factor;
        self.pair_b *= factor;
        self.proj_w *= factor;
        self.proj_b *= factor;
        self.head_w *= factor;
        self.head_b *= factor;
        if let Some(ctx) = &mut self.ctx {
            ctx.embed *= factor;
            ctx.mixer *= factor;
            ctx.gains *= factor;
        }
    }
}

/// Model construction parameters.
#[derive(Debug, Clone)]
pub struct FusionConfig {
    pub d_v: usize,
    pub h: usize,
    pub template: TemplateKind,
    /// Contextual prompt encoding when true, static word vectors when false.
    pub use_textual: bool,
    pub use_vrk: bool,
    pub polarity: MetricPolarity,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d_v: 16,
            h: 32,
            template: TemplateKind::Triplet,
            use_textual: true,
            use_vrk: true,
            polarity: MetricPolarity::Similarity,
        seed: 0,
        }
    }
}

impl FusionModel {
    /// Build a seeded model over a candidate set and embedding table; the
    /// knowledge encoder is attached frozen when provided.
    pub fn build(
        candidates: CandidateSet,
        table: &TokenEmbeddingTable,
        vrk: Option<RelationEncoder>,
        config: &FusionConfig,
    ) -> Result<FusionModel> {
        if config.use_vrk && vrk.is_none() {
            return Err(VrdError::Config(
                "use_vrk requires a trained relation encoder".into(),
            ));
        }
        let n = candidates.len();
        let text = if config.use_textual {
            TextBranch::Contextual {
                encoder: ContextEncoder::from_table(table),
                template: PromptTemplate::new(config.template),
            }
        } else {
            let mut raw = DMatrix::zeros(n, table.dim());
            for (k, predicate) in candidates.predicates().iter().enumerate() {
                let vector = crate::text::static_raw(predicate, table)?;
                for d in 0..table.dim() {
                    raw[(k, d)] = vector[d];
                }
            }
            TextBranch::Static { raw }
        };
        Ok(FusionModel {
            candidates,
            pair: PairEncoder::seeded(config.h, config.d_v, config.seed.wrapping_add(1)),
            text,
            proj: Projection::seeded(config.h, table.dim(), config.seed.wrapping_add(2)),
            vrk: if config.use_vrk { vrk } else { None },
            head: FusionHead::seeded(n, config.use_vrk, config.seed.wrapping_add(3)),
            polarity: config.polarity,
        })
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    /// Full forward pass for one object pair.
    pub fn forward(
        &self,
        subject: &ObjectDescriptor,
        object: &ObjectDescriptor,
    ) -> Result<ForwardCache> {
        let pair_input = self.pair.pair_input(subject, object)?;
        let pair_feature = &self.pair.w * &pair_input + &self.pair.b;

        let (prompts, raw_reprs) = match &self.text {
            TextBranch::Contextual { encoder, template } => {
                let mut prompts = Vec::with_capacity(self.candidates.len());
                let mut raws = Vec::with_capacity(self.candidates.len());
                for predicate in self.candidates.predicates() {
                    let (prompt, span) =
                        template.fill_with_span(&subject.class, &object.class, predicate);
                    let cache = encoder.encode_prompt_cached(&prompt);
                    let raw = crate::text::predicate_repr(&cache.outputs, &span)?;
                    prompts.push((cache, span));
                    raws.push(raw);
                }
                (Some(prompts), raws)
            }
            TextBranch::Static { raw } => {
                let raws = (0..self.candidates.len())
                    .map(|k| raw.row(k).transpose())
                    .collect();
                (None, raws)
            }
        };

        let projected: Vec<DVector<f64>> = raw_reprs
            .iter()
            .map(|r| self.proj.project(r))
            .collect::<Result<_>>()?;
        let metric = metric_scores(&pair_feature, &projected, self.polarity)?;

        let s_v = match &self.vrk {
            Some(encoder) => Some(encoder.prior_scores(
                &subject.class,
                &object.class,
                self.candidates.predicates(),
            )?),
            None => None,
        };

        let probs = self.head.fuse(s_v.as_ref(), &metric.values)?;
        Ok(ForwardCache {
            pair_input,
            pair_feature,
            prompts,
            raw_reprs,
            projected,
            s_t: metric.values,
            s_v,
            probs,
            degenerate: metric.degenerate,
        })
    }

    /// Fused probabilities only.
    pub fn scores(
        &self,
        subject: &ObjectDescriptor,
        object: &ObjectDescriptor,
    ) -> Result<DVector<f64>> {
        Ok(self.forward(subject, object)?.probs)
    }

    /// Loss of one labeled pair.
    pub fn instance_loss(
        &self,
        subject: &ObjectDescriptor,
        object: &ObjectDescriptor,
        gold: usize,
    ) -> Result<f64> {
        loss(&self.forward(subject, object)?.probs, gold)
    }

    /// Analytic gradients of the cross-entropy loss through the whole
    /// pipeline (fusion head, cosine metric, projection, contextualizer,
    /// pair encoder). The knowledge encoder is frozen by design.
    pub fn backward(&self, cache: &ForwardCache, gold: usize) -> Result<FusionGrads> {
        let n = self.candidates.len();
        if gold >= n {
            return Err(VrdError::Contract(format!(
                "gold index {gold} out of range for {n} candidates"
            )));
        }
        let mut grads = FusionGrads::zeros_like(self);

        // softmax cross-entropy: d loss / d logits = probs - onehot
        let mut dlogits = cache.probs.clone();
        dlogits[gold] -= 1.0;

        let head_input = match &cache.s_v {
            Some(s_v) => {
                let mut z = DVector::zeros(2 * n);
                z.rows_mut(0, n).copy_from(s_v);
                z.rows_mut(n, n).copy_from(&cache.s_t);
                z
            }
            None => cache.s_t.clone(),
        };
        grads.head_b += &dlogits;
        grads.head_w += &dlogits * head_input.transpose();
        let dinput = self.head.w.transpose() * &dlogits;
        let ds_t = match &cache.s_v {
            Some(_) => dinput.rows(n, n).into_owned(),
            None => dinput,
        };

        // cosine backward per candidate
        let v = &cache.pair_feature;
        let v_norm = v.norm();
        let mut dv = DVector::zeros(v.len());
        for k in 0..n {
            if cache.degenerate.contains(&k) {
                continue;
            }
            let q = &cache.projected[k];
            let q_norm = q.norm();
            let cos = v.dot(q) / (v_norm * q_norm);
            let dcos = match self.polarity {
                MetricPolarity::Similarity => ds_t[k],
                MetricPolarity::Distance => -ds_t[k],
            };
            if dcos == 0.0 {
                continue;
            }
            dv += dcos * (q / (v_norm * q_norm) - (cos / (v_norm * v_norm)) * v);
            let dq = dcos * (v / (v_norm * q_norm) - (cos / (q_norm * q_norm)) * q);
            grads.proj_w += &dq * cache.raw_reprs[k].transpose();
            grads.proj_b += &dq;
            // raw representation gradient flows into the contextualizer only
            if let (Some(ctx_grads), Some(prompts)) = (&mut grads.ctx, &cache.prompts) {
                let dr = self.proj.w.transpose() * &dq;
                let (prompt_cache, span) = &prompts[k];
                let share = &dr / span.len() as f64;
                let mut output_grads =
                    vec![DVector::zeros(dr.len()); prompt_cache.outputs.len()];
                for l in span.clone() {
                    output_grads[l] = share.clone();
                }
                if let TextBranch::Contextual { encoder, .. } = &self.text {
                    ctx_grads.accumulate(encoder, prompt_cache, &output_grads);
                }
            }
        }

        grads.pair_b += &dv;
        grads.pair_w += &dv * cache.pair_input.transpose();
        Ok(grads)
    }

    /// Serialize the model body (shapes, flags, candidates, tensors, and the
    /// embedded frozen knowledge encoder).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let d_v = self.pair.w.ncols() / 2 - 4;
        let d_k = self.vrk.as_ref().map(|e| e.dims().mask).unwrap_or(0);
        ckpt::write_u32(w, d_v as u32)?;
        ckpt::write_u32(w, self.pair.output_dim() as u32)?;
        ckpt::write_u32(w, self.proj.input_dim() as u32)?;
        ckpt::write_u32(w, d_k as u32)?;
        ckpt::write_u32(w, self.candidates.len() as u32)?;
        let (template, contextual) = match &self.text {
            TextBranch::Contextual { template, .. } => (template.kind, true),
            TextBranch::Static { .. } => (TemplateKind::Triplet, false),
        };
        ckpt::write_u8(w, template as u8)?;
        ckpt::write_u8(w, contextual as u8)?;
        ckpt::write_u8(w, self.vrk.is_some() as u8)?;
        ckpt::write_u8(w, matches!(self.polarity, MetricPolarity::Distance) as u8)?;
        for predicate in self.candidates.predicates() {
            ckpt::write_string(w, predicate)?;
        }
        ckpt::write_matrix(w, &self.pair.w)?;
        ckpt::write_vector(w, &self.pair.b)?;
        ckpt::write_matrix(w, &self.proj.w)?;
        ckpt::write_vector(w, &self.proj.b)?;
        ckpt::write_matrix(w, &self.head.w)?;
        ckpt::write_vector(w, &self.head.b)?;
        match &self.text {
            TextBranch::Contextual { encoder, .. } => {
                ckpt::write_u32(w, encoder.vocab.len() as u32)?;
                for (token, &row) in &encoder.vocab {
                    ckpt::write_string(w, token)?;
                    ckpt::write_u32(w, row as u32)?;
                }
                ckpt::write_matrix(w, &encoder.embed)?;
                ckpt::write_matrix(w, &encoder.mixer)?;
                ckpt::write_vector(w, &encoder.gains)?;
            }
            TextBranch::Static { raw } => {
                ckpt::write_matrix(w, raw)?;
            }
        }
        if let Some(vrk) = &self.vrk {
            vrk.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<FusionModel> {
        let _d_v = ckpt::read_u32(r)? as usize;
        let _h = ckpt::read_u32(r)? as usize;
        let _d_t = ckpt::read_u32(r)? as usize;
        let _d_k = ckpt::read_u32(r)? as usize;
        let n = ckpt::read_u32(r)? as usize;
        let template = match ckpt::read_u8(r)? {
            0 => TemplateKind::Cloze,
            1 => TemplateKind::T5Style,
            2 => TemplateKind::Triplet,
            other => return Err(VrdError::Format(format!("bad template tag {other}"))),
        };
        let contextual = ckpt::read_u8(r)? != 0;
        let has_vrk = ckpt::read_u8(r)? != 0;
        let polarity = if ckpt::read_u8(r)? != 0 {
            MetricPolarity::Distance
        } else {
            MetricPolarity::Similarity
        };
        let mut predicates = Vec::with_capacity(n);
        for _ in 0..n {
            predicates.push(ckpt::read_string(r)?);
        }
        if predicates.first().map(String::as_str) != Some(NO_RELATION) {
            return Err(VrdError::Format(
                "candidate set does not start with the no-relation label".into(),
            ));
        }
        let candidates = CandidateSet::new(&predicates[1..])?;
        let pair = PairEncoder {
            w: ckpt::read_matrix(r)?,
            b: ckpt::read_vector(r)?,
        };
        let proj = Projection {
            w: ckpt::read_matrix(r)?,
            b: ckpt::read_vector(r)?,
        };
        let head = FusionHead {
            w: ckpt::read_matrix(r)?,
            b: ckpt::read_vector(r)?,
        };
        let text = if contextual {
            let count = ckpt::read_u32(r)? as usize;
            let mut vocab = BTreeMap::new();
            for _ in 0..count {
                let token = ckpt::read_string(r)?;
                let row = ckpt::read_u32(r)? as usize;
                vocab.insert(token, row);
            }
            TextBranch::Contextual {
                encoder: ContextEncoder {
                    vocab,
                    embed: ckpt::read_matrix(r)?,
                    mixer: ckpt::read_matrix(r)?,
                    gains: ckpt::read_vector(r)?,
                },
                template: PromptTemplate::new(template),
            }
        } else {
            TextBranch::Static {
                raw: ckpt::read_matrix(r)?,
            }
        };
        let vrk = if has_vrk {
            Some(RelationEncoder::read_from(r)?)
        } else {
            None
        };
        Ok(FusionModel {
            candidates,
            pair,
            text,
            proj,
            vrk,
            head,
            polarity,
        })
    }
}
