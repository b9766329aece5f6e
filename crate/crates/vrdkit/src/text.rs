//! Textual predicate representations.
//!
//! A prompt template combines the subject class, object class, and a
//! candidate predicate into a short sentence. The sentence is tokenized,
//! embedded, and passed through a shallow trainable contextualizer so the
//! predicate's vector depends on the classes around it; averaging the
//! predicate-span outputs and projecting to the pair-feature width H yields
//! the predicate representation used by the metric score. A static mode
//! (mean of frozen word vectors, then the same projection) backs the
//! "no contextual text" ablation.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::caption::tokenize;
use crate::error::{Result, VrdError};

/// Token reserved for out-of-vocabulary words.
pub const UNK_TOKEN: &str = "<unk>";

/// Positions at or beyond this index share the last position gain.
pub const MAX_POSITIONS: usize = 32;

/// The three bundled prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TemplateKind {
    /// "The relationship between S and O is P"
    Cloze,
    /// "S and O are P."
    T5Style,
    /// "S is P O"
    Triplet,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] =
        [TemplateKind::Cloze, TemplateKind::T5Style, TemplateKind::Triplet];

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::Cloze => "cloze",
            TemplateKind::T5Style => "t5",
            TemplateKind::Triplet => "triplet",
        }
    }

    pub fn from_name(name: &str) -> Result<TemplateKind> {
        match name {
            "cloze" => Ok(TemplateKind::Cloze),
            "t5" => Ok(TemplateKind::T5Style),
            "triplet" => Ok(TemplateKind::Triplet),
            other => Err(VrdError::Config(format!(
                "unknown template {other:?}; expected cloze, t5, or triplet"
            ))),
        }
    }

    fn pattern(self) -> &'static str {
        match self {
            TemplateKind::Cloze => "The relationship between ⟨S⟩ and ⟨O⟩ is ⟨P⟩",
            TemplateKind::T5Style => "⟨S⟩ and ⟨O⟩ are ⟨P⟩.",
            TemplateKind::Triplet => "⟨S⟩ is ⟨P⟩ ⟨O⟩",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Lit(String),
    Subject,
    Object,
    Predicate,
}

/// A prompt pattern with exactly one ⟨S⟩, ⟨P⟩, and ⟨O⟩ slot.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind) -> PromptTemplate {
        let pieces = parse_pattern(kind.pattern()).expect("bundled patterns are well-formed");
        PromptTemplate { kind, pieces }
    }

    /// Fill the slots. Predicate underscores become spaces before insertion;
    /// no slot markers remain in the output.
    pub fn fill(&self, subject_class: &str, object_class: &str, predicate: &str) -> String {
        self.fill_parts(subject_class, object_class, predicate).0
    }

    /// Fill the slots and report which token positions of the tokenized
    /// prompt belong to the predicate.
    pub fn fill_with_span(
        &self,
        subject_class: &str,
        object_class: &str,
        predicate: &str,
    ) -> (String, Range<usize>) {
        let (prompt, span) = self.fill_parts(subject_class, object_class, predicate);
        (prompt, span)
    }

    fn fill_parts(&self, subject: &str, object: &str, predicate: &str) -> (String, Range<usize>) {
        let predicate = predicate.replace('_', " ");
        let mut prompt = String::new();
        let mut span = 0..0;
        for piece in &self.pieces {
            match piece {
                Piece::Lit(s) => prompt.push_str(s),
                Piece::Subject => prompt.push_str(subject),
                Piece::Object => prompt.push_str(object),
                Piece::Predicate => {
                    let start = tokenize(&prompt).len();
                    prompt.push_str(&predicate);
                    span = start..start + tokenize(&predicate).len();
                }
            }
        }
        (prompt, span)
    }
}

fn parse_pattern(pattern: &str) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut rest = pattern;
    let mut seen = (0, 0, 0);
    while let Some(open) = rest.find('⟨') {
        if open > 0 {
            pieces.push(Piece::Lit(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find('⟩')
            .ok_or_else(|| VrdError::Config("unclosed slot marker".into()))?;
        let slot = &rest[open + '⟨'.len_utf8()..open + close];
        match slot {
            "S" => {
                pieces.push(Piece::Subject);
                seen.0 += 1;
            }
            "O" => {
                pieces.push(Piece::Object);
                seen.1 += 1;
            }
            "P" => {
                pieces.push(Piece::Predicate);
                seen.2 += 1;
            }
            other => return Err(VrdError::Config(format!("unknown slot {other:?}"))),
        }
        rest = &rest[open + close + '⟩'.len_utf8()..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Lit(rest.to_string()));
    }
    if seen != (1, 1, 1) {
        return Err(VrdError::Config(
            "pattern must contain each of ⟨S⟩, ⟨O⟩, ⟨P⟩ exactly once".into(),
        ));
    }
    Ok(pieces)
}

/// Static word vectors with a guaranteed out-of-vocabulary fallback row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingTable {
    dim: usize,
    vocab: BTreeMap<String, usize>,
    rows: DMatrix<f64>,
}

impl TokenEmbeddingTable {
    /// Seeded random table over a vocabulary; the fallback row is added
    /// automatically.
    pub fn seeded(tokens: &[String], dim: usize, seed: u64) -> TokenEmbeddingTable {
        let mut vocab: BTreeMap<String, usize> = BTreeMap::new();
        for token in tokens {
            let next = vocab.len();
            vocab.entry(token.clone()).or_insert(next);
        }
        let next = vocab.len();
        vocab.entry(UNK_TOKEN.to_string()).or_insert(next);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut rows = DMatrix::zeros(vocab.len(), dim);
        // fill in vocab order so the layout is independent of insertion order
        for (_, &row) in vocab.iter() {
            for d in 0..dim {
                rows[(row, d)] = standard_normal(&mut rng) * scale;
            }
        }
        TokenEmbeddingTable { dim, vocab, rows }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &BTreeMap<String, usize> {
        &self.vocab
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// Row index for a token, falling back to the `<unk>` row.
    pub fn row_index(&self, token: &str) -> usize {
        self.vocab
            .get(token)
            .or_else(|| self.vocab.get(UNK_TOKEN))
            .copied()
            .expect("tables always contain the fallback row")
    }

    /// Embedding vector for a token (fallback for unknown tokens).
    pub fn vector(&self, token: &str) -> DVector<f64> {
        self.rows.row(self.row_index(token)).transpose()
    }

    /// Parse the table file format: header `D_t=<int>`, then
    /// `token<TAB>v1,v2,...` rows.
    pub fn parse(text: &str) -> Result<TokenEmbeddingTable> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| VrdError::Parse {
            line: 1,
            message: "empty embedding table".into(),
        })?;
        let dim: usize = header
            .trim()
            .strip_prefix("D_t=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| VrdError::Parse {
                line: 1,
                message: format!("expected header 'D_t=<int>', got {header:?}"),
            })?;
        let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (token, values) = line.split_once('\t').ok_or_else(|| VrdError::Parse {
                line: i + 1,
                message: "expected 'token<TAB>v1,v2,...'".into(),
            })?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| VrdError::Parse {
                    line: i + 1,
                    message: format!("bad vector component: {e}"),
                })?;
            if values.len() != dim {
                return Err(VrdError::Parse {
                    line: i + 1,
                    message: format!("vector has {} components, expected {dim}", values.len()),
                });
            }
            entries.push((token.to_string(), values));
        }
        let mut vocab = BTreeMap::new();
        for (token, _) in &entries {
            if vocab.insert(token.clone(), 0usize).is_some() {
                return Err(VrdError::Format(format!("duplicate token {token:?}")));
            }
        }
        if !vocab.contains_key(UNK_TOKEN) {
            vocab.insert(UNK_TOKEN.to_string(), 0);
        }
        for (i, (_, row)) in vocab.iter_mut().enumerate() {
            *row = i;
        }
        let mut rows = DMatrix::zeros(vocab.len(), dim);
        for (token, values) in &entries {
            let row = vocab[token];
            for (d, v) in values.iter().enumerate() {
                rows[(row, d)] = *v;
            }
        }
        Ok(TokenEmbeddingTable { dim, vocab, rows })
    }

    pub fn from_path(path: &Path) -> Result<TokenEmbeddingTable> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            VrdError::Config(format!("cannot read embedding table {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Render in the file format accepted by [`TokenEmbeddingTable::parse`].
    pub fn to_table_string(&self) -> String {
        let mut out = format!("D_t={}\n", self.dim);
        for (token, &row) in &self.vocab {
            let values: Vec<String> = (0..self.dim)
                .map(|d| format!("{}", self.rows[(row, d)]))
                .collect();
            out.push_str(&format!("{token}\t{}\n", values.join(",")));
        }
        out
    }
}

/// Forward cache for one encoded prompt.
#[derive(Debug, Clone)]
pub struct EncodedPrompt {
    /// Embedding row per position.
    pub token_rows: Vec<usize>,
    /// Gain-weighted mean of the input embeddings.
    pub context: DVector<f64>,
    /// Contextualized output vector per position.
    pub outputs: Vec<DVector<f64>>,
}

/// Shallow trainable contextualizer: a token embedding table plus one
/// self-mixing layer.
///
/// Every output position receives the shared, position-gain-weighted context
/// vector through the mixer, so each output depends on the whole sequence
/// and on token order:
///
/// ```text
/// c   = (1/L) Σ_l gains[l] · embed[t_l]
/// x_l = embed[t_l] + mixer · c
/// ```
///
/// With a zero mixer the encoder is the identity on embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoder {
    pub vocab: BTreeMap<String, usize>,
    /// V × D_t trainable token embeddings.
    pub embed: DMatrix<f64>,
    /// D_t × D_t mixing matrix; zero at initialization.
    pub mixer: DMatrix<f64>,
    /// Per-position gains, length [`MAX_POSITIONS`]; ones at initialization.
    pub gains: DVector<f64>,
}

impl ContextEncoder {
    /// Initialize from a static table: embeddings copied, mixer zero,
    /// gains one.
    pub fn from_table(table: &TokenEmbeddingTable) -> ContextEncoder {
        ContextEncoder {
            vocab: table.vocab().clone(),
            embed: table.rows().clone(),
            mixer: DMatrix::zeros(table.dim(), table.dim()),
            gains: DVector::from_element(MAX_POSITIONS, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.embed.ncols()
    }

    pub fn row_index(&self, token: &str) -> usize {
        self.vocab
            .get(token)
            .or_else(|| self.vocab.get(UNK_TOKEN))
            .copied()
            .expect("encoder vocabularies always contain the fallback row")
    }

    fn gain(&self, position: usize) -> f64 {
        self.gains[position.min(MAX_POSITIONS - 1)]
    }

    /// Encode a prompt into one contextual vector per token.
    pub fn encode_prompt(&self, prompt: &str) -> Vec<DVector<f64>> {
        self.encode_prompt_cached(prompt).outputs
    }

    /// Encode and keep the intermediate values needed for the backward pass.
    pub fn encode_prompt_cached(&self, prompt: &str) -> EncodedPrompt {
        let tokens = tokenize(prompt);
        let token_rows: Vec<usize> = tokens.iter().map(|t| self.row_index(t)).collect();
        let dim = self.dim();
        let len = token_rows.len().max(1) as f64;
        let mut context = DVector::zeros(dim);
        for (pos, &row) in token_rows.iter().enumerate() {
            context += self.gain(pos) * self.embed.row(row).transpose();
        }
        context /= len;
        let mixed = &self.mixer * &context;
        let outputs = token_rows
            .iter()
            .map(|&row| self.embed.row(row).transpose() + &mixed)
            .collect();
        EncodedPrompt {
            token_rows,
            context,
            outputs,
        }
    }
}

/// Gradients for the contextualizer parameters.
#[derive(Debug, Clone)]
pub struct ContextEncoderGrads {
    pub embed: DMatrix<f64>,
    pub mixer: DMatrix<f64>,
    pub gains: DVector<f64>,
}

impl ContextEncoderGrads {
    pub fn zeros_like(encoder: &ContextEncoder) -> ContextEncoderGrads {
        ContextEncoderGrads {
            embed: DMatrix::zeros(encoder.embed.nrows(), encoder.embed.ncols()),
            mixer: DMatrix::zeros(encoder.mixer.nrows(), encoder.mixer.ncols()),
            gains: DVector::zeros(encoder.gains.len()),
        }
    }

    /// Accumulate d(loss)/d(params) given d(loss)/d(output x_l) for one
    /// encoded prompt.
    pub fn accumulate(
        &mut self,
        encoder: &ContextEncoder,
        cache: &EncodedPrompt,
        output_grads: &[DVector<f64>],
    ) {
        assert_eq!(cache.outputs.len(), output_grads.len());
        if output_grads.is_empty() {
            return;
        }
        let len = cache.token_rows.len() as f64;
        let mut sum_grad = DVector::zeros(encoder.dim());
        for grad in output_grads {
            sum_grad += grad;
        }
        // x_l = e_l + M c  =>  dM += (Σ_l dx_l) cᵀ, dc = Mᵀ Σ_l dx_l
        self.mixer += &sum_grad * cache.context.transpose();
        let context_grad = encoder.mixer.transpose() * &sum_grad;
        // c = (1/L) Σ_l g_l e_l
        for (pos, &row) in cache.token_rows.iter().enumerate() {
            let gpos = pos.min(MAX_POSITIONS - 1);
            let embed_row = encoder.embed.row(row).transpose();
            self.gains[gpos] += context_grad.dot(&embed_row) / len;
            let row_grad = &output_grads[pos] + (encoder.gain(pos) / len) * &context_grad;
            for d in 0..encoder.dim() {
                self.embed[(row, d)] += row_grad[d];
            }
        }
    }
}

/// Mean of the contextual vectors over the predicate token span (the raw
/// predicate representation before projection).
pub fn predicate_repr(contextual: &[DVector<f64>], span: &Range<usize>) -> Result<DVector<f64>> {
    if span.is_empty() || span.end > contextual.len() {
        return Err(VrdError::Contract(format!(
            "predicate span {span:?} invalid for {} contextual vectors",
            contextual.len()
        )));
    }
    let dim = contextual[0].len();
    let mut mean = DVector::zeros(dim);
    for vector in &contextual[span.clone()] {
        mean += vector;
    }
    Ok(mean / span.len() as f64)
}

/// The linear projection taking raw predicate vectors (width D_t) to the
/// pair-feature width H.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// H × D_t.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Projection {
    pub fn seeded(h: usize, d_t: usize, seed: u64) -> Projection {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d_t as f64).sqrt();
        Projection {
            w: DMatrix::from_fn(h, d_t, |_, _| standard_normal(&mut rng) * scale),
            b: DVector::zeros(h),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    /// p = W·raw + b.
    pub fn project(&self, raw: &DVector<f64>) -> Result<DVector<f64>> {
        if raw.len() != self.input_dim() {
            return Err(VrdError::Contract(format!(
                "projection expects input of dimension {}, got {}",
                self.input_dim(),
                raw.len()
            )));
        }
        Ok(&self.w * raw + &self.b)
    }
}

/// Static-word-vector predicate representation: mean of the predicate
/// tokens' frozen embeddings, then the shared projection.
pub fn static_repr(
    predicate: &str,
    table: &TokenEmbeddingTable,
    projection: &Projection,
) -> Result<DVector<f64>> {
    let tokens = tokenize(&predicate.replace('_', " "));
    if tokens.is_empty() {
        return Err(VrdError::Contract(format!(
            "predicate {predicate:?} has no tokens"
        )));
    }
    let mut mean = DVector::zeros(table.dim());
    for token in &tokens {
        mean += table.vector(token);
    }
    mean /= tokens.len() as f64;
    projection.project(&mean)
}

/// Raw (unprojected) static mean vector for a predicate.
pub fn static_raw(predicate: &str, table: &TokenEmbeddingTable) -> Result<DVector<f64>> {
    let tokens = tokenize(&predicate.replace('_', " "));
    if tokens.is_empty() {
        return Err(VrdError::Contract(format!(
            "predicate {predicate:?} has no tokens"
        )));
    }
    let mut mean = DVector::zeros(table.dim());
    for token in &tokens {
        mean += table.vector(token);
    }
    Ok(mean / tokens.len() as f64)
}

/// Every token the prompt pipeline can produce for the given classes and
/// relations: class tokens, relation tokens, the templates' literal words,
/// and the no-relation label's tokens.
pub fn prompt_vocabulary(class_names: &[String], relation_names: &[String]) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    for name in class_names.iter().chain(relation_names.iter()) {
        for token in tokenize(&name.replace('_', " ")) {
            seen.insert(token);
        }
    }
    for kind in TemplateKind::ALL {
        let mut pattern = kind.pattern().to_string();
        for slot in ["⟨S⟩", "⟨O⟩", "⟨P⟩"] {
            pattern = pattern.replace(slot, " ");
        }
        for token in tokenize(&pattern) {
            seen.insert(token);
        }
    }
    for token in tokenize(&crate::NO_RELATION.replace('_', " ")) {
        seen.insert(token);
    }
    seen.into_iter().collect()
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms give one normal draw.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn triplet_template_matches_published_example() {
        let t = PromptTemplate::new(TemplateKind::Triplet);
        assert_eq!(t.fill("dog", "apple", "eating"), "dog is eating apple");
    }

    #[test]
    fn cloze_template_matches_published_example() {
        let t = PromptTemplate::new(TemplateKind::Cloze);
        assert_eq!(
            t.fill("dog", "apple", "eating"),
            "The relationship between dog and apple is eating"
        );
    }

    #[test]
    fn t5_template_matches_published_example() {
        let t = PromptTemplate::new(TemplateKind::T5Style);
        assert_eq!(t.fill("dog", "apple", "eating"), "dog and apple are eating.");
    }

    #[test]
    fn underscores_become_spaces() {
        let t = PromptTemplate::new(TemplateKind::Triplet);
        let (prompt, span) = t.fill_with_span("sign", "pole", "hanging_from");
        assert_eq!(prompt, "sign is hanging from pole");
        assert_eq!(span, 2..4);
    }

    #[test]
    fn spans_locate_the_predicate_tokens() {
        for kind in [TemplateKind::Cloze, TemplateKind::T5Style, TemplateKind::Triplet] {
            let t = PromptTemplate::new(kind);
            let (prompt, span) = t.fill_with_span("dog", "apple", "eating");
            let tokens = tokenize(&prompt);
            assert_eq!(&tokens[span.clone()], &["eating".to_string()], "{kind:?}");
        }
    }

    #[test]
    fn filling_is_injective_on_fixture_inputs() {
        let classes = ["dog", "cat", "apple", "sofa", "man"];
        let predicates = ["eating", "on", "holding", "sitting on"];
        for kind in [TemplateKind::Cloze, TemplateKind::T5Style, TemplateKind::Triplet] {
            let t = PromptTemplate::new(kind);
            let mut seen = std::collections::BTreeMap::new();
            for s in classes {
                for o in classes {
                    for p in predicates {
                        let prompt = t.fill(s, o, p);
                        if let Some(prev) = seen.insert(prompt.clone(), (s, o, p)) {
                            panic!("{kind:?}: {prompt:?} produced by {prev:?} and {:?}", (s, o, p));
                        }
                    }
                }
            }
        }
    }

    fn small_table(seed: u64) -> TokenEmbeddingTable {
        let tokens: Vec<String> = ["dog", "cat", "apple", "eating", "on", "is", "the", "and"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        TokenEmbeddingTable::seeded(&tokens, 4, seed)
    }

    #[test]
    fn identity_initialized_encoder_returns_embeddings() {
        let table = small_table(3);
        let encoder = ContextEncoder::from_table(&table);
        let out = encoder.encode_prompt("dog");
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out[0], table.vector("dog"), epsilon = 1e-15);
    }

    #[test]
    fn permuting_tokens_changes_some_output() {
        let table = small_table(7);
        let mut encoder = ContextEncoder::from_table(&table);
        // non-degenerate mixing parameters
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        encoder.mixer = DMatrix::from_fn(4, 4, |_, _| standard_normal(&mut rng));
        encoder.gains = DVector::from_fn(MAX_POSITIONS, |i, _| 1.0 + 0.1 * i as f64);

        let a = encoder.encode_prompt("dog eating apple");
        let b = encoder.encode_prompt("apple eating dog");
        let differs = a
            .iter()
            .zip(b.iter())
            .any(|(x, y)| (x - y).norm() > 1e-9);
        assert!(differs, "token order left every output vector unchanged");
    }

    #[test]
    fn oov_tokens_fall_back() {
        let table = small_table(5);
        let encoder = ContextEncoder::from_table(&table);
        let out = encoder.encode_prompt("qwzx");
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out[0], table.vector(UNK_TOKEN), epsilon = 1e-15);
    }

    #[test]
    fn predicate_repr_of_single_token_is_that_vector() {
        let v = vec![DVector::from_vec(vec![1.0, 2.0])];
        let r = predicate_repr(&v, &(0..1)).unwrap();
        assert_eq!(r, v[0]);
    }

    #[test]
    fn predicate_repr_is_the_mean() {
        let v = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        ];
        let r = predicate_repr(&v, &(0..2)).unwrap();
        assert_eq!(r, DVector::from_vec(vec![0.5, 0.5]));
    }

    #[test]
    fn predicate_repr_three_token_oracle() {
        let v = vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![3.0, 5.0]),
            DVector::from_vec(vec![5.0, 8.0]),
        ];
        // independent summation: (1+3+5)/3, (2+5+8)/3
        let r = predicate_repr(&v, &(0..3)).unwrap();
        assert_relative_eq!(r, DVector::from_vec(vec![3.0, 5.0]), epsilon = 1e-15);
    }

    #[test]
    fn predicate_repr_rejects_empty_span() {
        let v = vec![DVector::from_vec(vec![1.0])];
        assert!(predicate_repr(&v, &(1..1)).is_err());
        assert!(predicate_repr(&v, &(0..2)).is_err());
    }

    #[test]
    fn projection_identity_and_constant_cases() {
        let identity = Projection {
            w: DMatrix::identity(3, 3),
            b: DVector::zeros(3),
        };
        let raw = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(identity.project(&raw).unwrap(), raw);

        let constant = Projection {
            w: DMatrix::zeros(2, 3),
            b: DVector::from_vec(vec![4.0, -1.0]),
        };
        assert_eq!(
            constant.project(&raw).unwrap(),
            DVector::from_vec(vec![4.0, -1.0])
        );
    }

    #[test]
    fn projection_random_case_matches_manual_product() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let b = DVector::from_vec(vec![0.1, -0.2]);
        let proj = Projection { w, b };
        let raw = DVector::from_vec(vec![2.0, -1.0, 0.5]);
        // by hand: [1*2 + 2*(-1) + 3*0.5 + 0.1, -1*2 + 0.5*(-1) + 2*0.5 - 0.2]
        let expect = DVector::from_vec(vec![1.6, -1.7]);
        assert_relative_eq!(proj.project(&raw).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn projection_rejects_dimension_mismatch() {
        let proj = Projection {
            w: DMatrix::zeros(2, 3),
            b: DVector::zeros(2),
        };
        assert!(proj.project(&DVector::zeros(4)).is_err());
    }

    #[test]
    fn static_repr_single_token_identity_projection() {
        let table = small_table(9);
        let proj = Projection {
            w: DMatrix::identity(4, 4),
            b: DVector::zeros(4),
        };
        let got = static_repr("eating", &table, &proj).unwrap();
        assert_relative_eq!(got, table.vector("eating"), epsilon = 1e-15);
    }

    #[test]
    fn static_repr_mean_of_equal_vectors_is_that_vector() {
        let table = small_table(9);
        let proj = Projection {
            w: DMatrix::identity(4, 4),
            b: DVector::zeros(4),
        };
        let got = static_repr("eating_eating", &table, &proj).unwrap();
        assert_relative_eq!(got, table.vector("eating"), epsilon = 1e-14);
    }

    #[test]
    fn static_repr_oracle_mean_plus_projection() {
        let table = small_table(13);
        let proj = Projection::seeded(3, 4, 21);
        let mean = (table.vector("dog") + table.vector("on")) / 2.0;
        let expect = &proj.w * &mean + &proj.b;
        let got = static_repr("dog_on", &table, &proj).unwrap();
        assert_relative_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn table_file_round_trip() {
        let table = small_table(17);
        let text = table.to_table_string();
        let parsed = TokenEmbeddingTable::parse(&text).unwrap();
        assert_eq!(parsed.dim(), table.dim());
        for token in table.vocab().keys() {
            assert_relative_eq!(parsed.vector(token), table.vector(token), epsilon = 1e-12);
        }
    }

    #[test]
    fn table_parse_errors_name_lines() {
        let err = TokenEmbeddingTable::parse("D_t=2\ndog\t1.0\n").unwrap_err();
        match err {
            VrdError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn class_pair_conditioning_changes_predicate_vector() {
        // The contextual path must produce different p_k when only the
        // classes change, for trained (non-degenerate) mixing parameters.
        let tokens: Vec<String> = ["dog", "cat", "apple", "bone", "eating", "is", "the", "and"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let table = TokenEmbeddingTable::seeded(&tokens, 6, 23);
        let mut encoder = ContextEncoder::from_table(&table);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        encoder.mixer = DMatrix::from_fn(6, 6, |_, _| standard_normal(&mut rng) * 0.5);

        let template = PromptTemplate::new(TemplateKind::Triplet);
        let proj = Projection::seeded(4, 6, 31);

        let repr = |s: &str, o: &str| {
            let (prompt, span) = template.fill_with_span(s, o, "eating");
            let outputs = encoder.encode_prompt(&prompt);
            proj.project(&predicate_repr(&outputs, &span).unwrap()).unwrap()
        };
        let a = repr("dog", "apple");
        let b = repr("cat", "bone");
        assert!((a - b).norm() > 1e-9, "predicate vector ignored the class pair");
    }
}
