//! Knowledge-augmented few-shot visual relation detection.
//!
//! The pipeline detects subject-predicate-object relations between object
//! pairs in an image from only a handful of labeled examples per
//! relationship, fusing two knowledge sources with a metric classifier:
//!
//! - **Textual knowledge**: predicate representations produced by filling a
//!   prompt template with the object classes and encoding it with a shallow
//!   trainable contextualizer ([`text`]).
//! - **Visual relation knowledge**: a knowledge graph built from caption
//!   triplets ([`caption`], [`kg`]) and encoded by a masked-relation
//!   reconstruction model that yields prior scores for candidate predicates
//!   ([`vrk`]).
//!
//! The classification head ([`fusion`]) encodes an object pair, scores it
//! against each predicate representation with cosine similarity, and blends
//! those metric scores with the knowledge-graph priors through a
//! mixture-of-experts layer. Few-shot training ([`trainer`]), ranking
//! metrics including pair/triplet seen/unseen recall ([`eval`]), dataset and
//! synthetic-benchmark I/O ([`data`]), and run manifests ([`manifest`])
//! round out the toolkit.

pub mod caption;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod kg;
pub mod manifest;
pub mod text;
pub mod trainer;
pub mod vrk;

pub use error::{Result, VrdError};

/// The reserved label for the absence of a relationship between an object
/// pair. Always a member of the candidate predicate set.
pub const NO_RELATION: &str = "no-relation";
