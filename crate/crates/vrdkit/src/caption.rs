//! Rule-based extraction of subject-predicate-object triplets from image
//! captions.
//!
//! The extractor works in three stages: tokenize, tag against a plain-text
//! lexicon with suffix fallbacks, then match a closed set of flat patterns
//! over chunked tokens:
//!
//! (a) `NP  V(+ADP)  NP` — verbal relation; auxiliaries are absorbed into the
//!     predicate with underscore joining (`is_eating`), and a preposition
//!     directly after the verb is absorbed when an NP follows (`sits_on`).
//! (b) `NP  ADP  NP` — prepositional relation.
//! (c) a later verb phrase attaches to a preceding NP head: participial verb
//!     groups (`-ing`/`-ed`, no auxiliary) attach to the nearest preceding NP,
//!     while tensed verb groups hop over `NP (ADP|VG) NP` modifier chains back
//!     to the head of the chain, so in "a dog on the sofa is eating an apple"
//!     the subject of `is_eating` is `dog`, not `sofa`.
//!
//! Noun phrases reduce to their head noun (last noun of the chunk) with
//! simple plural stripping. Extraction is a pure function of
//! `(caption, lexicon)`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::error::{Result, VrdError};

/// A raw caption record.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Caption {
    pub id: String,
    pub text: String,
}

/// Closed part-of-speech tag set used by the rule patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Noun,
    Verb,
    /// Preposition.
    Adp,
    Det,
    Adj,
    /// Auxiliary ("is", "are", ...). Never a predicate on its own.
    Aux,
    Other,
}

impl Tag {
    fn parse(s: &str) -> Option<Tag> {
        match s {
            "NOUN" => Some(Tag::Noun),
            "VERB" => Some(Tag::Verb),
            "ADP" => Some(Tag::Adp),
            "DET" => Some(Tag::Det),
            "ADJ" => Some(Tag::Adj),
            "AUX" => Some(Tag::Aux),
            "OTHER" => Some(Tag::Other),
            _ => None,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tag::Noun => "NOUN",
            Tag::Verb => "VERB",
            Tag::Adp => "ADP",
            Tag::Det => "DET",
            Tag::Adj => "ADJ",
            Tag::Aux => "AUX",
            Tag::Other => "OTHER",
        };
        f.write_str(s)
    }
}

/// A lowercase surface token with its tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedToken {
    pub surface: String,
    pub tag: Tag,
}

/// One extracted subject-relation-object triplet.
///
/// Predicate tokens are joined by underscores (`is_eating`, `sits_on`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExtractedTriplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    /// Caption id this triplet came from.
    pub source: String,
}

/// Word -> tag map with suffix fallback rules for unknown tokens.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: std::collections::HashMap<String, Tag>,
}

impl Lexicon {
    /// The lexicon bundled with the crate, adequate for caption-register
    /// English and all fixtures.
    pub fn embedded() -> Lexicon {
        Lexicon::parse(include_str!("../assets/lexicon.tsv"))
            .expect("embedded lexicon is well-formed")
    }

    /// Load a `word<TAB>TAG` lexicon file.
    pub fn from_path(path: &Path) -> Result<Lexicon> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            VrdError::Config(format!("cannot read lexicon {}: {e}", path.display()))
        })?;
        Lexicon::parse(&text)
    }

    /// Parse lexicon text; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Lexicon> {
        let mut entries = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (word, tag) = match (parts.next(), parts.next()) {
                (Some(w), Some(t)) => (w, t),
                _ => {
                    return Err(VrdError::Parse {
                        line: i + 1,
                        message: format!("lexicon line not 'word<TAB>TAG': {line:?}"),
                    })
                }
            };
            let tag = Tag::parse(tag).ok_or_else(|| VrdError::Parse {
                line: i + 1,
                message: format!("unknown tag {tag:?}"),
            })?;
            entries.insert(word.to_lowercase(), tag);
        }
        Ok(Lexicon { entries })
    }

    pub fn lookup(&self, word: &str) -> Option<Tag> {
        self.entries.get(word).copied()
    }

    fn is_noun(&self, word: &str) -> bool {
        self.lookup(word) == Some(Tag::Noun)
    }

    /// Tag one token: lexicon lookup, then suffix fallbacks
    /// (`-ing` -> VERB, `-s` over a known noun stem -> NOUN), else OTHER.
    pub fn tag(&self, token: &str) -> Tag {
        if let Some(tag) = self.lookup(token) {
            return tag;
        }
        if token.len() > 4 && token.ends_with("ing") {
            return Tag::Verb;
        }
        if token.len() > 2 && token.ends_with('s') {
            let stem = strip_plural(token, self);
            if stem != token && self.is_noun(&stem) {
                return Tag::Noun;
            }
        }
        Tag::Other
    }
}

/// Lowercase and split on whitespace and punctuation; punctuation is
/// discarded. An empty result is valid, not an error.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Tag every token exactly once.
pub fn tag_tokens(tokens: &[String], lexicon: &Lexicon) -> Vec<TaggedToken> {
    tokens
        .iter()
        .map(|t| TaggedToken {
            surface: t.clone(),
            tag: lexicon.tag(t),
        })
        .collect()
}

/// Singular form of a head noun: `-es` is stripped when the stem is a known
/// noun, then a bare `-s` is stripped unless the word ends in `ss`/`us`/`is`.
fn strip_plural(word: &str, lexicon: &Lexicon) -> String {
    if word.len() > 3 && word.ends_with("es") {
        let stem = &word[..word.len() - 2];
        if lexicon.is_noun(stem) {
            return stem.to_string();
        }
    }
    if word.len() > 2
        && word.ends_with('s')
        && !word.ends_with("ss")
        && !word.ends_with("us")
        && !word.ends_with("is")
    {
        return word[..word.len() - 1].to_string();
    }
    word.to_string()
}

/// Reduce a noun-phrase span to its normalized head: the last NOUN token,
/// lowercased, with plural stripping. Errors when the span has no noun.
pub fn normalize_phrase(span: &[TaggedToken], lexicon: &Lexicon) -> Result<String> {
    let head = span
        .iter()
        .rev()
        .find(|t| t.tag == Tag::Noun)
        .ok_or_else(|| VrdError::Contract("noun phrase span contains no NOUN".into()))?;
    Ok(strip_plural(&head.surface, lexicon))
}

#[derive(Debug, Clone, PartialEq)]
enum Chunk {
    /// Noun phrase, reduced to its normalized head noun.
    Np { head: String },
    /// Verb group: predicate tokens (aux + verb + absorbed preposition).
    /// `participial` marks `-ing`/`-ed` groups with no auxiliary, which
    /// attach to the nearest preceding NP instead of the chain head.
    Vg {
        predicate: Vec<String>,
        participial: bool,
    },
    /// Standalone preposition.
    Adp { word: String },
    Other,
}

/// Chunk a tagged token sequence into NP / VG / ADP / OTHER units.
fn chunk(tagged: &[TaggedToken], lexicon: &Lexicon) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < tagged.len() {
        match tagged[i].tag {
            Tag::Det | Tag::Adj | Tag::Noun => {
                let start = i;
                while i < tagged.len() && matches!(tagged[i].tag, Tag::Det | Tag::Adj | Tag::Noun)
                {
                    i += 1;
                }
                match normalize_phrase(&tagged[start..i], lexicon) {
                    Ok(head) => chunks.push(Chunk::Np { head }),
                    Err(_) => chunks.push(Chunk::Other), // determiner/adjective run without a noun
                }
            }
            Tag::Aux | Tag::Verb => {
                let mut predicate = Vec::new();
                let mut has_aux = false;
                while i < tagged.len() && tagged[i].tag == Tag::Aux {
                    predicate.push(tagged[i].surface.clone());
                    has_aux = true;
                    i += 1;
                }
                if i < tagged.len() && tagged[i].tag == Tag::Verb {
                    let verb = tagged[i].surface.clone();
                    i += 1;
                    // Absorb a following preposition into the predicate when a
                    // noun phrase comes right after it ("sits on the table").
                    if i < tagged.len()
                        && tagged[i].tag == Tag::Adp
                        && np_follows(&tagged[i + 1..])
                    {
                        predicate.push(verb.clone());
                        predicate.push(tagged[i].surface.clone());
                        i += 1;
                    } else {
                        predicate.push(verb.clone());
                    }
                    let participial =
                        !has_aux && (verb.ends_with("ing") || verb.ends_with("ed"));
                    chunks.push(Chunk::Vg {
                        predicate,
                        participial,
                    });
                } else if has_aux {
                    // A bare copula is transparent: "the dog is on the sofa"
                    // reduces to the prepositional pattern.
                    continue;
                }
            }
            Tag::Adp => {
                chunks.push(Chunk::Adp {
                    word: tagged[i].surface.clone(),
                });
                i += 1;
            }
            Tag::Other => {
                chunks.push(Chunk::Other);
                i += 1;
            }
        }
    }
    chunks
}

/// Does the token stream open with a noun phrase (DET/ADJ* run with a noun)?
fn np_follows(rest: &[TaggedToken]) -> bool {
    for t in rest {
        match t.tag {
            Tag::Noun => return true,
            Tag::Det | Tag::Adj => continue,
            _ => return false,
        }
    }
    false
}

/// Resolve the subject NP for a verb group at chunk index `at`.
///
/// Finds the nearest NP to the left; a tensed group then hops over
/// `NP <- (ADP|VG) <- NP` modifier chains to the chain head, so PP objects and
/// participial objects never become subjects of the main verb.
fn resolve_subject(chunks: &[Chunk], at: usize, participial: bool) -> Option<String> {
    let mut q = (0..at).rev().find(|&q| matches!(chunks[q], Chunk::Np { .. }))?;
    if !participial {
        while q >= 2
            && matches!(chunks[q - 1], Chunk::Adp { .. } | Chunk::Vg { .. })
            && matches!(chunks[q - 2], Chunk::Np { .. })
        {
            q -= 2;
        }
    }
    match &chunks[q] {
        Chunk::Np { head } => Some(head.clone()),
        _ => None,
    }
}

/// Apply the rule patterns left to right over a tagged caption. Overlapping
/// matches are all emitted; duplicates within one caption are removed.
pub fn extract_triplets(
    tagged: &[TaggedToken],
    source: &str,
    lexicon: &Lexicon,
) -> Vec<ExtractedTriplet> {
    let chunks = chunk(tagged, lexicon);
    let mut out = BTreeSet::new();
    for (c, item) in chunks.iter().enumerate() {
        match item {
            // pattern (b): NP ADP NP
            Chunk::Adp { word } => {
                if c == 0 || c + 1 >= chunks.len() {
                    continue;
                }
                if let (Chunk::Np { head: subj }, Chunk::Np { head: obj }) =
                    (&chunks[c - 1], &chunks[c + 1])
                {
                    out.insert(ExtractedTriplet {
                        subject: subj.clone(),
                        predicate: word.clone(),
                        object: obj.clone(),
                        source: source.to_string(),
                    });
                }
            }
            // patterns (a) and (c): verb group with a following NP object
            Chunk::Vg {
                predicate,
                participial,
            } => {
                let obj = match chunks.get(c + 1) {
                    Some(Chunk::Np { head }) => head.clone(),
                    _ => continue,
                };
                let Some(subj) = resolve_subject(&chunks, c, *participial) else {
                    continue;
                };
                out.insert(ExtractedTriplet {
                    subject: subj,
                    predicate: predicate.join("_"),
                    object: obj,
                    source: source.to_string(),
                });
            }
            _ => {}
        }
    }
    out.into_iter().collect()
}

/// Tokenize, tag, and extract in one call.
pub fn extract_from_caption(caption: &Caption, lexicon: &Lexicon) -> Vec<ExtractedTriplet> {
    let tokens = tokenize(&caption.text);
    let tagged = tag_tokens(&tokens, lexicon);
    extract_triplets(&tagged, &caption.id, lexicon)
}

/// Read captions from line-delimited JSON (`{"id": ..., "text": ...}`).
pub fn read_captions_jsonl(text: &str) -> Result<Vec<Caption>> {
    let mut captions = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let caption: Caption = serde_json::from_str(line).map_err(|e| VrdError::Parse {
            line: i + 1,
            message: format!("bad caption record: {e}"),
        })?;
        if caption.text.trim().is_empty() {
            return Err(VrdError::Parse {
                line: i + 1,
                message: format!("caption {} has empty text", caption.id),
            });
        }
        captions.push(caption);
    }
    Ok(captions)
}

/// Render triplets as TSV `subject<TAB>predicate<TAB>object<TAB>caption_id`,
/// sorted by (caption id, triplet) for deterministic downstream use.
pub fn triplets_to_tsv(triplets: &[ExtractedTriplet]) -> String {
    let mut rows: Vec<&ExtractedTriplet> = triplets.iter().collect();
    rows.sort_by_key(|t| (&t.source, &t.subject, &t.predicate, &t.object));
    let mut out = String::new();
    for t in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            t.subject, t.predicate, t.object, t.source
        ));
    }
    out
}

/// Parse the TSV form written by [`triplets_to_tsv`].
pub fn triplets_from_tsv(text: &str) -> Result<Vec<ExtractedTriplet>> {
    let mut out = Vec::new();
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
        out.push(ExtractedTriplet {
            subject: fields[0].to_string(),
            predicate: fields[1].to_string(),
            object: fields[2].to_string(),
            source: fields[3].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> Lexicon {
        Lexicon::embedded()
    }

    fn extract(text: &str) -> Vec<(String, String, String)> {
        let caption = Caption {
            id: "t".into(),
            text: text.into(),
        };
        extract_from_caption(&caption, &lex())
            .into_iter()
            .map(|t| (t.subject, t.predicate, t.object))
            .collect()
    }

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(tokenize("A dog."), vec!["a", "dog"]);
    }

    #[test]
    fn tokenize_empty() {
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("..."), Vec::<String>::new());
    }

    #[test]
    fn tokenize_fixture_sentence_has_eleven_tokens() {
        let toks = tokenize("A little cute dog on the sofa is eating an apple");
        assert_eq!(toks.len(), 11);
    }

    #[test]
    fn tag_direct_lookup() {
        let tagged = tag_tokens(&["dog".into()], &lex());
        assert_eq!(tagged[0].tag, Tag::Noun);
    }

    #[test]
    fn tag_ing_suffix_fallback() {
        // Not in the lexicon; the -ing rule fires.
        let tagged = tag_tokens(&["zooming".into()], &lex());
        assert_eq!(tagged[0].tag, Tag::Verb);
    }

    #[test]
    fn tag_plural_noun_fallback() {
        // "sofas" is not in the lexicon but "sofa" is a known noun.
        let tagged = tag_tokens(&["sofas".into()], &lex());
        assert_eq!(tagged[0].tag, Tag::Noun);
    }

    #[test]
    fn tag_unknown_is_other() {
        let tagged = tag_tokens(&["qwzx".into()], &lex());
        assert_eq!(tagged[0].tag, Tag::Other);
    }

    #[test]
    fn tag_fixture_sentence_gold_sequence() {
        // Hand-applied lexicon + suffix rules, recorded before implementation.
        let gold = [
            ("a", Tag::Det),
            ("little", Tag::Adj),
            ("cute", Tag::Adj),
            ("dog", Tag::Noun),
            ("on", Tag::Adp),
            ("the", Tag::Det),
            ("sofa", Tag::Noun),
            ("is", Tag::Aux),
            ("eating", Tag::Verb),
            ("an", Tag::Det),
            ("apple", Tag::Noun),
        ];
        let toks = tokenize("A little cute dog on the sofa is eating an apple");
        let tagged = tag_tokens(&toks, &lex());
        assert_eq!(tagged.len(), gold.len());
        for (got, (surface, tag)) in tagged.iter().zip(gold.iter()) {
            assert_eq!(got.surface, *surface);
            assert_eq!(got.tag, *tag, "tag mismatch for {surface}");
        }
    }

    #[test]
    fn normalize_head_noun() {
        let lex = lex();
        let span = tag_tokens(&tokenize("a little cute dog"), &lex);
        assert_eq!(normalize_phrase(&span, &lex).unwrap(), "dog");
    }

    #[test]
    fn normalize_plural_strip() {
        let lex = lex();
        let span = tag_tokens(&tokenize("dogs"), &lex);
        assert_eq!(normalize_phrase(&span, &lex).unwrap(), "dog");
    }

    #[test]
    fn normalize_compound_plural() {
        let lex = lex();
        let span = tag_tokens(&tokenize("the kitchen tables"), &lex);
        assert_eq!(normalize_phrase(&span, &lex).unwrap(), "table");
    }

    #[test]
    fn normalize_es_plural_with_known_stem() {
        let lex = lex();
        let span = tag_tokens(&tokenize("dishes"), &lex);
        assert_eq!(normalize_phrase(&span, &lex).unwrap(), "dish");
    }

    #[test]
    fn normalize_rejects_nounless_span() {
        let lex = lex();
        let span = tag_tokens(&tokenize("the red"), &lex);
        assert!(normalize_phrase(&span, &lex).is_err());
    }

    #[test]
    fn normalize_is_idempotent_on_fixture_phrases() {
        let lex = lex();
        for phrase in ["dogs", "tables", "dishes", "grass", "children", "bus"] {
            let once = strip_plural(phrase, &lex);
            let twice = strip_plural(&once, &lex);
            assert_eq!(once, twice, "not idempotent for {phrase}");
        }
    }

    #[test]
    fn paper_example_caption_is_exact() {
        let got = extract("A little cute dog on the sofa is eating an apple");
        assert_eq!(
            got,
            vec![
                ("dog".into(), "is_eating".into(), "apple".into()),
                ("dog".into(), "on".into(), "sofa".into()),
            ]
        );
    }

    #[test]
    fn no_pattern_yields_empty() {
        assert!(extract("the red apple").is_empty());
    }

    #[test]
    fn duplicates_within_caption_are_removed() {
        let got = extract("a dog on a mat and a dog on a mat");
        assert_eq!(got, vec![("dog".into(), "on".into(), "mat".into())]);
    }

    #[test]
    fn bare_copula_is_transparent() {
        let got = extract("the dog is on the sofa");
        assert_eq!(got, vec![("dog".into(), "on".into(), "sofa".into())]);
    }

    #[test]
    fn extraction_is_deterministic() {
        let text = "A woman holding an umbrella walks on the street";
        assert_eq!(extract(text), extract(text));
    }

    #[test]
    fn tsv_round_trip() {
        let caption = Caption {
            id: "x".into(),
            text: "A cat sits on a wooden table".into(),
        };
        let triplets = extract_from_caption(&caption, &lex());
        let tsv = triplets_to_tsv(&triplets);
        assert_eq!(triplets_from_tsv(&tsv).unwrap(), triplets);
    }
}
