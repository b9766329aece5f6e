//! The 20-caption gold corpus: expected triplets were derived by hand
//! application of the chunking rules and frozen in `tests/fixtures` before
//! the extractor was written.

use vrdkit::caption::{
    extract_from_caption, read_captions_jsonl, triplets_from_tsv, triplets_to_tsv, Lexicon,
};

const CAPTIONS: &str = include_str!("fixtures/captions_gold.jsonl");
const GOLD: &str = include_str!("fixtures/triplets_gold.tsv");

#[test]
fn gold_corpus_matches_exactly() {
    let lexicon = Lexicon::embedded();
    let captions = read_captions_jsonl(CAPTIONS).unwrap();
    assert_eq!(captions.len(), 20);

    let mut extracted = Vec::new();
    for caption in &captions {
        extracted.extend(extract_from_caption(caption, &lexicon));
    }
    let got = triplets_to_tsv(&extracted);
    assert_eq!(
        got, GOLD,
        "extracted corpus differs from the hand-derived gold fixture"
    );
}

#[test]
fn gold_corpus_per_caption_sets() {
    let lexicon = Lexicon::embedded();
    let captions = read_captions_jsonl(CAPTIONS).unwrap();
    let gold = triplets_from_tsv(GOLD).unwrap();

    for caption in &captions {
        let want: Vec<_> = gold.iter().filter(|t| t.source == caption.id).collect();
        let got = extract_from_caption(caption, &lexicon);
        let got_refs: Vec<_> = got.iter().collect();
        assert_eq!(got_refs, want, "mismatch for caption {}", caption.id);
    }
}
