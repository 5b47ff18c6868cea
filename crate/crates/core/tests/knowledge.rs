use std::cell::Cell;

use pods::encoding::Vocabulary;
use pods::knowledge::{ingest, FactCache, PosLexicon, PosTag, RelationMap, RetrievalConfig};
use pods::numerics::Tensor;
use proptest::prelude::*;

const WORDS: &[&str] = &["bike", "street", "car", "road", "virus", "disease", "fast", "ride", "the", "quickly"];
const RELATIONS: &[&str] = &["atlocation", "causes", "isa", "/r/CapableOf", "hasproperty"];

fn vocab() -> Vocabulary {
    let rel = RelationMap::default();
    let mut texts: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
    texts.extend(rel.surfaces().iter().map(|s| s.to_string()));
    Vocabulary::build(texts)
}

type Triple = (usize, usize, usize, u8);

fn store_text(triples: &[Triple]) -> String {
    triples
        .iter()
        .map(|&(r, h, t, w)| format!("{}\t{}\t{}\t{}\n", RELATIONS[r], WORDS[h], WORDS[t], f64::from(w) / 2.0))
        .collect()
}

/// Linear scan: every kept fact whose head or tail equals a query word of
/// an allowed tag, weight-descending, ties by position.
fn brute_force(kept: &[(usize, usize, f64)], query: &[&str], tags: &[PosTag], filter: &[PosTag], p: usize) -> Vec<usize> {
    let stop = ["the", "a", "an", "of", "to", "in", "on", "at", "for", "and", "or", "is", "be"];
    let keys: Vec<&str> = query
        .iter()
        .zip(tags)
        .filter(|(w, t)| filter.contains(t) && !stop.contains(w))
        .map(|(w, _)| *w)
        .collect();
    let mut ids: Vec<usize> = (0..kept.len())
        .filter(|&i| keys.contains(&WORDS[kept[i].0]) || keys.contains(&WORDS[kept[i].1]))
        .collect();
    ids.sort_by(|&a, &b| kept[b].2.partial_cmp(&kept[a].2).unwrap().then(a.cmp(&b)));
    ids.truncate(p);
    ids
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn retrieval_matches_a_linear_scan(
        triples in prop::collection::vec((0..RELATIONS.len(), 0..WORDS.len(), 0..WORDS.len(), 0u8..8), 0..25),
        query in prop::collection::vec(0..WORDS.len(), 0..6),
        p in 0usize..12,
    ) {
        let v = vocab();
        let cfg = RetrievalConfig::default();
        let out = ingest(&store_text(&triples), "gen", &v, &RelationMap::default(), &cfg);
        prop_assert!(out.malformed.is_empty());
        let kept: Vec<(usize, usize, f64)> = triples
            .iter()
            .filter(|t| f64::from(t.3) / 2.0 >= cfg.weight_threshold)
            .map(|&(_, h, t, w)| (h, t, f64::from(w) / 2.0))
            .collect();
        prop_assert_eq!(out.store.len(), kept.len());
        prop_assert_eq!(out.below_threshold, triples.len() - kept.len());

        let words: Vec<&str> = query.iter().map(|&i| WORDS[i]).collect();
        let toks: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        let tags = PosLexicon::default().tag(&toks);
        let got = out.store.retrieve(&toks, &tags, &cfg.pos_filter, p).unwrap();
        prop_assert_eq!(got, brute_force(&kept, &words, &tags, &cfg.pos_filter, p));
    }

    #[test]
    fn ingestion_is_deterministic(
        triples in prop::collection::vec((0..RELATIONS.len(), 0..WORDS.len(), 0..WORDS.len(), 0u8..8), 0..25),
    ) {
        let v = vocab();
        let text = store_text(&triples);
        let cfg = RetrievalConfig::default();
        let a = ingest(&text, "gen", &v, &RelationMap::default(), &cfg);
        let b = ingest(&text, "gen", &v, &RelationMap::default(), &cfg);
        prop_assert_eq!(&a.store, &b.store);
        for f in a.store.facts() {
            prop_assert!(f.weight >= cfg.weight_threshold);
        }
    }
}

#[test]
fn heavier_fact_wins_the_first_slot() {
    let v = vocab();
    let text = "/r/AtLocation\tcar\troad\t3.0\n/r/AtLocation\tbike\tstreet\t2.0\ncauses\tvirus\tdisease\t1.5\n";
    let store = ingest(text, "mem", &v, &RelationMap::default(), &RetrievalConfig::default()).store;
    let toks: Vec<String> = ["ride", "the", "bike"].iter().map(|s| s.to_string()).collect();
    let tags = PosLexicon::default().tag(&toks);
    let got = store.retrieve(&toks, &tags, &RetrievalConfig::default().pos_filter, 5).unwrap();
    assert_eq!(got, vec![1]);
    assert_eq!(store.fact(1).surface, "bike at location street");
}

#[test]
fn malformed_lines_are_reported_with_their_line_numbers() {
    let v = vocab();
    let text = "causes\tvirus\tdisease\n\ncauses\tvirus\tdisease\tnan\ncauses\t\tdisease\t2\ncauses\tvirus\tdisease\t2\n";
    let out = ingest(text, "mem", &v, &RelationMap::default(), &RetrievalConfig::default());
    assert_eq!(out.store.len(), 1);
    let lines: Vec<String> = out.malformed.iter().map(|e| e.to_string()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains('1') && lines[1].contains('3') && lines[2].contains('4'));
}

#[test]
fn fact_cache_computes_each_fact_once_per_version() {
    let cache = FactCache::new(7);
    let calls = Cell::new(0);
    let compute = |x: f64| {
        calls.set(calls.get() + 1);
        Ok(Tensor::row(vec![x]))
    };
    let a = cache.get_or_compute(3, || compute(1.0)).unwrap();
    let b = cache.get_or_compute(3, || compute(2.0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(calls.get(), 1);
    cache.get_or_compute(4, || compute(2.0)).unwrap();
    assert_eq!((calls.get(), cache.len(), cache.version()), (2, 2, 7));
    assert!(cache.get_or_compute(5, || Err(pods::Error::Empty("x"))).is_err());
    assert_eq!(cache.len(), 2);
}
