use adapterbot::adapters::{adapter_forward, AdapterLayer};
use adapterbot::backbone::LN_EPS;
use adapterbot::dialogue::{MetaKnowledge, Triple};
use adapterbot::knowledge::{Document, DocumentIndex, KnowledgeGraph};
use adapterbot::metrics;
use adapterbot::oracles;
use adapterbot::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seq(rng: &mut ChaCha8Rng, max_len: usize, alphabet: u32) -> Vec<u32> {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| rng.random_range(0..alphabet)).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        // Small alphabets so n-gram overlaps actually happen.
        let alphabet = rng.random_range(2..8);
        let n_pairs = rng.random_range(1..5);
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..n_pairs)
            .map(|_| (seq(&mut rng, 12, alphabet), seq(&mut rng, 12, alphabet)))
            .collect();
        let refs: Vec<(&[u32], &[u32])> = pairs.iter().map(|(c, r)| (&c[..], &r[..])).collect();

        for n in 1..=4 {
            let got = metrics::corpus_bleu(&refs, n);
            let want = oracles::metrics::bleu(&pairs, n);
            assert!(close(got, want), "case {case} bleu-{n}: {got} vs {want}");
        }
        let got = metrics::corpus_avg_bleu(&refs);
        let want = oracles::metrics::avg_bleu(&pairs);
        assert!(close(got, want), "case {case} avg_bleu: {got} vs {want}");

        let (c, r) = &pairs[0];
        let got = metrics::unigram_f1(c, r);
        let want = oracles::metrics::unigram_f1(c, r);
        assert!(close(got, want), "case {case} f1: {got} vs {want}");

        let ent_cases: Vec<(Vec<u32>, Vec<Vec<u32>>)> = pairs
            .iter()
            .map(|(c, _)| {
                let k = rng.random_range(0..4);
                let gold = (0..k)
                    .map(|_| {
                        let len = rng.random_range(1..4);
                        (0..len).map(|_| rng.random_range(0..alphabet)).collect()
                    })
                    .collect();
                (c.clone(), gold)
            })
            .collect();
        let ent_refs: Vec<(&[u32], &[Vec<u32>])> =
            ent_cases.iter().map(|(c, g)| (&c[..], &g[..])).collect();
        let got = metrics::entity_f1(&ent_refs);
        let want = oracles::metrics::entity_f1(&ent_cases);
        assert!(close(got, want), "case {case} entity_f1: {got} vs {want}");

        let texts: Vec<Vec<u32>> = pairs.iter().map(|(c, _)| c.clone()).collect();
        let text_refs: Vec<&[u32]> = texts.iter().map(|t| &t[..]).collect();
        for n in 1..=3 {
            let got = metrics::distinct_n(&text_refs, n);
            let want = oracles::metrics::distinct_n(&texts, n);
            assert!(close(got, want), "case {case} dist-{n}: {got} vs {want}");
        }
    }
}

const WORDS: &[&str] = &[
    "river", "stone", "light", "north", "music", "garden", "engine", "paper", "winter", "market",
    "silver", "forest", "harbor", "signal", "cotton", "valley", "bridge", "orbit", "copper", "island",
    "lantern", "meadow", "thunder", "violet", "canyon", "falcon", "glacier", "ember", "prairie", "tide",
];

fn phrase(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn tfidf_top1_matches_exhaustive_scoring() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let docs: Vec<Document> = (0..100)
        .map(|i| {
            let body = phrase(&mut rng, 5, 30);
            Document {
                id: i + 1,
                title: phrase(&mut rng, 1, 2),
                first_paragraph: body.clone(),
                full_text: format!("{body} . {}", phrase(&mut rng, 0, 10)),
            }
        })
        .collect();
    let index = DocumentIndex::build(docs.clone()).unwrap();
    let mut agree = 0;
    for q in 0..50 {
        // Mix of in-vocabulary queries, duplicated documents' text and
        // queries with unknown words.
        let query = match q % 5 {
            0 => docs[rng.random_range(0..docs.len())].title.clone(),
            1 => format!("{} zebra", phrase(&mut rng, 1, 3)),
            2 => "zebra quokka".to_string(),
            _ => phrase(&mut rng, 1, 6),
        };
        let got = index.retrieve(&query, 1).unwrap().first().copied();
        let want = oracles::retrieval::tfidf_top1(&docs, &query);
        match (got, want) {
            (None, None) => agree += 1,
            (Some((gi, gs)), Some((wi, ws))) if gi == wi && (gs - ws).abs() < 1e-9 => agree += 1,
            other => panic!("query {query:?}: {other:?}"),
        }
    }
    assert_eq!(agree, 50);
}

#[test]
fn tfidf_ties_prefer_lower_id() {
    let d = |id, text: &str| Document {
        id,
        title: "same".into(),
        first_paragraph: text.into(),
        full_text: text.into(),
    };
    let docs = vec![d(9, "alpha beta"), d(3, "alpha beta"), d(5, "gamma")];
    let index = DocumentIndex::build(docs.clone()).unwrap();
    assert_eq!(index.retrieve("alpha", 1).unwrap()[0].0, 3);
    assert_eq!(oracles::retrieval::tfidf_top1(&docs, "alpha").unwrap().0, 3);
}

#[test]
fn kg_neighbors_match_adjacency_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // Overlapping multi-word entities exercise the leftmost-longest rule.
    let entities = [
        "new york", "new york city", "york", "paris", "city", "ada lovelace", "lovelace",
        "river stone", "stone", "north", "music hall", "music",
    ];
    let relations = ["located in", "near", "named after", "likes"];
    let mut triples: Vec<Triple> = (0..25)
        .map(|_| {
            Triple::new(
                entities[rng.random_range(0..entities.len())],
                relations[rng.random_range(0..relations.len())],
                entities[rng.random_range(0..entities.len())],
            )
        })
        .collect();
    triples.push(triples[0].clone());
    let graph = KnowledgeGraph::new(triples.clone()).unwrap();
    let fillers = ["tell me about", "what is", "and", "or the", "hmm ,", "?"];
    for u in 0..30 {
        let mut parts = Vec::new();
        for _ in 0..rng.random_range(1..5) {
            if rng.random_bool(0.5) {
                parts.push(fillers[rng.random_range(0..fillers.len())].to_string());
            } else {
                let e = entities[rng.random_range(0..entities.len())];
                parts.push(if rng.random_bool(0.3) { e.to_uppercase() } else { e.to_string() });
            }
        }
        if u == 0 {
            parts = vec!["nothing here".into()];
        }
        let utterance = parts.join(" ");
        assert_eq!(
            graph.match_entities(&utterance),
            oracles::retrieval::matched_entities(&triples, &utterance),
            "{utterance:?}"
        );
        let want = oracles::retrieval::kg_neighbors(&triples, &utterance);
        let got = match graph.neighbors(&utterance) {
            MetaKnowledge::Graph { triples } => triples,
            MetaKnowledge::None => Vec::new(),
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(got, want, "{utterance:?}");
    }
}

#[test]
fn adapter_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(2..24);
        let h = rng.random_range(1..d);
        let n = rng.random_range(1..6);
        let layer = AdapterLayer {
            w_down: Tensor::randn(&[d, h], 0.5, &mut rng),
            w_up: Tensor::randn(&[h, d], 0.5, &mut rng),
            ln_gamma: Tensor::randn(&[d], 1.0, &mut rng),
            ln_beta: Tensor::randn(&[d], 0.3, &mut rng),
        };
        let hidden = Tensor::randn(&[n, d], 1.0, &mut rng);
        let got = adapter_forward(&layer, &hidden).unwrap();
        let want = oracles::adapter::adapter_forward(&layer, &hidden, LN_EPS as f64);
        for (g, w) in got.data().iter().zip(&want) {
            worst = worst.max((*g as f64 - w).abs() / w.abs().max(1.0));
        }
    }
    assert!(worst < 1e-5, "max relative error {worst:e}");
}
