//! Acceptance suite: one PASS/FAIL line per primary criterion, SKIP for optional
//! full-scale checks whose data is absent. Exits non-zero if anything fails.

mod common;

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use kgirnet::dataset::{
    corpus_stats, delexicalize, load_corpus, relexicalize, Domain, Example, Vocabulary, RELATION_PREFIX,
};
use kgirnet::decoder::{beam_search, zero_state, Decoder, GatedDecoder, StepModel};
use kgirnet::embeddings::StaticEmbeddings;
use kgirnet::encoder::{CnnHeadConfig, EncoderKind, EntityHeadKind};
use kgirnet::eval::{bleu, entity_f1, evaluate, load_link_rows, relation_link_accuracy};
use kgirnet::graph::{graph_encode, relation_link, similarity_link, FeatureVector};
use kgirnet::kg::{EntityId, KnowledgeGraph};
use kgirnet::model::{KgirNet, ModelConfig};
use kgirnet::nn::{ParamStore, Tape};
use kgirnet::training::{Preset, TrainConfig, Trainer};
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn random_kg(rng: &mut ChaCha8Rng, entities: usize, relations: usize, triples: usize) -> KnowledgeGraph {
    let mut kg = KnowledgeGraph::new();
    // bounded: small entity/relation counts may not admit `triples` distinct facts
    for _ in 0..triples * 20 {
        if kg.num_triples() == triples {
            break;
        }
        let s = rng.random_range(0..entities);
        let mut o = rng.random_range(0..entities);
        if o == s {
            o = (o + 1) % entities;
        }
        let r = rng.random_range(0..relations);
        kg.insert(&format!("e{s}"), &format!("rel{r}"), &format!("e{o}"));
    }
    kg
}

fn fixed_point() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let start = Instant::now();
    let mut checked = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..25);
        let t = rng.random_range(1..40);
        let kg = random_kg(&mut rng, n, 5, t);
        let center = kg.entity_ids().collect::<Vec<_>>()[rng.random_range(0..kg.num_entities())];
        let sub = kg.k_hop_subgraph(center, rng.random_range(0..4)).unwrap();
        let ones = FeatureVector(vec![1.0; sub.index_size()]);
        let g = graph_encode(&sub, &ones).unwrap();
        if g.0.iter().any(|&v| v != 1.0) {
            return Outcome::Fail(format!("sub-graph of {} elements left the uniform vector", sub.index_size()));
        }
        checked += 1;
    }
    let elapsed = start.elapsed();
    check(
        elapsed < Duration::from_secs(1),
        format!("{checked} random sub-graphs map all-ones to all-ones exactly in {elapsed:?}"),
    )
}

fn linearity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let kg = random_kg(&mut rng, 15, 4, 25);
        let center = EntityId(rng.random_range(0..kg.num_entities() as u32));
        let sub = kg.k_hop_subgraph(center, 2).unwrap();
        let n = sub.index_size();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mixed: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let lhs = graph_encode(&sub, &FeatureVector(mixed)).unwrap();
        let ef = graph_encode(&sub, &FeatureVector(f)).unwrap();
        let eg = graph_encode(&sub, &FeatureVector(g)).unwrap();
        for i in 0..n {
            worst = worst.max((lhs.0[i] - (a * ef.0[i] + b * eg.0[i])).abs());
        }
    }
    check(worst <= 1e-9, format!("max deviation {worst:.2e} over 100 random (f, g, alpha, beta)"))
}

/// Relations reachable within `k` hops, by an independent BFS over the triple list.
fn khop_relations(kg: &KnowledgeGraph, center: EntityId, k: usize) -> BTreeSet<String> {
    let mut adj: HashMap<EntityId, Vec<EntityId>> = HashMap::new();
    for t in kg.triples() {
        adj.entry(t.subject).or_default().push(t.object);
        adj.entry(t.object).or_default().push(t.subject);
    }
    let mut dist = HashMap::from([(center, 0usize)]);
    let mut queue = VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        let d = dist[&u];
        if d == k {
            continue;
        }
        for &v in adj.get(&u).into_iter().flatten() {
            if !dist.contains_key(&v) {
                dist.insert(v, d + 1);
                queue.push_back(v);
            }
        }
    }
    kg.triples()
        .iter()
        .filter(|t| dist.contains_key(&t.subject) && dist.contains_key(&t.object))
        .map(|t| kg.relation_label(t.relation).to_string())
        .collect()
}

fn gate_model(gate: bool) -> (KgirNet, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let kg = random_kg(&mut rng, 60, 14, 70);
    let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_token_stream(words.iter(), &kg, 1);
    let emb = StaticEmbeddings::from_pairs(
        words
            .iter()
            .cloned()
            .chain(kg.relation_ids().map(|r| kg.relation_label(r).to_string()))
            .chain(kg.entity_ids().map(|e| kg.entity_label(e).to_string()))
            .map(|w| (w, (0..6).map(|_| rng.random_range(0.05..1.0)).collect::<Vec<f64>>()))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let entities: BTreeSet<EntityId> = kg.triples().iter().map(|t| t.subject).collect();
    let config = ModelConfig {
        encoder_kind: EncoderKind::Static,
        entity_head: EntityHeadKind::Linear,
        h_dim: 16,
        emb_dim: 8,
        beam_width: 2,
        max_len: 8,
        subgraph_gate: gate,
        ..ModelConfig::default()
    };
    let num_words = vocab.num_words();
    let mut model = KgirNet::new(config, kg, vocab, entities.into_iter().collect(), None, emb, 3).unwrap();
    // push probability mass towards relation tokens and <EOS> so the gate has work to do
    let bias = model
        .params
        .ids()
        .find(|&id| model.params.get(id).name == "decoder.output.bias")
        .unwrap();
    let b = &mut model.params.get_mut(bias).value;
    for j in num_words..b.ncols() {
        b[[0, j]] += 3.0;
    }
    b[[0, 2]] += 2.0;
    (model, words)
}

fn gate_soundness() -> Outcome {
    let count = |gate: bool| {
        let (model, words) = gate_model(gate);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (mut emitted, mut outside) = (0usize, 0usize);
        for _ in 0..500 {
            let query: Vec<String> = (0..rng.random_range(1..6)).map(|_| words.choose(&mut rng).unwrap().clone()).collect();
            let generation = model.generate(&[], &query).unwrap();
            let allowed = khop_relations(&model.kg, generation.entity_id, 2);
            for tok in &generation.intermediate {
                if let Some(label) = tok.strip_prefix(RELATION_PREFIX) {
                    emitted += 1;
                    outside += usize::from(!allowed.contains(label));
                }
            }
        }
        (emitted, outside)
    };
    let (emitted, outside) = count(true);
    let (_, ungated_outside) = count(false);
    check(
        outside == 0 && emitted > 0,
        format!(
            "500 responses, {emitted} relation tokens, {outside} outside the 2-hop sub-graph \
             (same model without the gate: {ungated_outside})"
        ),
    )
}

fn toy_decoder(seed: u64, v: usize, h: usize) -> (ParamStore, Decoder, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, v, 3, h, h, &mut rng);
    // larger output weights give peaked, seed-dependent distributions
    let w = dec.output.weight;
    store.get_mut(w).value.mapv_inplace(|x| x * 4.0);
    let memory = Array2::from_shape_fn((3, h), |_| rng.random_range(-1.0..1.0));
    (store, dec, memory)
}

fn exhaustive<M: StepModel>(model: &M, sos: usize, eos: usize, v: usize, max_len: usize) -> Option<(Vec<usize>, f64)> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![(model.start(), sos, Vec::new(), 0.0f64)];
    while let Some((state, prev, prefix, lp)) = stack.pop() {
        if prefix.len() == max_len {
            continue;
        }
        let (probs, next) = model.step(&state, prev);
        for tok in 0..v {
            if probs[tok] <= 0.0 {
                continue;
            }
            let lp = lp + probs[tok].ln();
            let mut seq = prefix.clone();
            seq.push(tok);
            if tok == eos {
                let better = best.as_ref().is_none_or(|(s, b)| lp > *b || (lp == *b && seq < *s));
                if better {
                    best = Some((seq, lp));
                }
            } else {
                stack.push((next.clone(), tok, seq, lp));
            }
        }
    }
    best
}

fn greedy_oracle<M: StepModel>(model: &M, sos: usize, eos: usize, max_len: usize) -> Vec<usize> {
    let mut state = model.start();
    let mut out = Vec::new();
    let mut prev = sos;
    for _ in 0..max_len {
        let (probs, next) = model.step(&state, prev);
        let mut best = 0;
        for i in 1..probs.len() {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        out.push(best);
        if best == eos {
            break;
        }
        state = next;
        prev = best;
    }
    out
}

fn beam_equivalence() -> Outcome {
    let (v, max_len, sos, eos) = (5, 3, 1, 2);
    let mut exhaustive_ok = 0;
    let mut greedy_ok = 0;
    for seed in 0..50 {
        let (store, dec, memory) = toy_decoder(seed, v, 4);
        let model = GatedDecoder {
            decoder: &dec,
            params: &store,
            memory,
            init: zero_state(4),
            gate: None,
            num_words: v,
        };
        let wide = beam_search(&model, sos, eos, v.pow(max_len as u32), max_len);
        if let Some((seq, lp)) = exhaustive(&model, sos, eos, v, max_len) {
            if wide.finished && wide.tokens == seq && wide.log_prob == lp {
                exhaustive_ok += 1;
            }
        }
        let narrow = beam_search(&model, sos, eos, 1, 6);
        if narrow.tokens == greedy_oracle(&model, sos, eos, 6) {
            greedy_ok += 1;
        }
    }
    check(
        exhaustive_ok == 50 && greedy_ok == 50,
        format!("exhaustive match {exhaustive_ok}/50 (v_od=5, max_len=3, width=125); width 1 = greedy {greedy_ok}/50"),
    )
}

fn entity_f1_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let labels = ["a", "b", "c", "d", "e", "f", "g"];
    let mut mismatches = 0;
    for _ in 0..100 {
        let pick = |rng: &mut ChaCha8Rng, min: usize| -> BTreeSet<String> {
            let n = rng.random_range(min..5);
            (0..n).map(|_| labels.choose(rng).unwrap().to_string()).collect()
        };
        let predicted = pick(&mut rng, 0);
        let gold = pick(&mut rng, 1);
        let hits = labels
            .iter()
            .filter(|l| predicted.contains(**l) && gold.contains(**l))
            .count() as f64;
        let expected = if hits == 0.0 {
            0.0
        } else {
            let p = hits / predicted.len() as f64;
            let r = hits / gold.len() as f64;
            2.0 * p * r / (p + r)
        };
        mismatches += usize::from(entity_f1(&predicted, &gold) != expected);
    }
    let corpus: Vec<Vec<String>> = ["your dinner is on monday at 7pm", "it will be sunny today", "a b c d"]
        .iter()
        .map(|s| common::words(s))
        .collect();
    let self_bleu = bleu(&corpus, &corpus);
    check(
        mismatches == 0 && self_bleu == 100.0,
        format!("{} of 100 set pairs match the brute-force oracle; bleu(c, c) = {self_bleu}", 100 - mismatches),
    )
}

fn gradient_check() -> Outcome {
    let kg = KnowledgeGraph::from_triples([("a", "r1", "b"), ("c", "r2", "d")]);
    let words: Vec<String> = ["x", "y", "z", "w", "v"].iter().map(|s| s.to_string()).collect();
    let vocab = Vocabulary::from_token_stream(words.iter(), &kg, 1);
    let emb = StaticEmbeddings::from_pairs(
        words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), vec![0.3 * i as f64 - 0.5, 0.2, (i as f64).sin(), 0.7])),
    )
    .unwrap();
    let entities = vec![kg.entity("a").unwrap(), kg.entity("c").unwrap()];
    let example = Example {
        dialogue_id: "g".into(),
        history: vec![common::words("v w")],
        query: common::words("x y z"),
        entity: kg.entity("c"),
        relations: BTreeSet::new(),
        response: common::words("y d w"),
        intermediate: common::words("y r:r2 w"),
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for head in [EntityHeadKind::Linear, EntityHeadKind::Cnn] {
        let config = ModelConfig {
            encoder_kind: EncoderKind::Static,
            entity_head: head,
            cnn: CnnHeadConfig {
                filters: 3,
                kernel_sizes: vec![2, 3],
                hidden: 4,
                dropout: 0.1,
            },
            h_dim: 8,
            emb_dim: 4,
            ..ModelConfig::default()
        };
        let mut model = KgirNet::new(config, kg.clone(), vocab.clone(), entities.clone(), None, emb.clone(), 21).unwrap();
        assert_eq!(model.vocab.len(), 12);
        let prepared = model.prepare(&example);
        let grads = {
            let mut tape = Tape::new(&model.params);
            let terms = model.loss_terms(&mut tape, &prepared, None);
            tape.backward(terms.total)
        };
        let loss_at = |m: &KgirNet| {
            let mut tape = Tape::new(&m.params);
            let terms = m.loss_terms(&mut tape, &prepared, None);
            tape.scalar(terms.total)
        };
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let (rows, cols) = model.params.get(id).value.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let orig = model.params.get(id).value[[r, c]];
                    let h = 1e-5;
                    model.params.get_mut(id).value[[r, c]] = orig + h;
                    let plus = loss_at(&model);
                    model.params.get_mut(id).value[[r, c]] = orig - h;
                    let minus = loss_at(&model);
                    model.params.get_mut(id).value[[r, c]] = orig;
                    let numeric = (plus - minus) / (2.0 * h);
                    let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
                    // denominators below 1e-5 are floored: at that size central differences
                    // carry ~1e-10 of rounding noise
                    let scale = numeric.abs().max(analytic.abs()).max(1e-5);
                    worst = worst.max((numeric - analytic).abs() / scale);
                    checked += 1;
                }
            }
        }
    }
    check(
        worst <= 1e-4,
        format!(
            "{checked} parameters (h_dim=8, v_od=12, linear and CNN heads), worst relative error {worst:.2e} \
             (denominator floor 1e-5)"
        ),
    )
}

fn overfit_smoke() -> Outcome {
    let corpus = common::incar();
    let mut config = Preset::NoTransformer.apply(TrainConfig::default());
    config.model.h_dim = 128;
    config.max_steps = Some(300);
    config.epochs = usize::MAX;
    config.skip_validation = true;
    let trainer = Trainer::new(config);
    let start = Instant::now();
    let model = trainer
        .build_model(corpus.kg.clone(), common::embeddings(), &corpus.examples)
        .unwrap();
    let mean_loss = |m: &KgirNet| corpus.examples.iter().map(|e| m.loss(e)).sum::<f64>() / corpus.examples.len() as f64;
    let before = mean_loss(&model);
    let outcome = trainer.train_model(model, &corpus.examples, &[]).unwrap();
    let after = mean_loss(&outcome.model);
    let report = evaluate(&outcome.model, &corpus.examples).unwrap();
    let elapsed = start.elapsed();
    let reduction = 1.0 - after / before;
    let steps = outcome.step_losses.len();
    check(
        corpus.dialogues.len() == 20
            && corpus.kg.num_triples() == 30
            && steps <= 300
            && report.entity_f1 >= 90.0
            && reduction >= 0.9
            && elapsed <= Duration::from_secs(600),
        format!(
            "{} dialogues, {}-triple KG, {steps} steps in {:.0?}: train entity F1 {:.1}, loss {before:.2} -> {after:.2} \
             ({:.1}% reduction)",
            corpus.dialogues.len(),
            corpus.kg.num_triples(),
            elapsed,
            report.entity_f1,
            100.0 * reduction
        ),
    )
}

/// Synthetic simple questions. Relation labels come in confusable sibling pairs; the
/// question's relation cue may lean towards the sibling, while an optional answer-type
/// word matches the gold relation's objects.
struct LinkingSet {
    kg: KnowledgeGraph,
    embeddings: StaticEmbeddings,
    questions: Vec<(Vec<String>, EntityId, String)>,
}

fn linking_set(seed: u64) -> LinkingSet {
    const RELS: usize = 8;
    const DIMS: usize = 2 * RELS + 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sibling = |i: usize| i ^ 1;
    let mut vectors: Vec<(String, Vec<f64>)> = Vec::new();
    let base = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..DIMS).map(|_| rng.random_range(0.01..0.05)).collect() };
    for i in 0..RELS {
        let mut v = base(&mut rng);
        v[i] += 1.0;
        v[sibling(i)] += 0.8;
        vectors.push((format!("rel{i}"), v));
        let mut t = base(&mut rng);
        t[RELS + i] += 1.0;
        vectors.push((format!("type{i}"), t));
        for n in 0..4 {
            let mut o = base(&mut rng);
            o[RELS + i] += 1.0;
            o[2 * RELS + rng.random_range(0..4)] += rng.random_range(0.2..0.6);
            vectors.push((format!("obj{i}x{n}"), o));
        }
    }
    for e in 0..40 {
        let mut v = base(&mut rng);
        for d in 2 * RELS..2 * RELS + 4 {
            v[d] += rng.random_range(0.0..1.0);
        }
        vectors.push((format!("ent{e}"), v));
    }
    for w in ["what", "is", "the", "of", "which"] {
        let mut v = base(&mut rng);
        v[DIMS - 1] += 1.0;
        vectors.push((w.to_string(), v));
    }

    let mut kg = KnowledgeGraph::new();
    for e in 0..40 {
        let mut rels: Vec<usize> = (0..RELS).collect();
        rels.sort_by_key(|_| rng.random_range(0..1000));
        // every entity has at least one sibling pair
        let first = rng.random_range(0..RELS / 2) * 2;
        let mut chosen = vec![first, first + 1];
        chosen.extend(rels.into_iter().filter(|r| *r != first && *r != first + 1).take(2));
        for r in chosen {
            kg.insert(&format!("ent{e}"), &format!("rel{r}"), &format!("obj{r}x{}", rng.random_range(0..4)));
        }
    }

    let mut questions = Vec::new();
    let mut cue_id = 0;
    while questions.len() < 200 {
        let e = rng.random_range(0..40);
        let entity = kg.entity(&format!("ent{e}")).unwrap();
        let rels: Vec<String> = kg
            .outgoing_relations(entity)
            .into_iter()
            .map(|r| kg.relation_label(r).to_string())
            .collect();
        let gold = rels.choose(&mut rng).unwrap().clone();
        let i: usize = gold[3..].parse().unwrap();
        let mut cue = base(&mut rng);
        cue[i] += 1.0;
        cue[sibling(i)] += rng.random_range(0.5..1.3);
        let cue_word = format!("cue{cue_id}");
        cue_id += 1;
        vectors.push((cue_word.clone(), cue));
        let mut q = vec!["what".to_string(), "is".into(), "the".into(), cue_word];
        if rng.random_bool(0.6) {
            q.insert(1, format!("type{i}"));
        }
        q.push("of".into());
        q.push(format!("ent{e}"));
        questions.push((q, entity, gold));
    }
    LinkingSet {
        kg,
        embeddings: StaticEmbeddings::from_pairs(vectors).unwrap(),
        questions,
    }
}

fn relation_linking() -> Outcome {
    let set = linking_set(16);
    let top1 = |ranked: Vec<kgirnet::graph::RankedRelation>, gold: &str| ranked.first().is_some_and(|r| r.label == gold);
    let (mut laplacian, mut baseline) = (0usize, 0usize);
    for (q, e, gold) in &set.questions {
        laplacian += usize::from(top1(relation_link(q, &set.kg, *e, 2, &set.embeddings).unwrap(), gold));
        baseline += usize::from(top1(similarity_link(q, &set.kg, *e, 2, &set.embeddings).unwrap(), gold));
    }
    let n = set.questions.len() as f64;
    let (lap, base) = (100.0 * laplacian as f64 / n, 100.0 * baseline as f64 / n);
    check(
        laplacian > baseline,
        format!("{} questions: Laplacian top-1 {lap:.1}% vs similarity baseline {base:.1}%", set.questions.len()),
    )
}

fn relation_linking_full_scale() -> Outcome {
    let (Ok(tsv), Ok(kg), Ok(emb)) = (
        std::env::var("KGIR_SQB_TSV"),
        std::env::var("KGIR_SQB_KG"),
        std::env::var("KGIR_SQB_EMBEDDINGS"),
    ) else {
        return Outcome::Skip("set KGIR_SQB_TSV, KGIR_SQB_KG and KGIR_SQB_EMBEDDINGS to score the external set".into());
    };
    let kg = KnowledgeGraph::load(kg).unwrap();
    let emb = StaticEmbeddings::load(emb).unwrap();
    let rows = load_link_rows(tsv).unwrap();
    let report = relation_link_accuracy(&rows, &kg, |q, e| relation_link(q, &kg, e, 2, &emb)).unwrap();
    let acc = 100.0 * report.accuracy;
    check((acc - 69.7).abs() <= 1.5, format!("accuracy {acc:.2}% on {} rows (target 69.7 +/- 1.5)", report.total))
}

fn roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let names = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi"];
    let places = ["main_street", "el_camino_real", "the_office", "room_100", "city_hall"];
    let times = ["9am", "noon", "3pm", "7:30pm"];
    let fillers = ["your", "meeting", "is", "with", "at", "in", "and", "ok", "see", "you"];
    let mut identical = 0;
    for i in 0..100 {
        let subject = format!("event_{i}");
        let who = names.choose(&mut rng).unwrap();
        let place = places.choose(&mut rng).unwrap();
        let time = times.choose(&mut rng).unwrap();
        let kg = KnowledgeGraph::from_triples([
            (subject.as_str(), "party", *who),
            (subject.as_str(), "location", *place),
            (subject.as_str(), "time", *time),
        ]);
        let mut response: Vec<String> = Vec::new();
        let mut slots = vec![who.to_string(), place.to_string(), time.to_string()];
        slots.sort_by_key(|_| rng.random_range(0..100));
        for slot in slots.iter().take(rng.random_range(1..4)) {
            for _ in 0..rng.random_range(0..3) {
                response.push(fillers.choose(&mut rng).unwrap().to_string());
            }
            response.extend(slot.split('_').map(String::from));
        }
        response.push(fillers.choose(&mut rng).unwrap().to_string());
        let entity = kg.entity(&subject).unwrap();
        let inter = delexicalize(&response, entity, &kg, None);
        let back = relexicalize(&inter, entity, &kg);
        let has_token = inter.iter().any(|t| t.starts_with(RELATION_PREFIX));
        identical += usize::from(back.tokens == response && back.unresolved.is_empty() && has_token);
    }
    check(identical == 100, format!("{identical}/100 synthesized responses survive delexicalize -> relexicalize"))
}

fn stats_fixture() -> Outcome {
    let kg = KnowledgeGraph::load(common::fixture("incar_kg.tsv")).unwrap();
    let dialogues = load_corpus(common::fixture("incar_stats.jsonl"), Domain::InCar, &kg).unwrap();
    let s = corpus_stats(&dialogues);
    check(
        s.dialogues == 3 && s.utterances == 8 && s.kg_grounded_pct == 75.0,
        format!(
            "3-dialogue fixture: {} dialogues, {} utterances, {:.2}% KG-grounded (expected 3, 8, 75.00)",
            s.dialogues, s.utterances, s.kg_grounded_pct
        ),
    )
}

fn stats_full_scale() -> Outcome {
    let Ok(root) = std::env::var("KGIR_DATA_DIR") else {
        return Outcome::Skip("set KGIR_DATA_DIR to a directory with incar/ and soccer/ corpora".into());
    };
    let root = PathBuf::from(root);
    let expected = [
        ("incar", Domain::InCar, (8561, 271, 36), [(2011, 5528, 44.95), (242, 657, 33.94), (256, 709, 43.84)]),
        ("soccer", Domain::Soccer, (4301, 932, 30), [(1328, 6523, 6.53), (149, 737, 4.61), (348, 1727, 3.88)]),
    ];
    let mut problems = Vec::new();
    for (dir, domain, kg_counts, splits) in expected {
        let kg = match KnowledgeGraph::load(root.join(dir).join("kg.tsv")) {
            Ok(kg) => kg,
            Err(e) => return Outcome::Fail(format!("{dir}: {e}")),
        };
        let got = (kg.num_triples(), kg.num_entities(), kg.num_relations());
        if got != kg_counts {
            problems.push(format!("{dir} KG {got:?} != {kg_counts:?}"));
        }
        for (split, (d, u, pct)) in ["train", "valid", "test"].iter().zip(splits) {
            match load_corpus(root.join(dir).join(format!("{split}.jsonl")), domain, &kg) {
                Ok(ds) => {
                    let s = corpus_stats(&ds);
                    if s.dialogues != d || s.utterances != u || (s.kg_grounded_pct - pct).abs() > 0.005 {
                        problems.push(format!(
                            "{dir}/{split}: ({}, {}, {:.2}) != ({d}, {u}, {pct})",
                            s.dialogues, s.utterances, s.kg_grounded_pct
                        ));
                    }
                }
                Err(e) => problems.push(format!("{dir}/{split}: {e}")),
            }
        }
    }
    check(problems.is_empty(), if problems.is_empty() { "all counts match".into() } else { problems.join("; ") })
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("laplacian fixed point", fixed_point),
        ("laplacian linearity", linearity),
        ("gate soundness", gate_soundness),
        ("beam search equivalence", beam_equivalence),
        ("entity F1 and BLEU oracles", entity_f1_oracle),
        ("gradient checks", gradient_check),
        ("overfit smoke", overfit_smoke),
        ("relation linking vs baseline", relation_linking),
        ("relation linking full scale (optional)", relation_linking_full_scale),
        ("delexicalization roundtrip", roundtrip),
        ("dataset statistics fixture", stats_fixture),
        ("dataset statistics full scale (optional)", stats_full_scale),
    ];
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = 0;
    for (name, run) in criteria {
        if only.as_ref().is_some_and(|o| !name.contains(o.as_str())) {
            continue;
        }
        match run() {
            Outcome::Pass(d) => println!("PASS  {name}: {d}"),
            Outcome::Skip(d) => println!("SKIP  {name}: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
