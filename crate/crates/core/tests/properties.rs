//! Property tests for the invariants of the corpus, graph, tape, heads, loss
//! and interpretability layers.

use negograph::config::{Config, Variant};
use negograph::corpus::price::{placeholder_to_price, price_to_placeholder, PLACEHOLDER_UNIT};
use negograph::corpus::{Corpus, LabelVocab, RatioBoundaries, TokenVocab, N_CONTENT_STRATEGIES};
use negograph::gnn::{AttentionTrace, ClusterTrace, EdgeWeight, LayerTrace};
use negograph::graphbuild::{build_graph, extend_graph, GraphNode};
use negograph::heads::{argmax, softmax, StrategyPrediction};
use negograph::interpret::{association_scores, influence_map, LabeledTrace};
use negograph::nd::rng::{stream, Stream};
use negograph::nd::{ParamStore, Tape, Tensor};
use negograph::synth::{self, SynthConfig};
use negograph::train::loss::loss_strategy;
use negograph::train::model_for_corpus;
use proptest::prelude::*;

fn label_sets(max_turns: usize, n_labels: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0..n_labels, 0..4), 1..max_turns)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn graph_edges_follow_turn_order(sets in label_sets(12, 22)) {
        let g = build_graph(&sets, 22).unwrap();
        let nodes = g.nodes();
        for &(s, d) in g.edges() {
            prop_assert!(nodes[s].turn < nodes[d].turn);
        }
        let mut k = vec![0usize; sets.len()];
        for n in nodes {
            k[n.turn] += 1;
        }
        for (i, n) in nodes.iter().enumerate() {
            let before: usize = k[..n.turn].iter().sum();
            let after: usize = k[n.turn + 1..].iter().sum();
            prop_assert_eq!(g.in_degree(i), before);
            prop_assert_eq!(g.out_degree(i), after);
        }
        prop_assert_eq!(g.turns(), sets.len());
    }

    #[test]
    fn extend_equals_rebuild(sets in label_sets(12, 22), next in prop::collection::vec(0usize..22, 0..4)) {
        let g = build_graph(&sets, 22).unwrap();
        let mut all = sets.clone();
        all.push(next.clone());
        prop_assert_eq!(extend_graph(&g, &next).unwrap(), build_graph(&all, 22).unwrap());
    }

    #[test]
    fn placeholder_round_trip(frac in 0.0f64..2.0, listed in 1.0f64..5000.0) {
        let price = frac * listed;
        let tok = price_to_placeholder(price, listed).unwrap();
        let back = placeholder_to_price(&tok, listed).unwrap();
        prop_assert!((back - price).abs() / listed <= PLACEHOLDER_UNIT / 2.0 + 1e-12);
    }

    #[test]
    fn ratio_class_monotone(
        train in prop::collection::vec(-1.0f64..2.0, 5..60),
        a in -2.0f64..3.0,
        b in -2.0f64..3.0,
    ) {
        let bounds = RatioBoundaries::fit(&train).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(bounds.class_of(lo) <= bounds.class_of(hi));
        prop_assert!((1..=5).contains(&bounds.class_of(lo)));
    }

    #[test]
    fn softmax_argmax_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 2..16), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        prop_assert_eq!(argmax(&softmax(&logits)), argmax(&softmax(&shifted)));
        prop_assert!((softmax(&logits).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flipping_one_logit_flips_one_bit(logits in prop::collection::vec(-5.0f64..5.0, 21), j in 0usize..21) {
        prop_assume!(logits[j] != 0.0);
        let before = StrategyPrediction::from_logits(&logits);
        let mut flipped = logits.clone();
        flipped[j] = -flipped[j];
        let after = StrategyPrediction::from_logits(&flipped);
        let diff = before.khot.iter().zip(&after.khot).filter(|(a, b)| a != b).count();
        prop_assert_eq!(diff, 1);
        prop_assert_ne!(before.khot[j], after.khot[j]);
    }

    #[test]
    fn loss_strategy_monotone_in_p(
        probs in prop::collection::vec(0.01f64..0.98, 6),
        target in prop::collection::vec(any::<bool>(), 6),
        j in 0usize..6,
        bump in 0.001f64..0.01,
    ) {
        let delta = vec![2.0; 6];
        let base = loss_strategy(&probs, &target, &delta);
        let mut up = probs.clone();
        up[j] += bump;
        let moved = loss_strategy(&up, &target, &delta);
        if target[j] {
            prop_assert!(moved < base);
        } else {
            prop_assert!(moved > base);
        }
    }

    #[test]
    fn influence_affine_invariant(
        raw in prop::collection::vec(0.001f64..1.0, 1..8),
        scale in 0.1f64..10.0,
        shift in -1.0f64..1.0,
    ) {
        let n = raw.len();
        let trace = |f: &dyn Fn(f64) -> f64| AttentionTrace {
            layers: vec![LayerTrace {
                alpha: raw.iter().enumerate().map(|(s, &w)| EdgeWeight { src: s, dst: n, w: f(w) }).collect(),
                clusters: ClusterTrace { s: vec![], kept: vec![], fitness: vec![] },
            }],
        };
        let a = influence_map(&trace(&|w| w), n).unwrap();
        let b = influence_map(&trace(&|w| scale * w + shift), n).unwrap();
        prop_assert_eq!(a.uninformative, b.uninformative);
        for (x, y) in a.entries.iter().zip(&b.entries) {
            prop_assert!((0.0..=1.0).contains(&x.normalized));
            prop_assert!((x.normalized - y.normalized).abs() < 1e-9);
        }
    }

    #[test]
    fn association_symmetric_in_unit_interval(
        traces in prop::collection::vec(
            (prop::collection::vec(0usize..22, 2..8), prop::collection::vec(0.0f64..1.0, 64)),
            1..6,
        )
    ) {
        let vocab = LabelVocab::strategies();
        let labeled: Vec<LabeledTrace> = traces
            .iter()
            .enumerate()
            .map(|(i, (labels, weights))| {
                let n = labels.len();
                // Zero out roughly a third of the assignments so clusters differ.
                let s: Vec<Vec<f64>> = (0..n)
                    .map(|c| (0..n).map(|m| { let w = weights[(c * n + m) % 64]; if w < 0.33 { 0.0 } else { w } }).collect())
                    .collect();
                LabeledTrace {
                    dialogue: i as u64,
                    nodes: labels.iter().enumerate().map(|(t, &l)| GraphNode { turn: t, label: l }).collect(),
                    trace: AttentionTrace {
                        layers: vec![LayerTrace {
                            alpha: vec![],
                            clusters: ClusterTrace { s, kept: (0..n).collect(), fitness: vec![0.0; n] },
                        }],
                    },
                }
            })
            .collect();
        let table = association_scores(&labeled, &vocab).unwrap();
        for a in 0..vocab.len() {
            prop_assert_eq!(table.score(a, a), None);
            for b in 0..vocab.len() {
                prop_assert_eq!(table.score(a, b), table.score(b, a));
                if let Some(x) = table.score(a, b) {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
            }
        }
    }

    #[test]
    fn filtering_is_monotone(cuts in prop::collection::vec(1usize..9, 30), lo in 0usize..9, hi in 0usize..9) {
        let mut records = synth::generate_records(&SynthConfig { dialogues: 30, turns: 8, ..SynthConfig::default() }).unwrap();
        for (r, &k) in records.iter_mut().zip(&cuts) {
            r.turns.truncate(k);
        }
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let a = Corpus::from_records(&records, lo).unwrap().len();
        let b = Corpus::from_records(&records, hi).unwrap().len();
        prop_assert!(b <= a);
    }

    #[test]
    fn dropout_zero_is_identity(data in prop::collection::vec(-3.0f64..3.0, 12), seed in any::<u64>()) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_vec(3, 4, data).unwrap()).unwrap();
        let mut rng = stream(seed, Stream::Dropout, 0);
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        prop_assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn gradients_add_linearly(w in prop::collection::vec(-1.0f64..1.0, 6), x in prop::collection::vec(-1.0f64..1.0, 6)) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::from_vec(3, 2, w).unwrap());
        let xs = Tensor::from_vec(2, 3, x).unwrap();
        let grad = |which: u8| {
            let mut tape = Tape::new(&store);
            let wv = tape.param(id);
            let xv = tape.constant(xs.clone()).unwrap();
            let z = tape.matmul(xv, wv).unwrap();
            let f = tape.sum(z).unwrap();
            let t = tape.tanh(z).unwrap();
            let g = tape.sum(t).unwrap();
            let out = match which {
                0 => f,
                1 => g,
                _ => tape.add(f, g).unwrap(),
            };
            tape.backward(out).unwrap().get(id).unwrap().clone()
        };
        let (gf, gg, gs) = (grad(0), grad(1), grad(2));
        for i in 0..gs.len() {
            prop_assert!((gf.data()[i] + gg.data()[i] - gs.data()[i]).abs() < 1e-12);
        }
    }
}

fn tiny_model() -> negograph::model::Model {
    let corpus = synth::generate(&SynthConfig { dialogues: 10, turns: 6, ..SynthConfig::default() }).unwrap();
    let mut cfg = Config { variant: Variant::Graph, ..Config::default() };
    let m = &mut cfg.model;
    m.word_embedding = 8;
    m.dialogue_context_embedding = 8;
    m.context_hidden = 8;
    m.hidden_dim = 8;
    m.projection_strategy = 8;
    m.projection_da = 8;
    m.rnn_hidden_size = 8;
    m.decoder_embedding = 4;
    m.decoder_hidden = 8;
    m.max_decode_len = 12;
    model_for_corpus(cfg, &corpus).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decoding_terminates_without_start_token(h in prop::collection::vec(-3.0f64..3.0, 24)) {
        let model = tiny_model();
        prop_assert_eq!(model.h_dim(), 24);
        let out = model.decode(&Tensor::row_vector(h)).unwrap();
        prop_assert!(out.len() <= 12);
        prop_assert!(!out.contains(&TokenVocab::BOS_ID));
    }

    #[test]
    fn prediction_uses_only_the_prefix(seed in 0u64..1000) {
        let model = tiny_model();
        let corpus = synth::generate(&SynthConfig { dialogues: 1, turns: 7, seed, ..SynthConfig::default() }).unwrap();
        let p = model.prepare(&corpus.dialogues[0]);
        let full = model.predict(&p, p.len()).unwrap();
        let short = model.predict(&p, 3).unwrap();
        prop_assert_eq!(&full[..3], &short[..]);
        prop_assert_eq!(full[0].strategies.probs.len(), N_CONTENT_STRATEGIES);
    }
}
