use proptest::prelude::*;

use segvid_core::data::{
    decode_features, encode_features, format_segment_labels, parse_segment_labels, FrameSequence, SegmentLabel,
};
use segvid_core::ensemble::{ei_closed_form, project_simplex, rank_fusion};
use segvid_core::metrics::{ap_from_relevance, map_at_k, ClassRanking, GroundTruth, StreamingMap};
use segvid_core::netvlad::{self, NetVladConfig};
use segvid_core::{Graph, ParamStore, PredictionTable, SeededRng, Tensor};

type ClassScores = Vec<(u32, Vec<(String, f64)>)>;

/// Per-class scores over segments `s0..sN` plus the positive set, drawn from a coarse grid so ties occur.
fn ranking_case() -> impl Strategy<Value = (ClassScores, GroundTruth)> {
    (1usize..5, 1usize..30).prop_flat_map(|(classes, segs)| {
        let cells = proptest::collection::vec((0u8..8, any::<bool>(), prop::bool::weighted(0.8)), classes * segs);
        cells.prop_map(move |cells| {
            let mut truth = GroundTruth::new();
            let mut out = Vec::new();
            for c in 0..classes {
                let mut items = Vec::new();
                for s in 0..segs {
                    let (score, pos, present) = cells[c * segs + s];
                    let id = format!("s{s:02}");
                    if present {
                        items.push((id.clone(), f64::from(score) / 8.0));
                    }
                    if pos {
                        truth.add(c as u32, id);
                    }
                }
                out.push((c as u32, items));
            }
            (out, truth)
        })
    })
}

fn rankings(cases: &[(u32, Vec<(String, f64)>)]) -> Vec<ClassRanking> {
    cases.iter().map(|(c, v)| ClassRanking::new(*c, v.clone()).unwrap()).collect()
}

proptest! {
    #[test]
    fn ap_is_a_probability(rel in proptest::collection::vec(any::<bool>(), 1..40), extra in 0usize..5, k in 1usize..50) {
        let positives = rel.iter().filter(|&&r| r).count() + extra;
        if let Some(ap) = ap_from_relevance(&rel, positives, k) {
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }

    #[test]
    fn promoting_a_positive_never_lowers_ap(rel in proptest::collection::vec(any::<bool>(), 2..40), i in 0usize..40, k in 1usize..50) {
        let i = i % (rel.len() - 1);
        prop_assume!(!rel[i] && rel[i + 1]);
        let positives = rel.iter().filter(|&&r| r).count();
        let mut better = rel.clone();
        better.swap(i, i + 1);
        let before = ap_from_relevance(&rel, positives, k).unwrap();
        let after = ap_from_relevance(&better, positives, k).unwrap();
        prop_assert!(after >= before);
    }

    #[test]
    fn streaming_map_equals_batch((cases, truth) in ranking_case(), k in 1usize..40, seed in any::<u64>()) {
        let batch = map_at_k(&rankings(&cases), &truth, k).unwrap();
        // feed in a shuffled order
        let mut flat: Vec<(u32, &str, f64)> = cases.iter().flat_map(|(c, v)| v.iter().map(move |(s, x)| (*c, s.as_str(), *x))).collect();
        let mut rng = SeededRng::new(seed);
        for i in (1..flat.len()).rev() {
            flat.swap(i, rng.below(i + 1));
        }
        let mut stream = StreamingMap::new(k).unwrap();
        for (c, s, x) in flat {
            stream.push(c, s, x).unwrap();
        }
        prop_assert_eq!(stream.finish(&truth), batch);
    }

    #[test]
    fn fusion_ignores_weight_scale((cases, _) in ranking_case(), w in proptest::collection::vec(0.01f64..1.0, 2), scale in 0.1f64..50.0) {
        prop_assume!(cases.len() >= 2);
        let r0 = ClassRanking::new(0, cases[0].1.clone()).unwrap();
        let r1 = ClassRanking::new(0, cases[1].1.clone()).unwrap();
        let pair = [&r0, &r1];
        let a = rank_fusion(&pair, &w).unwrap();
        let b = rank_fusion(&pair, &[w[0] * scale, w[1] * scale]).unwrap();
        prop_assert!(a.segment_ids().eq(b.segment_ids()));
    }

    #[test]
    fn expected_improvement_is_nonnegative(mean in -5.0f64..5.0, var in 0.0f64..4.0, best in -5.0f64..5.0) {
        let ei = ei_closed_form(mean, var, best);
        prop_assert!(ei >= 0.0);
        prop_assert!(ei >= (mean - best).max(0.0) - 1e-12);
    }

    #[test]
    fn simplex_projection_is_a_distribution(w in proptest::collection::vec(-3.0f64..3.0, 1..8)) {
        let p = project_simplex(&w);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(rows, cols, scale, &mut SeededRng::new(seed)));
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        for r in 0..rows {
            let sum: f64 = (0..cols).map(|c| v.at(r, c)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn netvlad_is_permutation_invariant(frames in 1usize..10, seed in any::<u64>()) {
        let cfg = NetVladConfig { input_dim: 4, clusters: 3, hidden: 2, classes: 2, experts: 1 };
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        cfg.init(&mut store, &mut rng);
        let x = Tensor::uniform(frames, 4, 1.0, &mut rng);
        let mut order: Vec<usize> = (0..frames).collect();
        for i in (1..frames).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let data: Vec<f64> = order.iter().flat_map(|&r| (0..4).map(move |c| (r, c))).map(|(r, c)| x.at(r, c)).collect();
        let shuffled = Tensor::matrix(frames, 4, data);
        let a = netvlad::encode_frames(&store, &x, 3).unwrap();
        let b = netvlad::encode_frames(&store, &shuffled, 3).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn feature_files_round_trip(videos in 0usize..4, frames in 1usize..6, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let seqs: Vec<FrameSequence> = (0..videos)
            .map(|i| {
                let labels = (0..rng.below(3)).map(|_| rng.below(50) as u16).collect();
                // samples are stored as f32
                let mut f32s = |cols, scale| {
                    let t = Tensor::uniform(frames, cols, scale, &mut rng);
                    Tensor::matrix(frames, cols, t.data().iter().map(|&v| f64::from(v as f32)).collect())
                };
                let (visual, audio) = (f32s(3, 1e3), f32s(2, 1e-3));
                FrameSequence::new(format!("v{i}"), visual, audio, labels).unwrap()
            })
            .collect();
        let bytes = encode_features(&seqs).unwrap();
        let back = decode_features(&bytes).unwrap();
        prop_assert_eq!(encode_features(&back).unwrap(), bytes);
        prop_assert_eq!(back, seqs);
    }

    #[test]
    fn segment_labels_round_trip(raw in proptest::collection::vec((0usize..5, 0usize..40, 0u16..300, any::<bool>()), 0..20)) {
        let mut labels: Vec<SegmentLabel> = raw
            .into_iter()
            .map(|(v, start, class, positive)| SegmentLabel { video: format!("vid{v}"), start, class, positive })
            .collect();
        labels.sort();
        labels.dedup_by(|a, b| (&a.video, a.start, a.class) == (&b.video, b.start, b.class));
        prop_assert_eq!(parse_segment_labels(&format_segment_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn prediction_tables_round_trip((cases, _) in ranking_case(), seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        // arbitrary bit patterns, not just the coarse grid
        let triples = cases.iter().flat_map(|(c, v)| v.iter().map(|(s, x)| (*c, s.clone(), *x)).collect::<Vec<_>>());
        let triples: Vec<_> = triples.map(|(c, s, x)| (c, s, x + rng.normal() * 1e-9)).collect();
        let table = PredictionTable::from_triples(triples).unwrap();
        let text = table.to_text();
        let back = PredictionTable::parse(&text).unwrap();
        prop_assert_eq!(&back, &table);
        prop_assert_eq!(back.to_text(), text);
    }
}
