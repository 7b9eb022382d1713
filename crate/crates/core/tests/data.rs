use mabsa::data::{
    extract_spans, gen_synthetic, load_jsonl, micro_prf, parse_jsonl, save_jsonl, spans_to_labels, to_jsonl, vocab,
    AspectSpan, Metrics, MultimodalExample, SyntheticConfig,
};
use mabsa::encoders::{ImageEncoderConfig, TextEncoderConfig};
use mabsa::mcl::{BioLabel, Polarity};
use mabsa::Error;
use proptest::prelude::*;
use BioLabel::*;
use Polarity::*;

fn span(start: usize, end: usize, polarity: Polarity) -> AspectSpan {
    AspectSpan { start, end, polarity }
}

fn desk_cfg(n: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig::for_encoders(&TextEncoderConfig::default(), &ImageEncoderConfig::default(), n, seed)
}

// ---- spans --------------------------------------------------------------

#[test]
fn span_extraction_examples() {
    assert_eq!(extract_spans(&[BPos, IPos, O]), vec![span(0, 1, Pos)]);
    assert_eq!(extract_spans(&[INeg]), vec![span(0, 0, Neg)]);
    assert_eq!(
        extract_spans(&[BPos, INeu, O, BNeg]),
        vec![span(0, 0, Pos), span(1, 1, Neu), span(3, 3, Neg)]
    );
    assert_eq!(extract_spans(&[O, O]), vec![]);
    assert_eq!(
        extract_spans(&[BNeu, BNeu, INeu, INeu]),
        vec![span(0, 0, Neu), span(1, 3, Neu)]
    );
    assert_eq!(
        extract_spans(&[IPos, IPos, O, IPos]),
        vec![span(0, 1, Pos), span(3, 3, Pos)]
    );
}

#[test]
fn spans_serialize_back_to_bio() {
    let spans = vec![span(0, 1, Pos), span(3, 3, Neg)];
    assert_eq!(spans_to_labels(&spans, 5), vec![BPos, IPos, O, BNeg, O]);
}

// ---- metrics ------------------------------------------------------------

#[test]
fn perfect_prediction_scores_one() {
    let gold = vec![vec![span(0, 1, Pos)], vec![span(2, 2, Neg), span(4, 5, Neu)]];
    let m = micro_prf(&gold, &gold).unwrap();
    assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    assert_eq!((m.tp, m.n_pred, m.n_gold), (3, 3, 3));
}

#[test]
fn polarity_must_match() {
    let m = micro_prf(&[vec![span(0, 1, Pos)]], &[vec![span(0, 1, Neg)]]).unwrap();
    assert_eq!(m.f1, 0.0);
    assert_eq!(m.tp, 0);
}

#[test]
fn hand_computed_example() {
    let gold = vec![vec![span(0, 1, Pos), span(3, 3, Neg)]];
    let pred = vec![vec![span(0, 1, Pos), span(3, 3, Neu), span(5, 5, Pos)]];
    let m = micro_prf(&gold, &pred).unwrap();
    assert!((m.precision - 1.0 / 3.0).abs() < 1e-15);
    assert!((m.recall - 0.5).abs() < 1e-15);
    assert!((m.f1 - 0.4).abs() < 1e-15);
}

#[test]
fn duplicate_predictions_count_once() {
    let gold = vec![vec![span(0, 0, Pos)]];
    let pred = vec![vec![span(0, 0, Pos), span(0, 0, Pos)]];
    let m = micro_prf(&gold, &pred).unwrap();
    assert_eq!((m.tp, m.n_pred, m.f1), (1, 1, 1.0));
}

#[test]
fn metrics_edge_cases() {
    assert!(matches!(micro_prf(&[vec![]], &[]), Err(Error::Data(_))));
    let none = micro_prf(&[vec![]], &[vec![]]).unwrap();
    assert_eq!(none.f1, 1.0);
    let missed = micro_prf(&[vec![span(0, 0, Pos)]], &[vec![]]).unwrap();
    assert_eq!((missed.precision, missed.recall, missed.f1), (0.0, 0.0, 0.0));
    let spurious = micro_prf(&[vec![]], &[vec![span(0, 0, Pos)]]).unwrap();
    assert_eq!(spurious.f1, 0.0);
}

#[test]
fn metrics_json_has_six_fields() {
    let m = Metrics {
        precision: 0.5,
        recall: 0.25,
        f1: 1.0 / 3.0,
        tp: 1,
        n_pred: 2,
        n_gold: 4,
    };
    let v: serde_json::Value = serde_json::to_value(&m).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    for k in ["precision", "recall", "f1", "tp", "n_pred", "n_gold"] {
        assert!(keys.contains(&k));
    }
    assert_eq!(keys.len(), 6);
}

// ---- files --------------------------------------------------------------

#[test]
fn empty_file_is_empty_dataset() {
    assert!(parse_jsonl("").unwrap().is_empty());
    assert!(parse_jsonl("\n\n").unwrap().is_empty());
}

#[test]
fn jsonl_round_trip() {
    let corpus = gen_synthetic(&desk_cfg(5, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_jsonl(&path, &corpus).unwrap();
    let back = load_jsonl(&path).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(to_jsonl(&back), std::fs::read_to_string(&path).unwrap());
}

const GOOD: &str = r#"{"tokens":[1,2],"labels":["B-POS","I-POS"],"image":{"h":1,"w":1,"c":1,"values":[0.5]}}"#;

#[test]
fn malformed_lines_name_their_line() {
    let cases = [
        r#"{"tokens":[1,2],"labels":["B-POS"],"image":{"h":1,"w":1,"c":1,"values":[0.5]}}"#,
        r#"{"tokens":[1],"labels":["B-XYZ"],"image":{"h":1,"w":1,"c":1,"values":[0.5]}}"#,
        r#"{"tokens":[1],"labels":["O"],"image":{"h":2,"w":1,"c":1,"values":[0.5]}}"#,
        r#"{"tokens":[1],"labels":["O"]"#,
        r#"{"tokens":[],"labels":[],"image":{"h":1,"w":1,"c":1,"values":[0.5]}}"#,
    ];
    for bad in cases {
        let text = format!("{GOOD}\n{GOOD}\n{bad}\n");
        match parse_jsonl(&text) {
            Err(Error::DataLine { line, .. }) => assert_eq!(line, 3, "{bad}"),
            other => panic!("expected a line error for {bad}, got {other:?}"),
        }
    }
    let err = parse_jsonl(&format!("{GOOD}\nnot json")).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn missing_file_is_io_error() {
    let err = load_jsonl("/nonexistent/d.jsonl").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/d.jsonl"));
}

// ---- synthetic corpus ---------------------------------------------------

#[test]
fn generator_is_deterministic() {
    let a = to_jsonl(&gen_synthetic(&desk_cfg(50, 7)).unwrap());
    let b = to_jsonl(&gen_synthetic(&desk_cfg(50, 7)).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, to_jsonl(&gen_synthetic(&desk_cfg(50, 8)).unwrap()));
}

#[test]
fn generated_labels_form_valid_runs() {
    for ex in gen_synthetic(&desk_cfg(300, 1)).unwrap() {
        ex.validate().unwrap();
        for t in 0..ex.len() {
            if ex.labels[t].is_inside() {
                assert!(t > 0);
                let prev = ex.labels[t - 1];
                assert!(prev != O && prev.polarity() == ex.labels[t].polarity());
            }
        }
        let spans = extract_spans(&ex.labels);
        assert!((1..=3).contains(&spans.len()));
        assert!(spans.iter().all(|s| s.end - s.start < 2));
    }
}

#[test]
fn polarity_histogram_is_balanced() {
    let corpus = gen_synthetic(&desk_cfg(200, 2)).unwrap();
    let mut counts = [0usize; 3];
    for ex in &corpus {
        for s in extract_spans(&ex.labels) {
            counts[s.polarity.index()] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    for c in counts {
        assert!(c as f64 / total as f64 >= 0.10, "{counts:?}");
    }
}

#[test]
fn signals_are_planted_and_sometimes_dropped() {
    let cfg = desk_cfg(400, 4);
    let (mut text_only, mut image_only, mut both) = (0, 0, 0);
    for ex in gen_synthetic(&cfg).unwrap() {
        let painted = painted_polarities(&ex, &cfg);
        let spans = extract_spans(&ex.labels);
        let heads: Vec<usize> = spans.iter().map(|s| s.start).collect();
        for (patch, p) in painted.iter().enumerate() {
            if p.is_some() {
                assert!(heads.contains(&patch), "patch {patch} painted without a span head");
            }
        }
        for s in spans {
            let head = ex.tokens[s.start];
            let text = vocab::head_polarity(head);
            match text {
                Some(p) => assert_eq!(p, s.polarity),
                None => assert!(vocab::is_ambiguous(head)),
            }
            for t in s.start + 1..=s.end {
                assert!(vocab::head_polarity(ex.tokens[t]).is_none() && !vocab::is_ambiguous(ex.tokens[t]));
            }
            let image = painted[s.start];
            if let Some(p) = image {
                assert_eq!(p, s.polarity);
            }
            match (text.is_some(), image.is_some()) {
                (true, true) => both += 1,
                (true, false) => text_only += 1,
                (false, true) => image_only += 1,
                (false, false) => panic!("span {s:?} carries no polarity signal"),
            }
        }
    }
    let total = (both + text_only + image_only) as f64;
    for count in [text_only, image_only] {
        let frac = count as f64 / total;
        assert!(frac > 0.08 && frac < 0.22, "{count}/{total}");
    }
}

fn painted_polarities(ex: &MultimodalExample, cfg: &SyntheticConfig) -> Vec<Option<Polarity>> {
    let p = cfg.patch_size;
    let per_row = cfg.image_w / p;
    (0..cfg.num_patches())
        .map(|k| {
            let (r0, c0) = ((k / per_row) * p, (k % per_row) * p);
            Polarity::ALL.into_iter().find(|pol| {
                (r0..r0 + p).all(|r| {
                    (c0..c0 + p).all(|c| {
                        (0..cfg.channels).all(|ch| ex.image.get(r, c, ch) == if ch == pol.index() { 1.0 } else { 0.0 })
                    })
                })
            })
        })
        .collect()
}

#[test]
fn generator_rejects_tiny_configs() {
    let mut cfg = desk_cfg(1, 0);
    cfg.max_len = 7;
    assert!(matches!(gen_synthetic(&cfg), Err(Error::Config(_))));
    let mut cfg = desk_cfg(1, 0);
    cfg.vocab_size = 40;
    assert!(matches!(gen_synthetic(&cfg), Err(Error::Config(_))));
    let mut cfg = desk_cfg(1, 0);
    cfg.image_h = 8;
    assert!(matches!(gen_synthetic(&cfg), Err(Error::Config(_))));
    let mut cfg = desk_cfg(1, 0);
    cfg.channels = 1;
    assert!(matches!(gen_synthetic(&cfg), Err(Error::Config(_))));
}

fn arb_labels() -> impl Strategy<Value = Vec<BioLabel>> {
    prop::collection::vec((0usize..7).prop_map(|i| BioLabel::from_index(i).unwrap()), 0..12)
}

fn arb_spans() -> impl Strategy<Value = Vec<Vec<AspectSpan>>> {
    prop::collection::vec(
        prop::collection::vec(
            (0usize..6, 0usize..2, 0usize..3).prop_map(|(s, l, p)| span(s, s + l, Polarity::ALL[p])),
            0..4,
        ),
        1..4,
    )
}

proptest! {
    #[test]
    fn extraction_is_idempotent(labels in arb_labels()) {
        let spans = extract_spans(&labels);
        let canon = spans_to_labels(&spans, labels.len());
        prop_assert_eq!(extract_spans(&canon), spans);
    }

    #[test]
    fn precision_and_recall_swap(gold in arb_spans(), pred in arb_spans()) {
        let n = gold.len().min(pred.len());
        let (g, p) = (&gold[..n], &pred[..n]);
        let a = micro_prf(g, p).unwrap();
        let b = micro_prf(p, g).unwrap();
        prop_assert_eq!(a.precision, b.recall);
        prop_assert_eq!(a.recall, b.precision);
        prop_assert!((0.0..=1.0).contains(&a.f1));
    }

    #[test]
    fn f1_is_one_iff_sets_match(gold in arb_spans(), pred in arb_spans()) {
        let n = gold.len().min(pred.len());
        let (g, p) = (&gold[..n], &pred[..n]);
        let m = micro_prf(g, p).unwrap();
        let same = g.iter().zip(p).all(|(a, b)| {
            a.iter().collect::<std::collections::BTreeSet<_>>() == b.iter().collect()
        });
        prop_assert_eq!(m.f1 == 1.0, same);
    }
}
