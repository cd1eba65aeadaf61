mod support;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tabret_core::eval::{average_precision, evaluate, ndcg_at_k, p_at_1, parse_run, format_run, GainKind, RunFile, NDCG_CUTOFFS};
use tabret_core::table::RetrievalInstance;

#[test]
fn metrics_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let n = rng.random_range(1..30);
        let grades: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
        let mut ranked = grades.clone();
        ranked.shuffle(&mut rng);
        let mut ideal = grades.clone();
        ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for k in NDCG_CUTOFFS {
            for (gain, exp) in [(GainKind::Exponential, true), (GainKind::Linear, false)] {
                let got = ndcg_at_k(&ranked, &ideal, k, gain).unwrap();
                let want = support::direct_ndcg(&ranked, &grades, k, exp);
                assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
        }
        let relevant = grades.iter().filter(|g| **g > 0.0).count();
        let got = average_precision(&ranked, Some(relevant));
        assert!((got - support::direct_ap(&ranked, relevant)).abs() < 1e-9);
    }
}

#[test]
fn hand_computed_fixtures() {
    let want = (1.0 + 3.0 / 3f64.log2()) / (3.0 + 1.0 / 3f64.log2());
    let got = ndcg_at_k(&[1.0, 2.0], &[2.0, 1.0], 2, GainKind::Exponential).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!((got - 0.7967).abs() < 5e-5);
    let ap = average_precision(&[1.0, 0.0, 1.0], None);
    assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(p_at_1(&[]), 0.0);
}

fn instance(q: &str, rel: &[(&str, u32)]) -> RetrievalInstance {
    RetrievalInstance {
        query_id: q.into(),
        query_text: String::new(),
        candidates: rel.iter().map(|(t, g)| (t.to_string(), *g)).collect(),
    }
}

#[test]
fn run_file_round_trip_preserves_metrics() {
    let judged = vec![
        instance("q1", &[("a", 1), ("b", 0), ("c", 2)]),
        instance("q2", &[("a", 0), ("d", 1)]),
        instance("q3", &[("e", 1)]),
        instance("q4", &[("a", 2), ("b", 1)]),
        instance("q5", &[("c", 1), ("f", 0)]),
    ];
    let mut run = RunFile::new();
    run.insert("q1".into(), vec![("c".into(), 0.9), ("b".into(), 0.5), ("a".into(), 0.1234567891)]);
    run.insert("q2".into(), vec![("a".into(), 3.0), ("d".into(), 2.0)]);
    run.insert("q3".into(), vec![("x".into(), 1.0), ("e".into(), 0.5)]);
    run.insert("q4".into(), vec![("b".into(), -1.0), ("a".into(), -2.0)]);
    run.insert("q5".into(), vec![("c".into(), 1e-9), ("f".into(), -1e-9)]);
    let text = format_run(&run, "fixture");
    let back = parse_run(&text, std::path::Path::new("fixture.run")).unwrap();
    let a = evaluate(&run, &judged, GainKind::Exponential);
    let b = evaluate(&back, &judged, GainKind::Exponential);
    assert_eq!(a.map, b.map);
    // per-query AP: 5/6, 1/2, 1/2, 1, 1
    let want = (5.0 / 6.0 + 0.5 + 0.5 + 1.0 + 1.0) / 5.0;
    assert!((a.map - want).abs() < 1e-12, "{}", a.map);
    assert!((a.p_at_1 - 0.6).abs() < 1e-12);
}
