mod common;

use common::{record, reference_cosine, reference_rank};
use dvqa_core::retriever::{filter_pool, retrieve, select_counting, select_multiple_choice, Mode, PoolLimit, RetrievalConfig};
use dvqa_core::store::{normalize, Store, StoreManifest, SupportRecord};
use dvqa_core::taxonomy::{Category, Dataset, Registry};
use proptest::prelude::*;

fn icl() -> RetrievalConfig {
    RetrievalConfig { mode: Mode::Icl, ..Default::default() }
}

/// Class count, (answer class, grid vector) per record, and the query.
/// The coarse grid makes ties common.
type Pool = (usize, Vec<(usize, Vec<i8>)>, Vec<i8>);

fn pool_strategy() -> impl Strategy<Value = Pool> {
    (2usize..=5).prop_flat_map(|classes| {
        (
            Just(classes),
            prop::collection::vec((0..classes, prop::collection::vec(-2i8..=2, 3)), 1..200),
            prop::collection::vec(-2i8..=2, 3),
        )
    })
}

fn build(classes: usize, rows: &[(usize, Vec<i8>)]) -> (Vec<String>, Vec<SupportRecord>) {
    let space: Vec<String> = (0..classes).map(|c| format!("choice {c}")).collect();
    let records = rows
        .iter()
        .enumerate()
        .filter(|(_, (_, v))| v.iter().any(|&x| x != 0))
        .map(|(i, (c, v))| {
            let v: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            // ids deliberately not in insertion order
            record(&format!("r{:03}", (i * 37) % 211), &format!("img{i}"), Category::BuildingCondition, &space[*c], &v)
        })
        .collect();
    (space, records)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn multiple_choice_is_per_class_argmax((classes, rows, q) in pool_strategy()) {
        prop_assume!(q.iter().any(|&x| x != 0));
        let (space, records) = build(classes, &rows);
        let query = normalize(&q.iter().map(|&x| x as f32).collect::<Vec<_>>()).unwrap();
        let pool: Vec<&SupportRecord> = records.iter().collect();
        let got = select_multiple_choice(&pool, &query, &space, &icl()).unwrap();

        let mut want = Vec::new();
        let mut degraded = Vec::new();
        for c in &space {
            let mut members: Vec<(f64, &str)> = records
                .iter()
                .filter(|r| &r.answer_text == c)
                .map(|r| (reference_cosine(query.as_slice(), r.embedding.as_slice()), r.record_id.as_str()))
                .collect();
            reference_rank(&mut members);
            match members.first() {
                Some(m) => want.push((m.1.to_string(), c.clone())),
                None => degraded.push(c.clone()),
            }
        }
        let got_pairs: Vec<(String, String)> = got.entries.iter().map(|e| (e.record_id.clone(), e.answer_text.clone())).collect();
        prop_assert_eq!(got_pairs, want);
        prop_assert_eq!(got.degraded_classes, degraded);
        prop_assert!(got.entries.len() <= classes);
    }

    #[test]
    fn counting_is_global_top_two((classes, rows, q) in pool_strategy()) {
        prop_assume!(q.iter().any(|&x| x != 0));
        let (_, records) = build(classes, &rows);
        let query = normalize(&q.iter().map(|&x| x as f32).collect::<Vec<_>>()).unwrap();
        let pool: Vec<&SupportRecord> = records.iter().collect();
        let got: Vec<String> = select_counting(&pool, &query, &icl()).unwrap().entries.into_iter().map(|e| e.record_id).collect();
        let mut all: Vec<(f64, &str)> = records
            .iter()
            .map(|r| (reference_cosine(query.as_slice(), r.embedding.as_slice()), r.record_id.as_str()))
            .collect();
        reference_rank(&mut all);
        let want: Vec<String> = all.iter().take(2).map(|x| x.1.to_string()).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn pool_cap_is_respected_and_seeded(limit in 1usize..8, seed in any::<u64>()) {
        let reg = Registry::builtin(Dataset::FloodNet);
        let spec = reg.classify("is the area mostly non-flooded?").unwrap();
        let mut records = Vec::new();
        for i in 0..30 {
            let answer = if i % 3 == 0 { "No" } else { "Yes" };
            let mut r = record(&format!("r{i:02}"), &format!("img{i}"), Category::EntireImageCondition, answer, &[1.0, i as f32]);
            r.question_id = spec.question_id.clone();
            records.push(r);
        }
        let store = Store::ingest(records, StoreManifest { dim: 2, ..Default::default() }).unwrap();
        let cfg = RetrievalConfig { pool_limit_per_choice: PoolLimit::Limited(limit), pool_sample_seed: seed, ..icl() };
        let a: Vec<String> = filter_pool(&store, spec, &cfg, Some("img0")).iter().map(|r| r.record_id.clone()).collect();
        let b: Vec<String> = filter_pool(&store, spec, &cfg, Some("img0")).iter().map(|r| r.record_id.clone()).collect();
        prop_assert_eq!(&a, &b);
        let count = |ans: &str| a.iter().filter(|id| store.records().iter().any(|r| &&r.record_id == id && r.answer_text == ans)).count();
        prop_assert!(count("Yes") <= limit);
        prop_assert!(count("No") <= limit);
        prop_assert!(!a.contains(&"r00".to_string()));
    }
}

#[test]
fn query_image_is_never_its_own_exemplar() {
    let reg = Registry::builtin(Dataset::FloodNet);
    let spec = reg.classify("is the area mostly non-flooded?").unwrap();
    let mk = |id: &str, img: &str, ans: &str, v: &[f32]| {
        let mut r = record(id, img, Category::EntireImageCondition, ans, v);
        r.question_id = spec.question_id.clone();
        r
    };
    let store = Store::ingest(
        vec![mk("a", "query.png", "Yes", &[1.0, 0.0]), mk("b", "other.png", "Yes", &[0.5, 0.5]), mk("c", "third.png", "No", &[0.0, 1.0])],
        StoreManifest { dim: 2, ..Default::default() },
    )
    .unwrap();
    let q = normalize(&[1.0, 0.0]).unwrap();
    let set = retrieve(&store, spec, "query.png", Some(&q), &icl()).unwrap();
    let ids: Vec<&str> = set.entries.iter().map(|e| e.record_id.as_str()).collect();
    assert_eq!(ids, ["b", "c"]);
}

#[test]
fn zero_pool_limit_means_no_exemplars() {
    let reg = Registry::builtin(Dataset::FloodNet);
    let spec = reg.classify("is the area mostly non-flooded?").unwrap();
    let store = Store::empty(2);
    let cfg = RetrievalConfig { pool_limit_per_choice: PoolLimit::Limited(0), ..icl() };
    assert!(retrieve(&store, spec, "x.png", None, &cfg).unwrap().is_empty());
}
