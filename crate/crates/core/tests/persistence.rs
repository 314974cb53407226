//! Checkpoint round trips and heatmap export read back from disk.

use lcap_core::aggregation::{AggregatorConfig, Strategy};
use lcap_core::checkpoint;
use lcap_core::data::Batch;
use lcap_core::diagnostics::{self, AgreementSnapshot};
use lcap_core::model::{ModelConfig, Seq2Seq};
use lcap_core::train::{train, TrainConfig};
use lcap_core::{Error, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use proptest::strategy::Strategy as _;

fn small(strategy: Strategy) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        aggregator: AggregatorConfig {
            output_capsules: 4,
            ..AggregatorConfig::with_strategy(strategy)
        },
        ..ModelConfig::default()
    }
}

fn logit_bits(model: &Seq2Seq, store: &ParamStore, b: &Batch) -> Vec<u64> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, b).unwrap();
    g.value(out.logits).data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn trained_parameters_survive_a_file_round_trip() {
    let cfg = small(Strategy::EmRouting);
    let tc = TrainConfig {
        steps: 5,
        eval_size: 8,
        ..TrainConfig::default()
    };
    let (trainer, _) = train(&cfg, &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.lcap");
    checkpoint::save(&path, &trainer.store).unwrap();

    let (model, mut fresh) = Seq2Seq::new(&cfg, 99).unwrap();
    checkpoint::load(&path, &mut fresh).unwrap();
    for (_, p) in trainer.store.iter() {
        let q = fresh.by_name(&p.name).unwrap();
        let a: Vec<u64> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = q.tensor.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "{}", p.name);
    }
    let b = Batch::from_pairs(&[(vec![3, 4, 5], vec![3, 4, 5]), (vec![7, 8], vec![7, 8])]);
    assert_eq!(logit_bits(&model, &trainer.store, &b), logit_bits(&model, &fresh, &b));
    assert_eq!(std::fs::read(&path).unwrap(), checkpoint::to_bytes(&fresh));
}

#[test]
fn loading_into_a_different_architecture_names_every_mismatch() {
    let (_, em) = Seq2Seq::new(&small(Strategy::EmRouting), 0).unwrap();
    let (_, mut linear) = Seq2Seq::new(&small(Strategy::Linear), 0).unwrap();
    let before = checkpoint::to_bytes(&linear);
    let Err(Error::Checkpoint(msg)) = checkpoint::load_into(&checkpoint::to_bytes(&em), &mut linear) else {
        panic!("mismatched architectures must not load")
    };
    assert!(msg.contains("unexpected parameter agg.enc.vote.0"), "{msg}");
    assert!(msg.contains("missing parameter agg.enc.linear.0"), "{msg}");
    assert_eq!(checkpoint::to_bytes(&linear), before, "a failed load must leave the store untouched");
}

fn arb_store() -> impl proptest::strategy::Strategy<Value = ParamStore> {
    let value = prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(-0.0),
        Just(f64::MIN_POSITIVE / 4.0),
        Just(f64::MAX),
    ];
    let shape = prop::collection::vec(1usize..4, 0..4);
    let tensor = shape.prop_flat_map(move |s| {
        let n = s.iter().product::<usize>();
        prop::collection::vec(value.clone(), n).prop_map(move |d| Tensor::new(s.clone(), d).unwrap())
    });
    prop::collection::btree_map("[a-z][a-z0-9._]{0,12}", tensor, 0..6).prop_map(|m| {
        let mut store = ParamStore::new();
        // Insertion order differs from name order on purpose.
        for (name, t) in m.into_iter().rev() {
            store.add(name, t).unwrap();
        }
        store
    })
}

proptest! {
    #[test]
    fn bytes_round_trip_exactly(store in arb_store()) {
        let bytes = checkpoint::to_bytes(&store);
        prop_assert_eq!(&bytes[..6], b"LCAP1\n");
        let entries = checkpoint::parse(&bytes).unwrap();
        let mut names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        names.sort();
        prop_assert_eq!(entries.iter().map(|e| e.name.as_str()).collect::<Vec<_>>(), names);
        for e in &entries {
            let p = store.by_name(&e.name).unwrap();
            prop_assert_eq!(e.tensor.shape(), p.tensor.shape());
            let a: Vec<u64> = e.tensor.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
        let mut copy = store.clone();
        for p in copy.iter_mut() {
            p.tensor.data_mut().fill(1.5);
        }
        checkpoint::load_into(&bytes, &mut copy).unwrap();
        prop_assert_eq!(checkpoint::to_bytes(&copy), bytes);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(store in arb_store(), cut in 0.0f64..1.0) {
        let bytes = checkpoint::to_bytes(&store);
        let keep = ((bytes.len() - 1) as f64 * cut) as usize;
        // A cut exactly at a record boundary is a valid shorter file.
        if let Ok(entries) = checkpoint::parse(&bytes[..keep]) {
            prop_assert!(entries.len() < store.len());
        }
    }
}

#[test]
fn heatmap_files_read_back_within_print_precision() {
    let c = Tensor::new(
        [2, 4, 3],
        vec![
            0.2, 0.3, 0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.9, 0.05, 0.05, 0.0, 1.0, 0.0, //
            0.1, 0.1, 0.8, 0.25, 0.5, 0.25, 0.6, 0.2, 0.2, 0.0, 0.0, 1.0,
        ],
    )
    .unwrap();
    let snap = AgreementSnapshot::from_assignments(2, &c, None, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, pgm) = diagnostics::export_heatmap(&snap, dir.path()).unwrap();
    assert_eq!(csv.file_name().unwrap(), "agreement_iter2.csv");
    assert_eq!(pgm.file_name().unwrap(), "agreement_iter2.pgm");

    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    let back = diagnostics::read_heatmap_csv(&text).unwrap();
    assert_eq!(back.shape(), [4, 3]);
    for (a, b) in back.data().iter().zip(snap.mean.data()) {
        assert!((a - b).abs() <= 5e-7, "{a} vs {b}");
    }

    let bytes = std::fs::read(&pgm).unwrap();
    let header = b"P5\n3 4\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let pixels = &bytes[header.len()..];
    assert_eq!(pixels.len(), 12);
    let max = snap.mean.data().iter().copied().fold(0.0, f64::max);
    for (&p, &v) in pixels.iter().zip(snap.mean.data()) {
        assert_eq!(p, (255.0 * (1.0 - v / max)).round() as u8);
    }
    // Largest cell is black; an all-zero matrix is white.
    assert!(pixels.contains(&0));
    let blank = diagnostics::heatmap_pgm(&Tensor::zeros([2, 2])).unwrap();
    assert!(blank[b"P5\n2 2\n255\n".len()..].iter().all(|&p| p == 255));
}

#[test]
fn uniform_assignments_have_maximal_entropy_and_no_diversity() {
    for n in [2usize, 8, 512] {
        let c = Tensor::full([4, n], 1.0 / n as f64);
        let h = diagnostics::entropy(&c).unwrap();
        assert!((h - (n as f64).ln()).abs() < 1e-12);
        assert_eq!(diagnostics::diversity(&c).unwrap().value, 0.0);
    }
    let h512 = diagnostics::entropy(&Tensor::full([3, 512], 1.0 / 512.0)).unwrap();
    assert!((h512 - 6.2383).abs() < 1e-3);
}

#[test]
fn one_hot_distinct_columns_have_zero_entropy_and_unit_diversity() {
    let c = Tensor::from_fn([3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    assert_eq!(diagnostics::entropy(&c).unwrap(), 0.0);
    assert!((diagnostics::diversity(&c).unwrap().value - 1.0).abs() < 1e-15);
}
