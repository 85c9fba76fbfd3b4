use gradient_atoms::store::{
    decode, encode, read_tensor_file, validate_gradient_set, write_tensor_file, TensorBundle, MAGIC,
};
use gradient_atoms::toy::{generate_corpus, gradient_set};
use gradient_atoms::{
    Error, GradientSet, ModuleRegistry, PayloadKind, TensorFileHeader, ToyModelParams,
};
use ndarray::Array2;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

const KINDS: [PayloadKind; 6] = [
    PayloadKind::Gradients,
    PayloadKind::KfacStats,
    PayloadKind::Basis,
    PayloadKind::Projected,
    PayloadKind::Dictionary,
    PayloadKind::Codes,
];

fn sha(path: &std::path::Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn toy_gradient_set_validates_and_hashes_stably() {
    let params = ToyModelParams::init(6, 16, 1);
    let docs = generate_corpus(2, 1);
    let gs = gradient_set(&params, &docs[..3]).unwrap();
    validate_gradient_set(&gs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.gat");
    let b = dir.path().join("b.gat");
    gs.write(&a).unwrap();
    gs.write(&b).unwrap();
    assert_eq!(sha(&a), sha(&b));
    assert_eq!(GradientSet::read(&a).unwrap(), gs);
}

#[test]
fn hand_built_file_matches_the_documented_layout() {
    // Assemble a file byte by byte, the way an external writer would, and read
    // it back through the library.
    let meta = serde_json::json!({
        "payload_kind": "gradients",
        "dtype": "f64",
        "tensors": [{"name": "gradients", "shape": [2, 3]}],
        "byte_length": 48,
        "registry": {
            "modules": [
                {"name": "q", "out_dim": 1, "in_dim": 2, "offset": 0},
                {"name": "v", "out_dim": 1, "in_dim": 1, "offset": 2}
            ],
            "d": 3
        },
        "doc_ids": ["first", "second"],
        "attrs": {"reduction": "sum"}
    });
    let meta = serde_json::to_vec(&meta).unwrap();
    let mut bytes = b"GATOMS01".to_vec();
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta);
    for v in [1.0f64, -2.5, 0.0, 3.25, 1e-300, -0.0] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("external.gat");
    std::fs::write(&path, &bytes).unwrap();
    let gs = GradientSet::read(&path).unwrap();
    assert_eq!(gs.doc_ids, vec!["first", "second"]);
    assert_eq!(gs.values[[1, 1]], 1e-300);
    assert_eq!(gs.registry.module("v").unwrap().offset, 2);
    let bundle = TensorBundle::read(&path).unwrap();
    assert_eq!(bundle.header.attr_str("reduction").unwrap(), "sum");
}

#[test]
fn header_payload_disagreement_is_a_shape_error() {
    let header = TensorFileHeader::new(PayloadKind::Codes).with_tensor("x", vec![2, 3]);
    assert!(matches!(encode(&header, &[0.0; 5]), Err(Error::Shape(_))));
}

#[test]
fn reader_errors_are_classified() {
    assert!(matches!(decode(b""), Err(Error::Corruption(_))));
    assert!(matches!(decode(b"NOTMAGIC\0\0\0\0"), Err(Error::Format(_))));
    let header = TensorFileHeader::new(PayloadKind::Basis).with_tensor("x", vec![2]);
    let good = encode(&header, &[1.0, 2.0]).unwrap();
    assert!(matches!(
        decode(&good[..good.len() - 3]),
        Err(Error::Corruption(_))
    ));
    let mut bad_meta = good.clone();
    bad_meta[12] = b'#';
    assert!(matches!(decode(&bad_meta), Err(Error::Parse(_))));
    let mut bad_len = good.clone();
    bad_len[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(decode(&bad_len), Err(Error::Corruption(_))));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.gat");
    match read_tensor_file(&missing) {
        Err(Error::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("expected io error, got {other:?}"),
    }
}

#[test]
fn wrong_kind_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codes.gat");
    let header = TensorFileHeader::new(PayloadKind::Codes).with_tensor("x", vec![1]);
    write_tensor_file(&path, &header, &[1.0]).unwrap();
    match GradientSet::read(&path) {
        Err(Error::Kind { expected, found }) => {
            assert_eq!(expected, "gradients");
            assert_eq!(found, "codes");
        }
        other => panic!("expected kind error, got {other:?}"),
    }
}

#[test]
fn width_not_matching_registry_is_a_layout_error() {
    let registry = ModuleRegistry::from_shapes([("m", 2, 2)]).unwrap();
    let err = GradientSet::new(registry, Array2::zeros((1, 3)), vec!["a".into()]).unwrap_err();
    assert!(matches!(err, Error::Layout(_)), "{err:?}");
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_kind_round_trips_bit_exactly(
        kind_idx in 0usize..6,
        rows in 1usize..5,
        cols in 1usize..5,
        values in prop::collection::vec(finite(), 16),
    ) {
        let n = rows * cols;
        let payload: Vec<f64> = values.iter().cycle().take(n).copied().collect();
        let header = TensorFileHeader::new(KINDS[kind_idx])
            .with_tensor("t", vec![rows, cols])
            .with_attr("seed", 7u64);
        let bytes = encode(&header, &payload).unwrap();
        prop_assert_eq!(&bytes[..8], MAGIC);
        let (h2, p2) = decode(&bytes).unwrap();
        prop_assert_eq!(h2, header);
        let a: Vec<u64> = payload.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = p2.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gradient_sets_round_trip(
        n in 1usize..6,
        values in prop::collection::vec(-1e6f64..1e6, 6 * 7),
    ) {
        let registry = ModuleRegistry::from_shapes([("a", 2, 2), ("b", 1, 3)]).unwrap();
        let m = Array2::from_shape_vec((n, 7), values[..n * 7].to_vec()).unwrap();
        let gs = GradientSet::new(registry, m, (0..n).map(|i| format!("d{i}")).collect()).unwrap();
        let bytes = {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("g.gat");
            gs.write(&p).unwrap();
            prop_assert_eq!(GradientSet::read(&p).unwrap(), gs.clone());
            std::fs::read(&p).unwrap()
        };
        let (header, _) = decode(&bytes).unwrap();
        prop_assert_eq!(header.doc_ids.unwrap().len(), n);
    }
}
