use ictp_autodiff::{ParamStore, Tensor};
use proptest::prelude::*;

fn store_from(values: &[Vec<f64>]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, v) in values.iter().enumerate() {
        s.add(format!("p{i}"), Tensor::row(v.clone()));
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        values in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 1..20), 1..5)
    ) {
        let store = store_from(&values);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        store.save(&path, serde_json::json!({"variant": "test"})).unwrap();
        let (back, meta) = ParamStore::load(&path).unwrap();
        prop_assert_eq!(meta["variant"].as_str(), Some("test"));
        prop_assert_eq!(back.checksum(), store.checksum());
        for (a, b) in store.iter().zip(back.iter()) {
            prop_assert_eq!(&a.name, &b.name);
            let bits_a: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
    }
}

#[test]
fn checksum_tracks_single_bit_changes() {
    let mut s = store_from(&[vec![0.25, -1.0, 3.0]]);
    let before = s.checksum();
    let id = s.id("p0").unwrap();
    let v = s.get(id).tensor.data()[1];
    s.get_mut(id).tensor.data_mut()[1] = f64::from_bits(v.to_bits() ^ 1);
    assert_ne!(before, s.checksum());
}

#[test]
fn copy_values_rejects_layout_mismatch() {
    let mut a = store_from(&[vec![1.0, 2.0]]);
    let b = store_from(&[vec![1.0, 2.0, 3.0]]);
    assert!(a.copy_values_from(&b).is_err());
}

#[test]
fn dangling_tensor_shape_is_rejected() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).is_err());
}
