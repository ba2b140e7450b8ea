use gia_core::model::{build_model, zoo, ActivationKind, Init, TensorMap};
use gia_core::params_io::{decode, encode, load_model, load_params, save_model, save_params, PARAMS_MAGIC};
use gia_core::{Error, Tensor};
use proptest::prelude::*;

#[test]
fn encoding_matches_the_documented_layout() {
    let mut m = TensorMap::new();
    m.insert("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    let mut want = b"GIAP".to_vec();
    want.extend(1u16.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.push(b'w');
    want.extend(1u32.to_le_bytes());
    want.extend(2u64.to_le_bytes());
    want.extend(1.5f64.to_le_bytes());
    want.extend((-2.0f64).to_le_bytes());
    assert_eq!(encode(PARAMS_MAGIC, &m), want);
}

#[test]
fn model_files_round_trip_for_every_architecture() {
    let dir = tempfile::tempdir().unwrap();
    for arch in zoo::Arch::ALL {
        let spec = arch.build([3, 8, 8], 10, ActivationKind::LeakyRelu, 16);
        let params = build_model(&spec, Init::KaimingUniform, 4).unwrap();
        let path = dir.path().join(format!("{}.bin", arch.name()));
        save_model(&path, &spec, &params).unwrap();
        let (s2, p2) = load_model(&path).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(p2, params);
        assert_eq!(s2.structural_hash(), spec.structural_hash());
    }
}

#[test]
fn damaged_files_are_rejected() {
    let spec = zoo::mlp2([1, 4, 4], 4, 2, ActivationKind::Relu);
    let params = build_model(&spec, Init::KaimingUniform, 0).unwrap();
    let bytes = encode(PARAMS_MAGIC, &params);
    assert!(matches!(decode(PARAMS_MAGIC, &bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    assert!(matches!(decode(*b"GIAG", &bytes), Err(Error::Format(_))));
    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(matches!(decode(PARAMS_MAGIC, &v2), Err(Error::Version { found: 2, .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    save_params(&path, &params).unwrap();
    assert_eq!(load_params(&path).unwrap(), params);
    // parameters without model records cannot be loaded as a model
    assert!(load_model(&path).is_err());
    assert!(load_params(&dir.path().join("missing.bin")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn arbitrary_maps_round_trip(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..4, 1..4), any::<u64>()),
            0..5,
        )
    ) {
        let mut m = TensorMap::new();
        for (i, (shape, seed)) in tensors.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|j| f64::from_bits(seed.wrapping_add(j as u64 * 0x9e37_79b9)) ).map(|v| if v.is_finite() { v } else { 0.0 }).collect();
            m.insert(format!("t{i}"), Tensor::new(shape.clone(), data).unwrap());
        }
        let back = decode(PARAMS_MAGIC, &encode(PARAMS_MAGIC, &m)).unwrap();
        prop_assert_eq!(back.len(), m.len());
        for ((a, x), (b, y)) in m.iter().zip(back.iter()) {
            prop_assert_eq!(a, b);
            prop_assert_eq!(x.shape(), y.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..400) {
        let spec = zoo::mlp2([1, 2, 2], 3, 2, ActivationKind::Relu);
        let params = build_model(&spec, Init::KaimingUniform, 1).unwrap();
        let bytes = encode(PARAMS_MAGIC, &params);
        let cut = cut.min(bytes.len());
        // only record boundaries decode, and then to a prefix of the map
        if let Ok(m) = decode(PARAMS_MAGIC, &bytes[..cut]) {
            prop_assert!(cut >= 6);
            for ((a, x), (b, y)) in m.iter().zip(params.iter()) {
                prop_assert_eq!(a, b);
                prop_assert_eq!(x, y);
            }
        } else {
            prop_assert!(cut < bytes.len());
        }
    }
}
