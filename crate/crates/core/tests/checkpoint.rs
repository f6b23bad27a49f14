use zsq_core::checkpoint::{decode, encode};
use zsq_core::nets::{build_quantized_mlp, load_state, state_records, MlpSpec};
use zsq_core::rng::SeedRng;
use zsq_core::Tensor;

#[test]
fn network_state_survives_encoding() {
    let spec = MlpSpec {
        input: 6,
        hidden: vec![12, 12],
        classes: 4,
    };
    let mut a = build_quantized_mlp(&spec, &mut SeedRng::new(1), 4, 4).unwrap();
    let mut r = SeedRng::new(2);
    let x = Tensor::new(vec![32, 6], (0..192).map(|_| r.normal()).collect()).unwrap();
    a.graph.forward(&x, zsq_core::Mode::Train).unwrap();

    let bytes = encode(&state_records(&a.graph));
    let mut b = build_quantized_mlp(&spec, &mut SeedRng::new(99), 4, 4).unwrap();
    load_state(&mut b.graph, &decode(&bytes).unwrap()).unwrap();
    assert_eq!(a.logits(&x).unwrap(), b.logits(&x).unwrap());
    assert_eq!(encode(&state_records(&b.graph)), bytes);
}

#[test]
fn truncated_bytes_are_rejected() {
    let spec = MlpSpec {
        input: 3,
        hidden: vec![4],
        classes: 2,
    };
    let a = build_quantized_mlp(&spec, &mut SeedRng::new(1), 4, 4).unwrap();
    let bytes = encode(&state_records(&a.graph));
    for cut in [0, 3, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}
