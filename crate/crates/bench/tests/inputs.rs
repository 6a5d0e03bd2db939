use cvturb::architecture::ModelConfig;
use cvturb_bench::{complex_layer, model, window};

#[test]
fn inputs_fit_the_model() {
    let cfg = ModelConfig {
        channels: 4,
        ..ModelConfig::tiny()
    };
    let x = window(&cfg, 32);
    assert_eq!(x.shape(), [cfg.input_channels(), 32, 32]);
    assert!(x.data().iter().all(|v| v.abs() <= 1.0));
    let out = model(&cfg).forward(&x).unwrap();
    assert_eq!(out.restored().shape(), [3, 32, 32]);
}

#[test]
fn layer_shapes() {
    let (x, k) = complex_layer(6, 9);
    assert_eq!(x.shape(), [6, 9, 9]);
    assert_eq!(k.real_weights.shape(), [6, 6, 3, 3]);
}
