use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restorenet::data::{load_idx, normalize, Image};
use restorenet::layers::ParamKind;
use restorenet::models::{
    BaselineConfig, CnnCnnBaseline, CnnLstmModel, DecoderConfig, EncoderConfig, RestorationModel,
};
use restorenet::{Graph, Tensor};

fn fixture_images(n: usize) -> Vec<Image> {
    let path = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k-images-idx3-ubyte.gz");
    let set = load_idx(path).unwrap();
    (0..n).map(|i| set.image(i)).collect()
}

fn noise_image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bytes: Vec<u8> = (0..784).map(|_| rng.gen()).collect();
    normalize(&bytes)
}

fn lstm(seed: u64) -> CnnLstmModel<f64> {
    CnnLstmModel::new(EncoderConfig::default(), DecoderConfig::default(), seed).unwrap()
}

fn zero_biases<M: RestorationModel<f64>>(model: &mut M) {
    for p in model.params_mut() {
        if p.kind == ParamKind::Bias {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }
}

#[test]
fn encoder_trace_and_census() {
    let model = lstm(0);
    let trace = model.encoder.trace(&noise_image(1)).unwrap();
    let want: Vec<Vec<usize>> = vec![
        vec![1, 28, 28],
        vec![32, 28, 28],
        vec![32, 14, 14],
        vec![64, 14, 14],
        vec![64, 7, 7],
        vec![100],
    ];
    assert_eq!(trace, want);

    // conv1 + conv2 + dense, then bottom cell, four upper cells, projection.
    let encoder = (32 * 25 + 32) + (64 * 32 * 25 + 64) + (3136 * 100 + 100);
    let bottom = 4 * (28 * 128 + 128 * 128 + 100 * 128 + 28 * 128 + 128);
    let upper = 4 * 4 * (128 * 128 * 2 + 128);
    let projection = 128 * 28 + 28;
    assert_eq!(encoder, 365_796);
    assert_eq!(model.param_count(), encoder + bottom + upper + projection);
    assert_eq!(model.param_count(), 1_041_664);
}

#[test]
fn thought_vector_range_and_determinism() {
    let a = lstm(3);
    let b = lstm(3);
    for img in fixture_images(3) {
        let v = a.encode(&img).unwrap();
        assert_eq!(v.shape(), [100]);
        assert!(v.data().iter().all(|&x| x > -1.0 && x < 1.0));
        assert_eq!(v, a.encode(&img).unwrap());
        assert_eq!(v, b.encode(&img).unwrap());
    }
    assert_ne!(lstm(4).encode(&noise_image(2)).unwrap(), a.encode(&noise_image(2)).unwrap());
}

#[test]
fn blank_image_with_zero_biases_gives_zero_thought() {
    let mut model = lstm(5);
    zero_biases(&mut model);
    let v = model.encode(&Image::zeros(28)).unwrap();
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn zero_parameters_give_constant_half() {
    let mut model = lstm(6);
    for p in model.params_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    let out = model.forward(&noise_image(3)).unwrap();
    assert_eq!(out.side(), 28);
    assert!(out.pixels().iter().all(|&p| p == 0.5));
}

#[test]
fn decoder_is_causal_with_fixed_thought() {
    let model = lstm(7);
    let img = fixture_images(1).remove(0);
    let v = model.encode(&img).unwrap();
    let base = model.decode(&v, &img).unwrap();
    let mut changed = img.clone();
    for p in &mut changed.pixels_mut()[27 * 28..] {
        *p = 1.0 - *p;
    }
    let out = model.decode(&v, &changed).unwrap();
    for r in 0..27 {
        assert_eq!(out.row(r), base.row(r), "row {r} saw a later input row");
    }
    assert_ne!(out.row(27), base.row(27));

    // A change at row 10 reaches row 10 and everything after it.
    let mut early = img.clone();
    early.pixels_mut()[10 * 28 + 5] = 1.0 - early.pixels()[10 * 28 + 5];
    let out = model.decode(&v, &early).unwrap();
    for r in 0..10 {
        assert_eq!(out.row(r), base.row(r));
    }
    assert_ne!(out.row(10), base.row(10));
    assert_ne!(out.row(20), base.row(20));
}

#[test]
fn decode_rejects_wrong_thought_width() {
    let model = lstm(8);
    assert!(model.decode(&Tensor::zeros([99]), &Image::zeros(28)).is_err());
}

#[test]
fn untrained_outputs_in_open_unit_interval() {
    let model = CnnLstmModel::<f32>::new(EncoderConfig::default(), DecoderConfig::default(), 9).unwrap();
    for img in fixture_images(2) {
        let out = model.forward(&img).unwrap();
        assert!(out.pixels().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn batch_restoration_preserves_order() {
    let model = CnnLstmModel::<f32>::new(EncoderConfig::default(), DecoderConfig::default(), 10).unwrap();
    let images = fixture_images(100);
    let batch = model.restore_batch(&images).unwrap();
    assert_eq!(batch.len(), 100);
    for k in [0, 37, 99] {
        let single = model.forward(&images[k]).unwrap();
        for (a, b) in batch[k].pixels().iter().zip(single.pixels()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
    assert_ne!(batch[0], batch[1]);
}

#[test]
fn baseline_shape_trace_and_range() {
    let model = CnnCnnBaseline::<f64>::new(BaselineConfig::default(), 11).unwrap();
    let mut g = Graph::new();
    let vars: Vec<_> = model.params().iter().map(|p| g.constant(p.value.clone())).collect();
    let x = g.constant(Tensor::zeros([2, 28, 28]));
    let (y, trace) = model.forward_traced(&mut g, &vars, x, &mut None).unwrap();
    let want: Vec<Vec<usize>> = vec![vec![1, 28, 28], vec![32, 14, 14], vec![64, 7, 7], vec![32, 14, 14], vec![1, 28, 28]];
    assert_eq!(trace, want);
    assert_eq!(g.shape(y), [2, 28, 28]);

    let out = model.baseline_forward(&fixture_images(1)[0]).unwrap();
    assert!(out.pixels().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn baseline_blank_input_with_zero_biases_is_half() {
    let mut model = CnnCnnBaseline::<f64>::new(BaselineConfig::default(), 12).unwrap();
    zero_biases(&mut model);
    let out = model.baseline_forward(&Image::zeros(28)).unwrap();
    assert!(out.pixels().iter().all(|&p| p == 0.5));
}
