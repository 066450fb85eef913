use super::*;
use crate::engine::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Make the residual branches and head matter so tests see real signal.
fn energize<T: Real>(model: &mut KarinaModel<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v = T::cast(rng.random_range(-0.3..0.3));
        }
    }
}

#[test]
fn toy_forward_shape_and_finiteness() {
    let model = KarinaModel::<f32>::build(ModelConfig::toy(3), 0).unwrap();
    let y = model.forward(&Tensor::zeros(&[3, 8, 16])).unwrap();
    assert_eq!(y.shape(), &[3, 8, 16]);
    assert!(y.all_finite());
}

#[test]
fn zero_head_gives_zero_output() {
    let mut model = KarinaModel::<f32>::build(ModelConfig::toy(3), 1).unwrap();
    let head = model.head().clone();
    model.params.get_mut(head.weight).value.data_mut().fill(0.0);
    model.params.get_mut(head.bias).value.data_mut().fill(0.0);
    let y = model.forward(&noise(&[3, 8, 16], 2)).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn toy_parameter_audit() {
    // stem 3*8*9+8 + norm 16 = 240
    // block(8): dw 400, se(r=2) 42, norm 16, pw 288 + 264, gamma 8 = 1018
    // scale 8->16: norm 16 + conv 1152 + 16 = 1184
    // block(16): dw 800, se(r=4) 148, norm 32, pw 1088 + 1040, gamma 16 = 3124
    // final 16*16*9+16 = 2320, head 16*3+3 = 51
    let config = ModelConfig::toy(3);
    assert_eq!(config.param_count(), 7937);
    let model = KarinaModel::<f32>::build(config, 0).unwrap();
    assert_eq!(model.param_count(), 7937);
}

#[test]
fn parameter_count_ignores_seed_and_padding() {
    let base = ModelConfig::toy(5);
    let counts: Vec<usize> = PaddingMode::ALL
        .iter()
        .flat_map(|&padding_mode| {
            let config = ModelConfig { padding_mode, ..base.clone() };
            [0, 7].map(|seed| KarinaModel::<f32>::build(config.clone(), seed).unwrap().param_count())
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(ModelConfig::default().param_count(), KarinaModel::<f32>::build(ModelConfig::default(), 0).unwrap().param_count());
}

#[test]
fn invalid_fields_are_named() {
    let cases: Vec<(&str, Box<dyn Fn(&mut ModelConfig)>)> = vec![
        ("in_channels", Box::new(|c| c.in_channels = 0)),
        ("out_channels", Box::new(|c| c.out_channels = 0)),
        ("stage_dims", Box::new(|c| c.stage_dims = vec![16, 8])),
        ("depths", Box::new(|c| c.depths = vec![1])),
        ("stem_kernel", Box::new(|c| c.stem_kernel = 4)),
        ("reduction_ratio", Box::new(|c| c.reduction_ratio = 0)),
        ("drop_path_rate", Box::new(|c| c.drop_path_rate = 1.0)),
        ("layer_scale_init", Box::new(|c| c.layer_scale_init = f64::NAN)),
    ];
    for (field, mutate) in cases {
        let mut config = ModelConfig::toy(3);
        mutate(&mut config);
        match KarinaModel::<f32>::build(config, 0) {
            Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{field}: {other:?}"),
        }
    }
}

#[test]
fn input_shape_is_checked() {
    let model = KarinaModel::<f32>::build(ModelConfig::toy(3), 0).unwrap();
    assert!(model.forward(&Tensor::zeros(&[4, 8, 16])).is_err());
    assert!(model.forward(&Tensor::zeros(&[3, 8, 15])).is_err());
    assert!(model.forward(&Tensor::zeros(&[8, 16])).is_err());
}

#[test]
fn canonical_text_round_trips() {
    let config = ModelConfig {
        padding_mode: PaddingMode::CircularZeroPole,
        layer_scale_init: 0.125,
        drop_path_rate: 0.1,
        ..ModelConfig::toy(4)
    };
    assert_eq!(ModelConfig::from_canonical(&config.to_canonical()).unwrap(), config);
    assert!(ModelConfig::from_canonical("colour=blue\n").is_err());
}

#[test]
fn drop_path_ramps_linearly() {
    let config = ModelConfig {
        drop_path_rate: 0.2,
        depths: vec![2, 3],
        ..ModelConfig::toy(3)
    };
    let rates: Vec<f64> = (0..5).map(|i| config.block_drop_path(i)).collect();
    assert_eq!(rates[0], 0.0);
    assert!((rates[4] - 0.2).abs() < 1e-15);
    assert!((rates[2] - 0.1).abs() < 1e-15);
}

#[test]
fn variants_toggle_padding_and_se() {
    let base = ModelConfig::toy(3);
    let plain = Variant::Plain.apply(&base);
    assert_eq!((plain.padding_mode, plain.se_enabled), (PaddingMode::Zero, false));
    let padded = Variant::Padded.apply(&base);
    assert_eq!((padded.padding_mode, padded.se_enabled), (PaddingMode::Geocyclic, false));
    let full = Variant::PaddedSe.apply(&base);
    assert_eq!((full.padding_mode, full.se_enabled), (PaddingMode::Geocyclic, true));
    assert!(full.param_count() > padded.param_count());
    assert_eq!(plain.param_count(), padded.param_count());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut model = KarinaModel::<f32>::build(ModelConfig::toy(3), 4).unwrap();
    energize(&mut model, 5);
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), checkpoint_size(&model));

    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    for ((_, a), (_, b)) in loaded.params.iter().zip(model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let x = noise(&[3, 8, 16], 6);
    let (ya, yb) = (model.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    assert!(ya.data().iter().zip(yb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn checkpoint_size_matches_format_arithmetic() {
    let model = KarinaModel::<f32>::build(ModelConfig::toy(3), 0).unwrap();
    let config_len = model.config.to_canonical().len();
    let names: usize = model.params.iter().map(|(_, p)| p.name.len()).sum();
    let ranks: usize = model.params.iter().map(|(_, p)| p.value.rank()).sum();
    let n = model.params.len();
    let expected = 16 + config_len + n * 8 + names + 4 * ranks + 4 * 7937;
    assert_eq!(checkpoint_size(&model), expected as u64);
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = KarinaModel::<f32>::build(ModelConfig::toy(3), 0).unwrap();
    save_checkpoint(&model, &path).unwrap();

    let other = ModelConfig { stem_kernel: 5, ..ModelConfig::toy(3) };
    match load_checkpoint_expecting(&path, &other) {
        Err(Error::ConfigMismatch { field, expected, found }) => {
            assert_eq!((field.as_str(), expected.as_str(), found.as_str()), ("stem_kernel", "5", "3"));
        }
        other => panic!("{other:?}"),
    }
    assert!(load_checkpoint_expecting(&path, &ModelConfig::toy(3)).is_ok());

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Truncated { .. })));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&cut, &bad).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Format { .. })));

    let mut renamed = bytes.clone();
    let at = bytes.windows(6).position(|w| w == b"stem.c").unwrap();
    renamed[at] = b'x';
    std::fs::write(&cut, &renamed).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Format { .. })));
}

#[test]
fn eval_forward_is_bit_identical() {
    let mut model = KarinaModel::<f32>::build(ModelConfig::toy(3), 3).unwrap();
    energize(&mut model, 3);
    let x = noise(&[3, 8, 16], 4);
    assert_eq!(model.forward(&x).unwrap(), model.forward(&x).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn geocyclic_model_commutes_with_roll(seed in 0u64..1000, shift in 1isize..16) {
        let mut model = KarinaModel::<f64>::build(ModelConfig::toy(3), seed).unwrap();
        energize(&mut model, seed);
        let x = noise(&[3, 8, 16], seed + 1).cast::<f64>();
        let lhs = model.forward(&x.roll_last(shift)).unwrap();
        let rhs = model.forward(&x).unwrap().roll_last(shift);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
