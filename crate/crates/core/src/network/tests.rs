use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new([1, c, h, w], (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn param_bytes(m: &DsFeat) -> Vec<u8> {
    m.params()
        .iter()
        .flat_map(|p| p.tensor.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

#[test]
fn build_is_deterministic() {
    let a = DsFeat::new(NetworkConfig::default()).unwrap();
    let b = DsFeat::new(NetworkConfig::default()).unwrap();
    assert_eq!(param_bytes(&a), param_bytes(&b));
    let c = DsFeat::new(NetworkConfig {
        seed: 8,
        ..NetworkConfig::default()
    })
    .unwrap();
    assert_ne!(param_bytes(&a), param_bytes(&c));
}

#[test]
fn channel_widths_follow_levels() {
    let m = DsFeat::new(NetworkConfig::default()).unwrap();
    let out_channels = |name: &str| {
        m.params()
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.tensor.shape()[0])
            .unwrap()
    };
    assert_eq!(out_channels("enc0.conv1.weight"), 16);
    assert_eq!(out_channels("enc1.conv1.weight"), 32);
    assert_eq!(out_channels("mid.conv1.weight"), 64);
    assert_eq!(out_channels("dec1.conv0.weight"), 32);
    assert_eq!(out_channels("dec0.conv1.weight"), 16);
    assert_eq!(out_channels("head.weight"), 1);
    // Decoder inputs carry the upsampled path plus the skip.
    let dec1 = m.params().iter().find(|p| p.name == "dec1.conv0.weight").unwrap();
    assert_eq!(dec1.tensor.shape(), [32, 64 + 32, 3, 3]);
    let head = m.params().iter().find(|p| p.name == "head.weight").unwrap();
    assert_eq!(head.tensor.shape(), [1, 16, 1, 1]);
}

#[test]
fn single_channel_input_kernel() {
    let m = DsFeat::new(NetworkConfig {
        input_channels: 1,
        ..NetworkConfig::default()
    })
    .unwrap();
    assert_eq!(m.params().get(0).tensor.shape(), [16, 1, 3, 3]);
}

#[test]
fn xavier_bounds_hold() {
    let m = DsFeat::new(NetworkConfig::default()).unwrap();
    for p in m.params().iter() {
        let [o, i, kh, kw] = p.tensor.shape();
        if p.name.ends_with(".bias") {
            assert!(p.tensor.data().iter().all(|v| *v == 0.0));
            continue;
        }
        let s = (6.0 / ((i * kh * kw + o * kh * kw) as f64)).sqrt() as f32;
        assert!(p.tensor.data().iter().all(|v| v.abs() <= s), "{}", p.name);
    }
}

#[test]
fn invalid_configs_rejected() {
    for cfg in [
        NetworkConfig {
            downsample_count: 0,
            ..NetworkConfig::default()
        },
        NetworkConfig {
            base_channels: 0,
            ..NetworkConfig::default()
        },
        NetworkConfig {
            input_channels: 0,
            ..NetworkConfig::default()
        },
    ] {
        assert!(matches!(DsFeat::new(cfg), Err(NetworkError::Config(_))));
    }
}

#[test]
fn forward_contract() {
    let m = DsFeat::new(NetworkConfig::default()).unwrap();
    let img = random_image(3, 8, 12, 1);
    let a = m.forward(&img).unwrap();
    assert_eq!((a.height(), a.width()), (8, 12));
    assert!(a.values().iter().all(|v| *v > 0.0 && *v < 1.0));
    let b = m.forward(&img).unwrap();
    let bits = |m: &ActivationMap| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn indivisible_input_names_padding() {
    let m = DsFeat::new(NetworkConfig::default()).unwrap();
    let err = m.forward(&random_image(3, 6, 9, 1)).unwrap_err();
    match err {
        NetworkError::Indivisible { pad_h, pad_w, factor, .. } => {
            assert_eq!((pad_h, pad_w, factor), (8, 12, 4));
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err_text(&m, 6, 9).contains("pad to 8x12"));
    assert!(matches!(
        m.forward(&random_image(1, 8, 8, 1)),
        Err(NetworkError::InputShape { .. })
    ));
}

fn err_text(m: &DsFeat, h: usize, w: usize) -> String {
    m.forward(&random_image(3, h, w, 0)).unwrap_err().to_string()
}

#[test]
fn weights_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dsfw");
    let m = DsFeat::new(NetworkConfig {
        seed: 3,
        ..NetworkConfig::default()
    })
    .unwrap();
    m.save_weights(&path).unwrap();
    let back = DsFeat::load_weights(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(param_bytes(&back), param_bytes(&m));
    let img = random_image(3, 8, 8, 2);
    let a = m.forward(&img).unwrap();
    let b = back.forward(&img).unwrap();
    assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let file = read_weight_file(&path).unwrap();
    assert_eq!(file.meta["input_scaling"], "unit_range");
}

#[test]
fn corrupt_magic_and_truncation_rejected() {
    let m = DsFeat::new(NetworkConfig::default()).unwrap();
    let bytes = encode_weight_file(&m.to_weight_file(&Default::default())).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_weight_file(&bad), Err(NetworkError::Format(_))));
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(decode_weight_file(&bad_version).unwrap_err().to_string().contains("version"));
    let truncated = &bytes[..bytes.len() / 2];
    assert!(decode_weight_file(truncated).unwrap_err().to_string().contains("truncated"));
}

#[test]
fn mismatched_config_names_layer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dsfw");
    DsFeat::new(NetworkConfig::default()).unwrap().save_weights(&path).unwrap();
    let mut other = DsFeat::new(NetworkConfig {
        base_channels: 8,
        ..NetworkConfig::default()
    })
    .unwrap();
    let err = other.load_into(&path).unwrap_err();
    match &err {
        NetworkError::LayerMismatch { layer, expected, found } => {
            assert_eq!(layer, "enc0.conv0.weight");
            assert_eq!(*expected, [8, 3, 3, 3]);
            assert_eq!(*found, [16, 3, 3, 3]);
        }
        e => panic!("unexpected {e}"),
    }
    assert!(err.to_string().contains("enc0.conv0.weight"));
}

#[test]
fn bilinear_examples() {
    let map = ActivationMap::new(2, 3, vec![0.0, 1.0, 0.25, 0.5, 0.75, 0.125]).unwrap();
    assert_eq!(map.bilinear_sample(2.0, 1.0).unwrap(), 0.125);
    assert_eq!(map.bilinear_sample(1.0, 0.0).unwrap(), 1.0);
    assert_eq!(map.bilinear_sample(0.5, 0.0).unwrap(), 0.5);
    assert!(map.bilinear_sample(2.01, 0.0).is_err());
    assert!(map.bilinear_sample(0.0, -0.01).is_err());
    assert!(map.bilinear_sample(f64::NAN, 0.0).is_err());
}

proptest! {
    #[test]
    fn bilinear_matches_four_term_formula(
        seed in 0u64..1000,
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
    ) {
        let (h, w) = (5usize, 7usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f32> = (0..h * w).map(|_| rng.random()).collect();
        let map = ActivationMap::new(h, w, vals.clone()).unwrap();
        let x = fx * (w - 1) as f64;
        let y = fy * (h - 1) as f64;
        let (x0, y0) = (x.floor(), y.floor());
        let (x1, y1) = ((x0 + 1.0).min((w - 1) as f64), (y0 + 1.0).min((h - 1) as f64));
        let v = |xx: f64, yy: f64| vals[yy as usize * w + xx as usize] as f64;
        let (dx, dy) = (x - x0, y - y0);
        let expect = v(x0, y0) * (1.0 - dx) * (1.0 - dy)
            + v(x1, y0) * dx * (1.0 - dy)
            + v(x0, y1) * (1.0 - dx) * dy
            + v(x1, y1) * dx * dy;
        prop_assert!((map.bilinear_sample(x, y).unwrap() - expect).abs() < 1e-12);
    }
}
