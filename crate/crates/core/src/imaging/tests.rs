use super::*;
use crate::ndgrad::Tensor;

#[test]
fn ppm_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.ppm");
    let data: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 37 % 256) as u8).collect();
    let img = Rgb8Image::new(4, 3, data);
    write_ppm(&img, &path).unwrap();
    let back = read_ppm(&path).unwrap();
    assert_eq!(back, img);
}

#[test]
fn ppm_one_white_pixel_body() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("white.ppm");
    write_ppm(&Rgb8Image::new(1, 1, vec![255, 255, 255]), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes, b"P6\n1 1\n255\n\xff\xff\xff");
}

#[test]
fn ppm_rejects_ascii_p3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ascii.ppm");
    std::fs::write(&path, b"P3\n1 1\n255\n255 255 255\n").unwrap();
    match read_ppm(&path) {
        Err(CodecError::BadMagic { found, .. }) => assert_eq!(found, "P3"),
        other => panic!("expected BadMagic, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn ppm_truncated_payload_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.ppm");
    std::fs::write(&path, b"P6\n2 2\n255\n\x00\x01").unwrap();
    assert!(matches!(
        read_ppm(&path),
        Err(CodecError::Truncated { .. })
    ));
}

#[test]
fn pgm16_quantization_rule() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.pgm");
    let scale = 2.0;
    let map = Tensor::from_vec(&[1, 3], vec![0.0, 2.0, 1.0]); // 0, scale, scale/2
    write_pgm16(&map, scale, &path).unwrap();
    let (h, w, samples) = read_pgm16(&path).unwrap();
    assert_eq!((h, w), (1, 3));
    assert_eq!(samples, vec![0, 65535, 32768]); // round-half-up at 32767.5
}

#[test]
fn pgm16_rejects_nan() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nan.pgm");
    let map = Tensor::from_vec(&[1, 1], vec![f64::NAN]);
    assert!(matches!(
        write_pgm16(&map, 1.0, &path),
        Err(CodecError::NonFinite { .. })
    ));
}

#[test]
fn rgb8_tensor_round_trip() {
    let data: Vec<u8> = (0..=255).cycle().take(6 * 5 * 3).map(|v| v as u8).collect();
    let img = Rgb8Image::new(6, 5, data);
    let t = img.to_tensor();
    assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(Rgb8Image::from_tensor(&t), img);
}

// Golden vector freezing the pinned PRNG algorithm (splitmix64-seeded
// xoshiro256**). Values recorded from this implementation's first run.
#[test]
fn rng_golden_vector_seed_42() {
    let mut rng = Rng::new(42);
    let draws: Vec<u64> = (0..8).map(|_| rng.next_u64()).collect();
    assert_eq!(draws, GOLDEN_U64_SEED_42);

    let mut rng = Rng::new(42);
    let first = rng.next_f64();
    assert_eq!(first, GOLDEN_FIRST_UNIFORM_SEED_42);
}

include!("golden_rng.rs");

#[test]
fn uniform_degenerate_and_bounds() {
    let mut rng = Rng::new(1);
    assert_eq!(rng.uniform(5.0, 5.0), 5.0);
    assert_eq!(rng.normal(0.0, 0.0), 0.0);
    for _ in 0..1000 {
        let u = rng.uniform(-2.0, 3.0);
        assert!((-2.0..=3.0).contains(&u));
    }
}

#[test]
fn normal_moments() {
    let mut rng = Rng::new(2024);
    let n = 100_000;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..n {
        let z = rng.normal(0.0, 1.0);
        sum += z;
        sum2 += z * z;
    }
    let mean = sum / n as f64;
    let var = sum2 / n as f64 - mean * mean;
    assert!(mean.abs() < 0.02, "mean {}", mean);
    assert!((var - 1.0).abs() < 0.05, "var {}", var);
}

#[test]
fn split_streams_differ_and_parent_advances() {
    let mut parent = Rng::new(9);
    let mut child = parent.split();
    let a: Vec<u64> = (0..4).map(|_| child.next_u64()).collect();
    let b: Vec<u64> = (0..4).map(|_| parent.next_u64()).collect();
    assert_ne!(a, b);

    // child equals the pre-split parent stream
    let mut reference = Rng::new(9);
    let r: Vec<u64> = (0..4).map(|_| reference.next_u64()).collect();
    assert_eq!(a, r);
}

mod props {
    use super::super::{read_pgm16, read_ppm, write_pgm16, write_ppm, Rgb8Image, Rng as SeededRng};
    use crate::ndgrad::Tensor;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn prop_ppm_round_trip(w in 1usize..8, h in 1usize..8, seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let data: Vec<u8> = (0..w * h * 3).map(|_| rng.uniform_index(256) as u8).collect();
            let img = Rgb8Image::new(w, h, data);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.ppm");
            write_ppm(&img, &path).unwrap();
            prop_assert_eq!(read_ppm(&path).unwrap(), img);
        }

        #[test]
        fn prop_pgm16_round_trip(w in 1usize..8, h in 1usize..8, seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let quantized: Vec<f64> = (0..w * h)
                .map(|_| rng.uniform_index(65536) as f64 / 65535.0)
                .collect();
            let map = Tensor::from_vec(&[h, w], quantized.clone());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.pgm");
            write_pgm16(&map, 1.0, &path).unwrap();
            let (rh, rw, samples) = read_pgm16(&path).unwrap();
            prop_assert_eq!((rh, rw), (h, w));
            let expect: Vec<u16> = quantized.iter().map(|&v| (v * 65535.0 + 0.5).floor() as u16).collect();
            prop_assert_eq!(samples, expect);
        }
    }
}
