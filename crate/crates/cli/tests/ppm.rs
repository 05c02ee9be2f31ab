use neurimg_cli::ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
use neurimg_tensor::Tensor;
use proptest::prelude::*;

fn quantized(h: usize, w: usize, bytes: &[u8]) -> Tensor {
    Tensor::new(&[h, w, 3], bytes.iter().map(|&b| b as f64 / 255.0).collect()).unwrap()
}

#[test]
fn header_and_bytes() {
    let img = quantized(1, 2, &[0, 128, 255, 1, 2, 3]);
    let bytes = encode_ppm(&img).unwrap();
    assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
    assert_eq!(&bytes[11..], &[0, 128, 255, 1, 2, 3]);
}

#[test]
fn values_are_clamped_and_rounded() {
    let img = Tensor::new(&[1, 1, 3], vec![-0.5, 1.5, 0.5]).unwrap();
    assert_eq!(&encode_ppm(&img).unwrap()[11..], &[0, 255, 128]);
}

#[test]
fn comments_in_header_are_skipped() {
    let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
    bytes.extend([10, 20, 30]);
    assert_eq!(decode_ppm(&bytes).unwrap(), quantized(1, 1, &[10, 20, 30]));
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
    assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
    assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    assert!(decode_ppm(b"P6\n2").is_err());
    assert!(encode_ppm(&Tensor::zeros(&[2, 2, 1])).is_err());
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = quantized(3, 2, &(0..18).map(|i| i * 14).collect::<Vec<u8>>());
    let path = dir.path().join("a.ppm");
    write_ppm(&path, &img).unwrap();
    assert_eq!(read_ppm(&path).unwrap(), img);
    assert!(read_ppm(&dir.path().join("missing.ppm")).is_err());
}

proptest! {
    #[test]
    fn eight_bit_images_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let bytes: Vec<u8> = (0..h * w * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 24) as u8).collect();
        let img = quantized(h, w, &bytes);
        prop_assert_eq!(decode_ppm(&encode_ppm(&img).unwrap()).unwrap(), img);
    }
}
