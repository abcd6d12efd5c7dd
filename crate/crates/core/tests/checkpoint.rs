mod common;

use common::{sharpen, tiny};
use mtpslab::model::checkpoint::{load_checkpoint, read_checkpoint_bytes, save_checkpoint, write_checkpoint_bytes};
use mtpslab::model::{DecoderModel, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        let mut m = tiny::<f64>(variant, 3, 7);
        sharpen(&mut m, 1.5);
        let a = dir.path().join(format!("{variant}.ckpt"));
        let b = dir.path().join(format!("{variant}.again.ckpt"));
        save_checkpoint(&m, &a).unwrap();
        let back: DecoderModel<f64> = load_checkpoint(&a).unwrap();
        assert_eq!(back, m);
        save_checkpoint(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn every_single_byte_corruption_is_detected() {
    let m = tiny::<f32>(Variant::MtpDeepseek, 2, 1);
    let bytes = write_checkpoint_bytes(&m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Every header byte, then a random sample of payload positions.
    let header = 256.min(bytes.len());
    let positions: Vec<usize> = (0..header)
        .chain((0..2000).map(|_| rng.random_range(0..bytes.len())))
        .collect();
    for pos in positions {
        let mut bad = bytes.clone();
        bad[pos] ^= 1 << rng.random_range(0..8);
        assert!(
            read_checkpoint_bytes::<f32>(&bad).is_err(),
            "flip at {pos} not detected"
        );
    }
    assert!(read_checkpoint_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(read_checkpoint_bytes::<f32>(&longer).is_err());
}

#[test]
fn precision_is_part_of_the_format() {
    let m = tiny::<f32>(Variant::Ntp, 1, 1);
    let bytes = write_checkpoint_bytes(&m).unwrap();
    assert!(read_checkpoint_bytes::<f64>(&bytes).is_err());
    let wide: DecoderModel<f64> = m.cast();
    let back: DecoderModel<f32> = wide.cast();
    assert_eq!(write_checkpoint_bytes(&back).unwrap(), bytes);
}
