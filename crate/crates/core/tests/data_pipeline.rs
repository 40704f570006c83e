use std::path::PathBuf;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restorenet::data::{
    corrupt, corrupt_fixed, load_idx, normalize, split, BatchStream, CorruptionSpec, Image, MnistSet, SplitSpec,
    IMAGE_PIXELS, IMAGE_SIDE,
};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k-images-idx3-ubyte.gz")
}

fn constant(value: f64) -> Image {
    Image::new(IMAGE_SIDE, vec![value; IMAGE_PIXELS]).unwrap()
}

fn synthetic_set(n: usize) -> Arc<MnistSet> {
    let bytes: Vec<u8> = (0..n * IMAGE_PIXELS).map(|i| ((i * 37 + i / 784) % 256) as u8).collect();
    Arc::new(MnistSet::from_images(IMAGE_SIDE, IMAGE_SIDE, bytes).unwrap())
}

fn spec(density: f64) -> CorruptionSpec {
    CorruptionSpec {
        density,
        ..CorruptionSpec::default()
    }
}

#[test]
fn bundled_subset_loads() {
    let set = load_idx(fixture()).unwrap();
    assert_eq!(set.len(), 5000);
    assert_eq!(set.side(), 28);
    assert_eq!(set.raw(0).len(), 784);
    assert_eq!(set.checksum().len(), 64);
}

#[test]
fn normalize_exhaustive_roundtrip() {
    let bytes: Vec<u8> = (0..IMAGE_PIXELS).map(|i| (i % 256) as u8).collect();
    let img = normalize(&bytes);
    assert_eq!(img.pixels()[0], 0.0);
    assert_eq!(img.pixels()[255], 1.0);
    assert_eq!(img.pixels()[128], 128.0 / 255.0);
    assert!((img.pixels()[128] - 0.50196).abs() < 1e-5);
    for (b, v) in bytes.iter().zip(img.pixels()) {
        assert_eq!((v * 255.0).round() as u8, *b);
        assert_eq!(v * 255.0, *b as f64);
    }
}

#[test]
fn density_zero_blanks_lower_rows_only() {
    let set = load_idx(fixture()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..50 {
        let clean = set.image(i);
        let out = corrupt(&clean, &spec(0.0), &mut rng);
        for r in 0..14 {
            assert_eq!(out.row(r), clean.row(r));
        }
        for r in 14..28 {
            assert!(out.row(r).iter().all(|&p| p == 0.0));
        }
    }
}

#[test]
fn density_one_replaces_every_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = corrupt(&constant(0.5), &spec(1.0), &mut rng);
    assert!(out.pixels().iter().all(|&p| p == 0.0 || p == 1.0));
}

#[test]
fn noise_statistics_at_default_density() {
    // Upper rows of a mid-grey image: any 0 or 1 there is a replacement.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut replaced, mut salt, mut total) = (0usize, 0usize, 0usize);
    for _ in 0..30 {
        let out = corrupt(&constant(0.5), &spec(0.2), &mut rng);
        for &p in &out.pixels()[..14 * 28] {
            total += 1;
            if p == 1.0 {
                salt += 1;
                replaced += 1;
            } else if p == 0.0 {
                replaced += 1;
            }
        }
    }
    assert!(total >= 10_000);
    let frac = replaced as f64 / total as f64;
    let salt_share = salt as f64 / replaced as f64;
    assert!((0.18..=0.22).contains(&frac), "replaced {frac}");
    assert!((0.45..=0.55).contains(&salt_share), "salt share {salt_share}");
}

#[test]
fn blanking_is_idempotent_noise_is_not() {
    let set = load_idx(fixture()).unwrap();
    let clean = set.image(7);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let once = corrupt(&clean, &spec(0.0), &mut rng);
    let twice = corrupt(&once, &spec(0.0), &mut rng);
    assert_eq!(once, twice);
    let noisy = corrupt(&clean, &spec(0.3), &mut rng);
    let noisier = corrupt(&noisy, &spec(0.3), &mut rng);
    assert_ne!(noisy, noisier);
}

#[test]
fn split_examples() {
    let s = split(60_000, &SplitSpec::default()).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (45_000, 15_000));
    let s = split(4, &SplitSpec::default()).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (3, 1));
    let s = split(2, &SplitSpec::default()).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (1, 1));
    assert!(split(1, &SplitSpec::default()).is_err());
}

#[test]
fn batches_per_epoch_and_singletons() {
    let set = synthetic_set(45_000);
    let indices: Vec<usize> = (0..45_000).collect();
    let stream = BatchStream::new(set.clone(), indices, 100, spec(0.2), ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(stream.batches_per_epoch(), 450);

    let small = synthetic_set(5);
    let mut stream =
        BatchStream::new(small.clone(), (0..5).collect(), 1, spec(0.2), ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut seen = Vec::new();
    for _ in 0..5 {
        let batch = stream.next_batch();
        assert_eq!(batch.len(), 1);
        let pair = &batch[0];
        let idx = (0..5).find(|&i| small.image(i) == pair.clean).expect("clean target is a stored image");
        seen.push(idx);
        for (r, row) in (0..28).map(|r| (r, pair.corrupted.row(r))) {
            for (c, &p) in row.iter().enumerate() {
                let original = pair.clean.row(r)[c];
                assert!(p == 0.0 || p == 1.0 || (r < 14 && p == original));
            }
        }
    }
    seen.sort();
    assert_eq!(seen, vec![0, 1, 2, 3, 4]);
}

#[test]
fn equal_seeds_give_equal_streams() {
    let set = synthetic_set(40);
    let make = |seed| BatchStream::new(set.clone(), (0..40).collect(), 8, spec(0.2), ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let (mut a, mut b, mut c) = (make(9), make(9), make(10));
    let mut differs = false;
    for _ in 0..12 {
        let (x, y, z) = (a.next_batch(), b.next_batch(), c.next_batch());
        assert_eq!(x, y);
        differs |= x != z;
    }
    assert!(differs);
    assert!(a.epoch() >= 2);
}

#[test]
fn fresh_noise_each_serving() {
    let set = synthetic_set(4);
    let mut stream = BatchStream::new(set, (0..4).collect(), 4, spec(0.2), ChaCha8Rng::seed_from_u64(2)).unwrap();
    let first = stream.next_batch();
    let second = stream.next_batch();
    for pair in &first {
        let again = second.iter().find(|p| p.clean == pair.clean).unwrap();
        assert_ne!(again.corrupted, pair.corrupted);
    }
}

#[test]
fn stream_state_restores_position() {
    let set = synthetic_set(30);
    let make = || BatchStream::new(set.clone(), (0..30).collect(), 7, spec(0.2), ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut a = make();
    for _ in 0..5 {
        a.next_batch();
    }
    let saved = a.state();
    let expected: Vec<_> = (0..6).map(|_| a.next_batch()).collect();
    let mut b = make();
    b.restore(&saved).unwrap();
    let got: Vec<_> = (0..6).map(|_| b.next_batch()).collect();
    assert_eq!(expected, got);
}

fn arb_image() -> impl Strategy<Value = Image> {
    prop::collection::vec(any::<u8>(), IMAGE_PIXELS).prop_map(|b| normalize(&b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blanked_rows_carry_no_signal(
        img in arb_image(),
        start in 0usize..28,
        len in 1usize..28,
        density in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let end = (start + len - 1).min(27);
        let spec = CorruptionSpec { blank_start: start, blank_end: end, density };
        let before = img.clone();
        let out = corrupt(&img, &spec, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&img, &before);
        prop_assert!(out.is_normalized());
        for r in 0..28 {
            for (c, &p) in out.row(r).iter().enumerate() {
                let noise = p == 0.0 || p == 1.0;
                if (start..=end).contains(&r) {
                    prop_assert!(noise);
                } else {
                    prop_assert!(noise || p == img.row(r)[c]);
                }
            }
        }
    }

    #[test]
    fn split_is_a_partition(n in 3usize..3000, seed in any::<u64>()) {
        let spec = SplitSpec { seed, ..SplitSpec::default() };
        let s = split(n, &spec).unwrap();
        prop_assert_eq!(s.train.len(), (0.75 * n as f64).round() as usize);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split(n, &spec).unwrap(), s);
    }

    #[test]
    fn normalize_then_quantize_recovers_bytes(bytes in prop::collection::vec(any::<u8>(), IMAGE_PIXELS)) {
        prop_assert_eq!(normalize(&bytes).to_bytes(), bytes);
    }

    #[test]
    fn fixed_corruption_is_deterministic(seed in any::<u64>()) {
        let images: Vec<Image> = (0..3).map(|i| constant(i as f64 / 3.0)).collect();
        prop_assert_eq!(corrupt_fixed(&images, &spec(0.2), seed), corrupt_fixed(&images, &spec(0.2), seed));
    }
}
