use mganet_core::nifti::{decode_volume, encode_volume, read_volume, write_volume};
use mganet_core::{Geometry, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample() -> Volume {
    let g = Geometry::new([7, 5, 4], [0.9, 1.1, 2.5]).unwrap();
    Volume::from_fn(g, |x, y, z| (x as f32 * 0.25 - y as f32) * (z as f32 + 0.5))
}

#[test]
fn files_round_trip_with_and_without_gzip() {
    let dir = tempfile::tempdir().unwrap();
    let v = sample();
    for name in ["a.nii", "a.nii.gz"] {
        let path = dir.path().join(name);
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data(), v.data());
        assert_eq!(back.dims(), v.dims());
        for (a, b) in back.spacing().iter().zip(v.spacing()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let raw = std::fs::read(dir.path().join("a.nii")).unwrap();
    assert_eq!(&raw[344..348], b"n+1\0");
}

#[test]
fn every_truncation_is_an_error() {
    for gzip in [false, true] {
        let bytes = encode_volume(&sample(), gzip).unwrap();
        for cut in (0..bytes.len()).step_by(7) {
            assert!(decode_volume(&bytes[..cut]).is_err(), "cut at {cut} of {} accepted", bytes.len());
        }
    }
}

#[test]
fn fuzzed_headers_never_panic() {
    let clean = encode_volume(&sample(), false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..2000 {
        let mut bytes = clean.clone();
        for _ in 0..rng.random_range(1..8) {
            let at = rng.random_range(0..352);
            bytes[at] = rng.random();
        }
        let _ = std::panic::catch_unwind(|| decode_volume(&bytes)).expect("decoder panicked");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let len = rng.random_range(0..1024);
        let junk: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        assert!(decode_volume(&junk).is_err());
    }
}
