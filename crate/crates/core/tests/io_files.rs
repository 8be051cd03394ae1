//! File formats exercised through the filesystem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfm_core::io::{self, IoError};
use sfm_core::types::{DepthMap, FlowField, Image};

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
    Image::new(w, h, c, (0..w * h * c).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect())
}

#[test]
fn eight_bit_images_round_trip_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, channels) in [("rgb.png", 3), ("gray.png", 1), ("rgb.ppm", 3)] {
        let img = random_image(&mut rng, 13, 7, channels);
        let path = dir.path().join(name);
        io::write_image(&path, &img).unwrap();
        assert_eq!(io::read_image(&path).unwrap(), img, "{name}");
    }
}

#[test]
fn depth_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f64> = (0..35).map(|_| rng.random_range(0.1..80.0f32) as f64).collect();
    let depth = DepthMap::new(7, 5, data);
    let pfm = dir.path().join("d.pfm");
    io::write_depth(&pfm, &depth, 1.0).unwrap();
    assert_eq!(io::read_depth(&pfm, 1.0).unwrap(), depth);

    let mut kinect = DepthMap::filled(3, 2, 5.0);
    kinect.data[4] = 0.0;
    let png = dir.path().join("d.png");
    io::write_depth(&png, &kinect, 1e-3).unwrap();
    let back = io::read_depth(&png, 1e-3).unwrap();
    assert_eq!(back.data[0], 5000.0 * 1e-3);
    let sup = io::read_depth_supervision(&png, 1e-3).unwrap();
    assert_eq!(sup.mask, vec![true, true, true, true, false, true]);
}

#[test]
fn flow_files_round_trip_at_single_precision() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut flow = FlowField::zeros(6, 4);
    for v in flow.u.iter_mut().chain(flow.v.iter_mut()) {
        *v = rng.random_range(-20.0..20.0f32) as f64;
    }
    let path = dir.path().join("f.flo");
    io::write_flo(&path, &flow).unwrap();
    let back = io::read_flo(&path).unwrap();
    assert_eq!((back.u, back.v), (flow.u, flow.v));

    let small = dir.path().join("zero.flo");
    io::write_flo(&small, &FlowField::zeros(2, 2)).unwrap();
    assert_eq!(std::fs::metadata(&small).unwrap().len(), 4 + 4 + 4 + 32);
}

#[test]
fn malformed_files_are_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.flo");
    std::fs::write(&bad, b"NOPE\x02\0\0\0\x02\0\0\0").unwrap();
    assert!(matches!(io::read_flo(&bad), Err(IoError::Parse { .. })));
    let truncated = dir.path().join("short.ppm");
    std::fs::write(&truncated, b"P6 2 2 255\n\x01\x02").unwrap();
    assert!(io::read_image(&truncated).is_err());
    assert!(io::read_depth(&dir.path().join("missing.pfm"), 1.0).is_err());
}

#[test]
fn masks_are_binarized_on_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    io::write_mask(&path, 2, 2, &[0.0, 0.49, 0.51, 1.0]).unwrap();
    assert_eq!(io::read_mask(&path).unwrap(), (2, 2, vec![false, false, true, true]));
}

#[test]
fn atomic_writes_leave_only_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.txt");
    io::write_atomic(&path, b"first").unwrap();
    io::write_atomic(&path, b"second").unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"second");
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
}
