use std::path::{Path, PathBuf};

use proptest::prelude::*;
use rand::SeedableRng;
use svg_core::data::*;
use svg_core::rng::{stream, Domain, Rng};

fn write_idx(dir: &Path, image_magic: u32, pixels: &[Vec<u8>], labels: &[u8]) -> (PathBuf, PathBuf) {
    let mut img = Vec::new();
    for v in [image_magic, pixels.len() as u32, 28, 28] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for p in pixels {
        img.extend_from_slice(p);
    }
    let mut lab = Vec::new();
    for v in [0x801u32, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    let (ip, lp) = (dir.join("images"), dir.join("labels"));
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lab).unwrap();
    (ip, lp)
}

fn ramp(offset: usize) -> Vec<u8> {
    (0..784).map(|i| ((i + offset) % 256) as u8).collect()
}

#[test]
fn idx_fixture_parses_and_scales() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_idx(dir.path(), 0x803, &[ramp(0), ramp(1), vec![255; 784]], &[7, 1, 9]);
    let digits = load_mnist_idx(&ip, &lp, Split::Test).unwrap();
    assert_eq!(digits.len(), 3);
    assert_eq!(digits.iter().map(|d| d.label).collect::<Vec<_>>(), vec![7, 1, 9]);
    for (i, d) in digits.iter().enumerate() {
        assert_eq!(d.index, i);
        assert_eq!(d.split, Split::Test);
        assert_eq!(d.pixels.len(), 784);
        assert!(d.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
    assert_eq!(digits[0].pixels[3], 3.0 / 255.0);
    assert_eq!(digits[1].pixels[254], 1.0);
    assert!(digits[2].pixels.iter().all(|&p| p == 1.0));

    let (ip, lp) = write_idx(dir.path(), 0x803, &[vec![0; 784]], &[0]);
    let zero = load_mnist_idx(&ip, &lp, Split::Train).unwrap();
    assert!(zero[0].pixels.iter().all(|&p| p == 0.0));
}

#[test]
fn idx_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_idx(dir.path(), 0x804, &[ramp(0)], &[1]);
    let msg = load_mnist_idx(&ip, &lp, Split::Train).unwrap_err().to_string();
    assert!(msg.contains("0x00000804"), "{msg}");

    let (ip, lp) = write_idx(dir.path(), 0x803, &[ramp(0), ramp(2)], &[1]);
    assert!(load_mnist_idx(&ip, &lp, Split::Train).is_err());

    let (ip, lp) = write_idx(dir.path(), 0x803, &[ramp(0), ramp(2)], &[1, 2]);
    let bytes = std::fs::read(&ip).unwrap();
    std::fs::write(&ip, &bytes[..bytes.len() - 10]).unwrap();
    let msg = load_mnist_idx(&ip, &lp, Split::Train).unwrap_err().to_string();
    assert!(msg.contains("truncated"), "{msg}");

    let msg = load_split(&dir.path().join("nowhere"), Split::Train).unwrap_err().to_string();
    assert!(msg.contains("nowhere"), "{msg}");
}

fn glyph(size: usize, value: f64, source: usize) -> Glyph {
    Glyph {
        size,
        pixels: (0..size * size).map(|i| value * ((i % 3) as f64 + 1.0) / 3.0).collect(),
        source,
    }
}

#[test]
fn single_frame_render_matches_direct_paste() {
    let g = glyph(14, 0.9, 3);
    for seed in 0..20 {
        let seq = render_sequence(&[&g], 1, 32, 32, 4.0, seed).unwrap();
        let bounds = Bounds { height: 32, width: 32, sprite: 14, max_speed: 4.0 };
        let start = TrajectoryState::random(&bounds, &mut stream(seed, Domain::Trajectory, &[0]));
        let (x, y) = start.offset();
        let mut expected = vec![0.0; 32 * 32];
        for r in 0..14 {
            for c in 0..14 {
                expected[(y + r) * 32 + x + c] = g.pixels[r * 14 + c];
            }
        }
        assert_eq!(seq.frame(0), &expected[..]);
        assert_eq!(seq.offsets, vec![vec![(x, y)]]);
    }
}

#[test]
fn rendering_is_deterministic_and_in_range() {
    let (a, b) = (glyph(14, 1.0, 0), glyph(14, 0.8, 1));
    let s1 = render_sequence(&[&a, &b], 30, 32, 32, 4.0, 11).unwrap();
    let s2 = render_sequence(&[&a, &b], 30, 32, 32, 4.0, 11).unwrap();
    assert_eq!(s1, s2);
    assert!(s1.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    assert_eq!(s1.provenance.digit_ids, vec![0, 1]);
    assert_ne!(render_sequence(&[&a, &b], 30, 32, 32, 4.0, 12).unwrap().pixels, s1.pixels);
    assert!(render_sequence(&[&a], 2, 12, 32, 4.0, 0).is_err());
}

#[test]
fn digit_trajectories_are_independent() {
    let (a, b, c) = (glyph(14, 1.0, 0), glyph(14, 0.5, 1), glyph(14, 0.7, 2));
    for seed in 0..10 {
        let one = render_sequence(&[&a], 60, 32, 32, 4.0, seed).unwrap();
        let two = render_sequence(&[&a, &b], 60, 32, 32, 4.0, seed).unwrap();
        let swapped = render_sequence(&[&a, &c], 60, 32, 32, 4.0, seed).unwrap();
        assert_eq!(one.collisions[0], two.collisions[0]);
        assert_eq!(one.offsets[0], two.offsets[0]);
        assert_eq!(two.collisions, swapped.collisions);
        assert_ne!(two.offsets[0], two.offsets[1]);
    }
}

#[test]
fn synchronized_sequences_share_motion_not_appearance() {
    let pool: Vec<Glyph> = (0..4).map(|i| glyph(14, 0.3 + 0.2 * i as f64, i)).collect();
    let batch = synchronized_batch(&pool, 1, 5, 2, 40, 32, 32, 4.0).unwrap();
    assert_eq!(batch[0].collisions, batch[1].collisions);
    assert_eq!(batch[0].offsets, batch[1].offsets);
    assert!(!batch[0].collisions[0].is_empty());
    let diff: f64 = batch[0].pixels.iter().zip(&batch[1].pixels).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 0.0);

    let pairs = synchronized_batch(&pool, 2, 5, 2, 10, 32, 32, 4.0).unwrap();
    assert_eq!(pairs[1].provenance.digit_ids, vec![2, 3]);
    assert!(synchronized_batch(&pool, 2, 5, 3, 10, 32, 32, 4.0).is_err());
}

#[test]
fn synchronized_batch_at_probe_scale() {
    // 500 sequences of 100 frames; 16x16 frames keep this to ~100 MB
    let pool: Vec<Glyph> = (0..500).map(|i| glyph(14, 1.0, i)).collect();
    let batch = synchronized_batch(&pool, 1, 9, 500, 100, 16, 16, 4.0).unwrap();
    assert_eq!(batch.len(), 500);
    assert!(batch.iter().all(|s| s.len == 100 && s.collisions == batch[0].collisions));
}

#[test]
fn branching_sequences_agree_until_first_collision() {
    let pool = vec![glyph(14, 1.0, 0)];
    let start = TrajectoryState::new(9.0, 2.5, 2.5, -1.0);
    let batch = branching_batch(&pool, &start, 50, 12, 32, 32, 4.0, 3).unwrap();
    let hit = batch[0].collisions[0][0].step;
    assert_eq!(hit, 3);
    for s in &batch {
        assert_eq!(s.collisions[0][0].step, hit);
        assert_eq!(s.offsets[0][..=hit], batch[0].offsets[0][..=hit]);
    }
    let after: std::collections::HashSet<_> = batch.iter().map(|s| s.offsets[0][hit + 2]).collect();
    assert!(after.len() > 10);
    let outside = TrajectoryState::new(19.0, 0.0, 0.0, 0.0);
    assert!(branching_batch(&pool, &outside, 2, 4, 32, 32, 4.0, 3).is_err());
}

#[test]
fn sample_mnist_sequences_are_reproducible() {
    let cfg = svg_core::config::DataConfig {
        mnist_dir: Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-sample"),
        ..Default::default()
    };
    let digits = load_split(&cfg.mnist_dir, Split::Test).unwrap();
    let data = SmMnist::from_digits(&digits, &cfg).unwrap();
    let a = data.sequences(4, Domain::TestData, 0, 3, 10).unwrap();
    let b = data.sequences(4, Domain::TestData, 0, 3, 10).unwrap();
    assert_eq!(a, b);
    assert_eq!(data.sequence(4, Domain::TestData, 2, 10).unwrap(), a[2]);
    assert_ne!(a[0].pixels, a[1].pixels);
    assert_ne!(data.sequence(4, Domain::TrainData, 0, 10).unwrap(), a[0]);
    for s in &a {
        assert_eq!(s.provenance.digit_ids.len(), cfg.num_digits);
        assert!(s.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn export_header_and_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let g = glyph(14, 1.0, 0);
    let seqs: Vec<_> = (0..2).map(|s| render_sequence(&[&g], 3, 16, 16, 4.0, s).unwrap()).collect();
    let path = dir.path().join("x.smmn");
    export_sequences(&path, &seqs).unwrap();
    let (len, h, w, count, px) = import_sequences(&path).unwrap();
    assert_eq!((len, h, w, count), (3, 16, 16, 2));
    let expected: Vec<f32> = seqs.iter().flat_map(|s| s.pixels.iter().map(|&p| p as f32)).collect();
    assert_eq!(px, expected);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(import_sequences(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn motion_is_exact_between_collisions(seed in any::<u64>(), sprite in 4usize..28) {
        let bounds = Bounds { height: 32, width: 40, sprite, max_speed: 4.0 };
        let mut rng = Rng::seed_from_u64(seed);
        let mut s = TrajectoryState::random(&bounds, &mut rng);
        for _ in 0..300 {
            let before = s.clone();
            step_trajectory(&mut s, &mut rng, &bounds);
            prop_assert!(bounds.contains(&s));
            if s.collisions.len() == before.collisions.len() {
                prop_assert_eq!(s.x, before.x + before.vx);
                prop_assert_eq!(s.y, before.y + before.vy);
                prop_assert_eq!((s.vx, s.vy), (before.vx, before.vy));
            } else {
                for c in &s.collisions[before.collisions.len()..] {
                    prop_assert_eq!(c.step, s.step);
                    match c.wall {
                        Wall::Left => prop_assert!(s.x == 0.0 && s.vx >= 0.0),
                        Wall::Right => prop_assert!(s.x == bounds.max_x() && s.vx <= 0.0),
                        Wall::Top => prop_assert!(s.y == 0.0 && s.vy >= 0.0),
                        Wall::Bottom => prop_assert!(s.y == bounds.max_y() && s.vy <= 0.0),
                    }
                }
                prop_assert!(s.vx.abs() <= 4.0 && s.vy.abs() <= 4.0);
            }
        }
    }
}
