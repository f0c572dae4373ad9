mod common;

use stan_core::manifest::{Manifest, Split};
use stan_core::saliency::f1_counts;
use stan_core::synth::{self, SynthConfig};
use stan_core::video::{decode_clip, encode_clip, sample_frames, sample_indices, select_frames};
use stan_core::views::{
    apply_view, make_global_local, make_local, roi_mask, Joint, KeypointTrack, Rect, RoiMask, View, ViewParams,
};
use stan_core::{Error, Tensor};

fn track(frames: Vec<Vec<(f32, f32, f32)>>) -> KeypointTrack {
    KeypointTrack {
        frames: frames
            .into_iter()
            .map(|f| {
                f.into_iter()
                    .enumerate()
                    .map(|(i, (x, y, confidence))| Joint {
                        id: i as u32,
                        x,
                        y,
                        confidence,
                    })
                    .collect()
            })
            .collect(),
    }
}

fn rect(x0: usize, y0: usize, x1: usize, y1: usize) -> Rect {
    Rect { x0, y0, x1, y1 }
}

// ---- frame sampling ----

#[test]
fn sampling_identity_when_lengths_match() {
    assert_eq!(sample_indices(20, 20).unwrap(), (0..20).collect::<Vec<_>>());
}

#[test]
fn sampling_394_to_20_is_uniform() {
    let idx = sample_indices(394, 20).unwrap();
    assert_eq!(idx.len(), 20);
    assert_eq!((idx[0], idx[19]), (0, 393));
    let gaps: Vec<usize> = idx.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(gaps.iter().all(|&g| g > 0));
    let (lo, hi) = (gaps.iter().min().unwrap(), gaps.iter().max().unwrap());
    assert!(hi - lo <= 1, "gaps {gaps:?}");
    // 393/19 never lands on a half, so plain rounding is an exact oracle here
    let oracle: Vec<usize> = (0..20).map(|i| (i as f64 * 393.0 / 19.0).round() as usize).collect();
    assert_eq!(idx, oracle);
}

#[test]
fn sampling_rounds_halves_up_and_has_length_k() {
    // L=4, k=3: positions 0, 1.5, 3
    assert_eq!(sample_indices(4, 3).unwrap(), vec![0, 2, 3]);
    for len in 1..60 {
        for k in 1..=len {
            let idx = sample_indices(len, k).unwrap();
            assert_eq!(idx.len(), k);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(idx[0], 0);
            if k > 1 {
                assert_eq!(*idx.last().unwrap(), len - 1);
            }
        }
    }
    assert!(sample_indices(5, 0).is_err());
    assert!(sample_indices(5, 6).is_err());
}

#[test]
fn sample_frames_carries_index_map() {
    let mut r = common::rng(3);
    let clip = common::random::<f32>(&[3, 11, 2, 2], &mut r);
    let (short, idx) = sample_frames(&clip, 4).unwrap();
    assert_eq!(short.shape(), &[3, 4, 2, 2]);
    for c in 0..3 {
        for (k, &i) in idx.iter().enumerate() {
            for p in 0..4 {
                assert_eq!(short.get(&[c, k, p / 2, p % 2]), clip.get(&[c, i, p / 2, p % 2]));
            }
        }
    }
    assert!(select_frames(&clip, &[11]).is_err());
}

#[test]
fn clip_container_round_trip() {
    let mut r = common::rng(4);
    let clip = common::random::<f32>(&[3, 5, 4, 6], &mut r);
    let bytes = encode_clip(&clip).unwrap();
    assert_eq!(decode_clip(&bytes).unwrap(), clip);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_clip(&bad), Err(Error::Tensor(_))));
}

// ---- views ----

#[test]
fn roi_is_the_joint_bounding_box() {
    let t = track(vec![vec![(10.0, 10.0, 0.9), (20.0, 30.0, 0.9)]]);
    let m = roi_mask(&t, 64, 64, 0.0, 0.3).unwrap();
    assert_eq!(m.boxes, vec![rect(10, 10, 20, 30)]);
}

#[test]
fn roi_margin_dilates_by_extent_and_clamps() {
    let t = track(vec![vec![(10.0, 10.0, 0.9), (20.0, 30.0, 0.9)]]);
    // extents 10 x 20: half of each per side
    let m = roi_mask(&t, 64, 64, 0.5, 0.3).unwrap();
    assert_eq!(m.boxes, vec![rect(5, 0, 25, 40)]);
    let m = roi_mask(&t, 36, 24, 0.5, 0.3).unwrap();
    assert_eq!(m.boxes, vec![rect(5, 0, 23, 35)]);
}

#[test]
fn roi_ignores_unconfident_joints_and_carries_forward() {
    let t = track(vec![
        vec![(1.0, 1.0, 0.1)],
        vec![(4.0, 4.0, 0.9), (6.0, 7.0, 0.8), (30.0, 30.0, 0.2)],
        vec![(20.0, 20.0, 0.29)],
        vec![(2.0, 3.0, 0.3), (5.0, 5.0, 0.3)],
    ]);
    let m = roi_mask(&t, 32, 32, 0.0, 0.3).unwrap();
    let b = rect(4, 4, 6, 7);
    // frame 0 has no confident joint and takes the first valid box
    assert_eq!(m.boxes, vec![b, b, b, rect(2, 3, 5, 5)]);
}

#[test]
fn roi_rejects_empty_tracks() {
    assert!(roi_mask(&KeypointTrack::default(), 8, 8, 0.1, 0.3).is_err());
    let t = track(vec![vec![(1.0, 1.0, 0.0)]]);
    assert!(roi_mask(&t, 8, 8, 0.1, 0.3).is_err());
    let t = track(vec![vec![(1.0, 1.0, 1.0)]]);
    assert!(roi_mask(&t, 8, 8, -0.1, 0.3).is_err());
}

fn checkerboard(t: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut c = Tensor::zeros(&[3, t, h, w]);
    for ch in 0..3 {
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let v = if (x + y + f) % 2 == 0 { 0.9 } else { 0.2 + 0.1 * ch as f32 };
                    c.set(&[ch, f, y, x], v);
                }
            }
        }
    }
    c
}

#[test]
fn make_local_full_mask_is_identity() {
    let mut r = common::rng(5);
    let clip = common::random::<f32>(&[3, 3, 5, 4], &mut r);
    assert_eq!(make_local(&clip, &RoiMask::full(3, 5, 4)).unwrap(), clip);
}

#[test]
fn make_local_half_mask_on_checkerboard() {
    let (t, h, w) = (2, 4, 6);
    let clip = checkerboard(t, h, w);
    let mask = RoiMask {
        height: h,
        width: w,
        boxes: vec![rect(0, 0, 2, 3); t],
    };
    let out = make_local(&clip, &mask).unwrap();
    for ch in 0..3 {
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let (o, i) = (out.get(&[ch, f, y, x]), clip.get(&[ch, f, y, x]));
                    if x <= 2 {
                        assert_eq!(o.to_bits(), i.to_bits());
                    } else {
                        assert_eq!(o.to_bits(), 0f32.to_bits());
                    }
                }
            }
        }
    }
    assert_eq!(make_local(&out, &mask).unwrap(), out, "idempotent");
}

#[test]
fn global_local_blend_arithmetic() {
    let clip = Tensor::<f32>::full(&[3, 1, 2, 2], 0.8);
    let mask = RoiMask {
        height: 2,
        width: 2,
        boxes: vec![rect(0, 0, 0, 1)],
    };
    let local = make_local(&clip, &mask).unwrap();
    let gl = make_global_local(&clip, &local, 0.5).unwrap();
    for ch in 0..3 {
        for y in 0..2 {
            assert_eq!(gl.get(&[ch, 0, y, 0]), 0.8);
            assert_eq!(gl.get(&[ch, 0, y, 1]), 0.4);
        }
    }
    let near_one = make_global_local(&clip, &local, 1.0 - 1e-9).unwrap();
    assert!(common::max_abs_diff(near_one.data(), clip.data()) < 1e-6);
    let near_zero = make_global_local(&clip, &local, 1e-9).unwrap();
    assert!(common::max_abs_diff(near_zero.data(), local.data()) < 1e-6);
    assert!(make_global_local(&clip, &local, 1.0).is_err());
    assert!(make_global_local(&clip, &local, 0.0).is_err());
}

#[test]
fn views_preserve_shape_range_and_roi_pixels() {
    let cfg = SynthConfig {
        clips_per_class: 3,
        ..SynthConfig::default()
    };
    let p = ViewParams::default();
    for c in synth::generate(&cfg).unwrap() {
        let mask = roi_mask(&c.keypoints, 32, 32, p.roi_margin, p.confidence_floor).unwrap();
        for view in stan_core::views::VIEWS {
            let v = apply_view(view, &c.clip, &c.keypoints, &p).unwrap();
            assert_eq!(v.shape(), c.clip.shape());
            assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
            if view != View::Global {
                for f in 0..cfg.frames {
                    let b = mask.boxes[f];
                    for ch in 0..3 {
                        assert_eq!(v.get(&[ch, f, b.y0, b.x0]), c.clip.get(&[ch, f, b.y0, b.x0]));
                    }
                }
            }
        }
    }
    assert!(matches!("both".parse::<View>(), Err(Error::UnknownView(_))));
    assert_eq!("global+local".parse::<View>().unwrap(), View::GlobalLocal);
}

// ---- synthetic data ----

fn small() -> SynthConfig {
    SynthConfig {
        clips_per_class: 5,
        ..SynthConfig::default()
    }
}

#[test]
fn generator_is_deterministic_and_order_free() {
    let cfg = small();
    let a = synth::generate(&cfg).unwrap();
    let b = synth::generate(&cfg).unwrap();
    assert_eq!(a, b);
    // each clip depends only on (seed, index)
    assert_eq!(synth::generate_clip(&cfg, 7), a[7]);
    let other = synth::generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a[0].clip, other[0].clip);
}

#[test]
fn written_datasets_are_byte_identical() {
    let cfg = small();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = synth::write_dataset(&cfg, d1.path()).unwrap();
    synth::write_dataset(&cfg, d2.path()).unwrap();
    let read = |d: &std::path::Path, p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read(d1.path(), "manifest.json"), read(d2.path(), "manifest.json"));
    for e in &m.clips {
        assert_eq!(read(d1.path(), &e.path), read(d2.path(), &e.path));
    }
    let back = Manifest::read(&d1.path().join("manifest.json")).unwrap();
    assert_eq!(back, m);
}

#[test]
fn default_dataset_is_balanced_with_windows_in_range() {
    let cfg = SynthConfig::default();
    let clips = synth::generate(&cfg).unwrap();
    let m = synth::manifest_for(&cfg, &clips);
    assert_eq!(m.clips.len(), 200);
    for k in 0..4 {
        assert_eq!(m.clips.iter().filter(|c| c.label == k).count(), 50);
    }
    for (e, c) in m.clips.iter().zip(&clips) {
        let mask = e.importance_mask();
        let first = mask.iter().position(|&b| b).unwrap();
        let n = mask.iter().filter(|&&b| b).count();
        // one contiguous run matching the generator's window
        assert!(mask[first..first + n].iter().all(|&b| b));
        assert_eq!((first, n), c.window);
        let frac = n as f64 / cfg.frames as f64;
        assert!((0.25..=0.5).contains(&frac), "{}: window fraction {frac}", e.id);
    }
    let groups: std::collections::BTreeSet<usize> = m.clips.iter().map(|c| c.group).collect();
    assert_eq!(groups.len(), 15);
    let test = m.indices_in(Split::Test);
    assert_eq!(test.len(), 40);
    for k in 0..4 {
        assert_eq!(test.iter().filter(|&&i| m.clips[i].label == k).count(), 10);
    }
}

#[test]
fn planted_signal_is_recoverable_from_pixels() {
    for cfg in [SynthConfig::default(), SynthConfig { clips_per_class: 3, ..SynthConfig::long() }] {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for c in synth::generate(&cfg).unwrap() {
            for (p, l) in synth::planted_detector(&c.clip).into_iter().zip(&c.importance) {
                match (p, *l) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
        assert_eq!(f1_counts(tp, fp, fn_), 1.0, "frames {}: fp {fp} fn {fn_}", cfg.frames);
    }
}

#[test]
fn class_does_not_influence_window_or_background() {
    // the same clip index under different class counts gets a different
    // label but the same window, clutter and neutral drift
    let four = SynthConfig::default();
    let two = SynthConfig {
        num_classes: 2,
        ..SynthConfig::default()
    };
    let mut differing_labels = 0;
    for i in 0..100 {
        let (a, b) = (synth::generate_clip(&four, i), synth::generate_clip(&two, i));
        assert_eq!(a.window, b.window);
        if a.label != b.label {
            differing_labels += 1;
        }
        let (start, len) = a.window;
        let inactive: Vec<usize> = (0..four.frames).filter(|t| !(start..start + len).contains(t)).collect();
        assert_eq!(
            select_frames(&a.clip, &inactive).unwrap(),
            select_frames(&b.clip, &inactive).unwrap()
        );
    }
    assert_eq!(differing_labels, 50);
}

#[test]
fn config_rejects_windows_longer_than_the_clip() {
    let bad = SynthConfig {
        window_fraction: [0.5, 1.2],
        ..SynthConfig::default()
    };
    assert!(matches!(synth::generate(&bad), Err(Error::Config(_))));
    let bad = SynthConfig {
        window_fraction: [0.6, 0.4],
        ..SynthConfig::default()
    };
    assert!(bad.validate().is_err());
}

// ---- manifest ----

#[test]
fn manifest_round_trip_and_validation() {
    let cfg = small();
    let m = synth::manifest_for(&cfg, &synth::generate(&cfg).unwrap());
    let text = m.to_json();
    assert_eq!(Manifest::from_json(&text).unwrap(), m);

    let mut bad = m.clone();
    bad.clips[0].label = 9;
    assert!(matches!(Manifest::from_json(&bad.to_json()), Err(Error::Manifest(_))));
    let mut bad = m.clone();
    bad.clips[1].importance.pop();
    assert!(Manifest::from_json(&bad.to_json()).is_err());
    let mut bad = m.clone();
    bad.clips[2].id = bad.clips[3].id.clone();
    assert!(Manifest::from_json(&bad.to_json()).is_err());
    let mut bad = m.clone();
    bad.version = 2;
    assert!(Manifest::from_json(&bad.to_json()).is_err());
    assert!(Manifest::from_json("{\"format\": 1}").is_err());
}

#[test]
fn manifest_read_checks_clip_files() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let m = synth::write_dataset(&cfg, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(&m.clips[0].path)).unwrap();
    assert!(matches!(
        Manifest::read(&dir.path().join("manifest.json")),
        Err(Error::Manifest(_))
    ));
}
