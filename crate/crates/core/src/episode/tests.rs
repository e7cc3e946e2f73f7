use super::*;
use crate::camera::{CameraGroup, CameraId};
use crate::sim::TaskId;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_episode(steps: usize, set: CameraSet, seed: u64) -> Episode {
    let sim = Simulator::nominal(TaskId::PegInsertion);
    let cams = CameraRig::nominal();
    let manifest = manifest_for(&sim, &cams, seed, set.clone(), true, "test");
    let mut ep = Episode::new(manifest.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_obj = manifest.object_names.len();
    let px = manifest.frame_len();
    for t in 0..steps {
        ep.push(StepRecord {
            time_step: t as u32,
            qpos: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            action: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            object_poses: (0..n_obj).map(|_| std::array::from_fn(|_| rng.random())).collect(),
            frames: (0..set.len()).map(|_| (0..px).map(|_| rng.random()).collect()).collect(),
        })
        .unwrap();
    }
    ep
}

/// Records `steps` of a slow sweep of the right arm with real frames.
fn simulated_episode(steps: usize, set: &CameraSet) -> Episode {
    let sim = Simulator::nominal(TaskId::PegInsertion);
    let cams = CameraRig::nominal();
    let mut state = sim.reset(3);
    let mut ep = Episode::new(manifest_for(&sim, &cams, 3, set.clone(), true, "test"));
    let opts = SceneOptions::default();
    for t in 0..steps {
        let mut action = state.qpos;
        action[7] += 0.03 * (t as f64 * 0.2).sin();
        action[9] += 0.02;
        let action = quantize_action(&sim.rig, &action);
        let frames = observe_frames(&sim, &cams, set, &state, &opts);
        ep.push(step_record(&state, &action, frames)).unwrap();
        sim.step(&mut state, &action);
    }
    ep
}

#[test]
fn ten_step_file_size_matches_layout() {
    let set = CameraSet::all();
    let ep = random_episode(10, set, 1);
    let m = &ep.manifest;
    let objects = m.object_names.len();
    let width = 4 + 21 * 4 * 2 + objects * 7 * 4 + 6 * 96 * 96;
    assert_eq!(m.record_width(), width);
    let bytes = ep.to_bytes();
    assert_eq!(bytes.len(), m.header_len() + 10 * width + FOOTER_LEN);
    assert_eq!(&bytes[..4], b"TREP");
    assert_eq!(&bytes[bytes.len() - 16..bytes.len() - 12], b"TEND");
}

#[test]
fn round_trip_is_byte_exact() {
    let set: CameraSet = "av_left,static_top".parse().unwrap();
    let ep = random_episode(7, set, 2);
    let bytes = ep.to_bytes();
    let back = Episode::from_bytes(&bytes).unwrap();
    assert_eq!(back.steps, ep.steps);
    assert_eq!(back.manifest.step_count, 7);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn writer_matches_in_memory_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let set: CameraSet = "wrist".parse().unwrap();
    let ep = random_episode(5, set, 4);
    let path = dir.path().join("a.trep");
    let mut w = EpisodeWriter::create(&path, ep.manifest.clone()).unwrap();
    for s in &ep.steps {
        w.push_step(s.clone()).unwrap();
    }
    w.finish().unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), ep.to_bytes());
}

#[test]
fn unfinished_and_truncated_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ep = random_episode(4, CameraSet::from_groups(&[CameraGroup::Av]), 5);
    let path = dir.path().join("b.trep");
    {
        let mut w = EpisodeWriter::create(&path, ep.manifest.clone()).unwrap();
        for s in &ep.steps {
            w.push_step(s.clone()).unwrap();
        }
    }
    assert!(matches!(Episode::load(&path), Err(EpisodeError::Unfinished)));

    let bytes = ep.to_bytes();
    for cut in [0, 3, 11, bytes.len() / 2, bytes.len() - 1] {
        assert!(Episode::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn any_flipped_byte_is_detected() {
    let ep = random_episode(3, "static_low".parse().unwrap(), 6);
    let bytes = ep.to_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let mut b = bytes.clone();
        let i = rng.random_range(0..b.len());
        b[i] ^= 1 << rng.random_range(0..8);
        assert!(Episode::from_bytes(&b).is_err(), "flip at {i}");
    }
}

#[test]
fn crc_errors_can_be_tolerated_for_diagnosis() {
    let ep = random_episode(3, "static_low".parse().unwrap(), 7);
    let mut bytes = ep.to_bytes();
    let at = ep.manifest.header_len() + 4;
    bytes[at] ^= 0x40;
    assert!(matches!(Episode::from_bytes(&bytes), Err(EpisodeError::Checksum { .. })));
    let (loaded, warn) = Episode::from_bytes_with(&bytes, LoadOptions { verify_crc: false }).unwrap();
    assert!(matches!(warn, Some(EpisodeError::Checksum { .. })));
    assert_ne!(loaded.steps[0].qpos, ep.steps[0].qpos);
}

#[test]
fn slicing_to_full_set_is_identity() {
    let ep = random_episode(4, CameraSet::all(), 8);
    let s = slice_cameras(&ep, &CameraSet::all()).unwrap();
    assert_eq!(s.to_bytes(), ep.to_bytes());
}

#[test]
fn slicing_rejects_missing_cameras() {
    let ep = random_episode(2, "av".parse().unwrap(), 10);
    let err = slice_cameras(&ep, &"av,static_top".parse().unwrap()).unwrap_err();
    match err {
        EpisodeError::MissingCameras(m) => assert!(m.contains("static_top")),
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn sliced_frames_equal_source_frames() {
    let ep = random_episode(3, CameraSet::all(), 11);
    let sub: CameraSet = "av_right,wrist_left".parse().unwrap();
    let s = slice_cameras(&ep, &sub).unwrap();
    for t in 0..3 {
        for id in sub.ids() {
            assert_eq!(s.frame(t, id), ep.frame(t, id));
        }
        assert_eq!(s.steps[t].qpos, ep.steps[t].qpos);
        assert_eq!(s.steps[t].object_poses, ep.steps[t].object_poses);
    }
    let back = Episode::from_bytes(&s.to_bytes()).unwrap();
    assert_eq!(back.manifest.camera_set, sub);
}

fn arb_set() -> impl Strategy<Value = CameraSet> {
    proptest::collection::btree_set(0usize..6, 0..=6).prop_map(|ix| {
        ix.into_iter()
            .map(|i| CameraId::from_index(i).unwrap().to_string())
            .collect::<Vec<_>>()
            .join(",")
            .parse::<CameraSet>()
            .unwrap_or_else(|_| CameraSet::empty())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn slicing_composes(a in arb_set(), b in arb_set()) {
        let ep = random_episode(2, CameraSet::all(), 12);
        let ab: CameraSet = a.ids().into_iter().filter(|c| b.contains(*c)).map(|c| c.to_string()).collect::<Vec<_>>().join(",").parse().unwrap_or_else(|_| CameraSet::empty());
        let first = slice_cameras(&ep, &a).unwrap();
        let twice = slice_cameras(&first, &ab).unwrap();
        let once = slice_cameras(&ep, &ab).unwrap();
        prop_assert_eq!(twice.to_bytes(), once.to_bytes());
    }
}

#[test]
fn recorded_simulation_replays_cleanly() {
    let ep = simulated_episode(40, &CameraSet::empty());
    let rig = Rig::nominal();
    let report = replay(&ep, &rig).unwrap();
    assert!(report.is_clean(), "{:?}", report.first_divergence);
    assert_eq!(report.steps_checked, 40);
}

#[test]
fn tampered_action_reports_first_divergence() {
    let mut ep = simulated_episode(30, &CameraSet::empty());
    ep.steps[12].action[8] += 0.01;
    let report = replay(&ep, &Rig::nominal()).unwrap();
    let d = report.first_divergence.expect("divergence");
    assert_eq!(d.step, 13);
    assert_eq!(d.field, "qpos[8]");
}

#[test]
fn rerender_reproduces_recorded_frames() {
    let set: CameraSet = "av_left,wrist_right,static_top".parse().unwrap();
    let ep = simulated_episode(8, &set);
    let again = rerender(&ep, &Rig::nominal(), &set, true).unwrap();
    assert_eq!(again.to_bytes(), ep.to_bytes());
}

#[test]
fn rerender_adds_cameras_and_keeps_state() {
    let ep = simulated_episode(6, &"av_left".parse().unwrap());
    let all = rerender(&ep, &Rig::nominal(), &CameraSet::all(), true).unwrap();
    for (a, b) in all.steps.iter().zip(&ep.steps) {
        assert_eq!(a.qpos, b.qpos);
        assert_eq!(a.action, b.action);
        assert_eq!(a.object_poses, b.object_poses);
    }
    let av = all.manifest.camera_set.position(CameraId::AvLeft).unwrap();
    assert_eq!(all.steps[3].frames[av], ep.steps[3].frames[0]);
}

#[test]
fn rerender_rejects_other_rig() {
    let ep = simulated_episode(2, &CameraSet::empty());
    let mut rig = Rig::nominal();
    rig.left.joints[1].parent_offset = rig.left.joints[1].parent_offset.translated(nalgebra::Vector3::new(0.001, 0.0, 0.0));
    assert!(matches!(
        rerender(&ep, &rig, &CameraSet::empty(), true),
        Err(EpisodeError::ChainMismatch(_))
    ));
}

#[test]
fn dataset_summary_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ep = simulated_episode(3, &CameraSet::empty());
    ep.save(&dir.path().join(episode_file_name(0))).unwrap();
    let s = DatasetSummary {
        task: "peg_insertion".into(),
        stages: vec!["Grasp".into(), "Insert".into()],
        camera_set: CameraSet::empty(),
        noise_std: [0.005, 0.01],
        episode_count: 1,
        stage_counts: vec![0, 0],
        episodes: vec![EpisodeSummary {
            file: episode_file_name(0),
            seed: 3,
            step_count: 3,
            stage_flags: vec![false, false],
            attempts: 1,
            bytes: 0,
            crc32: "00000000".into(),
        }],
    };
    s.save(dir.path()).unwrap();
    let (back, eps) = load_dataset(dir.path()).unwrap();
    assert_eq!(back, s);
    assert_eq!(eps[0].steps, ep.steps);
}

#[test]
fn frame_check_locates_a_flipped_pixel() {
    let set: CameraSet = "av_left,static_top".parse().unwrap();
    let ep = simulated_episode(30, &set);
    let rig = Rig::nominal();
    let clean = replay_with(&ep, &rig, ReplayOptions { check_frames: true }).unwrap();
    assert!(clean.is_clean(), "{:?}", clean.first_divergence);
    let mut bad = ep.clone();
    bad.steps[21].frames[1][300] ^= 0x10;
    assert!(replay(&bad, &rig).unwrap().is_clean());
    let d = replay_with(&bad, &rig, ReplayOptions { check_frames: true })
        .unwrap()
        .first_divergence
        .unwrap();
    let cam = ep.manifest.camera_set.ids()[1];
    assert_eq!((d.step, d.field), (21, format!("frame[{cam}][300]")));
}
