//! End-to-end acceptance run. Prints one `PASS`/`FAIL` line per criterion and
//! exits nonzero if any fails. Pass a substring to run only matching ones.

use std::io::{BufRead, BufReader};
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tririg::camera::{
    render, render_labeled, CameraGroup, CameraId, CameraRig, CameraSet, Label, RenderScene, SceneOptions,
    DEFAULT_BASELINE,
};
use tririg::episode::{load_dataset, rerender, slice_cameras, Episode};
use tririg::kinematics::{
    ik_dls, ik_dls_traced, ik_regularized, ik_regularized_traced, DlsConfig, JointState, KinematicChain,
    RegularizedConfig,
};
use tririg::operator::{demonstrate, device_rest_poses, record_actions, NoiseStd, OperatorConfig};
use tririg::policy::{neighbor_ablation, DEFAULT_CHUNK};
use tririg::pose::{pose_error, Pose};
use tririg::sim::{Shape, Simulator, TaskId};
use tririg::teleop::{default_frame_adapter, DeviceAnchor, DeviceId, TeleopAnchor};
use tririg::{ChainId, Rig};
use tririg_net::codec::*;
use tririg_net::{percentile, Client, SessionStats};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tririg")
}

fn run_bin(args: &[&str]) -> Result<String, String> {
    let o = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "`tririg {}` exited {:?}: {}{}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn random_q(chain: &KinematicChain, rng: &mut impl Rng) -> Vec<f64> {
    chain.joints.iter().map(|j| rng.random_range(j.limit_lo..j.limit_hi)).collect()
}

fn random_pose(rng: &mut impl Rng) -> Pose {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if q.iter().map(|c| c * c).sum::<f64>() > 1e-2 {
            let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            return Pose::from_parts(t, q);
        }
    }
}

fn jacobian() -> Outcome {
    let rig = Rig::nominal();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let chain = rig.chains()[i % 3];
        let q = random_q(chain, &mut rng);
        worst = worst.max(tririg::testing::jacobian_fd_relative_error(chain, &q));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-5 && secs < 30.0, || format!("max relative error {worst:.2e}, {secs:.2} s"))?;
    Ok(format!("1000 samples, max relative error {worst:.2e} (< 1e-5) in {secs:.2} s (< 30 s)"))
}

fn nearby_target(chain: &KinematicChain, rng: &mut impl Rng) -> (JointState, Pose) {
    let q0 = random_q(chain, rng);
    let dir: Vec<f64> = (0..chain.dof()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let len = rng.random_range(0.0..0.3);
    let q1: Vec<f64> = q0
        .iter()
        .zip(&dir)
        .zip(&chain.joints)
        .map(|((q, d), j)| j.clamp(q + d * len / norm))
        .collect();
    (JointState(q0), chain.tool_pose(&q1).unwrap())
}

fn dls() -> Outcome {
    let rig = Rig::nominal();
    let cfg = DlsConfig::default();
    let mut parts = Vec::new();
    let mut bound_violations = 0;
    let mut iterations = 0;
    for (c, chain) in rig.chains().into_iter().enumerate() {
        let mut solved = 0;
        for k in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(7_000 + 1000 * c as u64 + k);
            let (q0, target) = nearby_target(chain, &mut rng);
            let sol = ik_dls_traced(chain, &q0, &target, &cfg, |it| {
                iterations += 1;
                if it.raw_step.norm() > it.error.norm() / (2.0 * cfg.lambda) + 1e-12 {
                    bound_violations += 1;
                }
            })
            .map_err(|e| e.to_string())?;
            let e = pose_error(&chain.tool_pose(sol.q.as_slice()).unwrap(), &target);
            if sol.report.converged
                && sol.report.iterations <= 200
                && e.fixed_rows::<3>(0).norm() < 1e-4
                && e.fixed_rows::<3>(3).norm() < 1e-3
            {
                solved += 1;
            }
        }
        parts.push(format!("{} {solved}/100", chain.name));
        ensure(solved >= 99, || format!("{}: {solved}/100 solved", chain.name))?;
    }
    ensure(bound_violations == 0, || format!("{bound_violations} iterations broke the step bound"))?;
    Ok(format!(
        "{} within 200 iterations; step bound held on all {iterations} iterations",
        parts.join(", ")
    ))
}

fn regularized() -> Outcome {
    let rig = Rig::nominal();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let lambda = DlsConfig::default().lambda;
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    let mut outside = 0;
    let mut solves = 0;
    for i in 0..300 {
        let chain = rig.chains()[i % 3];
        let (q0, target) = nearby_target(chain, &mut rng);
        let dls_cfg = DlsConfig {
            lambda,
            ..DlsConfig::default()
        };
        let reg_cfg = RegularizedConfig {
            w_center: 0.0,
            w_disp: lambda * lambda,
            ..RegularizedConfig::default()
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        let sa = ik_dls_traced(chain, &q0, &target, &dls_cfg, |it| a.push(it.applied_step.clone())).unwrap();
        let sb = ik_regularized_traced(chain, &q0, &target, &reg_cfg, |it| b.push(it.applied_step.clone())).unwrap();
        ensure(a.len() == b.len(), || format!("iteration counts differ: {} vs {}", a.len(), b.len()))?;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).amax());
            compared += 1;
        }
        // Arbitrary targets, many unreachable, with the default weights too.
        let far = Pose::from_translation(Vector3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-0.5..1.5),
        ));
        let sc = ik_regularized(chain, &q0, &far, &RegularizedConfig::default()).unwrap();
        let sd = ik_dls(chain, &q0, &far, &DlsConfig::default()).unwrap();
        for q in [&sa.q, &sb.q, &sc.q, &sd.q] {
            solves += 1;
            outside += !chain.within_limits(q.as_slice()) as usize;
        }
    }
    ensure(worst <= 1e-10, || format!("max step difference {worst:.2e}"))?;
    ensure(outside == 0, || format!("{outside} solutions left the joint limits"))?;
    Ok(format!(
        "{compared} iterations match DLS within {worst:.1e} (<= 1e-10); {solves}/{solves} solutions inside limits"
    ))
}

fn teleop_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut identity, mut equivariance, mut composition): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..1000 {
        let device = DeviceId::ALL[i % 3];
        let dinit = random_pose(&mut rng);
        let rinit = random_pose(&mut rng);
        let anchor = TeleopAnchor {
            devices: [DeviceAnchor {
                device_init: dinit,
                robot_init: rinit,
            }; 3],
            frame_adapter: Pose::from_rotation(default_frame_adapter()),
        };
        identity = identity.max(pose_error(&anchor.map_pose(device, &dinit), &rinit).norm());
        let now = random_pose(&mut rng);
        let m = random_pose(&mut rng);
        let a = anchor.frame_adapter;
        let expected = anchor.map_pose(device, &now) * (a * m * a.inverse());
        equivariance = equivariance.max(pose_error(&anchor.map_pose(device, &(now * m)), &expected).norm());
        let m2 = random_pose(&mut rng);
        let stepwise = anchor.map_pose(device, &((dinit * m) * m2));
        let single = anchor.map_pose(device, &(dinit * (m * m2)));
        composition = composition.max(pose_error(&stepwise, &single).norm());
    }
    let worst = identity.max(equivariance).max(composition);
    ensure(worst < 1e-12, || {
        format!("identity {identity:.1e}, equivariance {equivariance:.1e}, composition {composition:.1e}")
    })?;
    Ok(format!(
        "1000 anchors/motions: identity {identity:.1e}, equivariance {equivariance:.1e}, composition {composition:.1e} (< 1e-12)"
    ))
}

fn dir_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn determinism(work: &Path) -> Outcome {
    let start = Instant::now();
    let a = work.join("peg_a");
    let b = work.join("peg_b");
    for out in [&a, &b] {
        run_bin(&["record", "--task", "peg_insertion", "--episodes", "50", "--noise-std", "0", "--out", p(out)])?;
    }
    let fa = dir_files(&a);
    let fb = dir_files(&b);
    ensure(fa.len() == 51, || format!("{} files", fa.len()))?;
    let names = |v: &[PathBuf]| v.iter().map(|f| f.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    ensure(names(&fa) == names(&fb), || "file lists differ".into())?;
    let mut bytes = 0;
    for (x, y) in fa.iter().zip(&fb) {
        let (bx, by) = (std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        ensure(bx == by, || format!("{} differs", x.display()))?;
        bytes += bx.len();
    }
    let out = run_bin(&["replay", p(&a)])?;
    let clean = out.lines().filter(|l| l.contains(": clean")).count();
    ensure(clean == 50, || format!("{clean}/50 replayed clean"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "two runs byte-identical ({} files, {:.1} MB), 50/50 replay with zero divergence, {secs:.1} s (< 300 s)",
        fa.len(),
        bytes as f64 / 1e6
    ))
}

fn oracle() -> Outcome {
    let mut parts = Vec::new();
    let mut failed = Vec::new();
    for task in TaskId::ALL {
        let sim = Simulator::nominal(task);
        let mut counts = [0; 2];
        for (n, noise) in [NoiseStd::ZERO, NoiseStd::default()].into_iter().enumerate() {
            let cfg = OperatorConfig {
                noise,
                ..OperatorConfig::default()
            };
            counts[n] = (0..50u64)
                .filter(|&s| demonstrate(&sim, s, &cfg).is_ok_and(|d| d.succeeded()))
                .count();
        }
        if counts[0] < 50 || counts[1] < 45 {
            failed.push(task.to_string());
        }
        parts.push(format!("{task} {}/50 noiseless, {}/50 default noise", counts[0], counts[1]));
    }
    let detail = parts.join("; ");
    ensure(failed.is_empty(), || detail.clone())?;
    Ok(detail)
}

/// Thread-needle scene, noiseless demonstration, step 100: the camera arm
/// has reached its vantage and the needle's eye faces away from both static
/// cameras.
struct Staged {
    sim: Simulator,
    cameras: CameraRig,
    episode: Episode,
    step: usize,
}

const STAGED_SEED: u64 = 0;
const STAGED_STEP: usize = 100;

fn staged() -> Staged {
    let sim = Simulator::nominal(TaskId::ThreadNeedle);
    let cameras = CameraRig::nominal();
    let cfg = OperatorConfig {
        noise: NoiseStd::ZERO,
        ..OperatorConfig::default()
    };
    let demo = demonstrate(&sim, STAGED_SEED, &cfg).expect("staged demonstration");
    let set = CameraSet::all();
    let opts = SceneOptions::default();
    let manifest =
        tririg::episode::manifest_for(&sim, &cameras, STAGED_SEED, set.clone(), opts.av_arm_present, "scripted");
    let mut episode = Episode::new(manifest);
    record_actions(&sim, &cameras, STAGED_SEED, &demo.actions, &set, &opts, &mut episode).expect("record");
    Staged {
        sim,
        cameras,
        episode,
        step: STAGED_STEP,
    }
}

impl Staged {
    fn state(&self) -> tririg::sim::SimState {
        let mut s = self.sim.reset(STAGED_SEED);
        for rec in &self.episode.steps[..self.step] {
            self.sim.step(&mut s, &tririg::episode::widen_qpos(&rec.action));
        }
        s
    }

    /// Pixels per camera that change when the socket is removed.
    fn socket_pixels(&self) -> Vec<(CameraId, usize)> {
        let s = self.state();
        let opts = SceneOptions::default();
        let with = RenderScene::from_state(&self.sim.rig, &s.objects, &s.qpos, &opts);
        let mut bare = s.objects.clone();
        for o in &mut bare {
            o.socket = None;
        }
        let without = RenderScene::from_state(&self.sim.rig, &bare, &s.qpos, &opts);
        CameraId::ALL
            .into_iter()
            .map(|id| {
                let pose = self.cameras.camera_pose(id, &self.sim.rig, &s.qpos);
                let k = self.cameras.model(id).intrinsics;
                let a = render(&with, &pose, &k);
                let b = render(&without, &pose, &k);
                (id, a.iter().zip(&b).filter(|(x, y)| x != y).count())
            })
            .collect()
    }
}

fn camera_ablation(work: &Path, staged: &Staged) -> Outcome {
    let ds = work.join("needle");
    run_bin(&["record", "--task", "thread_needle", "--episodes", "50", "--out", p(&ds)])?;
    let out = work.join("needle_eval");
    let start = Instant::now();
    let text = run_bin(&["eval", p(&ds), "--task", "thread_needle", "--rollouts", "50", "--probe", "0", "--out", p(&out)])?;
    let secs = start.elapsed().as_secs_f64();
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("table.json")).unwrap()).map_err(|e| e.to_string())?;
    let rows = table["rows"].as_array().ok_or("no rows")?;
    ensure(rows.len() == 7, || format!("{} rows", rows.len()))?;
    ensure(rows.iter().all(|r| r["rollouts"] == 50), || "a row ran other than 50 rollouts".into())?;
    for line in text.lines() {
        println!("      {line}");
    }

    let visible = staged.socket_pixels();
    let hidden_static = visible.iter().filter(|(id, _)| id.group() == CameraGroup::Static).all(|(_, n)| *n == 0);
    let av_sees: usize = visible.iter().filter(|(id, _)| id.group() == CameraGroup::Av).map(|(_, n)| n).sum();
    let vis: Vec<String> = visible.iter().map(|(id, n)| format!("{id} {n}")).collect();
    ensure(hidden_static && av_sees > 0, || format!("socket pixels per camera: {}", vis.join(", ")))?;

    let (_, episodes) = load_dataset(&ds).map_err(|e| e.to_string())?;
    let (train, held) = episodes.split_at(45);
    let mut probes = Vec::new();
    for (label, set) in CameraSet::configurations() {
        if !set.contains(CameraId::AvLeft) {
            continue;
        }
        let without: CameraSet = set.ids().into_iter().filter(|c| c.group() != CameraGroup::Av).collect();
        let r = neighbor_ablation(train, held, &set, &without, 100, DEFAULT_CHUNK).map_err(|e| e.to_string())?;
        ensure(r.differing >= 1, || format!("{label}: no neighbor changed without the AV cameras"))?;
        probes.push(format!("{label} {}/{}", r.differing, r.queries));
    }
    Ok(format!(
        "7-row table over 50 rollouts each in {secs:.0} s; staged scene socket pixels [{}]; probe neighbors changed: {}",
        vis.join(", "),
        probes.join(", ")
    ))
}

fn centroid_u(px: &[u8], width: usize) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0.0);
    for (i, &v) in px.iter().enumerate() {
        if v > 0 {
            s += (i % width) as f64;
            n += 1.0;
        }
    }
    (n > 0.0).then(|| s / n)
}

fn disparity() -> Outcome {
    let rig = Rig::nominal();
    let cams = CameraRig::nominal();
    let left = cams.camera_pose(CameraId::AvLeft, &rig, &rig.start);
    let right = cams.camera_pose(CameraId::AvRight, &rig, &rig.start);
    let k = cams.model(CameraId::AvLeft).intrinsics;
    let b = (right.translation() - left.translation()).norm();
    ensure((b - DEFAULT_BASELINE).abs() < 1e-12, || format!("baseline {b}"))?;
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let z = 0.3 + 1.2 * i as f64 / 99.0;
        let center = left.transform_point(&Vector3::new(0.0, 0.0, z));
        let mut scene = RenderScene::new();
        scene.push_shape(&Shape::Sphere { r: 0.03 * z }, Pose::from_translation(center), Label::Object(0));
        let ul = centroid_u(&render(&scene, &left, &k), k.width as usize).ok_or("sphere not visible")?;
        let ur = centroid_u(&render(&scene, &right, &k), k.width as usize).ok_or("sphere not visible")?;
        worst = worst.max((ul - ur - k.fx * b / z).abs());
    }
    ensure(worst < 0.5, || format!("max disparity error {worst:.3} px"))?;
    Ok(format!("100 depths in [0.3, 1.5] m, max |d - fx*b/z| = {worst:.3} px (< 0.5)"))
}

fn slice_rerender(work: &Path, staged: &Staged) -> Outcome {
    let src = work.join("peg_a").join("episode_0003.trep");
    let full = Episode::load(&src).map_err(|e| e.to_string())?;
    let subset: CameraSet = "static_low,wrist_right,av_left".parse().unwrap();
    let sliced = slice_cameras(&full, &subset).map_err(|e| e.to_string())?;
    let a = full.to_bytes();
    let b = sliced.to_bytes();
    let (ma, mb) = (&full.manifest, &sliced.manifest);
    let mut expect = ma.clone();
    expect.camera_set = subset.clone();
    ensure(expect == *mb, || "manifest changed beyond the camera set".into())?;
    let fl = ma.frame_len();
    let fixed = ma.record_width() - fl * ma.camera_set.len();
    let mut compared = 0;
    for i in 0..full.steps.len() {
        let ra = &a[ma.header_len() + i * ma.record_width()..][..ma.record_width()];
        let rb = &b[mb.header_len() + i * mb.record_width()..][..mb.record_width()];
        ensure(ra[..fixed] == rb[..fixed], || format!("step {i}: non-frame bytes differ"))?;
        for (j, id) in subset.ids().into_iter().enumerate() {
            let at = ma.camera_set.position(id).unwrap();
            let fa = &ra[fixed + at * fl..][..fl];
            let fb = &rb[fixed + j * fl..][..fl];
            ensure(fa == fb, || format!("step {i}: {id} frame changed"))?;
        }
        compared += fixed;
    }

    let statics: CameraSet = "static".parse().unwrap();
    let bare = rerender(&staged.episode, &staged.sim.rig, &statics, false).map_err(|e| e.to_string())?;
    let s = staged.state();
    let with = RenderScene::from_state(&staged.sim.rig, &s.objects, &s.qpos, &SceneOptions::default());
    let no_arm = SceneOptions {
        av_arm_present: false,
        ..SceneOptions::default()
    };
    let without = RenderScene::from_state(&staged.sim.rig, &s.objects, &s.qpos, &no_arm);
    let mut removed = Vec::new();
    for id in statics.ids() {
        let pose = staged.cameras.camera_pose(id, &staged.sim.rig, &s.qpos);
        let k = staged.cameras.model(id).intrinsics;
        let (orig, labels) = render_labeled(&with, &pose, &k);
        let (_, labels_after) = render_labeled(&without, &pose, &k);
        let fresh = bare.frame(staged.step, id).unwrap();
        let arm_px = labels.iter().filter(|l| **l == Label::Link(ChainId::Av)).count();
        ensure(arm_px > 0, || format!("{id}: camera arm not visible in the staged scene"))?;
        ensure(!labels_after.contains(&Label::Link(ChainId::Av)), || format!("{id}: arm pixels remain"))?;
        let stray = (0..orig.len())
            .filter(|&i| orig[i] != fresh[i] && labels[i] != Label::Link(ChainId::Av))
            .count();
        ensure(stray == 0, || format!("{id}: {stray} pixels changed outside the arm silhouette"))?;
        ensure(staged.episode.frame(staged.step, id).unwrap() == orig.as_slice(), || "recorded frame mismatch".into())?;
        removed.push(format!("{id} {arm_px}"));
    }
    let rig_check = rerender(&staged.episode, &staged.sim.rig, &statics, true).map_err(|e| e.to_string())?;
    let kept = slice_cameras(&staged.episode, &statics).map_err(|e| e.to_string())?;
    ensure(rig_check.steps == kept.steps, || "rerender with the arm present changed frames".into())?;
    Ok(format!(
        "slice kept {compared} non-frame bytes and every kept frame; arm pixels removed from static views [{}], nothing else changed",
        removed.join(", ")
    ))
}

fn realtime() -> Outcome {
    let session_secs = 60.0;
    let mut child = Command::new(bin())
        .args(["serve", "--port", "0", "--duration-secs", &format!("{}", session_secs + 4.0)])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut first = String::new();
    out.read_line(&mut first).map_err(|e| e.to_string())?;
    let addr = first
        .split_whitespace()
        .nth(2)
        .and_then(|a| a.parse().ok())
        .ok_or_else(|| format!("unexpected banner {first:?}"))?;
    let (mut c, _) = Client::connect(
        addr,
        Hello {
            protocol_version: PROTOCOL_VERSION,
            camera_set: CameraSet::all(),
            role: ClientRole::Operator,
        },
    )
    .map_err(|e| e.to_string())?;
    c.send(&WireMessage::AnchorRequest).map_err(|e| e.to_string())?;
    let rest = device_rest_poses();
    let start = Instant::now();
    let mut ts = 0;
    let mut frames = 0;
    while start.elapsed().as_secs_f64() < session_secs {
        ts += 1;
        // A slow sway so the arms keep moving.
        let t = start.elapsed().as_secs_f64();
        let sway = [0.03 * (t * 0.7).sin(), 0.0, 0.02 * (t * 0.5).cos()];
        let poses = rest.map(|r| r.translated(Vector3::from(sway)));
        c.send_poses(&poses, [0.5 + 0.5 * (t * 0.3).sin(); 2], ts).map_err(|e| e.to_string())?;
        frames += c.drain().iter().filter(|m| matches!(m, WireMessage::FrameMsg(_))).count();
        std::thread::sleep(Duration::from_millis(10));
    }
    let probe = c.latency_probe(500, Duration::from_millis(2)).map_err(|e| e.to_string())?;
    c.close();
    let mut rest_out = String::new();
    for line in out.lines() {
        rest_out = line.map_err(|e| e.to_string())?;
    }
    let status = child.wait().map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("server exited {status}"))?;
    let stats: Vec<SessionStats> = serde_json::from_str(&rest_out).map_err(|e| format!("{e}: {rest_out:.200}"))?;
    let s = stats.first().ok_or("no session")?;
    let p99 = percentile(&s.jitter_us, 99.0).unwrap_or(u32::MAX);
    let work_p99 = percentile(&s.work_us, 99.0).unwrap_or(u32::MAX);
    let expected_ticks = (session_secs * 50.0) as u64;
    ensure(s.ticks >= expected_ticks && s.overruns == 0, || format!("{} ticks, {} overruns", s.ticks, s.overruns))?;
    ensure(s.frames_sent >= 3 * (s.ticks - 1), || format!("{} frames over {} ticks", s.frames_sent, s.ticks))?;
    ensure(p99 < 5_000, || format!("tick jitter p99 {p99} us"))?;
    ensure(probe.p99_us < 5_000 && probe.ordered, || format!("{probe:?}"))?;
    Ok(format!(
        "{} ticks in {:.0} s, 0 overruns, jitter p99 {p99} us (< 5000), tick work p99 {work_p99} us with six 96x96 renders every other tick, {frames} frames received; loopback probe p50 {} us, p99 {} us (< 5000) over {}",
        s.ticks,
        session_secs,
        probe.p50_us,
        probe.p99_us,
        probe.samples
    ))
}

fn sample(seed: u64) -> DeviceSample {
    DeviceSample {
        pose: [0.1, -0.2, 1.5, 1.0, 0.0, 0.0, 0.0].map(|v: f32| v + seed as f32 * 1e-3),
        trigger: 0.25,
        timestamp_us: 1_000 + seed,
    }
}

fn every_message() -> Vec<WireMessage> {
    vec![
        WireMessage::Hello(Hello {
            protocol_version: PROTOCOL_VERSION,
            camera_set: "av,static_top".parse().unwrap(),
            role: ClientRole::Operator,
        }),
        WireMessage::AnchorRequest,
        WireMessage::PoseUpdate([sample(0), sample(1), sample(2)]),
        WireMessage::ReAnchor,
        WireMessage::StateUpdate(StateUpdate {
            time_step: 42,
            qpos: std::array::from_fn(|i| i as f32 * 0.1 - 1.0),
            stage_flags: vec![true, false],
        }),
        WireMessage::FrameMsg(FrameMsg {
            camera: CameraId::WristRight,
            time_step: 9,
            width: 96,
            height: 96,
            pixels: (0..96 * 96).map(|i| (i % 251) as u8).collect(),
        }),
        WireMessage::RecordControl(RecordControl {
            action: RecordAction::Start,
            task: Some(TaskId::ThreadNeedle),
            seed: Some(12),
        }),
        WireMessage::error(ErrorCode::Protocol, "bad frame"),
        WireMessage::Ping(Probe { seq: 3, sent_us: 99 }),
        WireMessage::Pong(Probe { seq: 3, sent_us: 99 }),
        WireMessage::RecordStatus(RecordStatus {
            recording: false,
            steps: 120,
            file: Some("episode_0003.trep".into()),
        }),
    ]
}

fn protocol() -> Outcome {
    let msgs = every_message();
    for m in &msgs {
        let bytes = encode(m);
        let back = decode(&bytes).map_err(|e| format!("{:?}: {e}", m.tag()))?;
        ensure(back == *m && encode(&back) == bytes, || format!("{:?} did not round-trip", m.tag()))?;
    }
    let templates: Vec<Vec<u8>> = msgs.iter().map(encode).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1_000_003);
    let (mut ok, mut err) = (0usize, 0usize);
    let mut buf = Vec::new();
    let total = 1_000_000;
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| {
        for _ in 0..total {
            let bytes: Vec<u8> = match rng.random_range(0..4) {
                0 => (0..rng.random_range(0..64)).map(|_| rng.random()).collect(),
                1 => {
                    let body: Vec<u8> = (0..rng.random_range(0..160)).map(|_| rng.random()).collect();
                    let mut f = ((body.len() + 1) as u32).to_le_bytes().to_vec();
                    f.push(rng.random_range(0..13));
                    f.extend(body);
                    f
                }
                _ => {
                    let mut f = templates[rng.random_range(0..templates.len())].clone();
                    for _ in 0..rng.random_range(1..4) {
                        let i = rng.random_range(0..f.len());
                        f[i] ^= 1 << rng.random_range(0..8);
                    }
                    if rng.random_bool(0.2) {
                        let n = rng.random_range(0..f.len());
                        f.truncate(n);
                    }
                    f
                }
            };
            match decode(&bytes) {
                Ok(m) => {
                    ok += 1;
                    assert_eq!(decode(&encode(&m)).unwrap(), m);
                }
                Err(_) => err += 1,
            }
            let mut r = &bytes[..];
            let _ = read_frame(&mut r, &mut buf);
        }
    }));
    ensure(outcome.is_ok(), || format!("crash after {} frames", ok + err))?;
    Ok(format!(
        "{} message types round-trip; {total} fuzzed frames, 0 crashes ({ok} decoded, {err} rejected) in {:.1} s",
        msgs.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    std::panic::set_hook(Box::new(|info| eprintln!("      panic: {info}")));
    let tmp = tempfile::tempdir().expect("temp dir");
    let work = tmp.path();
    let mut staged_scene: Option<Staged> = None;
    let mut failures = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(name) {
            return;
        }
        let start = Instant::now();
        let r = std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS  {name} [{secs:.1} s]: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name} [{secs:.1} s]: {detail}");
            }
        }
    };
    report("protocol_robustness", &mut protocol);
    report("jacobian_vs_finite_differences", &mut jacobian);
    report("dls_convergence", &mut dls);
    report("regularized_ik", &mut regularized);
    report("teleop_algebra", &mut teleop_algebra);
    report("stereo_disparity", &mut disparity);
    report("oracle_success", &mut oracle);
    report("determinism_chain", &mut || determinism(work));
    report("slice_rerender_soundness", &mut || {
        if !work.join("peg_a").exists() {
            run_bin(&["record", "--task", "peg_insertion", "--episodes", "4", "--noise-std", "0", "--out", p(&work.join("peg_a"))])?;
        }
        slice_rerender(work, staged_scene.get_or_insert_with(staged))
    });
    report("camera_ablation", &mut || camera_ablation(work, staged_scene.get_or_insert_with(staged)));
    report("realtime_budget", &mut realtime);
    drop(report);
    drop(tmp);
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
