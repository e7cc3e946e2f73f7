use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use tririg::camera::{encode_png, CameraGroup, CameraId, CameraRig, CameraSet, SceneOptions};
use tririg::episode::{
    load_dataset, observe_frames, rerender as rerender_episode, replay_with, slice_cameras, DatasetSummary, Episode,
    EpisodeError, EpisodeSummary, LoadOptions, ReplayOptions, simulator_for,
};
use tririg::operator::{demonstrate, record_dataset, OperatorConfig, OperatorError};
use tririg::policy::{
    evaluate, neighbor_ablation, EnsembleConfig, EvalConfig, NnPolicy, OraclePolicy, ProbeReport, RandomPolicy,
    SuccessTable, DEFAULT_CHUNK,
};
use tririg::sim::{Simulator, TaskId};
use tririg::Rig;
use tririg_net::{serve as serve_endpoint, ServeConfig};

use crate::config::{noise, parse_cameras, parse_seeds, parse_task, pick, resolve_seeds, RunConfig};
use crate::{CliError, EvalArgs, PolicyKind, RecordArgs, RenderExportArgs, ReplayArgs, RerenderArgs, ServeArgs, SliceArgs};

fn episode_err(e: EpisodeError) -> CliError {
    match e {
        EpisodeError::Io(_) | EpisodeError::MissingCameras(_) => CliError::User(e.to_string()),
        _ => CliError::Internal(e.to_string()),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::User(format!("missing {flag}")))
}

fn load_episode(path: &Path) -> Result<Episode, CliError> {
    Episode::load(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::User(format!("cannot write {}: {e}", path.display())))
}

fn single_seed(s: Option<&str>) -> Result<u64, CliError> {
    match s {
        None => Ok(0),
        Some(s) => match parse_seeds(s)?.as_slice() {
            [one] => Ok(*one),
            _ => Err(CliError::User(format!("--seeds: expected a single seed, got '{s}'"))),
        },
    }
}

pub fn record(a: RecordArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let task = parse_task(&required(pick(a.task, cfg.task.clone()), "--task")?)?;
    let seeds = resolve_seeds(pick(a.episodes, cfg.episodes), pick(a.seeds, cfg.seeds.clone()).as_deref())?;
    let cameras = parse_cameras(&pick(a.cameras, cfg.cameras.clone()).unwrap_or_else(|| "all".into()))?;
    let noise = noise(pick(a.noise_std, cfg.noise_std))?;
    let out = required(pick(a.out, cfg.out.clone()), "--out")?;
    if out.is_file() {
        return Err(CliError::User(format!("{} is a file", out.display())));
    }

    let sim = Simulator::nominal(task);
    let op = OperatorConfig {
        noise,
        ..OperatorConfig::default()
    };
    let summary = record_dataset(&sim, &CameraRig::nominal(), &seeds, &cameras, &op, &out).map_err(|e| match e {
        OperatorError::Episode(e) => episode_err(e),
        e => CliError::Internal(e.to_string()),
    })?;
    println!(
        "recorded {} episodes of {} into {}; stage counts {:?}",
        summary.episode_count,
        task,
        out.display(),
        summary.stage_counts
    );
    Ok(())
}

fn episode_paths(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_dir() {
        let summary = DatasetSummary::load(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        Ok(summary.episode_paths(path))
    } else if path.exists() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(CliError::User(format!("{} does not exist", path.display())))
    }
}

pub fn replay(a: ReplayArgs) -> Result<(), CliError> {
    let paths = episode_paths(&a.path)?;
    let rig = Rig::nominal();
    let opts = ReplayOptions {
        check_frames: !a.no_frames,
    };
    let mut failures = 0;
    for path in &paths {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let (ep, crc) = match Episode::load_with(path, LoadOptions { verify_crc: false }) {
            Ok(v) => v,
            Err(e) => {
                println!("{name}: unreadable: {e}");
                failures += 1;
                continue;
            }
        };
        let report = replay_with(&ep, &rig, opts).map_err(episode_err)?;
        let mut line = match &report.first_divergence {
            None => format!("{name}: clean ({} steps)", report.steps_checked),
            Some(d) => format!(
                "{name}: first divergence at step {} in {} (recorded {}, replayed {})",
                d.step, d.field, d.recorded, d.replayed
            ),
        };
        if let Some(e) = &crc {
            line.push_str(&format!("; {e}"));
        }
        if crc.is_some() || !report.is_clean() {
            failures += 1;
        }
        println!("{line}");
    }
    if failures > 0 {
        return Err(CliError::User(format!("{failures} of {} episodes failed replay", paths.len())));
    }
    Ok(())
}

pub fn rerender(a: RerenderArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let ep = load_episode(&a.episode)?;
    let cameras = match pick(a.cameras, cfg.cameras.clone()) {
        Some(s) => parse_cameras(&s)?,
        None => ep.manifest.camera_set.clone(),
    };
    let out = required(pick(a.out, cfg.out.clone()), "--out")?;
    let fresh = rerender_episode(&ep, &Rig::nominal(), &cameras, !a.no_av_arm).map_err(episode_err)?;
    fresh.save(&out).map_err(episode_err)?;
    println!("rerendered {} steps ({cameras}) into {}", fresh.steps.len(), out.display());
    Ok(())
}

fn summary_entry(dir: &Path, old: &EpisodeSummary) -> Result<EpisodeSummary, CliError> {
    let bytes = std::fs::read(dir.join(&old.file)).map_err(|e| CliError::Internal(e.to_string()))?;
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("footer crc"));
    Ok(EpisodeSummary {
        bytes: bytes.len() as u64,
        crc32: format!("{crc:08x}"),
        ..old.clone()
    })
}

pub fn slice(a: SliceArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let cameras = parse_cameras(&required(pick(a.cameras, cfg.cameras.clone()), "--cameras")?)?;
    let out = required(pick(a.out, cfg.out.clone()), "--out")?;
    if a.input.is_dir() {
        let (summary, episodes) = load_dataset(&a.input).map_err(|e| CliError::User(format!("{}: {e}", a.input.display())))?;
        check_covers(&summary.camera_set, &cameras)?;
        std::fs::create_dir_all(&out).map_err(|e| CliError::User(format!("cannot create {}: {e}", out.display())))?;
        let mut entries = Vec::with_capacity(episodes.len());
        for (ep, entry) in episodes.iter().zip(&summary.episodes) {
            slice_cameras(ep, &cameras).map_err(episode_err)?.save(&out.join(&entry.file)).map_err(episode_err)?;
            entries.push(summary_entry(&out, entry)?);
        }
        let sliced = DatasetSummary {
            camera_set: cameras.clone(),
            episodes: entries,
            ..summary
        };
        sliced.save(&out).map_err(episode_err)?;
        println!("sliced {} episodes to {cameras} into {}", sliced.episode_count, out.display());
    } else {
        let ep = load_episode(&a.input)?;
        check_covers(&ep.manifest.camera_set, &cameras)?;
        slice_cameras(&ep, &cameras).map_err(episode_err)?.save(&out).map_err(episode_err)?;
        println!("sliced {} steps to {cameras} into {}", ep.steps.len(), out.display());
    }
    Ok(())
}

fn check_covers(have: &CameraSet, want: &CameraSet) -> Result<(), CliError> {
    let missing = want.missing_from(have);
    if missing.is_empty() {
        return Ok(());
    }
    let names: Vec<&str> = missing.iter().map(|c| c.as_str()).collect();
    Err(CliError::User(format!("dataset lacks cameras: {}", names.join(","))))
}

fn without_av(set: &CameraSet) -> CameraSet {
    set.ids().into_iter().filter(|c| c.group() != CameraGroup::Av).collect()
}

pub fn eval(a: EvalArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let kind = match (a.policy, cfg.policy.as_deref()) {
        (Some(k), _) => k,
        (None, None) | (None, Some("nn")) => PolicyKind::Nn,
        (None, Some("oracle")) => PolicyKind::Oracle,
        (None, Some("random")) => PolicyKind::Random,
        (None, Some(other)) => return Err(CliError::User(format!("unknown policy '{other}'"))),
    };
    let requested = pick(a.cameras, cfg.cameras.clone()).map(|s| parse_cameras(&s)).transpose()?;
    let rollouts = pick(a.rollouts, cfg.rollouts).unwrap_or(50);
    let chunk_size = pick(a.chunk_size, cfg.chunk_size).unwrap_or(DEFAULT_CHUNK);
    let query_period = pick(a.query_period, cfg.query_period).unwrap_or(EnsembleConfig::default().query_period);
    let decay = pick(a.decay, cfg.decay).unwrap_or(EnsembleConfig::default().decay);
    if chunk_size == 0 || query_period == 0 || query_period > chunk_size {
        return Err(CliError::User(format!(
            "need 1 <= --query-period <= --chunk-size, got {query_period} and {chunk_size}"
        )));
    }
    if !(decay.is_finite() && decay >= 0.0) {
        return Err(CliError::User(format!("--decay must be non-negative, got {decay}")));
    }
    let probe = pick(a.probe, cfg.probe).unwrap_or(100);
    let out = pick(a.out, cfg.out.clone()).unwrap_or_else(|| a.dataset.join("eval"));

    let summary = DatasetSummary::load(&a.dataset).map_err(|e| CliError::User(format!("{}: {e}", a.dataset.display())))?;
    let task = parse_task(&summary.task)?;
    if let Some(t) = pick(a.task, cfg.task.clone()) {
        let t = parse_task(&t)?;
        if t != task {
            return Err(CliError::User(format!("--task {t} but the dataset holds {task}")));
        }
    }
    let configurations: Vec<(String, CameraSet)> = match (&requested, kind) {
        (Some(set), _) => vec![(set.label(), set.clone())],
        (None, PolicyKind::Nn) => CameraSet::configurations(),
        (None, _) => vec![("none".into(), CameraSet::empty())],
    };
    if kind == PolicyKind::Nn {
        for (_, set) in &configurations {
            check_covers(&summary.camera_set, set)?;
        }
    }
    let (_, episodes) = load_dataset(&a.dataset).map_err(|e| CliError::User(format!("{}: {e}", a.dataset.display())))?;
    if kind == PolicyKind::Nn && episodes.is_empty() {
        return Err(CliError::User("the dataset has no episodes to train on".into()));
    }
    std::fs::create_dir_all(&out).map_err(|e| CliError::User(format!("cannot create {}: {e}", out.display())))?;

    let rig = Rig::nominal();
    let (sim, cameras) = match episodes.first() {
        Some(ep) => simulator_for(&ep.manifest, &rig).map_err(episode_err)?,
        None => (Simulator::nominal(task), CameraRig::nominal()),
    };
    let eval_cfg = EvalConfig {
        rollouts,
        ensemble: EnsembleConfig {
            chunk_size,
            query_period,
            decay,
        },
        cameras,
        ..EvalConfig::default()
    };

    let mut rows = Vec::new();
    let mut probes: Vec<ProbeReport> = Vec::new();
    for (label, set) in &configurations {
        let row = match kind {
            PolicyKind::Nn => {
                let p = NnPolicy::train(&episodes, set, chunk_size).map_err(|e| CliError::Internal(e.to_string()))?;
                evaluate(&p, &sim, label, &eval_cfg)
            }
            PolicyKind::Oracle => evaluate(
                &OraclePolicy {
                    chunk_size,
                    ..OraclePolicy::default()
                },
                &sim,
                label,
                &eval_cfg,
            ),
            PolicyKind::Random => evaluate(&RandomPolicy { chunk_size }, &sim, label, &eval_cfg),
        };
        eprintln!("{label}: {:?}", row.percent);
        rows.push(row);
        if kind == PolicyKind::Nn && probe > 0 && episodes.len() >= 2 && set.contains(CameraId::AvLeft) {
            let held = (episodes.len() / 10).max(1);
            let (train, test) = episodes.split_at(episodes.len() - held);
            let r = neighbor_ablation(train, test, set, &without_av(set), probe, chunk_size)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            probes.push(r);
        }
    }
    let table = SuccessTable {
        task: task.to_string(),
        stages: summary.stages.clone(),
        rows,
    };
    write_file(&out.join("table.json"), table.to_json().as_bytes())?;
    write_file(&out.join("table.txt"), table.to_text().as_bytes())?;
    let mut probe_json = serde_json::to_string_pretty(&probes).expect("probe serializes");
    probe_json.push('\n');
    write_file(&out.join("probe.json"), probe_json.as_bytes())?;
    print!("{}", table.to_text());
    for p in &probes {
        println!(
            "probe {} vs {}: {}/{} neighbors differ",
            p.with_cameras.label(),
            if p.without_cameras.is_empty() { "qpos only".to_string() } else { p.without_cameras.label() },
            p.differing,
            p.queries
        );
    }
    Ok(())
}

pub fn serve(a: ServeArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let defaults = ServeConfig::default();
    let task = match pick(a.task, cfg.task.clone()) {
        Some(t) => parse_task(&t)?,
        None => defaults.task,
    };
    let seed = single_seed(pick(a.seeds, cfg.seeds.clone()).as_deref())?;
    let host: IpAddr = match pick(a.host, cfg.host.clone()) {
        Some(h) => h.parse().map_err(|_| CliError::User(format!("--host: not an IP address: {h}")))?,
        None => defaults.bind.ip(),
    };
    let port = pick(a.port, cfg.port).unwrap_or(defaults.bind.port());
    let record_cameras = match pick(a.cameras, cfg.cameras.clone()) {
        Some(s) => parse_cameras(&s)?,
        None => defaults.record_cameras.clone(),
    };
    if let Some(d) = a.duration_secs {
        if !(d.is_finite() && d >= 0.0) {
            return Err(CliError::User(format!("--duration-secs must be non-negative, got {d}")));
        }
    }
    let record_dir = pick(a.out, cfg.out.clone());
    if let Some(dir) = &record_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::User(format!("cannot create {}: {e}", dir.display())))?;
    }
    let handle = serve_endpoint(ServeConfig {
        bind: SocketAddr::new(host, port),
        task,
        seed,
        record_dir,
        record_cameras,
        ..defaults
    })
    .map_err(|e| CliError::User(format!("cannot listen on {host}:{port}: {e}")))?;
    println!("listening on {} ({task}, seed {seed})", handle.local_addr());
    let _ = std::io::stdout().flush();
    match a.duration_secs {
        None => handle.wait(),
        Some(d) => {
            std::thread::sleep(Duration::from_secs_f64(d));
            let stats = handle.sessions();
            handle.shutdown();
            println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
        }
    }
    Ok(())
}

fn pgm(width: u32, height: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn render_export(a: RenderExportArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let camera: CameraId = a.camera.parse().map_err(|e| CliError::User(format!("--camera: {e}")))?;
    let out = required(pick(a.out, cfg.out.clone()), "--out")?;
    let (pixels, width, height) = match &a.episode {
        Some(path) => {
            let ep = load_episode(path)?;
            let k = ep.manifest.intrinsics;
            if ep.steps.len() <= a.step {
                return Err(CliError::User(format!("step {} past the end of {} steps", a.step, ep.steps.len())));
            }
            let frame = ep
                .frame(a.step, camera)
                .ok_or_else(|| CliError::User(format!("episode has no {camera} frames (it holds {})", ep.manifest.camera_set)))?;
            (frame.to_vec(), k.width, k.height)
        }
        None => {
            let task = match pick(a.task, cfg.task.clone()) {
                Some(t) => parse_task(&t)?,
                None => TaskId::PegInsertion,
            };
            let seed = single_seed(pick(a.seeds, cfg.seeds.clone()).as_deref())?;
            let noise = noise(pick(a.noise_std, cfg.noise_std))?;
            let sim = Simulator::nominal(task);
            let mut state = sim.reset(seed);
            if a.step > 0 {
                let op = OperatorConfig {
                    noise,
                    ..OperatorConfig::default()
                };
                let demo = demonstrate(&sim, seed, &op).map_err(|e| CliError::Internal(e.to_string()))?;
                if demo.actions.len() < a.step {
                    return Err(CliError::User(format!(
                        "step {} past the end of the {}-step demonstration",
                        a.step,
                        demo.actions.len()
                    )));
                }
                for action in &demo.actions[..a.step] {
                    sim.step(&mut state, action);
                }
            }
            let cameras = CameraRig::nominal();
            let set: CameraSet = [camera].into_iter().collect();
            let k = cameras.model(camera).intrinsics;
            let frame = observe_frames(&sim, &cameras, &set, &state, &SceneOptions::default()).remove(0);
            (frame, k.width, k.height)
        }
    };
    let bytes = if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        pgm(width, height, &pixels)
    } else {
        encode_png(width, height, &pixels).map_err(|e| CliError::Internal(e.to_string()))?
    };
    write_file(&out, &bytes)?;
    println!("wrote {camera} step {} ({width}x{height}) to {}", a.step, out.display());
    Ok(())
}
