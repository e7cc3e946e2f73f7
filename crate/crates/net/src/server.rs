use std::collections::VecDeque;
use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tungstenite::protocol::WebSocket;
use tungstenite::Message;

use tririg::camera::{CameraId, CameraRig, CameraSet, SceneOptions};
use tririg::episode::{
    episode_file_name, manifest_for, observe_frames, quantize_action, quantize_qpos, step_record, EpisodeWriter,
    RecordSink,
};
use tririg::pose::Pose;
use tririg::sim::{SimState, Simulator, TaskId};
use tririg::teleop::{DeviceFrame, DeviceId, DevicePose, TeleopConfig, TeleopSession};

use crate::codec::{
    self, encode, read_frame, ClientRole, CodecError, DeviceSample, ErrorCode, FrameMsg, Hello, RecordAction,
    RecordControl, RecordStatus, StateUpdate, WireMessage, PROTOCOL_VERSION,
};
use crate::queue::{LatestSlot, Outbox, Pop};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: SocketAddr,
    pub task: TaskId,
    pub seed: u64,
    /// Where recorded episodes land; recording is refused without one.
    pub record_dir: Option<PathBuf>,
    pub record_cameras: CameraSet,
    pub tick_ms: f64,
    /// Frames go out every `frame_every` ticks.
    pub frame_every: u64,
    pub park_after_ms: u64,
    pub outbox_capacity: usize,
    pub max_sessions: usize,
    pub teleop: TeleopConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 7878)),
            task: TaskId::PegInsertion,
            seed: 0,
            record_dir: None,
            record_cameras: CameraSet::all(),
            tick_ms: 20.0,
            frame_every: 2,
            park_after_ms: 2000,
            outbox_capacity: 64,
            max_sessions: 8,
            teleop: TeleopConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Tcp,
    WebSocket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub id: u64,
    pub transport: Transport,
    pub ticks: u64,
    /// Wake-up lateness of each tick against the fixed schedule.
    pub jitter_us: Vec<u32>,
    /// Time spent inside each tick.
    pub work_us: Vec<u32>,
    pub overruns: u64,
    pub poses_received: u64,
    pub poses_consumed: u64,
    /// Poses replaced in the slot before the loop read them.
    pub poses_overwritten: u64,
    pub parked_ticks: u64,
    pub outbox_dropped: u64,
    pub outbox_max_depth: usize,
    pub control_max_depth: usize,
    pub frames_sent: u64,
    pub time_step: u64,
    pub anchored: bool,
    /// The session has ended and released its resources.
    pub closed: bool,
    pub close_reason: Option<String>,
}

const STATS_SAMPLE_CAP: usize = 1 << 20;
const CONTROL_CAPACITY: usize = 32;
const HELLO_TIMEOUT: Duration = Duration::from_secs(10);
const WS_POLL: Duration = Duration::from_millis(1);

#[derive(Debug, Clone)]
enum Control {
    Anchor,
    ReAnchor,
    Record(RecordControl),
}

#[derive(Debug, Default)]
struct Inbound {
    hello: Option<Hello>,
    last_ts: [Option<u64>; 3],
}

struct Session {
    epoch: Instant,
    slot: LatestSlot<DeviceFrame>,
    control: Mutex<VecDeque<Control>>,
    outbox: Outbox,
    inbound: Mutex<Inbound>,
    last_heard_us: AtomicU64,
    closed: AtomicBool,
    stats: Mutex<SessionStats>,
}

/// Converts a wire sample to device poses, normalizing the quaternions.
pub fn device_frame(samples: &[DeviceSample; 3]) -> Result<DeviceFrame, String> {
    let mut devices = [DevicePose {
        device: DeviceId::Head,
        pose: Pose::identity(),
        trigger: 0.0,
        timestamp_us: 0,
    }; 3];
    for (d, (s, out)) in DeviceId::ALL.iter().zip(samples.iter().zip(&mut devices)) {
        let p = s.pose.map(|v| v as f64);
        let norm = (p[3] * p[3] + p[4] * p[4] + p[5] * p[5] + p[6] * p[6]).sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(format!("{d} quaternion norm {norm}"));
        }
        *out = DevicePose {
            device: *d,
            pose: Pose::from_parts([p[0], p[1], p[2]], [p[3], p[4], p[5], p[6]]),
            trigger: s.trigger as f64,
            timestamp_us: s.timestamp_us,
        };
    }
    Ok(DeviceFrame { devices })
}

impl Session {
    fn new(id: u64, transport: Transport, outbox_capacity: usize) -> Self {
        Self {
            epoch: Instant::now(),
            slot: LatestSlot::new(),
            control: Mutex::new(VecDeque::new()),
            outbox: Outbox::new(outbox_capacity),
            inbound: Mutex::new(Inbound::default()),
            last_heard_us: AtomicU64::new(0),
            closed: AtomicBool::new(false),
            stats: Mutex::new(SessionStats {
                id,
                transport,
                ticks: 0,
                jitter_us: Vec::new(),
                work_us: Vec::new(),
                overruns: 0,
                poses_received: 0,
                poses_consumed: 0,
                poses_overwritten: 0,
                parked_ticks: 0,
                outbox_dropped: 0,
                outbox_max_depth: 0,
                control_max_depth: 0,
                frames_sent: 0,
                time_step: 0,
                anchored: false,
                closed: false,
                close_reason: None,
            }),
        }
    }

    fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }

    fn send(&self, msg: &WireMessage) {
        self.outbox.push(encode(msg));
    }

    fn close(&self, reason: &str) {
        if !self.closed.swap(true, Ordering::SeqCst) {
            log::info!("session {} closing: {reason}", self.stats.lock().unwrap().id);
            self.stats.lock().unwrap().close_reason = Some(reason.to_string());
        }
        self.outbox.close();
    }

    fn fail(&self, code: ErrorCode, text: String) {
        self.send(&WireMessage::error(code, text.clone()));
        self.close(&text);
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    fn hello(&self) -> Option<Hello> {
        self.inbound.lock().unwrap().hello.clone()
    }

    fn push_control(&self, c: Control) -> Result<(), (ErrorCode, String)> {
        let mut q = self.control.lock().unwrap();
        if q.len() >= CONTROL_CAPACITY {
            return Err((ErrorCode::Protocol, "too many pending control messages".into()));
        }
        q.push_back(c);
        let depth = q.len();
        drop(q);
        let mut s = self.stats.lock().unwrap();
        s.control_max_depth = s.control_max_depth.max(depth);
        Ok(())
    }

    /// Reader-side handling. Pings are answered here so a parked or busy
    /// loop still answers probes.
    fn on_message(&self, msg: WireMessage) -> Result<(), (ErrorCode, String)> {
        self.last_heard_us.store(self.now_us(), Ordering::SeqCst);
        let mut inbound = self.inbound.lock().unwrap();
        let Some(hello) = inbound.hello.clone() else {
            return match msg {
                WireMessage::Hello(h) if h.protocol_version != PROTOCOL_VERSION => Err((
                    ErrorCode::Version,
                    format!("server speaks protocol {PROTOCOL_VERSION}, client sent {}", h.protocol_version),
                )),
                WireMessage::Hello(h) => {
                    inbound.hello = Some(h.clone());
                    self.send(&WireMessage::Hello(Hello {
                        protocol_version: PROTOCOL_VERSION,
                        ..h
                    }));
                    Ok(())
                }
                other => Err((ErrorCode::Protocol, format!("expected Hello, got {:?}", other.tag()))),
            };
        };
        let operator = hello.role == ClientRole::Operator;
        match msg {
            WireMessage::Ping(p) => {
                self.send(&WireMessage::Pong(p));
                Ok(())
            }
            WireMessage::PoseUpdate(samples) if operator => {
                for (i, s) in samples.iter().enumerate() {
                    if inbound.last_ts[i].is_some_and(|t| s.timestamp_us <= t) {
                        return Err((
                            ErrorCode::Protocol,
                            format!("{} timestamp {} does not increase", DeviceId::ALL[i], s.timestamp_us),
                        ));
                    }
                }
                let frame = device_frame(&samples).map_err(|e| (ErrorCode::Protocol, e))?;
                for (i, s) in samples.iter().enumerate() {
                    inbound.last_ts[i] = Some(s.timestamp_us);
                }
                drop(inbound);
                self.slot.put(frame);
                self.stats.lock().unwrap().poses_received += 1;
                Ok(())
            }
            WireMessage::AnchorRequest if operator => self.push_control(Control::Anchor),
            WireMessage::ReAnchor if operator => self.push_control(Control::ReAnchor),
            WireMessage::RecordControl(r) if operator => self.push_control(Control::Record(r)),
            WireMessage::Hello(_) => Err((ErrorCode::Protocol, "duplicate Hello".into())),
            other => Err((
                ErrorCode::Protocol,
                format!("{:?} is not accepted from a {:?} client", other.tag(), hello.role),
            )),
        }
    }

    fn snapshot(&self) -> SessionStats {
        let mut s = self.stats.lock().unwrap().clone();
        let (dropped, depth) = self.outbox.counts();
        s.outbox_dropped = dropped;
        s.outbox_max_depth = depth;
        s.poses_overwritten = self.slot.counts().1;
        s
    }
}

struct Recording {
    writer: EpisodeWriter,
    path: PathBuf,
    file: String,
}

struct ServerShared {
    cfg: ServeConfig,
    shutdown: AtomicBool,
    sessions: Mutex<Vec<Arc<Session>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    next_id: AtomicU64,
    next_episode: AtomicUsize,
}

impl ServerShared {
    fn active_sessions(&self) -> usize {
        self.sessions.lock().unwrap().iter().filter(|s| !s.is_closed()).count()
    }
}

/// A running server. Dropping the handle leaves it running; call
/// [`ServerHandle::shutdown`] to stop it.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<ServerShared>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn sessions(&self) -> Vec<SessionStats> {
        self.shared.sessions.lock().unwrap().iter().map(|s| s.snapshot()).collect()
    }

    /// Blocks until the acceptor stops.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for s in self.shared.sessions.lock().unwrap().iter() {
            s.close("server shutdown");
        }
        let threads: Vec<_> = self.shared.threads.lock().unwrap().drain(..).collect();
        for t in threads {
            let _ = t.join();
        }
    }
}

fn first_free_episode(dir: &std::path::Path) -> usize {
    (0..)
        .find(|i| !dir.join(episode_file_name(*i)).exists())
        .expect("some index is free")
}

/// Binds the endpoint and starts accepting sessions. Each connection is
/// either raw frames over TCP or the same frames, one per binary message,
/// over WebSocket; the first bytes decide.
pub fn serve(cfg: ServeConfig) -> io::Result<ServerHandle> {
    if !(cfg.tick_ms > 0.0) || cfg.frame_every == 0 || cfg.outbox_capacity == 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "tick_ms, frame_every and outbox_capacity must be positive"));
    }
    if let Some(dir) = &cfg.record_dir {
        std::fs::create_dir_all(dir)?;
    }
    let listener = TcpListener::bind(cfg.bind)?;
    let addr = listener.local_addr()?;
    let next_episode = cfg.record_dir.as_deref().map(first_free_episode).unwrap_or(0);
    let shared = Arc::new(ServerShared {
        cfg,
        shutdown: AtomicBool::new(false),
        sessions: Mutex::new(Vec::new()),
        threads: Mutex::new(Vec::new()),
        next_id: AtomicU64::new(0),
        next_episode: AtomicUsize::new(next_episode),
    });
    let acc = shared.clone();
    let accept = thread::Builder::new().name("tririg-accept".into()).spawn(move || {
        for conn in listener.incoming() {
            if acc.shutdown.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let sh = acc.clone();
            let h = thread::spawn(move || {
                if let Err(e) = run_connection(&sh, stream) {
                    log::warn!("connection ended: {e}");
                }
            });
            acc.threads.lock().unwrap().push(h);
        }
    })?;
    log::info!("serving on {addr}");
    Ok(ServerHandle {
        addr,
        shared,
        accept: Some(accept),
    })
}

fn run_connection(shared: &Arc<ServerShared>, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(HELLO_TIMEOUT))?;
    let mut head = [0u8; 4];
    let mut n = 0;
    let deadline = Instant::now() + HELLO_TIMEOUT;
    while n < 4 && Instant::now() < deadline {
        n = stream.peek(&mut head)?;
        if n == 0 {
            return Ok(());
        }
        if n < 4 {
            thread::sleep(Duration::from_millis(1));
        }
    }
    let transport = if &head == b"GET " { Transport::WebSocket } else { Transport::Tcp };
    let id = shared.next_id.fetch_add(1, Ordering::SeqCst);
    let session = Arc::new(Session::new(id, transport, shared.cfg.outbox_capacity));
    if shared.active_sessions() >= shared.cfg.max_sessions {
        session.fail(ErrorCode::Refused, "session limit reached".into());
    }
    shared.sessions.lock().unwrap().push(session.clone());
    log::info!("session {id} connected over {transport:?}");

    let io_threads: Vec<JoinHandle<()>> = match transport {
        Transport::Tcp => {
            stream.set_read_timeout(None)?;
            let (r, w) = (stream.try_clone()?, stream);
            let (s1, s2) = (session.clone(), session.clone());
            vec![thread::spawn(move || tcp_reader(&s1, r)), thread::spawn(move || tcp_writer(&s2, w))]
        }
        Transport::WebSocket => {
            let ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
            let s = session.clone();
            vec![thread::spawn(move || ws_io(&s, ws))]
        }
    };

    if !session.is_closed() {
        control_loop(shared, &session);
    }
    session.close("session ended");
    for t in io_threads {
        let _ = t.join();
    }
    session.stats.lock().unwrap().closed = true;
    Ok(())
}

fn tcp_reader(session: &Session, mut stream: TcpStream) {
    let mut buf = Vec::new();
    while !session.is_closed() {
        match read_frame(&mut stream, &mut buf) {
            Ok(Some(msg)) => {
                if let Err((code, text)) = session.on_message(msg) {
                    session.fail(code, text);
                }
            }
            Ok(None) => session.close("client disconnected"),
            Err(CodecError::Io(e)) => session.close(&format!("read failed: {e}")),
            Err(e) => session.fail(ErrorCode::Protocol, e.to_string()),
        }
    }
}

fn tcp_writer(session: &Session, mut stream: TcpStream) {
    loop {
        match session.outbox.pop(Duration::from_millis(100)) {
            Pop::Frame(f) => {
                if let Err(e) = stream.write_all(&f) {
                    session.close(&format!("write failed: {e}"));
                }
            }
            Pop::Empty => {}
            Pop::Closed => break,
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

/// WebSocket reads and writes share one socket, so a single thread polls
/// both with a short read timeout.
fn ws_io(session: &Session, mut ws: WebSocket<TcpStream>) {
    let _ = ws.get_mut().set_read_timeout(Some(WS_POLL));
    loop {
        if !session.is_closed() {
            match ws.read() {
                Ok(Message::Binary(b)) => match codec::decode(&b) {
                    Ok(msg) => {
                        if let Err((code, text)) = session.on_message(msg) {
                            session.fail(code, text);
                        }
                    }
                    Err(e) => session.fail(ErrorCode::Protocol, e.to_string()),
                },
                Ok(Message::Text(_)) => session.fail(ErrorCode::Protocol, "text messages are not part of the protocol".into()),
                Ok(Message::Close(_)) => session.close("client disconnected"),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(e) => session.close(&format!("websocket: {e}")),
            }
        }
        loop {
            match session.outbox.pop(Duration::ZERO) {
                Pop::Frame(f) => {
                    if let Err(e) = ws.send(Message::Binary(f)) {
                        session.close(&format!("websocket write: {e}"));
                    }
                }
                Pop::Empty => break,
                Pop::Closed => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    let _ = ws.get_mut().shutdown(Shutdown::Both);
                    return;
                }
            }
        }
        if session.is_closed() && session.outbox.is_empty() {
            thread::sleep(WS_POLL);
        }
    }
}

fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        thread::sleep(deadline - now);
    }
}

struct LoopState {
    sim: Simulator,
    seed: u64,
    state: SimState,
    teleop: TeleopSession,
    action: tririg::rig::Qpos,
    last_frame: Option<DeviceFrame>,
    pending_anchor: bool,
    recording: Option<Recording>,
}

impl LoopState {
    fn restart(&mut self, cfg: &ServeConfig, task: TaskId, seed: u64) {
        if task != self.sim.task.id() {
            self.sim = Simulator::nominal(task);
        }
        self.seed = seed;
        self.state = self.sim.reset(seed);
        self.teleop = TeleopSession::new(cfg.teleop, &self.sim.rig);
        self.action = quantize_action(&self.sim.rig, &self.state.qpos);
        self.pending_anchor = true;
    }
}

fn handle_control(shared: &ServerShared, session: &Session, ls: &mut LoopState, c: Control, cameras: &CameraRig) {
    let cfg = &shared.cfg;
    let refuse = |text: &str| session.send(&WireMessage::error(ErrorCode::Refused, text));
    match c {
        Control::Anchor => {
            if ls.recording.is_some() {
                return refuse("cannot re-home while recording");
            }
            let (task, seed) = (ls.sim.task.id(), ls.seed);
            ls.restart(cfg, task, seed);
        }
        Control::ReAnchor => ls.pending_anchor = true,
        Control::Record(RecordControl {
            action: RecordAction::Start,
            task,
            seed,
        }) => {
            if ls.recording.is_some() {
                return refuse("already recording");
            }
            let Some(dir) = &cfg.record_dir else {
                return refuse("server has no record directory");
            };
            ls.restart(cfg, task.unwrap_or(ls.sim.task.id()), seed.unwrap_or(ls.seed));
            let index = shared.next_episode.fetch_add(1, Ordering::SeqCst);
            let file = episode_file_name(index);
            let path = dir.join(&file);
            let manifest = manifest_for(&ls.sim, cameras, ls.seed, cfg.record_cameras.clone(), true, "teleop");
            match EpisodeWriter::create(&path, manifest) {
                Ok(writer) => {
                    ls.recording = Some(Recording { writer, path, file });
                    session.send(&WireMessage::RecordStatus(RecordStatus {
                        recording: true,
                        steps: 0,
                        file: None,
                    }));
                }
                Err(e) => session.send(&WireMessage::error(ErrorCode::Internal, e.to_string())),
            }
        }
        Control::Record(RecordControl {
            action: RecordAction::Stop, ..
        }) => {
            let Some(rec) = ls.recording.take() else {
                return refuse("not recording");
            };
            match rec.writer.finish() {
                Ok(m) => session.send(&WireMessage::RecordStatus(RecordStatus {
                    recording: false,
                    steps: m.step_count,
                    file: Some(rec.file),
                })),
                Err(e) => {
                    let _ = std::fs::remove_file(&rec.path);
                    session.send(&WireMessage::error(ErrorCode::Internal, e.to_string()));
                }
            }
        }
    }
}

/// The 50 Hz owner of the session's simulator.
fn control_loop(shared: &ServerShared, session: &Session) {
    let cfg = &shared.cfg;
    let hello_deadline = Instant::now() + HELLO_TIMEOUT;
    let hello = loop {
        if session.is_closed() {
            return;
        }
        if let Some(h) = session.hello() {
            break h;
        }
        if Instant::now() > hello_deadline {
            session.fail(ErrorCode::Protocol, "no Hello received".into());
            return;
        }
        thread::sleep(Duration::from_millis(2));
    };
    let cameras = CameraRig::nominal();
    let sim = Simulator::nominal(cfg.task);
    let state = sim.reset(cfg.seed);
    let mut ls = LoopState {
        teleop: TeleopSession::new(cfg.teleop, &sim.rig),
        action: quantize_action(&sim.rig, &state.qpos),
        seed: cfg.seed,
        state,
        sim,
        last_frame: None,
        pending_anchor: false,
        recording: None,
    };
    let subscribed = hello.camera_set;
    let period = Duration::from_secs_f64(cfg.tick_ms / 1000.0);
    let park_after_us = cfg.park_after_ms * 1000;
    let opts = SceneOptions::default();
    let start = Instant::now();
    session.last_heard_us.store(session.now_us(), Ordering::SeqCst);
    let mut tick: u64 = 0;
    let mut was_parked = false;
    while !session.is_closed() && !shared.shutdown.load(Ordering::SeqCst) {
        let scheduled = start + period.mul_f64(tick as f64);
        sleep_until(scheduled);
        let woke = Instant::now();
        let late = woke - scheduled;
        let mut overrun = false;
        if late > period {
            overrun = true;
            tick = ((woke - start).as_secs_f64() / period.as_secs_f64()) as u64;
        }

        let controls: Vec<Control> = session.control.lock().unwrap().drain(..).collect();
        for c in controls {
            handle_control(shared, session, &mut ls, c, &cameras);
        }

        let fresh = session.slot.take();
        if let Some(f) = fresh {
            ls.last_frame = Some(f);
        }
        let parked = session.now_us().saturating_sub(session.last_heard_us.load(Ordering::SeqCst)) > park_after_us;
        if parked {
            if !was_parked {
                ls.teleop.hold(&ls.state.qpos);
            }
            ls.action = quantize_action(&ls.sim.rig, &ls.state.qpos);
        } else {
            if ls.pending_anchor {
                if let Some(f) = &ls.last_frame {
                    if ls.teleop.anchor_at(f, &ls.sim.rig, &ls.state.qpos).is_ok() {
                        ls.pending_anchor = false;
                    }
                }
            }
            if let (Some(f), false) = (fresh, ls.pending_anchor) {
                if ls.teleop.anchor().is_some() {
                    let (q, _) = ls.teleop.targets(&f, &ls.sim.rig);
                    ls.action = quantize_action(&ls.sim.rig, &q);
                }
            }
        }
        was_parked = parked;

        let stream_frames = !subscribed.is_empty() && tick % cfg.frame_every == 0;
        let mut wanted: Vec<CameraId> = Vec::new();
        if stream_frames {
            wanted.extend(subscribed.ids());
        }
        if ls.recording.is_some() {
            wanted.extend(cfg.record_cameras.ids());
        }
        let render_set: CameraSet = wanted.into_iter().collect();
        let frames = observe_frames(&ls.sim, &cameras, &render_set, &ls.state, &opts);
        let frame_of = |id: CameraId| frames[render_set.position(id).expect("rendered")].clone();

        if let Some(rec) = &mut ls.recording {
            let rec_frames = cfg.record_cameras.ids().into_iter().map(frame_of).collect();
            if let Err(e) = rec.writer.push_step(step_record(&ls.state, &ls.action, rec_frames)) {
                let rec = ls.recording.take().expect("recording");
                let _ = std::fs::remove_file(&rec.path);
                session.send(&WireMessage::error(ErrorCode::Internal, e.to_string()));
            }
        }

        let frame_step = ls.state.time_step;
        ls.sim.step(&mut ls.state, &ls.action);
        session.send(&WireMessage::StateUpdate(StateUpdate {
            time_step: ls.state.time_step,
            qpos: quantize_qpos(&ls.state.qpos),
            stage_flags: ls.state.stage_flags(),
        }));
        let mut sent = 0;
        if stream_frames {
            for id in subscribed.ids() {
                let k = cameras.model(id).intrinsics;
                session.send(&WireMessage::FrameMsg(FrameMsg {
                    camera: id,
                    time_step: frame_step,
                    width: k.width,
                    height: k.height,
                    pixels: frame_of(id),
                }));
                sent += 1;
            }
        }

        let work = woke.elapsed();
        let mut st = session.stats.lock().unwrap();
        st.ticks += 1;
        if st.jitter_us.len() < STATS_SAMPLE_CAP {
            st.jitter_us.push(late.as_micros().min(u32::MAX as u128) as u32);
            st.work_us.push(work.as_micros().min(u32::MAX as u128) as u32);
        }
        st.overruns += overrun as u64;
        st.poses_consumed += fresh.is_some() as u64;
        st.parked_ticks += parked as u64;
        st.frames_sent += sent;
        st.time_step = ls.state.time_step;
        st.anchored = ls.teleop.anchor().is_some() && !ls.pending_anchor;
        drop(st);
        tick += 1;
    }
    if let Some(rec) = ls.recording.take() {
        drop(rec.writer);
        let _ = std::fs::remove_file(&rec.path);
    }
}
