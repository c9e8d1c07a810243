//! Line-oriented JSON environment server.
//!
//! Each TCP connection owns one [`Session`]. Requests and replies are single
//! JSON objects terminated by `\n`, with the envelope
//! `{"version": 1, "id": <any>, "type": <string>, "payload": <object>}`.
//! See `docs/protocol.md` for the message catalogue.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::comms::MergeEvent;
use crate::error::Result;
use crate::obsmap::{Observation, FOV_LEN, FPR_LEN};
use crate::trace::Episode;
use crate::world::{Action, AgentEvents, EnvConfig, N_ACTIONS};

pub const PROTOCOL_VERSION: u32 = 1;
/// Longest accepted request line in bytes, newline included.
pub const MAX_LINE_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    BadAction,
    BadConfig,
    VersionMismatch,
    EpisodeDone,
    NoEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutField {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Offsets of the observation blocks inside each flat observation array.
pub fn layout(n_agents: usize) -> Vec<LayoutField> {
    let mut offset = 0;
    [("fov", FOV_LEN), ("fpr", FPR_LEN), ("net", n_agents), ("mask", N_ACTIONS)]
        .into_iter()
        .map(|(name, len)| {
            let f = LayoutField { name: name.into(), offset, len };
            offset += len;
            f
        })
        .collect()
}

/// `fov ++ fpr ++ net ++ mask` as one array.
pub fn flatten_observation(obs: &Observation) -> Vec<f64> {
    let mut v = obs.features();
    v.extend(obs.mask.to_vec());
    v
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    #[serde(rename = "version")]
    _version: u32,
    #[serde(default)]
    id: Value,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    payload: Value,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResetPayload {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    config: Option<Map<String, Value>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepPayload {
    actions: Vec<Value>,
}

#[derive(Debug, Serialize)]
struct StepEventsPayload<'a> {
    agents: &'a [AgentEvents],
    networks: &'a [MergeEvent],
}

fn parse_actions(raw: &[Value], n_agents: usize) -> std::result::Result<Vec<Action>, String> {
    if raw.len() != n_agents {
        return Err(format!("expected {n_agents} actions, got {}", raw.len()));
    }
    raw.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_u64()
                .and_then(|id| u8::try_from(id).ok())
                .and_then(Action::from_id)
                .ok_or_else(|| format!("action {i} is {v}, expected an integer in 0..={}", N_ACTIONS - 1))
        })
        .collect()
}

/// What the transport should do after a request.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Send(String),
    Close,
}

/// Protocol state of one connection.
#[derive(Debug)]
pub struct Session {
    id: u64,
    defaults: EnvConfig,
    episode: Option<Episode>,
    episodes_started: u64,
    trace_dir: Option<PathBuf>,
}

fn envelope(id: &Value, kind: &str, payload: Value) -> String {
    json!({ "version": PROTOCOL_VERSION, "id": id, "type": kind, "payload": payload }).to_string()
}

fn error_reply(id: &Value, code: ErrorCode, message: impl Into<String>) -> String {
    envelope(id, "error", json!({ "code": code, "message": message.into() }))
}

impl Session {
    pub fn new(id: u64, defaults: EnvConfig) -> Self {
        Self { id, defaults, episode: None, episodes_started: 0, trace_dir: None }
    }

    /// Completed episodes are written as `session{id}_episode{k}.json` into `dir`.
    pub fn with_trace_dir(mut self, dir: PathBuf) -> Self {
        self.trace_dir = Some(dir);
        self
    }

    pub fn episode(&self) -> Option<&Episode> {
        self.episode.as_ref()
    }

    pub fn handle(&mut self, line: &str) -> Reply {
        let raw: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return Reply::Send(error_reply(&Value::Null, ErrorCode::BadMessage, format!("invalid JSON: {e}"))),
        };
        let id = raw.get("id").cloned().unwrap_or(Value::Null);
        if let Some(v) = raw.get("version") {
            if v.as_u64() != Some(u64::from(PROTOCOL_VERSION)) {
                return Reply::Send(error_reply(
                    &id,
                    ErrorCode::VersionMismatch,
                    format!("server speaks version {PROTOCOL_VERSION}, request has {v}"),
                ));
            }
        }
        let env: Envelope = match serde_json::from_value(raw) {
            Ok(e) => e,
            Err(e) => return Reply::Send(error_reply(&id, ErrorCode::BadMessage, format!("bad envelope: {e}"))),
        };
        match env.kind.as_str() {
            "reset" => Reply::Send(self.reset(&env.id, env.payload)),
            "step" => Reply::Send(self.step(&env.id, env.payload)),
            "close" => {
                self.finish_episode();
                Reply::Close
            }
            other => Reply::Send(error_reply(&env.id, ErrorCode::BadMessage, format!("unknown message type `{other}`"))),
        }
    }

    fn reset(&mut self, id: &Value, payload: Value) -> String {
        let payload: ResetPayload = if payload.is_null() {
            ResetPayload::default()
        } else {
            match serde_json::from_value(payload) {
                Ok(p) => p,
                Err(e) => return error_reply(id, ErrorCode::BadMessage, format!("bad reset payload: {e}")),
            }
        };
        let config = match self.resolve_config(payload.config) {
            Ok(c) => c,
            Err(e) => return error_reply(id, ErrorCode::BadConfig, e.to_string()),
        };
        let episode = match Episode::new(config, payload.seed) {
            Ok(ep) => ep,
            Err(e) => return error_reply(id, ErrorCode::BadConfig, e.to_string()),
        };
        self.finish_episode();
        self.episodes_started += 1;
        let cfg = episode.config();
        let reply = envelope(
            id,
            "reset_ok",
            json!({
                "seed": payload.seed,
                "config": cfg,
                "rows": cfg.rows,
                "cols": cfg.cols,
                "n_agents": cfg.n_agents,
                "horizon": cfg.horizon,
                "t": 0,
                "layout": layout(cfg.n_agents),
                "positions": episode.state().positions,
                "observations": episode.observations().iter().map(flatten_observation).collect::<Vec<_>>(),
            }),
        );
        self.episode = Some(episode);
        reply
    }

    fn resolve_config(&self, overrides: Option<Map<String, Value>>) -> Result<EnvConfig> {
        let mut base = serde_json::to_value(&self.defaults)?;
        if let (Some(o), Value::Object(b)) = (overrides, &mut base) {
            b.extend(o);
        }
        let config: EnvConfig = serde_json::from_value(base)?;
        config.validate()?;
        Ok(config)
    }

    fn step(&mut self, id: &Value, payload: Value) -> String {
        let payload: StepPayload = match serde_json::from_value(payload) {
            Ok(p) => p,
            Err(e) => return error_reply(id, ErrorCode::BadMessage, format!("bad step payload: {e}")),
        };
        let Some(episode) = self.episode.as_mut() else {
            return error_reply(id, ErrorCode::NoEpisode, "send reset before step");
        };
        if episode.done() {
            return error_reply(id, ErrorCode::EpisodeDone, "episode reached its horizon; send reset");
        }
        let actions = match parse_actions(&payload.actions, episode.config().n_agents) {
            Ok(a) => a,
            Err(m) => return error_reply(id, ErrorCode::BadAction, m),
        };
        let episode = self.episode.as_mut().expect("checked above");
        let outcome = match episode.step(&actions) {
            Ok(o) => o,
            Err(e) => return error_reply(id, ErrorCode::BadAction, e.to_string()),
        };
        let state = episode.state();
        let reply = envelope(
            id,
            "step_ok",
            json!({
                "t": state.t,
                "remaining": episode.config().horizon - state.t,
                "done": outcome.done,
                "positions": state.positions,
                "observations": episode.observations().iter().map(flatten_observation).collect::<Vec<_>>(),
                "rewards": outcome.rewards,
                "joint_reward": outcome.joint_reward,
                "known": outcome.events.known_after,
                "events": StepEventsPayload { agents: &outcome.events.agents, networks: &outcome.events.networks },
            }),
        );
        if outcome.done {
            self.finish_episode();
        }
        reply
    }

    /// Writes the episode trace once, if a trace directory is configured.
    fn finish_episode(&mut self) {
        if let (Some(dir), Some(ep)) = (&self.trace_dir, &self.episode) {
            let path = dir.join(format!("session{}_episode{}.json", self.id, self.episodes_started));
            if !path.exists() {
                let _ = std::fs::write(path, ep.trace().to_json());
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    pub defaults: EnvConfig,
    pub trace_dir: Option<PathBuf>,
}

/// Stops a running [`Server`].
#[derive(Debug, Clone)]
pub struct ShutdownHandle {
    flag: Arc<AtomicBool>,
    addr: SocketAddr,
}

impl ShutdownHandle {
    pub fn shutdown(&self) {
        self.flag.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
    }
}

#[derive(Debug)]
pub struct Server {
    listener: TcpListener,
    config: ServerConfig,
    flag: Arc<AtomicBool>,
    next_session: Arc<AtomicU64>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, config: ServerConfig) -> Result<Self> {
        config.defaults.validate()?;
        if let Some(dir) = &config.trace_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            config,
            flag: Arc::new(AtomicBool::new(false)),
            next_session: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn shutdown_handle(&self) -> Result<ShutdownHandle> {
        Ok(ShutdownHandle { flag: Arc::clone(&self.flag), addr: self.local_addr()? })
    }

    /// Accepts connections until shut down; each gets its own thread and session.
    pub fn serve(self) -> Result<()> {
        let mut workers = Vec::new();
        for stream in self.listener.incoming() {
            if self.flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let id = self.next_session.fetch_add(1, Ordering::SeqCst);
            let mut session = Session::new(id, self.config.defaults.clone());
            if let Some(dir) = &self.config.trace_dir {
                session = session.with_trace_dir(dir.clone());
            }
            workers.push(thread::spawn(move || {
                let _ = handle_connection(stream, session);
            }));
            workers.retain(|w| !w.is_finished());
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }
}

fn handle_connection(stream: TcpStream, mut session: Session) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = (&mut reader).take(MAX_LINE_BYTES as u64).read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        let reply = if buf.last() != Some(&b'\n') && n == MAX_LINE_BYTES {
            // Drop the rest of the oversized line.
            let mut sink = Vec::new();
            reader.read_until(b'\n', &mut sink)?;
            Reply::Send(error_reply(&Value::Null, ErrorCode::BadMessage, "request line too long"))
        } else {
            match std::str::from_utf8(&buf) {
                Ok(text) if text.trim().is_empty() => continue,
                Ok(text) => session.handle(text.trim_end()),
                Err(_) => Reply::Send(error_reply(&Value::Null, ErrorCode::BadMessage, "request is not UTF-8")),
            }
        };
        match reply {
            Reply::Send(mut line) => {
                line.push('\n');
                writer.write_all(line.as_bytes())?;
                writer.flush()?;
            }
            Reply::Close => break,
        }
    }
    session.finish_episode();
    let _ = writer.shutdown(Shutdown::Both);
    Ok(())
}

/// Builds a request line.
pub fn request(id: u64, kind: &str, payload: Value) -> String {
    envelope(&Value::from(id), kind, payload)
}
