//! WebSocket service for live teleoperation sessions.
//!
//! `GET /ws` upgrades to a session connection speaking the JSON messages of
//! [`goalnav::teleop`]. Everything else is served from the static UI
//! directory when one is configured, or a placeholder page otherwise.
//!
//! Each session runs on its own task: inputs reach it through a queue and
//! frames fan out through a broadcast channel at the tick rate.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{Html, IntoResponse};
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use goalnav::teleop::{
    ClientMessage, Created, InputAck, InputPayload, ServerMessage, Session, Task,
};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::{Instant, MissedTickBehavior};
use tower_http::services::ServeDir;

/// How long a finished session stays attachable.
const LINGER: Duration = Duration::from_secs(60);

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Tasks by map id.
    pub maps: BTreeMap<String, Task>,
    pub default_map: String,
    pub tick_hz: f64,
    /// Built UI assets served under `/`.
    pub static_dir: Option<PathBuf>,
}

enum Command {
    Input { payload: InputPayload, seq: Option<u64>, reply: oneshot::Sender<InputAck> },
    Snapshot { reply: oneshot::Sender<Created> },
    Disconnect,
    Reconnect,
}

#[derive(Clone)]
struct SessionHandle {
    commands: mpsc::Sender<Command>,
    messages: broadcast::Sender<ServerMessage>,
}

struct Inner {
    config: ServerConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: ServerConfig) -> Self {
        Self(Arc::new(Inner { config, sessions: Mutex::new(HashMap::new()) }))
    }

    /// Number of sessions currently registered.
    pub fn session_count(&self) -> usize {
        self.0.sessions.lock().expect("registry lock").len()
    }

    fn lookup(&self, id: &str) -> Option<SessionHandle> {
        self.0.sessions.lock().expect("registry lock").get(id).cloned()
    }
}

pub fn router(state: AppState) -> Router {
    let ws = Router::new().route("/ws", get(upgrade)).with_state(state.clone());
    match state.0.config.static_dir.as_ref().filter(|d| d.join("index.html").is_file()) {
        Some(dir) => ws.fallback_service(ServeDir::new(dir)),
        None => ws.route("/", get(placeholder)),
    }
}

/// Bind and serve in the background; returns the bound address.
pub async fn spawn(config: ServerConfig, addr: SocketAddr) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(AppState::new(config));
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            eprintln!("server stopped: {e}");
        }
    });
    Ok((local, handle))
}

pub async fn serve(config: ServerConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(AppState::new(config))).await
}

async fn placeholder() -> Html<&'static str> {
    Html(
        "<!doctype html><title>goalnav</title>\
         <p>The operator console has not been built. \
         Sessions are available over the WebSocket at <code>/ws</code>.</p>",
    )
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, state))
}

async fn run_session(
    mut session: Session,
    mut commands: mpsc::Receiver<Command>,
    messages: broadcast::Sender<ServerMessage>,
    tick_hz: f64,
    state: AppState,
) {
    let t0 = Instant::now();
    let now = || t0.elapsed().as_secs_f64();
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(1.0 / tick_hz));
    ticker.set_missed_tick_behavior(MissedTickBehavior::Skip);
    while session.is_running() {
        tokio::select! {
            _ = ticker.tick() => {
                session.advance_to(now());
                let _ = messages.send(ServerMessage::Frame(session.frame()));
            }
            cmd = commands.recv() => match cmd {
                Some(Command::Input { payload, seq, reply }) => {
                    let _ = reply.send(session.submit_input(now(), payload, seq));
                }
                Some(Command::Snapshot { reply }) => {
                    let _ = reply.send(session.created());
                }
                Some(Command::Disconnect) | None => session.disconnect(now()),
                Some(Command::Reconnect) => session.reconnect(now()),
            }
        }
    }
    let _ = messages.send(ServerMessage::Frame(session.frame()));
    if let Some(t) = session.terminal() {
        let _ = messages.send(ServerMessage::Terminal(t));
    }
    // stay attachable for a while, answering snapshots and refusing inputs
    let _ = tokio::time::timeout(LINGER, async {
        while let Some(cmd) = commands.recv().await {
            match cmd {
                Command::Input { payload, seq, reply } => {
                    let _ = reply.send(session.submit_input(now(), payload, seq));
                }
                Command::Snapshot { reply } => {
                    let _ = reply.send(session.created());
                    if let Some(t) = session.terminal() {
                        let _ = messages.send(ServerMessage::Terminal(t));
                    }
                }
                Command::Disconnect | Command::Reconnect => {}
            }
        }
    })
    .await;
    state.0.sessions.lock().expect("registry lock").remove(session.id());
}

fn create_session(state: &AppState, req: &goalnav::teleop::CreateRequest) -> Result<SessionHandle, ServerMessage> {
    let config = &state.0.config;
    let map = req.map.as_deref().unwrap_or(&config.default_map);
    let task = config
        .maps
        .get(map)
        .ok_or_else(|| ServerMessage::error(format!("unknown map `{map}`"), Some("map")))?;
    let condition = req.condition().map_err(|e| ServerMessage::error(e.to_string(), e.field()))?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let seed = req.seed.unwrap_or_else(|| uuid::Uuid::new_v4().as_u64_pair().0);
    let session = Session::new(id.clone(), task.clone(), condition, seed)
        .map_err(|e| ServerMessage::error(e.to_string(), e.field()))?;
    let (cmd_tx, cmd_rx) = mpsc::channel(32);
    let (msg_tx, _) = broadcast::channel(256);
    let handle = SessionHandle { commands: cmd_tx, messages: msg_tx.clone() };
    state.0.sessions.lock().expect("registry lock").insert(id, handle.clone());
    tokio::spawn(run_session(session, cmd_rx, msg_tx, config.tick_hz, state.clone()));
    Ok(handle)
}

async fn connection(socket: WebSocket, state: AppState) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::channel::<ServerMessage>(256);
    let writer = tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            if sink.send(Message::Text(msg.to_json().into())).await.is_err() {
                break;
            }
        }
    });
    let mut attached: Option<SessionHandle> = None;
    let mut forwarder: Option<JoinHandle<()>> = None;

    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match ClientMessage::parse(&text) {
            Err(e) => Some(ServerMessage::error(e.to_string(), e.field())),
            Ok(ClientMessage::Create(_) | ClientMessage::Attach(_)) if attached.is_some() => {
                Some(ServerMessage::error("connection already has a session", None))
            }
            Ok(ClientMessage::Create(req)) => match create_session(&state, &req) {
                Err(e) => Some(e),
                Ok(handle) => {
                    forwarder = join(&handle, &out_tx).await;
                    attached = forwarder.as_ref().map(|_| handle);
                    None
                }
            },
            Ok(ClientMessage::Attach(req)) => match state.lookup(&req.session) {
                None => Some(ServerMessage::error(format!("unknown session `{}`", req.session), Some("session"))),
                Some(handle) => {
                    let _ = handle.commands.send(Command::Reconnect).await;
                    forwarder = join(&handle, &out_tx).await;
                    attached = forwarder.as_ref().map(|_| handle);
                    None
                }
            },
            Ok(ClientMessage::Input(req)) => match &attached {
                None => Some(ServerMessage::error("no session; send `create` first", None)),
                Some(handle) => {
                    let payload = req.payload().expect("validated on parse");
                    let (tx, rx) = oneshot::channel();
                    let sent = handle.commands.send(Command::Input { payload, seq: req.seq, reply: tx }).await;
                    match (sent, rx.await) {
                        (Ok(()), Ok(ack)) => Some(ServerMessage::InputAck(ack)),
                        _ => Some(ServerMessage::error("session has closed", None)),
                    }
                }
            },
        };
        if let Some(r) = reply {
            if out_tx.send(r).await.is_err() {
                break;
            }
        }
    }

    if let Some(handle) = attached {
        let _ = handle.commands.send(Command::Disconnect).await;
    }
    if let Some(f) = forwarder {
        f.abort();
    }
    drop(out_tx);
    let _ = writer.await;
}

/// Send `created` and start relaying the session's broadcasts.
async fn join(handle: &SessionHandle, out: &mpsc::Sender<ServerMessage>) -> Option<JoinHandle<()>> {
    let mut rx = handle.messages.subscribe();
    let (tx, reply) = oneshot::channel();
    handle.commands.send(Command::Snapshot { reply: tx }).await.ok()?;
    let created = reply.await.ok()?;
    out.send(ServerMessage::Created(created)).await.ok()?;
    let out = out.clone();
    Some(tokio::spawn(async move {
        loop {
            match rx.recv().await {
                Ok(msg) => {
                    if out.send(msg).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => break,
            }
        }
    }))
}
