//! WebSocket frame server. Each connection owns a pipeline; poses that arrive while a
//! frame is rendering replace each other so only the latest is rendered.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, Notify};
use trajfield::protocol::{client_camera, encode_frame, ClientMessage, FrameFormat, ServerText, StatsMessage};
use trajfield::{Pipeline, ProtocolError};

use crate::model::Model;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Largest width or height a client may request.
    pub max_res: u32,
    pub format: FrameFormat,
    /// Directory with the viewer's static files.
    pub assets: Option<PathBuf>,
}

struct AppState {
    model: Arc<Model>,
    config: ServerConfig,
}

const FALLBACK_INDEX: &str = "<!doctype html><title>trajfield</title>\
<p>Frame server running. WebSocket endpoint: <code>/render</code>. No viewer assets configured.</p>";

pub fn router(model: Arc<Model>, config: ServerConfig) -> Router {
    let state = Arc::new(AppState { model, config });
    Router::new()
        .route("/render", get(upgrade))
        .route("/", get(index))
        .route("/{*path}", get(asset))
        .with_state(state)
}

/// Serves until the listener fails or the task is dropped.
pub async fn serve(listener: TcpListener, model: Arc<Model>, config: ServerConfig) -> std::io::Result<()> {
    axum::serve(listener, router(model, config)).await
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

async fn index(State(state): State<Arc<AppState>>) -> Response {
    match &state.config.assets {
        Some(dir) => static_file(dir, Path::new("index.html")).await,
        None => Html(FALLBACK_INDEX).into_response(),
    }
}

async fn asset(State(state): State<Arc<AppState>>, UrlPath(path): UrlPath<String>) -> Response {
    let rel = Path::new(&path);
    let safe = rel.components().all(|c| matches!(c, Component::Normal(_)));
    match (&state.config.assets, safe) {
        (Some(dir), true) => static_file(dir, rel).await,
        _ => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn static_file(dir: &Path, rel: &Path) -> Response {
    let mime = match rel.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    };
    match tokio::fs::read(dir.join(rel)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, mime)], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, state))
}

struct PendingPose {
    seq: u64,
    m: Vec<f64>,
    fov_y: f64,
}

#[derive(Default)]
struct Pending {
    pose: Option<PendingPose>,
    use_guidance: Option<bool>,
    use_nn: Option<bool>,
    reset: bool,
    size: Option<(u32, u32)>,
    closed: bool,
}

struct Shared {
    pending: Mutex<Pending>,
    wake: Notify,
}

/// Rounds a requested size to the pipeline's size unit, clamped to `[unit, max]`.
pub fn snap_size(w: u32, h: u32, unit: u32, max_res: u32) -> (u32, u32) {
    let top = (max_res / unit).max(1) * unit;
    let snap = |v: u32| (((v + unit / 2) / unit) * unit).clamp(unit, top);
    (snap(w), snap(h))
}

fn error_text(msg: impl std::fmt::Display) -> Message {
    Message::Text(ServerText::Error { message: msg.to_string() }.to_json().into())
}

async fn connection(socket: WebSocket, state: Arc<AppState>) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            if sink.send(msg).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let shared = Arc::new(Shared {
        pending: Mutex::new(Pending::default()),
        wake: Notify::new(),
    });
    let render = tokio::spawn(render_loop(state.clone(), shared.clone(), out_tx.clone()));

    let mut pose_seq = 0u64;
    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Binary(_) => {
                let _ = out_tx.send(error_text("binary client messages are not supported"));
                continue;
            }
            _ => continue,
        };
        match ClientMessage::parse(text.as_str()) {
            Err(e) => {
                let _ = out_tx.send(error_text(e));
            }
            Ok(ClientMessage::Pose { m, fov_y }) => {
                if let Err(e) = client_camera(&m, fov_y, 16, 16) {
                    let _ = out_tx.send(error_text(e));
                    continue;
                }
                pose_seq += 1;
                shared.pending.lock().unwrap().pose = Some(PendingPose { seq: pose_seq, m, fov_y });
                shared.wake.notify_one();
            }
            Ok(ClientMessage::Config {
                use_guidance,
                use_nn,
                reset,
            }) => {
                let mut p = shared.pending.lock().unwrap();
                p.use_guidance = use_guidance.or(p.use_guidance);
                p.use_nn = use_nn.or(p.use_nn);
                p.reset |= reset.unwrap_or(false);
            }
            Ok(ClientMessage::Resize { w, h }) => {
                if w == 0 || h == 0 {
                    let _ = out_tx.send(error_text(ProtocolError::Malformed("resize needs w, h > 0".into())));
                    continue;
                }
                shared.pending.lock().unwrap().size = Some((w, h));
            }
        }
    }
    shared.pending.lock().unwrap().closed = true;
    shared.wake.notify_one();
    let _ = render.await;
    drop(out_tx);
    let _ = writer.await;
}

async fn render_loop(state: Arc<AppState>, shared: Arc<Shared>, out: mpsc::UnboundedSender<Message>) {
    let model = state.model.clone();
    let mut pipeline = match Pipeline::new(model.pipeline) {
        Ok(p) => p,
        Err(e) => {
            let _ = out.send(error_text(e));
            return;
        }
    };
    let unit = model.pipeline.scale * model.renderer.size_divisor() as u32;
    let mut size = snap_size(
        model.intrinsics.width,
        model.intrinsics.height,
        unit,
        state.config.max_res,
    );
    let mut frame_id = 0u32;
    let mut last_sent: Option<Instant> = None;
    loop {
        shared.wake.notified().await;
        let (pose, closed) = {
            let mut p = shared.pending.lock().unwrap();
            if let Some(g) = p.use_guidance.take() {
                pipeline.set_use_guidance(g);
            }
            if let Some(n) = p.use_nn.take() {
                pipeline.set_use_neural_renderer(n);
            }
            if std::mem::take(&mut p.reset) {
                pipeline.reset();
            }
            if let Some((w, h)) = p.size.take() {
                size = snap_size(w, h, unit, state.config.max_res);
            }
            (p.pose.take(), p.closed)
        };
        if closed {
            break;
        }
        let Some(pose) = pose else { continue };
        let (pose_w2c, intr) = match client_camera(&pose.m, pose.fov_y, size.0, size.1) {
            Ok(c) => c,
            Err(e) => {
                let _ = out.send(error_text(e));
                continue;
            }
        };
        let buffer_len = pipeline.buffer().len();
        let m = model.clone();
        let joined = tokio::task::spawn_blocking(move || {
            let r = pipeline.render_next(&m.field, &m.occ, &m.renderer, &pose_w2c, &intr);
            (pipeline, r)
        })
        .await;
        let result = match joined {
            Ok((p, r)) => {
                pipeline = p;
                r
            }
            Err(e) => {
                let _ = out.send(error_text(format!("render task failed: {e}")));
                break;
            }
        };
        let (image, stats) = match result {
            Ok(v) => v,
            Err(e) => {
                let _ = out.send(error_text(e));
                continue;
            }
        };
        let now = Instant::now();
        let fps = match last_sent {
            Some(t) => 1.0 / now.duration_since(t).as_secs_f64().max(1e-9),
            None => 1e3 / stats.ms_total.max(1e-6),
        };
        last_sent = Some(now);
        let bytes = match encode_frame(frame_id, &image, state.config.format) {
            Ok(b) => b,
            Err(e) => {
                let _ = out.send(error_text(e));
                continue;
            }
        };
        let stats_msg = ServerText::Stats(StatsMessage::from_stats(frame_id, pose.seq, fps, &stats, buffer_len));
        if out.send(Message::Binary(bytes.into())).is_err() || out.send(Message::Text(stats_msg.to_json().into())).is_err() {
            break;
        }
        frame_id = frame_id.wrapping_add(1);
    }
}
