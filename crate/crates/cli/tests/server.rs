use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};
use trajfield::protocol::{FrameFormat, FrameHeader, FRAME_HEADER_LEN};
use trajfield::{
    Aabb, CameraIntrinsics, ConvRenderer, DepthRange, LayerPlan, OccupancyGrid, PipelineConfig, Pose, Vec3, VoxelField,
};
use trajfield_cli::model::Model;
use trajfield_cli::server::{serve, ServerConfig};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn tiny_model() -> Model {
    let field = VoxelField::new([8, 8, 8], Aabb::cube(1.0), 3, 4).unwrap();
    let occ = OccupancyGrid::for_field(&field, [4, 4, 4], 0.01).unwrap();
    let mut pipeline = PipelineConfig::with_range(DepthRange { near: 1.2, far: 4.8 });
    pipeline.channels = 3;
    pipeline.march.step = 0.1;
    let renderer = ConvRenderer::init(0, LayerPlan::default_for(pipeline.renderer_input_channels())).unwrap();
    Model {
        field,
        occ,
        renderer,
        pipeline,
        intrinsics: CameraIntrinsics::from_fov_y(40.0, 32, 32).unwrap(),
    }
}

async fn start() -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let config = ServerConfig {
        max_res: 64,
        format: FrameFormat::Rgb8,
        assets: None,
    };
    tokio::spawn(serve(listener, Arc::new(tiny_model()), config));
    addr
}

async fn connect(addr: SocketAddr) -> Ws {
    connect_async(format!("ws://{addr}/render")).await.unwrap().0
}

fn pose_msg(i: usize) -> Message {
    let pose = Pose::orbit(Vec3::zeros(), 3.0, i as f64 * 0.01, 0.4).unwrap();
    Message::text(json!({"type": "pose", "m": pose.to_c2w_gl_rows(), "fov_y": 40.0}).to_string())
}

async fn send(ws: &mut Ws, msg: Message) {
    ws.send(msg).await.unwrap();
}

async fn next(ws: &mut Ws) -> Message {
    loop {
        let m = tokio::time::timeout(Duration::from_secs(30), ws.next())
            .await
            .expect("server reply")
            .unwrap()
            .unwrap();
        if matches!(m, Message::Binary(_) | Message::Text(_)) {
            return m;
        }
    }
}

fn text(m: &Message) -> Value {
    match m {
        Message::Text(t) => serde_json::from_str(t.as_str()).unwrap(),
        other => panic!("expected text, got {other:?}"),
    }
}

/// Reads one frame and the stats message that must follow it.
async fn frame_and_stats(ws: &mut Ws) -> (FrameHeader, Vec<u8>, Value) {
    let frame = next(ws).await;
    let Message::Binary(bytes) = frame else {
        panic!("expected frame, got {frame:?}")
    };
    let header = FrameHeader::parse(&bytes).unwrap();
    let stats = text(&next(ws).await);
    assert_eq!(stats["type"], "stats");
    assert_eq!(stats["frame_id"], header.frame_id);
    (header, bytes.to_vec(), stats)
}

async fn assert_silent(ws: &mut Ws) {
    let r = tokio::time::timeout(Duration::from_millis(300), ws.next()).await;
    assert!(r.is_err(), "unexpected message {r:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn one_pose_gives_one_frame_and_stats() {
    let addr = start().await;
    let mut ws = connect(addr).await;
    send(&mut ws, pose_msg(0)).await;
    let (h, bytes, stats) = frame_and_stats(&mut ws).await;
    assert_eq!((h.width, h.height, h.format), (32, 32, FrameFormat::Rgb8));
    assert_eq!(bytes.len(), FRAME_HEADER_LEN + 32 * 32 * 3);
    assert_eq!(stats["buffer_len"], 0);
    assert_eq!(stats["guided_fraction"], 0.0);
    let parts = ["ms_volume", "ms_warp", "ms_nn"].iter().map(|k| stats[k].as_f64().unwrap()).sum::<f64>();
    assert!(parts <= stats["ms_total"].as_f64().unwrap() + 1e-9);
    assert!(stats["fps"].as_f64().unwrap() > 0.0);
    assert_silent(&mut ws).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reset_clears_the_buffer() {
    let addr = start().await;
    let mut ws = connect(addr).await;
    let mut lens = Vec::new();
    for i in 0..3 {
        send(&mut ws, pose_msg(i)).await;
        lens.push(frame_and_stats(&mut ws).await.2["buffer_len"].as_u64().unwrap());
    }
    assert_eq!(lens, [0, 1, 2]);
    send(&mut ws, Message::text(r#"{"type":"config","reset":true}"#)).await;
    send(&mut ws, pose_msg(3)).await;
    let (_, _, stats) = frame_and_stats(&mut ws).await;
    assert_eq!(stats["buffer_len"], 0);
    assert_eq!(stats["guided_fraction"], 0.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_messages_get_error_replies() {
    let addr = start().await;
    let mut ws = connect(addr).await;
    send(&mut ws, Message::text("{not json")).await;
    assert_eq!(text(&next(&mut ws).await)["type"], "error");

    let mut m = Pose::orbit(Vec3::zeros(), 3.0, 0.0, 0.4).unwrap().to_c2w_gl_rows();
    m[0] += 0.05;
    send(&mut ws, Message::text(json!({"type": "pose", "m": m, "fov_y": 40.0}).to_string())).await;
    let err = text(&next(&mut ws).await);
    assert_eq!(err["type"], "error");
    assert!(err["message"].as_str().unwrap().contains("pose"));

    send(&mut ws, Message::text(json!({"type": "pose", "m": [1.0, 0.0], "fov_y": 40.0}).to_string())).await;
    assert_eq!(text(&next(&mut ws).await)["type"], "error");
    send(&mut ws, Message::binary(vec![1u8, 2, 3])).await;
    assert_eq!(text(&next(&mut ws).await)["type"], "error");

    send(&mut ws, pose_msg(0)).await;
    let (h, _, stats) = frame_and_stats(&mut ws).await;
    assert_eq!(h.frame_id, 0);
    assert_eq!(stats["pose_seq"], 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn resize_snaps_and_clamps() {
    let addr = start().await;
    let mut ws = connect(addr).await;
    send(&mut ws, Message::text(r#"{"type":"resize","w":50,"h":20}"#)).await;
    send(&mut ws, pose_msg(0)).await;
    let (h, bytes, _) = frame_and_stats(&mut ws).await;
    assert_eq!((h.width, h.height), (48, 16));
    assert_eq!(bytes.len(), FRAME_HEADER_LEN + 48 * 16 * 3);
    send(&mut ws, Message::text(r#"{"type":"resize","w":4000,"h":4000}"#)).await;
    send(&mut ws, pose_msg(1)).await;
    let (h, _, _) = frame_and_stats(&mut ws).await;
    assert_eq!((h.width, h.height), (64, 64));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn pose_flood_drops_stale_poses() {
    let addr = start().await;
    let mut ws = connect(addr).await;
    for i in 0..100 {
        send(&mut ws, pose_msg(i)).await;
    }
    let mut ids = Vec::new();
    let mut seqs = Vec::new();
    loop {
        let (h, _, stats) = frame_and_stats(&mut ws).await;
        ids.push(h.frame_id);
        let seq = stats["pose_seq"].as_u64().unwrap();
        seqs.push(seq);
        if seq == 100 {
            break;
        }
    }
    assert!(ids.len() <= 100);
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    assert_silent(&mut ws).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn connections_have_independent_buffers() {
    let addr = start().await;
    let mut a = connect(addr).await;
    let mut b = connect(addr).await;
    send(&mut a, pose_msg(0)).await;
    frame_and_stats(&mut a).await;
    send(&mut a, pose_msg(1)).await;
    assert_eq!(frame_and_stats(&mut a).await.2["buffer_len"], 1);
    send(&mut b, pose_msg(2)).await;
    let (h, _, stats) = frame_and_stats(&mut b).await;
    assert_eq!(h.frame_id, 0);
    assert_eq!(stats["buffer_len"], 0);
    send(&mut a, pose_msg(2)).await;
    assert_eq!(frame_and_stats(&mut a).await.2["buffer_len"], 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn toggles_change_rendering() {
    let addr = start().await;
    let mut ws = connect(addr).await;
    send(&mut ws, Message::text(r#"{"type":"config","use_guidance":false,"use_nn":false}"#)).await;
    send(&mut ws, pose_msg(0)).await;
    let (_, _, s0) = frame_and_stats(&mut ws).await;
    send(&mut ws, pose_msg(1)).await;
    let (_, _, s1) = frame_and_stats(&mut ws).await;
    assert_eq!(s0["ms_nn"], 0.0);
    assert_eq!(s1["guided_fraction"], 0.0);
    assert_eq!(s1["buffer_len"], 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn index_page_is_served() {
    let addr = start().await;
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(b"GET / HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).await.unwrap();
    assert!(buf.starts_with("HTTP/1.1 200"), "{buf}");
    assert!(buf.contains("/render"));
}
