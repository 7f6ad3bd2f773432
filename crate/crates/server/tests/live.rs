use std::net::SocketAddr;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use sono_core::orchestrator::{EventKind, SessionConfig, SessionOutcome};
use sono_core::phase::ProcedurePhase;
use sono_core::protocol::{
    encode_frame, BridgeMessage, CommandMsg, FrameDecoder, Message, RobotStateMsg,
};
use sono_server::{Server, ServerConfig};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message as WsMessage;

const WAIT: Duration = Duration::from_secs(20);

fn config(pace: f64) -> ServerConfig {
    let any = SocketAddr::from(([127, 0, 0, 1], 0));
    ServerConfig {
        tcp_bind: any,
        ws_bind: Some(any),
        session: SessionConfig {
            resting_timeout_s: 60.0,
            ..SessionConfig::default()
        },
        pace,
        heartbeat_interval: Some(Duration::from_millis(50)),
        ..ServerConfig::default()
    }
}

struct Client {
    stream: TcpStream,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl Client {
    async fn connect(addr: SocketAddr) -> Client {
        Client {
            stream: TcpStream::connect(addr).await.unwrap(),
            decoder: FrameDecoder::new(),
            buf: vec![0; 8192],
        }
    }

    /// Next batch of messages; empty once the server hangs up.
    async fn next_batch(&mut self) -> Option<Vec<Message>> {
        loop {
            let n = self.stream.read(&mut self.buf).await.ok()?;
            if n == 0 {
                return None;
            }
            let msgs = self.decoder.feed(&self.buf[..n]).unwrap();
            if !msgs.is_empty() {
                return Some(msgs);
            }
        }
    }

    async fn states_until(
        &mut self,
        mut stop: impl FnMut(&RobotStateMsg) -> bool,
    ) -> Vec<RobotStateMsg> {
        let mut out = Vec::new();
        while let Some(batch) = self.next_batch().await {
            for m in batch {
                if let Message::RobotState(s) = m {
                    let done = stop(&s);
                    out.push(s);
                    if done {
                        return out;
                    }
                }
            }
        }
        out
    }

    async fn send(&mut self, m: &Message) {
        self.stream
            .write_all(&encode_frame(m).unwrap())
            .await
            .unwrap();
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn start_scan_from_a_client_runs_the_scan() {
    let server = Server::start(config(20.0)).await.unwrap();
    let mut c = Client::connect(server.tcp_addr()).await;
    timeout(WAIT, c.states_until(|s| s.phase == ProcedurePhase::Resting))
        .await
        .unwrap();
    c.send(&Message::Command(CommandMsg::StartScan)).await;
    let seen = timeout(
        WAIT,
        c.states_until(|s| s.phase == ProcedurePhase::Complete),
    )
    .await
    .unwrap();
    assert!(seen.iter().any(|s| s.phase == ProcedurePhase::Execution));
    assert_eq!(seen.last().unwrap().phase, ProcedurePhase::Complete);

    let report = timeout(WAIT, server.join()).await.unwrap().unwrap();
    assert_eq!(report.outcome, SessionOutcome::Complete);
    assert!(report
        .events
        .iter()
        .any(|e| matches!(e.kind, EventKind::Command { .. })));
}

#[tokio::test(flavor = "multi_thread")]
async fn clients_see_identical_increasing_state_streams() {
    let server = Server::start(config(20.0)).await.unwrap();
    let mut a = Client::connect(server.tcp_addr()).await;
    let mut b = Client::connect(server.tcp_addr()).await;
    let is_execution = |s: &RobotStateMsg| s.phase == ProcedurePhase::Execution;
    let ra = tokio::spawn(async move { a.states_until(is_execution).await });
    let rb = tokio::spawn(async move { b.states_until(is_execution).await });
    tokio::time::sleep(Duration::from_millis(300)).await;
    server
        .inbound()
        .send(sono_server::Inbound::Command(
            sono_core::agent::ScanCommand::StartScan,
        ))
        .await
        .unwrap();
    let sa = timeout(WAIT, ra).await.unwrap().unwrap();
    let sb = timeout(WAIT, rb).await.unwrap().unwrap();
    assert!(sa.len() > 10 && sb.len() > 10);

    // the later subscriber sees a suffix of the earlier one's stream
    let (long, short) = if sa.len() >= sb.len() {
        (&sa, &sb)
    } else {
        (&sb, &sa)
    };
    let offset = long.len() - short.len();
    assert_eq!(&long[offset..], &short[..]);

    for w in long.windows(2) {
        assert!(w[1].t > w[0].t, "{} then {}", w[0].t, w[1].t);
        // 50 Hz in session time
        assert!(
            (w[1].t - w[0].t - 0.02).abs() < 1e-9,
            "spacing {}",
            w[1].t - w[0].t
        );
    }
    server.shutdown();
    timeout(WAIT, server.join()).await.unwrap().unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn garbage_disconnects_only_the_offender() {
    let server = Server::start(config(20.0)).await.unwrap();
    let mut good = Client::connect(server.tcp_addr()).await;
    let mut bad = Client::connect(server.tcp_addr()).await;
    bad.stream.write_all(&[0xff; 16]).await.unwrap();
    let hung_up = timeout(WAIT, async { while bad.next_batch().await.is_some() {} }).await;
    assert!(hung_up.is_ok());

    timeout(
        WAIT,
        good.states_until(|s| s.phase == ProcedurePhase::Resting),
    )
    .await
    .unwrap();
    good.send(&Message::Command(CommandMsg::StartScan)).await;
    let seen = timeout(
        WAIT,
        good.states_until(|s| s.phase == ProcedurePhase::Execution),
    )
    .await
    .unwrap();
    assert_eq!(seen.last().unwrap().phase, ProcedurePhase::Execution);
    server.shutdown();
    let report = timeout(WAIT, server.join()).await.unwrap().unwrap();
    assert_eq!(report.outcome, SessionOutcome::Unfinished);
}

#[tokio::test(flavor = "multi_thread")]
async fn console_bridge_relays_state_and_commands() {
    let server = Server::start(config(20.0)).await.unwrap();
    let url = format!("ws://{}", server.ws_addr().unwrap());
    let (mut ws, _) = tokio_tungstenite::connect_async(url.as_str())
        .await
        .unwrap();

    let next_state = async |ws: &mut _| -> (ProcedurePhase, String) {
        let ws: &mut tokio_tungstenite::WebSocketStream<_> = ws;
        loop {
            match ws.next().await.unwrap().unwrap() {
                WsMessage::Text(t) => {
                    if let BridgeMessage::State { phase, .. } =
                        BridgeMessage::from_json(t.as_str()).unwrap()
                    {
                        return (phase, t.to_string());
                    }
                }
                _ => continue,
            }
        }
    };
    let (mut phase, raw) = timeout(WAIT, next_state(&mut ws)).await.unwrap();
    let v: serde_json::Value = serde_json::from_str(&raw).unwrap();
    assert_eq!(v["type"], "state");
    assert_eq!(v["probe"].as_array().unwrap().len(), 3);
    while phase != ProcedurePhase::Resting {
        phase = timeout(WAIT, next_state(&mut ws)).await.unwrap().0;
    }
    ws.send(WsMessage::text(
        r#"{"type":"chat","speaker":"patient","text":"please begin"}"#,
    ))
    .await
    .unwrap();
    while phase != ProcedurePhase::Execution {
        phase = timeout(WAIT, next_state(&mut ws)).await.unwrap().0;
    }
    ws.send(WsMessage::text(r#"{"type":"command","cmd":"stop_scan"}"#))
        .await
        .unwrap();
    while phase == ProcedurePhase::Execution {
        phase = timeout(WAIT, next_state(&mut ws)).await.unwrap().0;
    }
    assert_eq!(phase, ProcedurePhase::Aborted);

    // malformed JSON closes only this console
    let (mut other, _) = tokio_tungstenite::connect_async(url.as_str())
        .await
        .unwrap();
    other.send(WsMessage::text("{not json")).await.unwrap();
    let closed = timeout(WAIT, async {
        loop {
            match other.next().await {
                Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => break,
                _ => {}
            }
        }
    })
    .await;
    assert!(closed.is_ok());
    let report = timeout(WAIT, server.join()).await.unwrap().unwrap();
    assert!(matches!(report.outcome, SessionOutcome::Aborted(_)));
}

#[tokio::test(flavor = "multi_thread")]
async fn bind_conflicts_are_reported() {
    let first = Server::start(config(1.0)).await.unwrap();
    let taken = ServerConfig {
        tcp_bind: first.tcp_addr(),
        ..config(1.0)
    };
    assert!(matches!(
        Server::start(taken).await,
        Err(sono_server::ServerError::Bind { .. })
    ));
    first.shutdown();
    timeout(WAIT, first.join()).await.unwrap().unwrap();
}
