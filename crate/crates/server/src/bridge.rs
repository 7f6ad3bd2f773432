use std::net::SocketAddr;

use futures_util::{SinkExt, StreamExt};
use sono_core::protocol::BridgeMessage;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast::error::RecvError;
use tokio::sync::{broadcast, mpsc, watch};
use tokio_tungstenite::tungstenite::protocol::frame::coding::CloseCode;
use tokio_tungstenite::tungstenite::protocol::CloseFrame;
use tokio_tungstenite::tungstenite::Message as WsMessage;

use crate::{Inbound, Outbound};

pub(crate) async fn accept_loop(
    listener: TcpListener,
    out: broadcast::WeakSender<Outbound>,
    inbound: mpsc::Sender<Inbound>,
    mut shutdown: watch::Receiver<bool>,
) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let Some(out) = out.upgrade() else {
                        log::info!("session over; refusing {peer}");
                        break;
                    };
                    tokio::spawn(serve_client(stream, peer, out.subscribe(), inbound.clone(), shutdown.clone()));
                }
                Err(e) => log::warn!("bridge accept failed: {e}"),
            },
            _ = shutdown.changed() => break,
        }
    }
}

async fn serve_client(
    stream: TcpStream,
    peer: SocketAddr,
    mut out: broadcast::Receiver<Outbound>,
    inbound: mpsc::Sender<Inbound>,
    mut shutdown: watch::Receiver<bool>,
) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("bridge handshake with {peer} failed: {e}");
            return;
        }
    };
    log::info!("console {peer} connected");
    let (mut tx, mut rx) = ws.split();
    let mut close = None;
    loop {
        tokio::select! {
            item = out.recv() => match item {
                Ok(o) => {
                    let Some(text) = o.bridge else { continue };
                    if tx.send(WsMessage::text(text.as_ref())).await.is_err() {
                        break;
                    }
                }
                Err(RecvError::Lagged(n)) => log::warn!("console {peer} fell behind by {n} messages"),
                Err(RecvError::Closed) => {
                    close = Some(CloseFrame { code: CloseCode::Away, reason: "session ended".into() });
                    break;
                }
            },
            msg = rx.next() => match msg {
                Some(Ok(WsMessage::Text(text))) => match BridgeMessage::from_json(text.as_str()) {
                    Ok(m) => {
                        if let Some(i) = Inbound::from_bridge(m) {
                            if inbound.send(i).await.is_err() {
                                break;
                            }
                        }
                    }
                    Err(e) => {
                        log::warn!("console {peer} sent an invalid message: {e}");
                        close = Some(CloseFrame { code: CloseCode::Invalid, reason: "invalid bridge message".into() });
                        break;
                    }
                },
                Some(Ok(WsMessage::Binary(_))) => {
                    close = Some(CloseFrame { code: CloseCode::Unsupported, reason: "text frames only".into() });
                    break;
                }
                Some(Ok(WsMessage::Close(_))) | None => break,
                Some(Ok(_)) => {}
                Some(Err(e)) => {
                    log::info!("console {peer}: {e}");
                    break;
                }
            },
            _ = shutdown.changed() => {
                close = Some(CloseFrame { code: CloseCode::Away, reason: "server shutting down".into() });
                break;
            }
        }
    }
    if let Some(frame) = close {
        let _ = tx.send(WsMessage::Close(Some(frame))).await;
    }
    let _ = tx.close().await;
    log::info!("console {peer} disconnected");
}
