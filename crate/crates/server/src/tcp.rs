use std::net::SocketAddr;

use sono_core::protocol::FrameDecoder;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast::error::RecvError;
use tokio::sync::{broadcast, mpsc, watch};

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
                    log::info!("protocol client {peer} connected");
                    tokio::spawn(serve_client(stream, peer, out.subscribe(), inbound.clone(), shutdown.clone()));
                }
                Err(e) => log::warn!("accept failed: {e}"),
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
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 16 * 1024];
    loop {
        tokio::select! {
            item = out.recv() => match item {
                Ok(o) => {
                    if let Err(e) = wr.write_all(&o.frame).await {
                        log::info!("client {peer}: write failed: {e}");
                        break;
                    }
                }
                Err(RecvError::Lagged(n)) => log::warn!("client {peer} fell behind by {n} messages"),
                Err(RecvError::Closed) => break,
            },
            read = rd.read(&mut buf) => match read {
                Ok(0) => break,
                Ok(n) => match decoder.feed(&buf[..n]) {
                    Ok(messages) => {
                        for m in messages {
                            if let Some(i) = Inbound::from_message(m) {
                                if inbound.send(i).await.is_err() {
                                    return;
                                }
                            }
                        }
                    }
                    Err(e) => {
                        log::warn!("client {peer}: {e}; disconnecting");
                        break;
                    }
                },
                Err(e) => {
                    log::info!("client {peer}: read failed: {e}");
                    break;
                }
            },
            _ = shutdown.changed() => break,
        }
    }
    let _ = wr.shutdown().await;
    log::info!("protocol client {peer} disconnected");
}
