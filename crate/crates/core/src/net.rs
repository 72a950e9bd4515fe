//! Background HTTP(S) servers on their own runtime thread.

use std::net::SocketAddr;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::Router;
use axum_server::tls_rustls::RustlsConfig;
use axum_server::Handle;

use crate::tls::TlsMaterial;

pub struct ServerHandle {
    addr: SocketAddr,
    tls: bool,
    handle: Handle,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL. TLS servers are addressed by `localhost` so the self-signed
    /// certificate name matches.
    pub fn url(&self) -> String {
        if self.tls {
            format!("https://localhost:{}", self.addr.port())
        } else {
            format!("http://{}", self.addr)
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Blocks until the server thread exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop(&mut self) {
        self.handle.graceful_shutdown(Some(Duration::from_secs(1)));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves `router` on `addr` (port 0 picks a free port) and returns once the
/// listener is bound.
pub fn spawn_server(router: Router, addr: SocketAddr, tls: Option<&TlsMaterial>) -> std::io::Result<ServerHandle> {
    let rustls_cfg = match tls {
        Some(m) => Some(
            m.server_config()
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?,
        ),
        None => None,
    };
    let handle = Handle::new();
    let (tx, rx) = std::sync::mpsc::channel::<std::io::Result<SocketAddr>>();
    let server_handle = handle.clone();
    let thread = std::thread::Builder::new()
        .name(format!("http-{addr}"))
        .spawn(move || {
            let rt = match tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
            {
                Ok(rt) => rt,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            };
            rt.block_on(async move {
                let listening = server_handle.clone();
                let ready = tx.clone();
                tokio::spawn(async move {
                    if let Some(a) = listening.listening().await {
                        let _ = ready.send(Ok(a));
                    }
                });
                let service = router.into_make_service();
                let served = match rustls_cfg {
                    Some(cfg) => {
                        axum_server::bind_rustls(addr, RustlsConfig::from_config(cfg))
                            .handle(server_handle)
                            .serve(service)
                            .await
                    }
                    None => axum_server::bind(addr).handle(server_handle).serve(service).await,
                };
                if let Err(e) = served {
                    let _ = tx.send(Err(e));
                }
            });
        })?;
    let addr = rx
        .recv_timeout(Duration::from_secs(10))
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::TimedOut, "server did not start"))??;
    Ok(ServerHandle {
        addr,
        tls: tls.is_some(),
        handle,
        thread: Some(thread),
    })
}
