//! Small helpers around `tiny_http` shared by the mock provider server and
//! the review server.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Request, Response, Server};

use crate::providers::wire::ErrorBody;

pub(crate) type HttpResponse = Response<std::io::Cursor<Vec<u8>>>;

pub(crate) fn json_response<T: Serialize>(status: u16, body: &T) -> HttpResponse {
    let bytes = serde_json::to_vec(body).expect("response serializes");
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(content_type("application/json"))
}

pub(crate) fn error_response(status: u16, code: &str, message: impl Into<String>) -> HttpResponse {
    json_response(
        status,
        &ErrorBody {
            error_code: code.to_string(),
            message: message.into(),
        },
    )
}

pub(crate) fn bytes_response(status: u16, bytes: Vec<u8>, mime: &str) -> HttpResponse {
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(content_type(mime))
}

fn content_type(mime: &str) -> Header {
    Header::from_bytes(&b"Content-Type"[..], mime.as_bytes()).expect("static header")
}

pub(crate) fn read_json<T: DeserializeOwned>(req: &mut Request) -> Result<T, HttpResponse> {
    let mut body = String::new();
    req.as_reader()
        .read_to_string(&mut body)
        .map_err(|e| error_response(400, "invalid_input", format!("unreadable body: {e}")))?;
    serde_json::from_str(&body)
        .map_err(|e| error_response(400, "invalid_input", format!("bad json: {e}")))
}

/// Splits `/a/b?x=1&y=2` into the path and decoded query pairs.
pub(crate) fn split_url(url: &str) -> (&str, Vec<(String, String)>) {
    match url.split_once('?') {
        None => (url, Vec::new()),
        Some((path, q)) => {
            let pairs = q
                .split('&')
                .filter(|s| !s.is_empty())
                .map(|kv| {
                    let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
                    (percent_decode(k), percent_decode(v))
                })
                .collect();
            (path, pairs)
        }
    }
}

pub(crate) fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'+' => out.push(b' '),
            b'%' if i + 2 < bytes.len() => {
                let hex = std::str::from_utf8(&bytes[i + 1..i + 3]).ok();
                match hex.and_then(|h| u8::from_str_radix(h, 16).ok()) {
                    Some(b) => {
                        out.push(b);
                        i += 2;
                    }
                    None => out.push(b'%'),
                }
            }
            b => out.push(b),
        }
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

/// A running `tiny_http` server with a fixed pool of worker threads.
pub struct ServerHandle {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub(crate) fn spawn<F>(bind: &str, workers: usize, handler: F) -> std::io::Result<Self>
    where
        F: Fn(Request) + Send + Sync + 'static,
    {
        let server = Server::http(bind).map_err(|e| std::io::Error::other(e.to_string()))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let handler = Arc::new(handler);
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = server.clone();
                let handler = handler.clone();
                std::thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        handler(req);
                    }
                })
            })
            .collect();
        Ok(ServerHandle {
            server,
            addr,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests and joins the workers.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    /// Blocks until the server stops (it never does on its own).
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
