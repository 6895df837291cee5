//! Small blocking HTTP server shared by the conversion service and the
//! DICOM store facade.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::Serialize;
use tracing::{debug, warn};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub query: Option<String>,
    pub body: Vec<u8>,
}

impl Request {
    pub fn new(method: &str, url: &str, body: Vec<u8>) -> Self {
        let (path, query) = match url.split_once('?') {
            Some((p, q)) => (p.to_string(), Some(q.to_string())),
            None => (url.to_string(), None),
        };
        Request {
            method: method.to_ascii_uppercase(),
            path,
            query,
            body,
        }
    }

    pub fn query_param(&self, name: &str) -> Option<&str> {
        self.query
            .as_deref()?
            .split('&')
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == name)
            .map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    detail: &'a str,
}

impl Reply {
    pub fn json<T: Serialize>(status: u16, value: &T) -> Self {
        Reply {
            status,
            content_type: "application/json",
            body: serde_json::to_vec(value).expect("serializable"),
        }
    }

    /// `{"error":"<code>","detail":"<text>"}`
    pub fn error(status: u16, code: &str, detail: &str) -> Self {
        Reply::json(
            status,
            &ErrorBody {
                error: code,
                detail,
            },
        )
    }

    pub fn not_found() -> Self {
        Reply::error(404, "not_found", "no such route")
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

pub trait Handler: Send + Sync {
    fn handle(&self, req: &Request) -> Reply;
}

impl<F> Handler for F
where
    F: Fn(&Request) -> Reply + Send + Sync,
{
    fn handle(&self, req: &Request) -> Reply {
        self(req)
    }
}

/// Listening server. `threads` requests are served concurrently; the
/// conversion service uses one.
pub struct HttpServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl HttpServer {
    pub fn start(addr: &str, threads: usize, handler: Arc<dyn Handler>) -> io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let workers = (0..threads.max(1))
            .map(|i| {
                let server = server.clone();
                let handler = handler.clone();
                thread::Builder::new()
                    .name(format!("http-{i}"))
                    .spawn(move || serve(&server, handler.as_ref()))
                    .expect("spawn http worker")
            })
            .collect();
        Ok(HttpServer {
            server,
            addr,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve(server: &tiny_http::Server, handler: &dyn Handler) {
    while let Ok(mut raw) = server.recv() {
        let mut body = Vec::new();
        if let Err(e) = raw.as_reader().read_to_end(&mut body) {
            warn!(error = %e, "failed to read request body");
            let _ = raw.respond(tiny_http::Response::empty(400));
            continue;
        }
        let req = Request::new(raw.method().as_str(), raw.url(), body);
        let reply = handler.handle(&req);
        debug!(method = %req.method, path = %req.path, status = reply.status, "request served");
        let header = tiny_http::Header::from_bytes("Content-Type", reply.content_type)
            .expect("static header");
        let resp = tiny_http::Response::from_data(reply.body)
            .with_status_code(reply.status)
            .with_header(header);
        if let Err(e) = raw.respond(resp) {
            debug!(error = %e, "client went away");
        }
    }
}

/// Blocking client call used by the HTTP sinks and tests.
pub fn call(
    method: &str,
    url: &str,
    body: &[u8],
    timeout: std::time::Duration,
) -> Result<Reply, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let result = match method {
        "GET" => agent.get(url).call(),
        "POST" => agent
            .post(url)
            .header("Content-Type", "application/octet-stream")
            .send(body),
        other => return Err(format!("unsupported method {other}")),
    };
    let mut resp = result.map_err(|e| e.to_string())?;
    let status = resp.status().as_u16();
    let body = resp
        .body_mut()
        .with_config()
        .limit(u64::MAX)
        .read_to_vec()
        .map_err(|e| e.to_string())?;
    Ok(Reply {
        status,
        content_type: "application/json",
        body,
    })
}
