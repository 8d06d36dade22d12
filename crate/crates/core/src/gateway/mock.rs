//! A small in-process HTTP server for offline tests of everything that
//! speaks HTTP (the gateway and the report archive client).

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Debug, Clone)]
pub struct MockRequest {
    pub method: String,
    pub path: String,
    pub query: String,
    pub body: String,
}

impl MockRequest {
    pub fn query_param(&self, key: &str) -> Option<String> {
        self.query.split('&').find_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            (k == key).then(|| v.to_string())
        })
    }
}

#[derive(Debug, Clone)]
pub struct MockReply {
    pub status: u16,
    pub body: String,
}

impl MockReply {
    pub fn ok(body: impl Into<String>) -> Self {
        MockReply { status: 200, body: body.into() }
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        MockReply { status, body: body.into() }
    }
}

type Handler = dyn Fn(&MockRequest) -> MockReply + Send + Sync;

struct Shared {
    requests: Mutex<Vec<MockRequest>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    stop: AtomicBool,
}

pub struct MockServer {
    server: Arc<tiny_http::Server>,
    shared: Arc<Shared>,
    port: u16,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Starts on an ephemeral port; each request is handled on its own
    /// thread so concurrency limits of clients can be observed.
    pub fn start(handler: impl Fn(&MockRequest) -> MockReply + Send + Sync + 'static) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind mock server"));
        let port = server.server_addr().to_ip().expect("tcp listener").port();
        let shared = Arc::new(Shared {
            requests: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
        });
        let handler: Arc<Handler> = Arc::new(handler);
        let (srv, sh) = (server.clone(), shared.clone());
        let thread = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                if sh.stop.load(Ordering::SeqCst) {
                    break;
                }
                let (sh, handler) = (sh.clone(), handler.clone());
                std::thread::spawn(move || {
                    let now = sh.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                    sh.max_in_flight.fetch_max(now, Ordering::SeqCst);
                    let mut body = String::new();
                    let _ = req.as_reader().read_to_string(&mut body);
                    let (path, query) = match req.url().split_once('?') {
                        Some((p, q)) => (p.to_string(), q.to_string()),
                        None => (req.url().to_string(), String::new()),
                    };
                    let mreq = MockRequest { method: req.method().to_string(), path, query, body };
                    let reply = handler(&mreq);
                    sh.requests.lock().unwrap().push(mreq);
                    sh.in_flight.fetch_sub(1, Ordering::SeqCst);
                    let resp = tiny_http::Response::from_string(reply.body).with_status_code(reply.status);
                    let _ = req.respond(resp);
                });
            }
        });
        MockServer { server, shared, port, thread: Some(thread) }
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    pub fn requests(&self) -> Vec<MockRequest> {
        self.shared.requests.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.shared.requests.lock().unwrap().len()
    }

    pub fn max_in_flight(&self) -> usize {
        self.shared.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
