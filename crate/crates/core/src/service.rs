//! TCP transport for [`Session`]: newline-delimited JSON, one session per
//! connection, ticks paced by the wall clock.
//!
//! Client lines received between two ticks are applied before the next tick.
//! A `session_state` heartbeat goes out every `heartbeat_s` of wall time;
//! heartbeats are transport traffic and are not logged. A disconnect aborts
//! the session.

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::thread;
use std::time::{Duration, Instant};

use crate::session::{ClientMessage, LogSink, ServerMessage, Session};

/// Tick rate used before a session is configured.
pub const IDLE_TICK_RATE_HZ: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub addr: String,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
    pub heartbeat_s: f64,
    /// One `session-<n>.jsonl` per connection when set.
    pub log_dir: Option<PathBuf>,
    /// Stop accepting after this many connections.
    pub max_connections: Option<usize>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7878".into(),
            speed: 1.0,
            heartbeat_s: 1.0,
            log_dir: None,
            max_connections: None,
        }
    }
}

pub struct Server {
    listener: TcpListener,
    cfg: ServiceConfig,
}

impl Server {
    pub fn bind(cfg: ServiceConfig) -> io::Result<Self> {
        if !(cfg.speed.is_finite() && cfg.speed > 0.0) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "speed must be positive"));
        }
        let listener = TcpListener::bind(&cfg.addr)?;
        Ok(Self { listener, cfg })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until `max_connections` is reached (or forever),
    /// serving each on its own thread. Returns once every served connection
    /// has finished.
    pub fn run(self) -> io::Result<()> {
        let mut workers = Vec::new();
        for (n, stream) in self.listener.incoming().enumerate() {
            let stream = stream?;
            let cfg = self.cfg.clone();
            workers.push(thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = serve_connection(stream, &cfg, n) {
                    log::warn!("connection {n} ({peer:?}) ended with error: {e}");
                }
            }));
            if self.cfg.max_connections.is_some_and(|m| n + 1 >= m) {
                break;
            }
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }
}

fn spawn_reader(stream: TcpStream) -> Receiver<Option<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stream).lines() {
            match line {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => {
                    if tx.send(Some(l)).is_err() {
                        return;
                    }
                }
                Err(_) => break,
            }
        }
        let _ = tx.send(None);
    });
    rx
}

fn write_messages(out: &mut impl Write, messages: &[ServerMessage]) -> io::Result<()> {
    for m in messages {
        serde_json::to_writer(&mut *out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn serve_connection(stream: TcpStream, cfg: &ServiceConfig, n: usize) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let inbox = spawn_reader(stream.try_clone()?);
    let mut out = BufWriter::new(stream);
    let sink = match &cfg.log_dir {
        Some(dir) => LogSink::file(&dir.join(format!("session-{n}.jsonl"))).map_err(io::Error::other)?,
        None => LogSink::Discard,
    };
    let mut session = Session::new(sink);
    let heartbeat = Duration::from_secs_f64(cfg.heartbeat_s);
    let mut last_heartbeat = Instant::now();
    let mut next_tick = Instant::now();
    let mut connected = true;

    let result = loop {
        let mut batch = Vec::new();
        loop {
            match inbox.try_recv() {
                Ok(Some(line)) => batch.extend(session.handle_line(&line)),
                Ok(None) | Err(TryRecvError::Disconnected) => {
                    connected = false;
                    break;
                }
                Err(TryRecvError::Empty) => break,
            }
        }
        if !connected {
            session.handle(ClientMessage::Abort);
            break Ok(());
        }
        batch.extend(session.advance());
        if last_heartbeat.elapsed() >= heartbeat {
            batch.push(session.state_message());
            last_heartbeat = Instant::now();
        }
        if let Err(e) = write_messages(&mut out, &batch).and_then(|_| out.flush()) {
            session.handle(ClientMessage::Abort);
            break Err(e);
        }
        if session.state() == crate::session::StateName::Aborted {
            break Ok(());
        }

        let rate = session.config().map_or(IDLE_TICK_RATE_HZ, |c| c.tick_rate_hz());
        next_tick += Duration::from_secs_f64(1.0 / (rate * cfg.speed));
        let now = Instant::now();
        if next_tick > now {
            thread::sleep(next_tick - now);
        } else if now - next_tick > Duration::from_secs(1) {
            // far behind; do not try to catch up in a burst
            next_tick = now;
        }
    };
    session.close().map_err(io::Error::other)?;
    result
}
