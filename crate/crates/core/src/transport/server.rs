//! Line-framed TCP front end for a single instrument.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};

pub const BUSY_REPLY: &str = "ERR 3 BUSY";
const MAX_LINE_BYTES: usize = 64 * 1024;
const POLL: Duration = Duration::from_millis(50);

/// Anything that consumes command lines and produces response lines.
pub trait Instrument: Send {
    fn handle_line(&mut self, line: &str) -> Vec<String>;
}

pub type SharedInstrument = Arc<Mutex<dyn Instrument>>;

/// Single-holder lease on an instrument.
#[derive(Debug, Default)]
struct Lease {
    held: Mutex<bool>,
    released: Condvar,
}

impl Lease {
    /// Waits up to `grace` for the current holder to let go.
    fn acquire(&self, grace: Duration) -> bool {
        let held = self.held.lock().unwrap();
        let (mut held, _) = self.released.wait_timeout_while(held, grace, |h| *h).unwrap();
        if *held {
            return false;
        }
        *held = true;
        true
    }

    fn release(&self) {
        *self.held.lock().unwrap() = false;
        self.released.notify_all();
    }
}

/// Accept loop for one instrument. One client at a time; a client arriving
/// while another holds the instrument gets `ERR 3 BUSY` and is closed.
pub struct InstrumentServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl InstrumentServer {
    /// Starts serving on an already bound listener.
    pub fn spawn(listener: TcpListener, instrument: SharedInstrument, busy_grace: Duration, name: &str) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let lease = Arc::new(Lease::default());
        let stop = shutdown.clone();
        let name = name.to_string();
        let accept_thread = std::thread::Builder::new()
            .name(format!("{name}-accept"))
            .spawn(move || accept_loop(listener, instrument, lease, busy_grace, stop, name))?;
        Ok(Self { addr, shutdown, accept_thread: Some(accept_thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if self.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&wake_addr(self.addr), Duration::from_millis(200));
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for InstrumentServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn wake_addr(addr: SocketAddr) -> SocketAddr {
    if addr.ip().is_unspecified() {
        let ip: std::net::IpAddr = if addr.is_ipv4() {
            std::net::Ipv4Addr::LOCALHOST.into()
        } else {
            std::net::Ipv6Addr::LOCALHOST.into()
        };
        SocketAddr::new(ip, addr.port())
    } else {
        addr
    }
}

fn accept_loop(
    listener: TcpListener,
    instrument: SharedInstrument,
    lease: Arc<Lease>,
    grace: Duration,
    shutdown: Arc<AtomicBool>,
    name: String,
) {
    for conn in listener.incoming() {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        let mut stream = match conn {
            Ok(s) => s,
            Err(e) => {
                warn!("{name}: accept failed: {e}");
                continue;
            }
        };
        if !lease.acquire(grace) {
            debug!("{name}: refusing second client");
            let _ = stream.write_all(format!("{BUSY_REPLY}\n").as_bytes());
            let _ = stream.shutdown(std::net::Shutdown::Both);
            continue;
        }
        let instrument = instrument.clone();
        let lease = lease.clone();
        let stop = shutdown.clone();
        let session_name = name.clone();
        let spawned = std::thread::Builder::new().name(format!("{name}-session")).spawn(move || {
            session_loop(stream, &instrument, &stop, &session_name);
            lease.release();
        });
        if let Err(e) = spawned {
            warn!("{name}: could not start session thread: {e}");
        }
    }
}

/// Reads `\n`-framed lines, feeds the instrument and writes back its
/// responses. A line torn off by a disconnect is discarded; the instrument
/// keeps whatever state it had.
pub fn session_loop(stream: TcpStream, instrument: &SharedInstrument, shutdown: &AtomicBool, name: &str) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    if stream.set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    let _ = stream.set_nodelay(true);
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => {
                if !buf.is_empty() {
                    warn!("{name}: {peer} disconnected mid-command, discarding {} bytes", buf.len());
                }
                break;
            }
            Ok(_) if buf.ends_with(b"\n") => {
                let line = String::from_utf8_lossy(&buf);
                let line = line.trim_end_matches(['\n', '\r']);
                let responses = instrument.lock().unwrap().handle_line(line);
                buf.clear();
                let mut out = String::new();
                for r in responses {
                    out.push_str(&r);
                    out.push('\n');
                }
                if !out.is_empty() && writer.write_all(out.as_bytes()).is_err() {
                    break;
                }
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => {
                warn!("{name}: read error from {peer}: {e}");
                break;
            }
        }
        if buf.len() > MAX_LINE_BYTES {
            warn!("{name}: {peer} sent an oversized line, closing");
            break;
        }
    }
    debug!("{name}: session with {peer} closed");
}
