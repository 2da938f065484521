//! RESP2 GET/SET client, plus a tiny RESP server for loopback runs.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use super::{op_timeout, OpResult, Plugin, PluginDescriptor, PluginError};
use crate::config::PropertySet;

pub const PLUGIN_NAME: &str = "resp";

/// Encodes a command as a RESP array of bulk strings.
pub fn encode_command(parts: &[&[u8]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + parts.iter().map(|p| p.len() + 16).sum::<usize>());
    out.extend_from_slice(format!("*{}\r\n", parts.len()).as_bytes());
    for part in parts {
        out.extend_from_slice(format!("${}\r\n", part.len()).as_bytes());
        out.extend_from_slice(part);
        out.extend_from_slice(b"\r\n");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Simple(String),
    Error(String),
    Integer(i64),
    Bulk(Option<Vec<u8>>),
}

fn protocol_error(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_line<R: BufRead>(r: &mut R) -> io::Result<String> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.is_empty() {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"));
    }
    if !line.ends_with(b"\r\n") {
        return Err(protocol_error("line not terminated by CRLF"));
    }
    line.truncate(line.len() - 2);
    String::from_utf8(line).map_err(|_| protocol_error("non-UTF-8 header line"))
}

fn read_bulk_body<R: BufRead>(r: &mut R, len: i64) -> io::Result<Option<Vec<u8>>> {
    if len < 0 {
        return Ok(None);
    }
    let mut buf = vec![0u8; len as usize + 2];
    r.read_exact(&mut buf)?;
    if &buf[len as usize..] != b"\r\n" {
        return Err(protocol_error("bulk string not terminated by CRLF"));
    }
    buf.truncate(len as usize);
    Ok(Some(buf))
}

pub fn read_reply<R: BufRead>(r: &mut R) -> io::Result<Reply> {
    let line = read_line(r)?;
    let (kind, rest) = line.split_at(line.len().min(1));
    match kind {
        "+" => Ok(Reply::Simple(rest.to_string())),
        "-" => Ok(Reply::Error(rest.to_string())),
        ":" => rest
            .parse()
            .map(Reply::Integer)
            .map_err(|_| protocol_error("bad integer reply")),
        "$" => {
            let len: i64 = rest.parse().map_err(|_| protocol_error("bad bulk length"))?;
            Ok(Reply::Bulk(read_bulk_body(r, len)?))
        }
        other => Err(protocol_error(format!("unsupported reply type `{other}`"))),
    }
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Conn {
    fn open(addr: &SocketAddr, timeout: Duration) -> io::Result<Conn> {
        let stream = TcpStream::connect_timeout(addr, timeout)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Conn {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    fn call(&mut self, command: &[u8]) -> io::Result<Reply> {
        self.writer.write_all(command)?;
        read_reply(&mut self.reader)
    }
}

fn resolve(host: &str, port: u16) -> Result<SocketAddr, PluginError> {
    (host, port)
        .to_socket_addrs()
        .and_then(|mut addrs| {
            addrs
                .next()
                .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no addresses"))
        })
        .map_err(|source| PluginError::Unreachable {
            host: host.to_string(),
            port,
            source,
        })
}

/// Pooled RESP client. Each concurrent caller gets its own connection; new
/// connections rotate round-robin across hosts.
pub struct RespPlugin {
    addrs: Vec<SocketAddr>,
    next_host: AtomicUsize,
    pool: Mutex<Vec<Conn>>,
    timeout: RwLock<Duration>,
    closed: AtomicBool,
}

impl RespPlugin {
    /// Connects once to every host; fails on the first unreachable one.
    pub fn connect(hosts: &[(String, u16)], timeout: Duration) -> Result<Self, PluginError> {
        if hosts.is_empty() {
            return Err(PluginError::Config {
                plugin: PLUGIN_NAME.into(),
                message: "at least one host is required".into(),
            });
        }
        let mut addrs = Vec::with_capacity(hosts.len());
        let mut pool = Vec::with_capacity(hosts.len());
        for (host, port) in hosts {
            let addr = resolve(host, *port)?;
            let conn = Conn::open(&addr, timeout).map_err(|source| PluginError::Unreachable {
                host: host.clone(),
                port: *port,
                source,
            })?;
            addrs.push(addr);
            pool.push(conn);
        }
        Ok(RespPlugin {
            addrs,
            next_host: AtomicUsize::new(0),
            pool: Mutex::new(pool),
            timeout: RwLock::new(timeout),
            closed: AtomicBool::new(false),
        })
    }

    pub fn init(
        descriptor: &PluginDescriptor,
        props: &Arc<PropertySet>,
    ) -> Result<Arc<dyn Plugin>, PluginError> {
        Ok(Arc::new(Self::connect(&descriptor.hosts, op_timeout(props))?))
    }

    fn checkout(&self) -> io::Result<Conn> {
        if let Some(conn) = self.pool.lock().pop() {
            return Ok(conn);
        }
        let i = self.next_host.fetch_add(1, Ordering::Relaxed) % self.addrs.len();
        Conn::open(&self.addrs[i], *self.timeout.read())
    }

    fn checkin(&self, conn: Conn) {
        if self.closed.load(Ordering::Acquire) {
            let _ = conn.writer.shutdown(Shutdown::Both);
        } else {
            self.pool.lock().push(conn);
        }
    }

    fn execute(&self, command: Vec<u8>, started: Instant) -> Result<Reply, OpResult> {
        if self.closed.load(Ordering::Acquire) {
            return Err(OpResult::shut_down(started));
        }
        let mut conn = self.checkout().map_err(|e| io_failure(e, started))?;
        match conn.call(&command) {
            Ok(reply) => {
                self.checkin(conn);
                Ok(reply)
            }
            // The stream is in an unknown state; drop it.
            Err(e) => Err(io_failure(e, started)),
        }
    }
}

fn io_failure(e: io::Error, started: Instant) -> OpResult {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => OpResult::timeout(started.elapsed()),
        _ => OpResult::failure(e.to_string(), started.elapsed()),
    }
}

impl Plugin for RespPlugin {
    fn name(&self) -> &str {
        PLUGIN_NAME
    }

    fn read(&self, key: &str) -> OpResult {
        let started = Instant::now();
        match self.execute(encode_command(&[b"GET", key.as_bytes()]), started) {
            Ok(Reply::Bulk(Some(v))) => OpResult::found(v, started.elapsed()).checked(),
            Ok(Reply::Bulk(None)) => OpResult::not_found(started.elapsed()),
            Ok(Reply::Error(e)) => OpResult::failure(e, started.elapsed()),
            Ok(other) => OpResult::failure(format!("unexpected reply {other:?}"), started.elapsed()),
            Err(r) => r,
        }
    }

    fn write(&self, key: &str, value: &[u8]) -> OpResult {
        let started = Instant::now();
        match self.execute(encode_command(&[b"SET", key.as_bytes(), value]), started) {
            Ok(Reply::Simple(_)) => OpResult::success(started.elapsed()),
            Ok(Reply::Error(e)) => OpResult::failure(e, started.elapsed()),
            Ok(other) => OpResult::failure(format!("unexpected reply {other:?}"), started.elapsed()),
            Err(r) => r,
        }
    }

    fn shutdown(&self) {
        self.closed.store(true, Ordering::Release);
        for conn in self.pool.lock().drain(..) {
            let _ = conn.writer.shutdown(Shutdown::Both);
        }
    }
}

/// Minimal in-process RESP server understanding GET, SET, DEL, PING and
/// DBSIZE. Stops when dropped.
pub struct RespServer {
    addr: SocketAddr,
    data: Arc<Mutex<HashMap<Vec<u8>, Vec<u8>>>>,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<thread::JoinHandle<()>>,
}

impl RespServer {
    pub fn start(bind: &str) -> io::Result<RespServer> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let data: Arc<Mutex<HashMap<Vec<u8>, Vec<u8>>>> = Default::default();
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Default::default();
        let accept = {
            let (data, stop, conns) = (data.clone(), stop.clone(), conns.clone());
            thread::Builder::new()
                .name("resp-accept".into())
                .spawn(move || {
                    for stream in listener.incoming() {
                        if stop.load(Ordering::Acquire) {
                            break;
                        }
                        let Ok(stream) = stream else { continue };
                        if let Ok(clone) = stream.try_clone() {
                            conns.lock().push(clone);
                        }
                        let data = data.clone();
                        let _ = thread::Builder::new()
                            .name("resp-conn".into())
                            .spawn(move || serve_connection(stream, data));
                    }
                })?
        };
        Ok(RespServer {
            addr,
            data,
            stop,
            conns,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn host_port(&self) -> (String, u16) {
        (self.addr.ip().to_string(), self.addr.port())
    }

    pub fn len(&self) -> usize {
        self.data.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stop(&mut self) {
        if self.stop.swap(true, Ordering::AcqRel) {
            return;
        }
        // Unblock accept().
        let _ = TcpStream::connect(self.addr);
        for c in self.conns.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RespServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn read_command<R: BufRead>(r: &mut R) -> io::Result<Vec<Vec<u8>>> {
    let header = read_line(r)?;
    let Some(n) = header.strip_prefix('*') else {
        // Inline command.
        return Ok(header.split_whitespace().map(|s| s.as_bytes().to_vec()).collect());
    };
    let n: usize = n.parse().map_err(|_| protocol_error("bad array length"))?;
    let mut parts = Vec::with_capacity(n);
    for _ in 0..n {
        let line = read_line(r)?;
        let len: i64 = line
            .strip_prefix('$')
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| protocol_error("expected bulk string"))?;
        parts.push(read_bulk_body(r, len)?.unwrap_or_default());
    }
    Ok(parts)
}

fn serve_connection(stream: TcpStream, data: Arc<Mutex<HashMap<Vec<u8>, Vec<u8>>>>) {
    let Ok(mut writer) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    loop {
        let parts = match read_command(&mut reader) {
            Ok(p) => p,
            Err(_) => return,
        };
        let reply: Vec<u8> = match parts.first().map(|c| c.to_ascii_uppercase()) {
            Some(c) if c == b"PING" => b"+PONG\r\n".to_vec(),
            Some(c) if c == b"GET" && parts.len() == 2 => match data.lock().get(&parts[1]) {
                Some(v) => {
                    let mut out = format!("${}\r\n", v.len()).into_bytes();
                    out.extend_from_slice(v);
                    out.extend_from_slice(b"\r\n");
                    out
                }
                None => b"$-1\r\n".to_vec(),
            },
            Some(c) if c == b"SET" && parts.len() == 3 => {
                let mut it = parts.into_iter().skip(1);
                let (k, v) = (it.next().unwrap(), it.next().unwrap());
                data.lock().insert(k, v);
                b"+OK\r\n".to_vec()
            }
            Some(c) if c == b"DEL" => {
                let mut map = data.lock();
                let n = parts[1..].iter().filter(|k| map.remove(*k).is_some()).count();
                format!(":{n}\r\n").into_bytes()
            }
            Some(c) if c == b"DBSIZE" => format!(":{}\r\n", data.lock().len()).into_bytes(),
            _ => b"-ERR unknown command or wrong number of arguments\r\n".to_vec(),
        };
        if writer.write_all(&reply).is_err() {
            return;
        }
    }
}
