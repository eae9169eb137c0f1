//! Reliable ordered byte streams: an in-process pipe and TCP.

use std::collections::{HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::WireError;
use crate::model::GateAddress;

/// Severs a connection in both directions; pending and later reads and
/// writes fail.
#[derive(Clone)]
pub struct KillSwitch(Arc<dyn Fn() + Send + Sync>);

impl KillSwitch {
    pub fn new<F: Fn() + Send + Sync + 'static>(f: F) -> Self {
        Self(Arc::new(f))
    }

    pub fn kill(&self) {
        (self.0)()
    }
}

impl std::fmt::Debug for KillSwitch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("KillSwitch")
    }
}

pub struct Connection {
    pub reader: Box<dyn Read + Send>,
    pub writer: Box<dyn Write + Send>,
    kill: KillSwitch,
    finish: KillSwitch,
}

impl Connection {
    /// `finish` ends the outgoing direction after buffered bytes are delivered.
    pub fn new(
        reader: Box<dyn Read + Send>,
        writer: Box<dyn Write + Send>,
        kill: KillSwitch,
        finish: KillSwitch,
    ) -> Self {
        Self {
            reader,
            writer,
            kill,
            finish,
        }
    }

    /// Graceful close of the outgoing direction; the peer reads what was
    /// sent, then end of stream.
    pub fn finish(&self) {
        self.finish.kill();
    }

    pub fn tcp(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let killer = stream.try_clone()?;
        let finisher = stream.try_clone()?;
        Ok(Self {
            reader: Box::new(reader),
            writer: Box::new(stream),
            kill: KillSwitch::new(move || {
                let _ = killer.shutdown(Shutdown::Both);
            }),
            finish: KillSwitch::new(move || {
                let _ = finisher.shutdown(Shutdown::Write);
            }),
        })
    }

    pub fn kill_switch(&self) -> KillSwitch {
        self.kill.clone()
    }
}

#[derive(Default)]
struct PipeState {
    data: VecDeque<u8>,
    writer_gone: bool,
    reader_gone: bool,
    severed: bool,
}

#[derive(Default)]
struct PipeShared {
    state: Mutex<PipeState>,
    ready: Condvar,
}

struct PipeReader(Arc<PipeShared>);
struct PipeWriter(Arc<PipeShared>);

fn severed() -> io::Error {
    io::Error::new(io::ErrorKind::ConnectionReset, "pipe severed")
}

impl Read for PipeReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        let mut st = self.0.state.lock();
        loop {
            if st.severed {
                return Err(severed());
            }
            if !st.data.is_empty() {
                let n = buf.len().min(st.data.len());
                for (slot, b) in buf.iter_mut().zip(st.data.drain(..n)) {
                    *slot = b;
                }
                return Ok(n);
            }
            if st.writer_gone {
                return Ok(0);
            }
            self.0.ready.wait(&mut st);
        }
    }
}

impl Drop for PipeReader {
    fn drop(&mut self) {
        self.0.state.lock().reader_gone = true;
        self.0.ready.notify_all();
    }
}

impl Write for PipeWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let mut st = self.0.state.lock();
        if st.severed {
            return Err(severed());
        }
        if st.writer_gone {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "pipe finished"));
        }
        if st.reader_gone {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "pipe reader dropped"));
        }
        st.data.extend(buf);
        self.0.ready.notify_all();
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for PipeWriter {
    fn drop(&mut self) {
        self.0.state.lock().writer_gone = true;
        self.0.ready.notify_all();
    }
}

/// Two connected in-process endpoints.
pub fn pipe() -> (Connection, Connection) {
    let a_to_b = Arc::new(PipeShared::default());
    let b_to_a = Arc::new(PipeShared::default());
    let kill = {
        let (x, y) = (a_to_b.clone(), b_to_a.clone());
        KillSwitch::new(move || {
            for p in [&x, &y] {
                p.state.lock().severed = true;
                p.ready.notify_all();
            }
        })
    };
    let finish = |p: &Arc<PipeShared>| {
        let p = p.clone();
        KillSwitch::new(move || {
            p.state.lock().writer_gone = true;
            p.ready.notify_all();
        })
    };
    let a = Connection::new(
        Box::new(PipeReader(b_to_a.clone())),
        Box::new(PipeWriter(a_to_b.clone())),
        kill.clone(),
        finish(&a_to_b),
    );
    let b = Connection::new(
        Box::new(PipeReader(a_to_b)),
        Box::new(PipeWriter(b_to_a.clone())),
        kill,
        finish(&b_to_a),
    );
    (a, b)
}

pub enum Listener {
    Inproc(Receiver<Connection>),
    Tcp(TcpListener),
}

impl Listener {
    /// Waits up to `timeout` for the next inbound connection.
    pub fn accept_timeout(&self, timeout: Duration) -> Result<Option<Connection>, WireError> {
        match self {
            Listener::Inproc(rx) => match rx.recv_timeout(timeout) {
                Ok(c) => Ok(Some(c)),
                Err(RecvTimeoutError::Timeout) => Ok(None),
                Err(RecvTimeoutError::Disconnected) => Err(WireError::TransportClosed),
            },
            Listener::Tcp(l) => {
                let deadline = Instant::now() + timeout;
                loop {
                    match l.accept() {
                        Ok((stream, _)) => {
                            stream
                                .set_nonblocking(false)
                                .map_err(|e| WireError::Io(e.to_string()))?;
                            return Connection::tcp(stream)
                                .map(Some)
                                .map_err(|e| WireError::Io(e.to_string()));
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            if Instant::now() >= deadline {
                                return Ok(None);
                            }
                            std::thread::sleep(Duration::from_millis(2));
                        }
                        Err(e) => return Err(WireError::Io(e.to_string())),
                    }
                }
            }
        }
    }
}

/// Maps gate addresses to listening endpoints.
pub trait Network: Send + Sync {
    fn listen(&self, addr: &GateAddress) -> Result<Listener, WireError>;
    fn connect(&self, addr: &GateAddress) -> Result<Connection, WireError>;
    fn unlisten(&self, addr: &GateAddress);
}

#[derive(Default)]
pub struct InprocNetwork {
    endpoints: Mutex<HashMap<GateAddress, Sender<Connection>>>,
}

impl InprocNetwork {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Network for InprocNetwork {
    fn listen(&self, addr: &GateAddress) -> Result<Listener, WireError> {
        let (tx, rx) = mpsc::channel();
        self.endpoints.lock().insert(addr.clone(), tx);
        Ok(Listener::Inproc(rx))
    }

    fn connect(&self, addr: &GateAddress) -> Result<Connection, WireError> {
        let tx = self
            .endpoints
            .lock()
            .get(addr)
            .cloned()
            .ok_or_else(|| WireError::Unreachable(addr.to_string()))?;
        let (local, remote) = pipe();
        tx.send(remote).map_err(|_| WireError::Unreachable(addr.to_string()))?;
        Ok(local)
    }

    fn unlisten(&self, addr: &GateAddress) {
        self.endpoints.lock().remove(addr);
    }
}

/// TCP on localhost, one ephemeral port per listening address.
#[derive(Default)]
pub struct TcpNetwork {
    ports: Mutex<HashMap<GateAddress, SocketAddr>>,
}

impl TcpNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn local_addr(&self, addr: &GateAddress) -> Option<SocketAddr> {
        self.ports.lock().get(addr).copied()
    }
}

impl Network for TcpNetwork {
    fn listen(&self, addr: &GateAddress) -> Result<Listener, WireError> {
        let l = TcpListener::bind("127.0.0.1:0").map_err(|e| WireError::Io(e.to_string()))?;
        l.set_nonblocking(true).map_err(|e| WireError::Io(e.to_string()))?;
        let local = l.local_addr().map_err(|e| WireError::Io(e.to_string()))?;
        self.ports.lock().insert(addr.clone(), local);
        Ok(Listener::Tcp(l))
    }

    fn connect(&self, addr: &GateAddress) -> Result<Connection, WireError> {
        let sock = self
            .local_addr(addr)
            .ok_or_else(|| WireError::Unreachable(addr.to_string()))?;
        let stream = TcpStream::connect(sock).map_err(|e| WireError::Unreachable(format!("{addr}: {e}")))?;
        Connection::tcp(stream).map_err(|e| WireError::Io(e.to_string()))
    }

    fn unlisten(&self, addr: &GateAddress) {
        self.ports.lock().remove(addr);
    }
}
