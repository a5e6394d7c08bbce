//! TCP backend: one persistent connection per pair of nodes.
//!
//! Frames are a little-endian `u32` length followed by the canonical message
//! encoding. On startup a node dials every node with a higher index and
//! accepts connections from every node with a lower one; the dialer
//! announces itself with a hello frame carrying its node index. A reader
//! thread per connection routes incoming frames to local mailboxes.
//!
//! Shutdown is two-phase so that nothing already written is lost: [`close`]
//! half-closes every connection and then waits for the peers to do the same.
//!
//! [`close`]: TcpTransport::close

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, warn};

use super::{Topology, Transport, TransportError};
use crate::messages::{Address, Control, Envelope, LpId};
use crate::wire::{self, WirePayload, TAG_GOODBYE, TAG_HELLO};

/// Largest frame accepted from a peer.
const MAX_FRAME: usize = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcpOptions {
    pub connect_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
    /// How long to wait for lower-indexed nodes to dial in.
    pub accept_timeout: Duration,
}

impl Default for TcpOptions {
    fn default() -> Self {
        TcpOptions {
            connect_attempts: 3,
            backoff: Duration::from_millis(500),
            accept_timeout: Duration::from_secs(60),
        }
    }
}

type Mailbox<P> = (Sender<Envelope<P>>, Receiver<Envelope<P>>);

/// Mailboxes for the addresses hosted on this node.
struct Locals<P> {
    first_lp: u32,
    lps: Vec<Mailbox<P>>,
    controller: Option<Mailbox<P>>,
}

impl<P> Locals<P> {
    fn get(&self, addr: Address) -> Option<&Mailbox<P>> {
        match addr {
            Address::Controller => self.controller.as_ref(),
            Address::Lp(LpId(lp)) => lp
                .checked_sub(self.first_lp)
                .and_then(|i| self.lps.get(i as usize)),
        }
    }
}

struct Peer {
    name: String,
    stream: TcpStream,
    writer: Mutex<BufWriter<TcpStream>>,
}

pub struct TcpTransport<P> {
    me: usize,
    topology: Topology,
    locals: Arc<Locals<P>>,
    peers: Vec<Option<Peer>>,
    stopping: Arc<AtomicBool>,
    failure: Arc<Mutex<Option<String>>>,
    readers: Mutex<Vec<JoinHandle<()>>>,
}

impl<P: WirePayload> TcpTransport<P> {
    /// Binds this node's address from the topology and connects to all peers.
    pub fn connect(
        topology: Topology,
        node: &str,
        options: TcpOptions,
    ) -> Result<Self, TransportError> {
        let me = topology
            .node_index(node)
            .ok_or_else(|| TransportError::Topology(format!("unknown node {node}")))?;
        let addr = topology.nodes[me].addr.clone();
        let listener = TcpListener::bind(&addr).map_err(|source| TransportError::Io {
            peer: addr.clone(),
            source,
        })?;
        Self::with_listener(topology, node, listener, options)
    }

    /// Like [`connect`](Self::connect) with an already bound listener.
    pub fn with_listener(
        topology: Topology,
        node: &str,
        listener: TcpListener,
        options: TcpOptions,
    ) -> Result<Self, TransportError> {
        topology.validate(topology.num_lps())?;
        let me = topology
            .node_index(node)
            .ok_or_else(|| TransportError::Topology(format!("unknown node {node}")))?;
        let range = topology.nodes[me].lps.clone();
        let locals = Arc::new(Locals {
            first_lp: range.start,
            lps: range.map(|_| unbounded()).collect(),
            controller: (topology.controller == me).then(unbounded),
        });

        let expected = me;
        let acceptor = {
            let deadline = Instant::now() + options.accept_timeout;
            thread::spawn(move || accept_peers(listener, expected, deadline))
        };
        let mut streams: Vec<Option<TcpStream>> = (0..topology.nodes.len()).map(|_| None).collect();
        for (j, peer) in topology.nodes.iter().enumerate().skip(me + 1) {
            let stream = dial(&peer.addr, &options)?;
            let mut hello = Vec::with_capacity(9);
            hello.extend_from_slice(&5u32.to_le_bytes());
            hello.push(TAG_HELLO);
            hello.extend_from_slice(&(me as u32).to_le_bytes());
            (&stream)
                .write_all(&hello)
                .map_err(|source| TransportError::Io {
                    peer: peer.name.clone(),
                    source,
                })?;
            streams[j] = Some(stream);
        }
        let accepted = acceptor
            .join()
            .map_err(|_| TransportError::Handshake("acceptor panicked".into()))??;
        for (j, stream) in accepted {
            streams[j] = Some(stream);
        }

        let stopping = Arc::new(AtomicBool::new(false));
        let failure = Arc::new(Mutex::new(None));
        let mut peers = Vec::with_capacity(streams.len());
        let mut readers = Vec::new();
        for (j, stream) in streams.into_iter().enumerate() {
            let Some(stream) = stream else {
                peers.push(None);
                continue;
            };
            let name = topology.nodes[j].name.clone();
            let io_err = |source| TransportError::Io {
                peer: name.clone(),
                source,
            };
            stream.set_nodelay(true).map_err(io_err)?;
            let reader = stream.try_clone().map_err(io_err)?;
            let writer = stream.try_clone().map_err(io_err)?;
            let ctx = ReaderContext {
                peer: name.clone(),
                locals: Arc::clone(&locals),
                stopping: Arc::clone(&stopping),
                failure: Arc::clone(&failure),
            };
            readers.push(
                thread::Builder::new()
                    .name(format!("tcp-reader-{name}"))
                    .spawn(move || ctx.run(reader))
                    .map_err(io_err)?,
            );
            peers.push(Some(Peer {
                name,
                stream,
                writer: Mutex::new(BufWriter::new(writer)),
            }));
        }
        debug!("node {} connected: {}", topology.nodes[me].name, topology);
        Ok(TcpTransport {
            me,
            topology,
            locals,
            peers,
            stopping,
            failure,
            readers: Mutex::new(readers),
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn node_index(&self) -> usize {
        self.me
    }

    fn check_failure(&self) -> Result<(), TransportError> {
        if self.stopping.load(Ordering::Acquire) {
            return Ok(());
        }
        match self.failure.lock().expect("failure lock").as_ref() {
            Some(reason) => Err(TransportError::Disconnected {
                peer: "peer".into(),
                reason: reason.clone(),
            }),
            None => Ok(()),
        }
    }

    fn local(&self, me: Address) -> Result<&Mailbox<P>, TransportError> {
        self.locals.get(me).ok_or(TransportError::NotLocal(me))
    }

    /// Half-closes every connection and waits until all peers have done the
    /// same. Call once every local LP and the controller are done sending;
    /// afterwards every frame a peer sent sits in the local mailboxes.
    pub fn close(&self) {
        self.stopping.store(true, Ordering::Release);
        for peer in self.peers.iter().flatten() {
            if let Ok(mut w) = peer.writer.lock() {
                let _ = w
                    .write_all(&[1, 0, 0, 0, TAG_GOODBYE])
                    .and_then(|_| w.flush());
            }
            let _ = peer.stream.shutdown(Shutdown::Write);
        }
        for handle in self.readers.lock().expect("reader list").drain(..) {
            let _ = handle.join();
        }
    }
}

impl<P: WirePayload> Transport<P> for TcpTransport<P> {
    fn send(&self, env: Envelope<P>) -> Result<(), TransportError> {
        if matches!(env, Envelope::Control(Control::Stop { .. })) {
            self.stopping.store(true, Ordering::Release);
        }
        let dest = env.destination();
        let node = self
            .topology
            .node_of(dest)
            .ok_or(TransportError::UnknownDestination(dest))?;
        if node == self.me {
            let (tx, _) = self.local(dest)?;
            let _ = tx.send(env);
            return Ok(());
        }
        self.check_failure()?;
        let peer = self.peers[node]
            .as_ref()
            .ok_or(TransportError::UnknownDestination(dest))?;
        let mut frame = vec![0u8; 4];
        wire::encode(&env, &mut frame);
        let len = (frame.len() - 4) as u32;
        frame[..4].copy_from_slice(&len.to_le_bytes());
        let mut w = peer.writer.lock().expect("writer lock");
        match w.write_all(&frame).and_then(|_| w.flush()) {
            Ok(()) => Ok(()),
            // the peer may already have finished and closed its side
            Err(_) if self.stopping.load(Ordering::Acquire) => Ok(()),
            Err(source) => Err(TransportError::Io {
                peer: peer.name.clone(),
                source,
            }),
        }
    }

    fn receive_batch(&self, me: Address, max: usize) -> Result<Vec<Envelope<P>>, TransportError> {
        let (_, rx) = self.local(me)?;
        let batch: Vec<_> = rx.try_iter().take(max).collect();
        if batch.is_empty() {
            self.check_failure()?;
        }
        Ok(batch)
    }

    fn receive_timeout(
        &self,
        me: Address,
        timeout: Duration,
    ) -> Result<Option<Envelope<P>>, TransportError> {
        let (_, rx) = self.local(me)?;
        match rx.recv_timeout(timeout) {
            Ok(env) => Ok(Some(env)),
            Err(RecvTimeoutError::Timeout) => {
                self.check_failure()?;
                Ok(None)
            }
            Err(RecvTimeoutError::Disconnected) => unreachable!("mailbox halves live in self"),
        }
    }
}

impl<P> std::fmt::Debug for TcpTransport<P> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpTransport")
            .field("node", &self.topology.nodes[self.me].name)
            .field(
                "peers",
                &self
                    .peers
                    .iter()
                    .flatten()
                    .map(|p| &p.name)
                    .collect::<Vec<_>>(),
            )
            .finish()
    }
}

impl<P> Drop for TcpTransport<P> {
    fn drop(&mut self) {
        self.stopping.store(true, Ordering::Release);
        for peer in self.peers.iter().flatten() {
            let _ = peer.stream.shutdown(Shutdown::Both);
        }
    }
}

struct ReaderContext<P> {
    peer: String,
    locals: Arc<Locals<P>>,
    stopping: Arc<AtomicBool>,
    failure: Arc<Mutex<Option<String>>>,
}

impl<P: WirePayload> ReaderContext<P> {
    fn run(self, stream: TcpStream) {
        let mut reader = BufReader::new(stream);
        let mut buf = Vec::new();
        let mut said_goodbye = false;
        loop {
            match read_frame(&mut reader, &mut buf) {
                Ok(true) => {}
                Ok(false) => {
                    if !said_goodbye && !self.stopping.load(Ordering::Acquire) {
                        self.fail(format!("{} closed the connection", self.peer));
                    }
                    return;
                }
                Err(e) => {
                    if !self.stopping.load(Ordering::Acquire) {
                        self.fail(format!("reading from {}: {e}", self.peer));
                    }
                    return;
                }
            }
            if buf == [TAG_GOODBYE] {
                said_goodbye = true;
                continue;
            }
            let env = match wire::decode::<P>(&buf) {
                Ok(env) => env,
                Err(e) => {
                    self.fail(format!("bad frame from {}: {e}", self.peer));
                    return;
                }
            };
            if matches!(env, Envelope::Control(Control::Stop { .. })) {
                self.stopping.store(true, Ordering::Release);
            }
            match self.locals.get(env.destination()) {
                Some((tx, _)) => {
                    let _ = tx.send(env);
                }
                None => warn!(
                    "{} sent {:?} to a node that does not host it",
                    self.peer,
                    env.destination()
                ),
            }
        }
    }

    fn fail(&self, reason: String) {
        warn!("{reason}");
        self.failure
            .lock()
            .expect("failure lock")
            .get_or_insert(reason);
    }
}

/// Reads one length-prefixed frame into `buf`. False on clean end of stream.
fn read_frame(r: &mut impl Read, buf: &mut Vec<u8>) -> io::Result<bool> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(false),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes"),
        ));
    }
    buf.resize(len, 0);
    r.read_exact(buf)?;
    Ok(true)
}

fn dial(addr: &str, options: &TcpOptions) -> Result<TcpStream, TransportError> {
    let attempts = options.connect_attempts.max(1);
    let mut delay = options.backoff;
    let mut last = None;
    for attempt in 1..=attempts {
        let result = addr
            .to_socket_addrs()
            .and_then(|mut addrs| {
                addrs
                    .next()
                    .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no address"))
            })
            .and_then(|sa| TcpStream::connect_timeout(&sa, Duration::from_secs(5)));
        match result {
            Ok(stream) => return Ok(stream),
            Err(e) => {
                debug!("connect to {addr} failed (attempt {attempt}/{attempts}): {e}");
                last = Some(e);
            }
        }
        if attempt < attempts {
            thread::sleep(delay);
            delay *= 2;
        }
    }
    Err(TransportError::ConnectFailed {
        peer: addr.to_string(),
        attempts,
        source: last.expect("at least one attempt"),
    })
}

/// Accepts one connection from each of the `count` lower-indexed nodes.
fn accept_peers(
    listener: TcpListener,
    count: usize,
    deadline: Instant,
) -> Result<HashMap<usize, TcpStream>, TransportError> {
    let io_err = |source| TransportError::Io {
        peer: "listener".into(),
        source,
    };
    listener.set_nonblocking(true).map_err(io_err)?;
    let mut accepted = HashMap::new();
    while accepted.len() < count {
        match listener.accept() {
            Ok((stream, from)) => {
                stream.set_nonblocking(false).map_err(io_err)?;
                stream
                    .set_read_timeout(Some(Duration::from_secs(10)))
                    .map_err(io_err)?;
                let mut buf = Vec::new();
                let ok = read_frame(&mut &stream, &mut buf).map_err(io_err)?;
                if !ok || buf.len() != 5 || buf[0] != TAG_HELLO {
                    return Err(TransportError::Handshake(format!("bad hello from {from}")));
                }
                let idx = u32::from_le_bytes(buf[1..5].try_into().expect("4 bytes")) as usize;
                if idx >= count || accepted.contains_key(&idx) {
                    return Err(TransportError::Handshake(format!(
                        "unexpected node index {idx} from {from}"
                    )));
                }
                stream.set_read_timeout(None).map_err(io_err)?;
                accepted.insert(idx, stream);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(TransportError::Handshake(format!(
                        "only {} of {count} peers connected in time",
                        accepted.len()
                    )));
                }
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(io_err(e)),
        }
    }
    Ok(accepted)
}
