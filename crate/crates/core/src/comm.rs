//! Message passing between simulated tasks.
//!
//! Each task owns a [`Comm`] endpoint. Two kinds of traffic exist: tagged
//! point-to-point byte messages (halo slabs) and collective rounds
//! ([`Comm::allgather`]), on top of which all reductions are built. Both
//! travel over a [`Link`]: in-process channels by default, or TCP sockets
//! when ranks live in separate processes. Per-source FIFO order is the only
//! ordering guarantee a link has to provide.

use std::cell::{Cell, RefCell};
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Halo(Vec<u8>),
    Gather(Vec<f64>),
    Abort(String),
}

impl Frame {
    fn kind(&self) -> u8 {
        match self {
            Frame::Halo(_) => 0,
            Frame::Gather(_) => 1,
            Frame::Abort(_) => 2,
        }
    }

    fn encode(&self) -> Vec<u8> {
        let body: Vec<u8> = match self {
            Frame::Halo(b) => b.clone(),
            Frame::Gather(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Frame::Abort(s) => s.as_bytes().to_vec(),
        };
        let mut out = Vec::with_capacity(body.len() + 9);
        out.push(self.kind());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    fn read_from(r: &mut impl Read) -> std::io::Result<Frame> {
        let mut head = [0u8; 9];
        r.read_exact(&mut head)?;
        let len = u64::from_le_bytes(head[1..9].try_into().unwrap()) as usize;
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        Ok(match head[0] {
            0 => Frame::Halo(body),
            1 => Frame::Gather(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => Frame::Abort(String::from_utf8_lossy(&body).into_owned()),
        })
    }
}

/// Transport between ranks. `recv` returns the next frame from any source.
pub trait Link: Send + Sync {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn send(&self, dest: usize, frame: Frame) -> Result<()>;
    fn recv(&self) -> Result<(usize, Frame)>;
}

pub struct ChannelLink {
    rank: usize,
    peers: Vec<Sender<(usize, Frame)>>,
    inbox: Mutex<Receiver<(usize, Frame)>>,
}

/// One channel link per rank, fully connected.
pub fn channel_links(n: usize) -> Vec<Arc<dyn Link>> {
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..n).map(|_| channel()).unzip();
    rxs.into_iter()
        .enumerate()
        .map(|(rank, rx)| {
            Arc::new(ChannelLink {
                rank,
                peers: txs.clone(),
                inbox: Mutex::new(rx),
            }) as Arc<dyn Link>
        })
        .collect()
}

impl Link for ChannelLink {
    fn rank(&self) -> usize {
        self.rank
    }
    fn size(&self) -> usize {
        self.peers.len()
    }
    fn send(&self, dest: usize, frame: Frame) -> Result<()> {
        self.peers[dest]
            .send((self.rank, frame))
            .map_err(|_| Error::Communication(format!("rank {dest} is gone")))
    }
    fn recv(&self) -> Result<(usize, Frame)> {
        self.inbox
            .lock()
            .unwrap()
            .recv()
            .map_err(|_| Error::Communication("inbox closed".into()))
    }
}

/// Socket transport: one TCP stream per peer pair, frames encoded as
/// `kind: u8, length: u64 LE, body`.
pub struct TcpLink {
    rank: usize,
    size: usize,
    writers: Vec<Option<Mutex<TcpStream>>>,
    loopback: Sender<(usize, Frame)>,
    inbox: Mutex<Receiver<(usize, Frame)>>,
}

impl TcpLink {
    /// Connects rank `rank` to every peer. `listener` must already be bound
    /// to `addrs[rank]`; lower ranks are dialed, higher ranks are accepted.
    pub fn establish(rank: usize, addrs: &[SocketAddr], listener: TcpListener) -> Result<Self> {
        let size = addrs.len();
        let io = |e: std::io::Error| Error::Communication(format!("tcp setup: {e}"));
        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
        for (peer, addr) in addrs.iter().enumerate().take(rank) {
            let mut s = connect_retry(*addr).map_err(io)?;
            s.write_all(&(rank as u64).to_le_bytes()).map_err(io)?;
            streams[peer] = Some(s);
        }
        for _ in rank + 1..size {
            let (mut s, _) = listener.accept().map_err(io)?;
            let mut id = [0u8; 8];
            s.read_exact(&mut id).map_err(io)?;
            let peer = u64::from_le_bytes(id) as usize;
            if peer <= rank || peer >= size {
                return Err(Error::Communication(format!("unexpected handshake from rank {peer}")));
            }
            streams[peer] = Some(s);
        }
        let (tx, rx) = channel();
        let mut writers = Vec::with_capacity(size);
        for (peer, s) in streams.into_iter().enumerate() {
            match s {
                Some(s) => {
                    s.set_nodelay(true).map_err(io)?;
                    let mut reader = s.try_clone().map_err(io)?;
                    let tx = tx.clone();
                    std::thread::spawn(move || {
                        while let Ok(frame) = Frame::read_from(&mut reader) {
                            if tx.send((peer, frame)).is_err() {
                                break;
                            }
                        }
                    });
                    writers.push(Some(Mutex::new(s)));
                }
                None => writers.push(None),
            }
        }
        Ok(Self {
            rank,
            size,
            writers,
            loopback: tx,
            inbox: Mutex::new(rx),
        })
    }
}

fn connect_retry(addr: SocketAddr) -> std::io::Result<TcpStream> {
    let mut last = None;
    for _ in 0..200 {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                last = Some(e);
                std::thread::sleep(std::time::Duration::from_millis(25));
            }
        }
    }
    Err(last.unwrap())
}

impl Link for TcpLink {
    fn rank(&self) -> usize {
        self.rank
    }
    fn size(&self) -> usize {
        self.size
    }
    fn send(&self, dest: usize, frame: Frame) -> Result<()> {
        if dest == self.rank {
            return self
                .loopback
                .send((dest, frame))
                .map_err(|_| Error::Communication("loopback closed".into()));
        }
        let w = self.writers[dest]
            .as_ref()
            .ok_or_else(|| Error::Communication(format!("no stream to rank {dest}")))?;
        w.lock()
            .unwrap()
            .write_all(&frame.encode())
            .map_err(|e| Error::Communication(format!("send to rank {dest}: {e}")))
    }
    fn recv(&self) -> Result<(usize, Frame)> {
        self.inbox
            .lock()
            .unwrap()
            .recv()
            .map_err(|_| Error::Communication("all peers disconnected".into()))
    }
}

/// Traffic counters for one endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommStats {
    /// Collective rounds, regardless of how many scalars each carried.
    pub reduction_rounds: u64,
    /// Point-to-point messages sent (halo traffic).
    pub messages_sent: u64,
    pub bytes_sent: u64,
}

pub struct Comm {
    rank: usize,
    size: usize,
    link: Arc<dyn Link>,
    halo_queues: RefCell<Vec<VecDeque<Vec<u8>>>>,
    gather_queues: RefCell<Vec<VecDeque<Vec<f64>>>>,
    stats: Cell<CommStats>,
}

impl Comm {
    pub fn new(link: Arc<dyn Link>) -> Self {
        let size = link.size();
        Self {
            rank: link.rank(),
            size,
            link,
            halo_queues: RefCell::new(vec![VecDeque::new(); size]),
            gather_queues: RefCell::new(vec![VecDeque::new(); size]),
            stats: Cell::new(CommStats::default()),
        }
    }

    /// A single-task endpoint.
    pub fn solo() -> Self {
        Self::new(channel_links(1).pop().unwrap())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn stats(&self) -> CommStats {
        self.stats.get()
    }

    pub fn send_halo(&self, dest: usize, bytes: Vec<u8>) -> Result<()> {
        let mut s = self.stats.get();
        s.messages_sent += 1;
        s.bytes_sent += bytes.len() as u64;
        self.stats.set(s);
        self.link.send(dest, Frame::Halo(bytes))
    }

    /// Blocks until a halo message from `src` whose first byte equals `tag` arrives.
    pub fn recv_halo(&self, src: usize, tag: u8) -> Result<Vec<u8>> {
        loop {
            {
                let mut q = self.halo_queues.borrow_mut();
                if let Some(pos) = q[src].iter().position(|m| m.first() == Some(&tag)) {
                    return Ok(q[src].remove(pos).unwrap());
                }
            }
            self.pump()?;
        }
    }

    fn pump(&self) -> Result<()> {
        let (src, frame) = self.link.recv()?;
        match frame {
            Frame::Halo(b) => self.halo_queues.borrow_mut()[src].push_back(b),
            Frame::Gather(v) => self.gather_queues.borrow_mut()[src].push_back(v),
            Frame::Abort(msg) => return Err(Error::Communication(format!("rank {src} aborted: {msg}"))),
        }
        Ok(())
    }

    /// One collective round: every rank contributes `local`; all ranks get
    /// every contribution in rank order.
    pub fn allgather(&self, local: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut s = self.stats.get();
        s.reduction_rounds += 1;
        self.stats.set(s);
        for dest in (0..self.size).filter(|&d| d != self.rank) {
            self.link.send(dest, Frame::Gather(local.to_vec()))?;
        }
        let mut out = Vec::with_capacity(self.size);
        for src in 0..self.size {
            if src == self.rank {
                out.push(local.to_vec());
                continue;
            }
            loop {
                if let Some(v) = self.gather_queues.borrow_mut()[src].pop_front() {
                    out.push(v);
                    break;
                }
                self.pump()?;
            }
        }
        Ok(out)
    }

    /// Tells every other rank to stop waiting on this one.
    pub fn abort(&self, reason: &str) {
        for dest in (0..self.size).filter(|&d| d != self.rank) {
            let _ = self.link.send(dest, Frame::Abort(reason.to_string()));
        }
    }
}

struct AbortOnPanic<'a>(&'a Comm);

impl Drop for AbortOnPanic<'_> {
    fn drop(&mut self) {
        if std::thread::panicking() {
            self.0.abort("worker panicked");
        }
    }
}

/// Runs `work` once per link on its own thread and returns results in rank order.
///
/// A rank that fails aborts its peers; the first error that is not a
/// consequence of another rank's abort is returned.
pub fn run_workers<T, F>(links: Vec<Arc<dyn Link>>, work: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Comm) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = std::thread::scope(|scope| {
        let handles: Vec<_> = links
            .into_iter()
            .map(|link| {
                let work = &work;
                scope.spawn(move || {
                    let comm = Comm::new(link);
                    let _guard = AbortOnPanic(&comm);
                    let r = work(&comm);
                    if let Err(e) = &r {
                        comm.abort(&e.to_string());
                    }
                    r
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| match h.join() {
                Ok(r) => r,
                Err(_) => Err(Error::Communication("worker panicked".into())),
            })
            .collect()
    });
    let mut out = Vec::with_capacity(results.len());
    let mut first_err: Option<Error> = None;
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                let secondary = matches!(&e, Error::Communication(m) if m.contains("aborted"));
                match &first_err {
                    None => first_err = Some(e),
                    Some(Error::Communication(m)) if m.contains("aborted") && !secondary => first_err = Some(e),
                    _ => {}
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// In-process convenience wrapper around [`run_workers`].
pub fn run_in_process<T, F>(n: usize, work: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Comm) -> Result<T> + Sync,
{
    run_workers(channel_links(n), work)
}
