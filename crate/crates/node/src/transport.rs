//! Byte-stream transports and the server's connection hub.
//!
//! Every connection, TCP or in-memory, is a pair of byte streams. A reader
//! thread per connection turns the incoming stream into decoded frames and
//! forwards them on a channel, so the server sees all connections as one
//! ordered event queue and the device sees one inbox.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::framing::{write_frame, write_message, Frame, FrameReader};
use crate::message::{RoundMessage, WireError};

pub type ConnId = u64;

/// Outgoing half of a connection.
pub trait Link: Write + Send {
    /// Closes the connection so the peer's reader sees end of stream.
    fn close(&mut self) {}
}

impl Link for TcpStream {
    fn close(&mut self) {
        let _ = self.shutdown(Shutdown::Both);
    }
}

/// One decoded frame.
#[derive(Debug)]
pub enum Incoming {
    Message(RoundMessage),
    Malformed(WireError),
    Oversize(usize),
}

pub enum Event {
    Opened {
        conn: ConnId,
        link: Box<dyn Link>,
    },
    Frame {
        conn: ConnId,
        frame: Incoming,
        bytes: usize,
    },
    Closed {
        conn: ConnId,
    },
}

fn decode(frame: Frame) -> (Incoming, usize) {
    match frame {
        Frame::Data(bytes) => {
            let len = bytes.len();
            match RoundMessage::decode(&bytes) {
                Ok(m) => (Incoming::Message(m), len),
                Err(e) => (Incoming::Malformed(e), len),
            }
        }
        Frame::Oversize(len) => (Incoming::Oversize(len), len),
    }
}

/// Cloneable registration point for new connections.
#[derive(Clone)]
pub struct HubHandle {
    tx: Sender<Event>,
    next: Arc<AtomicU64>,
    max_frame: usize,
}

impl HubHandle {
    pub fn attach<R>(&self, reader: R, link: Box<dyn Link>) -> ConnId
    where
        R: Read + Send + 'static,
    {
        let conn = self.next.fetch_add(1, Ordering::Relaxed);
        if self.tx.send(Event::Opened { conn, link }).is_err() {
            return conn;
        }
        let tx = self.tx.clone();
        let max = self.max_frame;
        thread::spawn(move || {
            let mut frames = FrameReader::new(reader, max);
            while let Ok(Some(frame)) = frames.next_frame() {
                let (frame, bytes) = decode(frame);
                if tx.send(Event::Frame { conn, frame, bytes }).is_err() {
                    return;
                }
            }
            let _ = tx.send(Event::Closed { conn });
        });
        conn
    }

    pub fn max_frame(&self) -> usize {
        self.max_frame
    }
}

pub struct Hub {
    rx: Receiver<Event>,
    handle: HubHandle,
}

impl Hub {
    pub fn new(max_frame: usize) -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            rx,
            handle: HubHandle {
                tx,
                next: Arc::new(AtomicU64::new(1)),
                max_frame,
            },
        }
    }

    pub fn handle(&self) -> HubHandle {
        self.handle.clone()
    }

    pub fn max_frame(&self) -> usize {
        self.handle.max_frame
    }

    /// `None` once `timeout` passes without an event.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<Event> {
        match self.rx.recv_timeout(timeout) {
            Ok(ev) => Some(ev),
            Err(RecvTimeoutError::Timeout) => None,
            // the hub holds a sender itself, so this cannot happen
            Err(RecvTimeoutError::Disconnected) => None,
        }
    }
}

#[derive(Debug)]
pub enum Received {
    Message(RoundMessage),
    Malformed(WireError),
    Oversize(usize),
    Closed,
    Timeout,
}

/// A device's connection to the server.
pub struct Endpoint {
    link: Box<dyn Link>,
    rx: Receiver<Option<Incoming>>,
    max_frame: usize,
}

impl Endpoint {
    pub fn new<R>(reader: R, link: Box<dyn Link>, max_frame: usize) -> Self
    where
        R: Read + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut frames = FrameReader::new(reader, max_frame);
            while let Ok(Some(frame)) = frames.next_frame() {
                if tx.send(Some(decode(frame).0)).is_err() {
                    return;
                }
            }
            let _ = tx.send(None);
        });
        Self {
            link,
            rx,
            max_frame,
        }
    }

    pub fn send(&mut self, msg: &RoundMessage) -> io::Result<usize> {
        write_message(&mut self.link, msg, self.max_frame)
    }

    /// Sends arbitrary frame contents; used to exercise the server's decoder.
    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        write_frame(&mut self.link, bytes, usize::MAX)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Received {
        match self.rx.recv_timeout(timeout) {
            Ok(Some(Incoming::Message(m))) => Received::Message(m),
            Ok(Some(Incoming::Malformed(e))) => Received::Malformed(e),
            Ok(Some(Incoming::Oversize(n))) => Received::Oversize(n),
            Ok(None) | Err(RecvTimeoutError::Disconnected) => Received::Closed,
            Err(RecvTimeoutError::Timeout) => Received::Timeout,
        }
    }

    pub fn close(&mut self) {
        self.link.close();
    }
}

pub fn connect_tcp<A: ToSocketAddrs>(addr: A, max_frame: usize) -> io::Result<Endpoint> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    Ok(Endpoint::new(reader, Box::new(stream), max_frame))
}

/// Accept loop feeding a hub; stops when dropped.
pub struct TcpAcceptor {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl TcpAcceptor {
    pub fn bind<A: ToSocketAddrs>(addr: A, hub: HubHandle) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let attached = stream
                            .set_nonblocking(false)
                            .and_then(|_| stream.set_nodelay(true))
                            .and_then(|_| stream.try_clone());
                        if let Ok(reader) = attached {
                            hub.attach(reader, Box::new(stream));
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(5));
                    }
                    Err(_) => thread::sleep(Duration::from_millis(5)),
                }
            }
        });
        Ok(Self {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for TcpAcceptor {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Reading end of an in-memory byte pipe.
pub struct PipeReader {
    rx: Receiver<Vec<u8>>,
    buf: VecDeque<u8>,
}

/// Writing end of an in-memory byte pipe.
pub struct PipeWriter {
    tx: Option<Sender<Vec<u8>>>,
}

pub fn pipe() -> (PipeWriter, PipeReader) {
    let (tx, rx) = mpsc::channel();
    (
        PipeWriter { tx: Some(tx) },
        PipeReader {
            rx,
            buf: VecDeque::new(),
        },
    )
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        while self.buf.is_empty() {
            match self.rx.recv() {
                Ok(chunk) => self.buf.extend(chunk),
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len());
        for (o, b) in out.iter_mut().zip(self.buf.drain(..n)) {
            *o = b;
        }
        Ok(n)
    }
}

impl Write for PipeWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        let tx = self.tx.as_ref().ok_or(io::ErrorKind::BrokenPipe)?;
        tx.send(data.to_vec())
            .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Link for PipeWriter {
    fn close(&mut self) {
        self.tx = None;
    }
}

/// In-process network: each `connect` creates a pipe pair and registers the
/// server half with the hub.
#[derive(Clone)]
pub struct Loopback {
    hub: HubHandle,
}

impl Loopback {
    pub fn new(hub: HubHandle) -> Self {
        Self { hub }
    }

    pub fn connect(&self) -> Endpoint {
        let (to_server, server_in) = pipe();
        let (to_device, device_in) = pipe();
        self.hub.attach(server_in, Box::new(to_device));
        Endpoint::new(device_in, Box::new(to_server), self.hub.max_frame())
    }
}
