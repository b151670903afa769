//! Length-prefixed frames: a 4-byte big-endian length, then that many bytes.

use std::io::{self, Read, Write};

use crate::message::RoundMessage;

/// Default ceiling on one frame (64 MiB).
pub const DEFAULT_MAX_FRAME: usize = 64 << 20;

#[derive(Debug, PartialEq, Eq)]
pub enum Frame {
    Data(Vec<u8>),
    /// A frame above the limit; its bytes were read and dropped so the
    /// stream stays aligned.
    Oversize(usize),
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, bytes: &[u8], max: usize) -> io::Result<()> {
    if bytes.len() > max || bytes.len() > u32::MAX as usize {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!(
                "frame of {} bytes exceeds the {max}-byte limit",
                bytes.len()
            ),
        ));
    }
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(bytes)?;
    w.flush()
}

pub fn write_message<W: Write + ?Sized>(
    w: &mut W,
    msg: &RoundMessage,
    max: usize,
) -> io::Result<usize> {
    let bytes = msg.encode();
    write_frame(w, &bytes, max)?;
    Ok(bytes.len())
}

pub struct FrameReader<R> {
    inner: R,
    max: usize,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R, max: usize) -> Self {
        Self { inner, max }
    }

    /// `Ok(None)` on a clean end of stream between frames.
    pub fn next_frame(&mut self) -> io::Result<Option<Frame>> {
        let mut len = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match self.inner.read(&mut len[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
                Ok(k) => got += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        let len = u32::from_be_bytes(len) as usize;
        if len > self.max {
            let skipped = io::copy(&mut (&mut self.inner).take(len as u64), &mut io::sink())?;
            if skipped != len as u64 {
                return Err(io::ErrorKind::UnexpectedEof.into());
            }
            return Ok(Some(Frame::Oversize(len)));
        }
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf)?;
        Ok(Some(Frame::Data(buf)))
    }
}
