//! Framed TCP tier: one wire message per frame, read as a fixed header
//! followed by the announced payload.

use std::io::{Read, Write};
use std::net::TcpStream;

use crate::msg::PlaneMessage;
use crate::wire::{decode_header, HEADER_LEN};
use crate::PlaneError;

/// Largest payload a reader will accept before allocating.
pub const DEFAULT_MAX_PAYLOAD: u64 = 1 << 30;

pub struct FramedStream {
    stream: TcpStream,
    max_payload: u64,
}

impl FramedStream {
    pub fn new(stream: TcpStream) -> Self {
        Self {
            stream,
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }

    pub fn with_max_payload(mut self, max: u64) -> Self {
        self.max_payload = max;
        self
    }

    pub fn send<M: PlaneMessage>(&mut self, msg: &M) -> Result<usize, PlaneError> {
        let bytes = msg.encode()?;
        self.send_raw(&bytes)?;
        Ok(bytes.len())
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), PlaneError> {
        self.stream.write_all(bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    /// Reads one complete frame. `Ok(None)` on a clean end of stream.
    pub fn recv_raw(&mut self) -> Result<Option<Vec<u8>>, PlaneError> {
        let mut header = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            let n = self.stream.read(&mut header[got..])?;
            if n == 0 {
                if got == 0 {
                    return Ok(None);
                }
                return Err(PlaneError::Io(std::io::ErrorKind::UnexpectedEof.into()));
            }
            got += n;
        }
        let (_, len) = decode_header(&header)?;
        if len > self.max_payload {
            return Err(PlaneError::FrameTooLarge {
                len,
                max: self.max_payload,
            });
        }
        let mut buf = vec![0u8; HEADER_LEN + len as usize];
        buf[..HEADER_LEN].copy_from_slice(&header);
        self.stream.read_exact(&mut buf[HEADER_LEN..])?;
        Ok(Some(buf))
    }

    pub fn recv<M: PlaneMessage>(&mut self) -> Result<Option<M>, PlaneError> {
        match self.recv_raw()? {
            Some(b) => Ok(Some(M::decode(&b)?)),
            None => Ok(None),
        }
    }
}
