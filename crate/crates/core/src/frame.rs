//! Length-prefixed JSON frames: a big-endian `u32` byte count followed by
//! one UTF-8 JSON document.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Largest accepted frame body.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, value: &T) -> io::Result<()> {
    let body = serde_json::to_vec(value).map_err(io::Error::other)?;
    if body.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// Reads one raw frame body. Returns `Ok(None)` on a clean end of stream.
pub fn read_frame_bytes<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn read_frame<R: Read, T: DeserializeOwned>(r: &mut R) -> io::Result<Option<T>> {
    match read_frame_bytes(r)? {
        Some(body) => serde_json::from_slice(&body)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn header_is_big_endian_length() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &json!({"op": "ping"})).unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 13]);
        let back: serde_json::Value = read_frame(&mut buf.as_slice()).unwrap().unwrap();
        assert_eq!(back, json!({"op": "ping"}));
    }

    #[test]
    fn oversized_header_rejected() {
        let buf = ((MAX_FRAME + 1) as u32).to_be_bytes();
        assert!(read_frame_bytes(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn eof_between_frames_is_clean() {
        let empty: &[u8] = &[];
        assert!(read_frame_bytes(&mut { empty }).unwrap().is_none());
    }
}
