//! Framing shared by the dataset and checkpoint files:
//! 4-byte magic, little-endian `u32` header length, UTF-8 `key=value`
//! header lines, then the payload.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

/// Standard reflected CRC-32 (polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

pub fn frame(magic: &[u8; 4], header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits a framed file into header text and payload.
pub fn unframe<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(&'a str, &'a [u8]), FormatError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(FormatError::Magic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < 8 {
        return Err(FormatError::Truncated("header length".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| FormatError::Truncated(format!("header of {len} bytes")))?;
    let header = std::str::from_utf8(&bytes[8..end]).map_err(|e| FormatError::Header(format!("not UTF-8: {e}")))?;
    Ok((header, &bytes[end..]))
}

/// Ordered `key=value` lines. Keys may repeat (e.g. one line per tensor).
#[derive(Clone, Debug, Default)]
pub struct Header {
    pub entries: Vec<(String, String)>,
}

impl Header {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let entries = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| FormatError::Header(format!("line without '=': {l:?}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Result<&str, FormatError> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| FormatError::Header(format!("missing key {key}")))
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn parse_value<V: std::str::FromStr>(&self, key: &str) -> Result<V, FormatError> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| FormatError::Header(format!("bad value for {key}: {v:?}")))
    }

    pub fn parse_hex(&self, key: &str) -> Result<u32, FormatError> {
        let v = self.get(key)?;
        u32::from_str_radix(v, 16).map_err(|_| FormatError::Header(format!("bad checksum for {key}: {v:?}")))
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Entries with the given prefix stripped, as a map.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
            .collect()
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_reference_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn frame_round_trip_and_errors() {
        let bytes = frame(b"TEST", "a=1\nb=x\n", &[9, 8, 7]);
        let (h, p) = unframe(b"TEST", &bytes).unwrap();
        let h = Header::parse(h).unwrap();
        assert_eq!(h.parse_value::<u32>("a").unwrap(), 1);
        assert_eq!(p, &[9, 8, 7]);
        assert!(matches!(unframe(b"ELSE", &bytes), Err(FormatError::Magic { .. })));
        assert!(matches!(unframe(b"TEST", &bytes[..10]), Err(FormatError::Truncated(_))));
        assert!(matches!(Header::parse("novalue"), Err(FormatError::Header(_))));
    }
}
