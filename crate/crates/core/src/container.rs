//! Binary artifact framing shared by checkpoints, embedding stores and
//! scorer artifacts:
//!
//! ```text
//! "EHRSEQ1" | u32 LE header length | JSON header | u32 LE blob count |
//! per blob: u64 LE value count, f32 LE values
//! ```
//!
//! The JSON header always carries `format_version` and `kind`.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 7] = b"EHRSEQ1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    format_version: u32,
    kind: String,
    #[serde(flatten)]
    header: H,
}

pub fn write_container<H: Serialize, W: Write>(
    mut w: W,
    kind: &str,
    header: &H,
    blobs: &[&[f32]],
) -> std::io::Result<()> {
    let json = serde_json::to_vec(&Envelope {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        header,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(blobs.len() as u32).to_le_bytes())?;
    for blob in blobs {
        w.write_all(&(blob.len() as u64).to_le_bytes())?;
        let mut bytes = Vec::with_capacity(blob.len() * 4);
        for v in *blob {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Container(msg.into())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| malformed(format!("truncated while reading {what}: {e}")))
}

/// Reads a container of the given `kind`, returning its header and blobs.
pub fn read_container<H: DeserializeOwned, R: Read>(mut r: R, kind: &str) -> Result<(H, Vec<Vec<f32>>)> {
    let mut magic = [0u8; 7];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(malformed("bad magic; not an ehrseq artifact"));
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut r, &mut u32buf, "header length")?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    if header_len > 64 << 20 {
        return Err(malformed("implausible header length"));
    }
    let mut json = vec![0u8; header_len];
    read_exact(&mut r, &mut json, "header")?;
    let meta: Envelope<serde_json::Value> =
        serde_json::from_slice(&json).map_err(|e| malformed(format!("header: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(malformed(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    if meta.kind != kind {
        return Err(malformed(format!("artifact kind {:?}, expected {kind:?}", meta.kind)));
    }
    let header: H = serde_json::from_value(meta.header).map_err(|e| malformed(format!("header: {e}")))?;
    read_exact(&mut r, &mut u32buf, "blob count")?;
    let n = u32::from_le_bytes(u32buf) as usize;
    let mut blobs = Vec::with_capacity(n.min(4096));
    for i in 0..n {
        let mut u64buf = [0u8; 8];
        read_exact(&mut r, &mut u64buf, "blob length")?;
        let len = u64::from_le_bytes(u64buf) as usize;
        let mut bytes = Vec::new();
        let got = (&mut r)
            .take(len as u64 * 4)
            .read_to_end(&mut bytes)
            .map_err(|e| malformed(e.to_string()))?;
        if got != len * 4 {
            return Err(malformed(format!("truncated blob {i}")));
        }
        blobs.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| malformed(e.to_string()))? != 0 {
        return Err(malformed("trailing bytes after last blob"));
    }
    Ok((header, blobs))
}

pub fn save<H: Serialize>(path: &Path, kind: &str, header: &H, blobs: &[&[f32]]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_container(std::io::BufWriter::new(f), kind, header, blobs).map_err(|e| Error::io(path, e))
}

pub fn load<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, Vec<Vec<f32>>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_container(std::io::BufReader::new(f), kind)
}
