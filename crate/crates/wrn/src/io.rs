//! Binary weight files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "WRNW" | version u32 = 1
//! depth u32 | widen u32 | dropout f64 | in_channels u32 | classes u32 | h u32 | w u32
//! tensor count u32
//! per tensor: name len u32 | name utf-8 | ndim u32 | dims u32... | f32 data
//! ```
//!
//! Running statistics are stored alongside weights.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::model::{WrnConfig, WrnModel};
use crate::WrnError;

pub const MAGIC: &[u8; 4] = b"WRNW";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &WrnModel<f32>) -> Vec<u8> {
    let c = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, c.depth);
    put_u32(&mut buf, c.widen);
    buf.extend_from_slice(&c.dropout.to_le_bytes());
    for v in [c.in_channels, c.classes, c.input_h, c.input_w] {
        put_u32(&mut buf, v);
    }
    let entries = model.store().entries();
    put_u32(&mut buf, entries.len());
    for e in entries {
        put_u32(&mut buf, e.name.len());
        buf.extend_from_slice(e.name.as_bytes());
        put_u32(&mut buf, e.shape.len());
        for &d in &e.shape {
            put_u32(&mut buf, d);
        }
        for v in &e.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WrnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| WrnError::Format("truncated weight file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, WrnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<WrnModel<f32>, WrnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(WrnError::Format("not a weight file (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(WrnError::Format(format!("unsupported format version {version}")));
    }
    let depth = r.u32()?;
    let widen = r.u32()?;
    let dropout = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let cfg = WrnConfig {
        depth,
        widen,
        dropout,
        in_channels: r.u32()?,
        classes: r.u32()?,
        input_h: r.u32()?,
        input_w: r.u32()?,
    };
    let mut model = WrnModel::<f32>::build(cfg, 0)?;
    let count = r.u32()?;
    let entries = model.store_mut().entries_mut();
    if count != entries.len() {
        return Err(WrnError::Format(format!("expected {} tensors, file has {count}", entries.len())));
    }
    for e in entries.iter_mut() {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| WrnError::Format("tensor name is not utf-8".into()))?;
        if name != e.name {
            return Err(WrnError::Format(format!("expected tensor {}, found {name}", e.name)));
        }
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if shape != e.shape {
            return Err(WrnError::Format(format!("{name}: shape {shape:?}, expected {:?}", e.shape)));
        }
        let data = r.take(4 * e.value.len())?;
        for (v, b) in e.value.iter_mut().zip(data.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(WrnError::Format("trailing bytes after last tensor".into()));
    }
    Ok(model)
}

pub fn save(model: &WrnModel<f32>, path: &Path) -> Result<(), WrnError> {
    let io = |e: std::io::Error| WrnError::Io(format!("{}: {e}", path.display()));
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&encode(model)).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<WrnModel<f32>, WrnError> {
    let bytes = fs::read(path).map_err(|e| WrnError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
