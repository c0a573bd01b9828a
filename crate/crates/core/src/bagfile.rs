//! Binary bag files and dataset manifests.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MBAG1"
//! header:  u32 id_len | id bytes | u32 M | u32 d | u8 label kind | label payload | u8 flags
//!          survival payload: f64 time | u8 event | u32 bin
//!          subtype payload:  u32 class
//!          flags: bit 0 = coords present, bit 1 = type map present
//! payload: M*d f64 features | [M*2 f64 coords] | [M u32 type map]
//! u32 CRC32 of header + payload
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::bag::{FeatureBag, Label, SubtypeLabel, SurvivalLabel};
use crate::error::{MicoError, Result};
use crate::tensor::Tensor;

pub const BAG_MAGIC: &[u8; 5] = b"MBAG1";
pub const BAG_EXTENSION: &str = "mbag";

const LABEL_SURVIVAL: u8 = 1;
const LABEL_SUBTYPE: u8 = 2;
const FLAG_COORDS: u8 = 1;
const FLAG_TYPES: u8 = 2;

pub fn encode_bag(bag: &FeatureBag) -> Result<Vec<u8>> {
    bag.validate()?;
    let (m, d) = (bag.len(), bag.dim());
    let mut body = Vec::with_capacity(64 + m * d * 8);
    let id = bag.bag_id.as_bytes();
    body.extend_from_slice(&(id.len() as u32).to_le_bytes());
    body.extend_from_slice(id);
    body.extend_from_slice(&(m as u32).to_le_bytes());
    body.extend_from_slice(&(d as u32).to_le_bytes());
    match bag.label {
        Label::Survival(s) => {
            body.push(LABEL_SURVIVAL);
            body.extend_from_slice(&s.time.to_le_bytes());
            body.push(u8::from(s.event));
            body.extend_from_slice(&(s.bin as u32).to_le_bytes());
        }
        Label::Subtype(s) => {
            body.push(LABEL_SUBTYPE);
            body.extend_from_slice(&(s.class_index as u32).to_le_bytes());
        }
    }
    let mut flags = 0;
    if bag.coords.is_some() {
        flags |= FLAG_COORDS;
    }
    if bag.true_type_map.is_some() {
        flags |= FLAG_TYPES;
    }
    body.push(flags);
    for v in bag.features.data() {
        body.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(coords) = &bag.coords {
        for c in coords {
            body.extend_from_slice(&c[0].to_le_bytes());
            body.extend_from_slice(&c[1].to_le_bytes());
        }
    }
    if let Some(types) = &bag.true_type_map {
        for t in types {
            body.extend_from_slice(&t.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(BAG_MAGIC.len() + body.len() + 4);
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(MicoError::Truncated { expected: n, found: left });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_bag(bytes: &[u8]) -> Result<FeatureBag> {
    if bytes.len() < BAG_MAGIC.len() || &bytes[..BAG_MAGIC.len()] != BAG_MAGIC {
        return Err(MicoError::CorruptHeader("missing MBAG1 magic".into()));
    }
    let body = &bytes[BAG_MAGIC.len()..];
    let mut r = Reader { buf: body, pos: 0 };
    let id_len = r.u32()? as usize;
    if id_len > 4096 {
        return Err(MicoError::CorruptHeader(format!("bag id length {id_len}")));
    }
    let bag_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| MicoError::CorruptHeader("bag id is not utf-8".into()))?;
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    if m == 0 || d == 0 {
        return Err(MicoError::CorruptHeader(format!("empty bag dimensions {m} x {d}")));
    }
    let label = match r.u8()? {
        LABEL_SURVIVAL => {
            let time = r.f64()?;
            let event = match r.u8()? {
                0 => false,
                1 => true,
                e => return Err(MicoError::CorruptHeader(format!("event flag {e}"))),
            };
            let bin = r.u32()? as usize;
            Label::Survival(SurvivalLabel { time, event, bin })
        }
        LABEL_SUBTYPE => Label::Subtype(SubtypeLabel {
            class_index: r.u32()? as usize,
        }),
        tag => return Err(MicoError::CorruptHeader(format!("unknown label kind {tag}"))),
    };
    let flags = r.u8()?;
    if flags & !(FLAG_COORDS | FLAG_TYPES) != 0 {
        return Err(MicoError::CorruptHeader(format!("unknown flags {flags:#04x}")));
    }
    let payload = m
        .checked_mul(d)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(if flags & FLAG_COORDS != 0 { m * 16 } else { 0 }))
        .and_then(|n| n.checked_add(if flags & FLAG_TYPES != 0 { m * 4 } else { 0 }))
        .ok_or_else(|| MicoError::CorruptHeader("payload size overflows".into()))?;
    let needed = payload + 4;
    let left = body.len() - r.pos;
    if left < needed {
        return Err(MicoError::Truncated { expected: needed, found: left });
    }
    if left > needed {
        return Err(MicoError::CorruptHeader(format!("{} trailing bytes", left - needed)));
    }
    let crc_at = body.len() - 4;
    let stored = u32::from_le_bytes(body[crc_at..].try_into().unwrap());
    let computed = crc32fast::hash(&body[..crc_at]);
    if stored != computed {
        return Err(MicoError::Checksum { stored, computed });
    }

    let features = (0..m * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let coords = if flags & FLAG_COORDS != 0 {
        Some((0..m).map(|_| Ok([r.f64()?, r.f64()?])).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let true_type_map = if flags & FLAG_TYPES != 0 {
        Some((0..m).map(|_| r.u32()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let bag = FeatureBag {
        bag_id,
        features: Tensor::new(vec![m, d], features)?,
        coords,
        label,
        true_type_map,
    };
    bag.validate()?;
    Ok(bag)
}

pub fn write_bag(bag: &FeatureBag, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_bag(bag)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_bag(path: impl AsRef<Path>) -> Result<FeatureBag> {
    decode_bag(&fs::read(path)?)
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Writes every bag into `dir` plus a manifest listing their relative paths.
/// Returns the manifest path.
pub fn write_dataset(bags: &[FeatureBag], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for bag in bags {
        let name = format!("{}.{BAG_EXTENSION}", bag.bag_id);
        write_bag(bag, dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Reads a manifest: one bag path per line, relative to the manifest's
/// directory, optionally followed by whitespace and a split hint. Blank lines
/// and lines starting with `#` are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, Option<String>)>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let mut parts = l.split_whitespace();
            let rel = parts.next().expect("non-empty line");
            (base.join(rel), parts.next().map(str::to_owned))
        })
        .collect())
}

/// Loads a dataset from a manifest file, or from a directory containing one.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<FeatureBag>> {
    let path = path.as_ref();
    let manifest = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let entries = read_manifest(&manifest)?;
    if entries.is_empty() {
        return Err(MicoError::Data(format!("{} lists no bags", manifest.display())));
    }
    entries.iter().map(|(p, _)| read_bag(p)).collect()
}
