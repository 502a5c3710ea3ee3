//! Binary container formats. All integers and floats are little-endian.
//!
//! Token grid (`.tok`), version 1:
//!
//! ```text
//! magic      8 bytes  "STEMTOK\0"
//! version    u16
//! frame_rate f64
//! n_stems    u16
//! per stem:  name_len u16, name (utf-8), n_streams u16, codebook_size u32 x n_streams
//! delays     u16 x S
//! n_frames   u32
//! tokens     u32 x (S * T), row-major (stream-major)
//! ```
//!
//! Codebooks (`.rvq`), version 1:
//!
//! ```text
//! magic      8 bytes  "STEMRVQ\0"
//! version    u16
//! n_stages   u32
//! codebook   u32   (codewords per stage)
//! dim        u32
//! codewords  f64 x (n_stages * codebook * dim), row-major [stage][code][dim]
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layout::{make_layout, DelayRule, StemSpec, TokenGrid};

pub const GRID_MAGIC: &[u8; 8] = b"STEMTOK\0";
pub const GRID_VERSION: u16 = 1;

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.bytes(&[v])
    }

    pub fn u16(&mut self, v: u16) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u128(&mut self, v: u128) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn str16(&mut self, s: &str) -> io::Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "string too long"))?;
        self.u16(len)?;
        self.bytes(s.as_bytes())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> std::result::Result<u16, String> {
        self.array().map(u16::from_le_bytes)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn u64(&mut self) -> std::result::Result<u64, String> {
        self.array().map(u64::from_le_bytes)
    }

    pub fn u128(&mut self) -> std::result::Result<u128, String> {
        self.array().map(u128::from_le_bytes)
    }

    pub fn f64(&mut self) -> std::result::Result<f64, String> {
        self.array().map(f64::from_le_bytes)
    }

    pub fn str16(&mut self) -> std::result::Result<String, String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> std::result::Result<(), String> {
        if self.take(magic.len())? != magic {
            return Err("bad magic".into());
        }
        Ok(())
    }

    pub fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub fn encode_grid(grid: &TokenGrid) -> Vec<u8> {
    let layout = grid.layout();
    let mut w = Writer::new(Vec::with_capacity(64 + grid.tokens().len() * 4));
    (|| -> io::Result<()> {
        w.bytes(GRID_MAGIC)?;
        w.u16(GRID_VERSION)?;
        w.f64(layout.frame_rate_hz())?;
        w.u16(layout.stems().len() as u16)?;
        for stem in layout.stems() {
            w.str16(&stem.name)?;
            w.u16(stem.n_streams() as u16)?;
            for &cb in &stem.codebook_sizes {
                w.u32(cb)?;
            }
        }
        for &d in layout.delays() {
            w.u16(d as u16)?;
        }
        w.u32(grid.n_frames() as u32)?;
        for &t in grid.tokens() {
            w.u32(t)?;
        }
        Ok(())
    })()
    .expect("writing to a Vec cannot fail");
    w.into_inner()
}

pub fn decode_grid(bytes: &[u8]) -> std::result::Result<TokenGrid, String> {
    let mut r = Reader::new(bytes);
    r.expect_magic(GRID_MAGIC)?;
    let version = r.u16()?;
    if version != GRID_VERSION {
        return Err(format!("unsupported grid version {version}"));
    }
    let frame_rate = r.f64()?;
    let n_stems = r.u16()? as usize;
    let mut stems = Vec::with_capacity(n_stems);
    for _ in 0..n_stems {
        let name = r.str16()?;
        let n_streams = r.u16()? as usize;
        let cbs = (0..n_streams).map(|_| r.u32()).collect::<std::result::Result<_, _>>()?;
        stems.push(StemSpec::new(name, cbs));
    }
    let n_total: usize = stems.iter().map(StemSpec::n_streams).sum();
    let delays = (0..n_total)
        .map(|_| r.u16().map(usize::from))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let layout = make_layout(stems, frame_rate, DelayRule::Explicit(delays)).map_err(|e| e.to_string())?;
    let n_frames = r.u32()? as usize;
    let raw = r.take(n_total * n_frames * 4)?;
    let tokens = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    r.finish()?;
    TokenGrid::new(layout, n_frames, tokens).map_err(|e| e.to_string())
}

pub fn write_grid(path: impl AsRef<Path>, grid: &TokenGrid) -> Result<()> {
    fs::write(path, encode_grid(grid))?;
    Ok(())
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<TokenGrid> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_grid(&bytes).map_err(|msg| Error::format(path, msg))
}
