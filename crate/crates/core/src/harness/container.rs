//! `BEK1` embeddings container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "BEK1"
//! version    u32      1
//! d          u32
//! grid_t     u32
//! grid_f     u32
//! stride_s   f32      window stride the records were embedded at
//! checksum   32 bytes SHA-256 of the checkpoint file
//! count      u64      number of records
//! record*    id_len u32, id (UTF-8), duration_s f64, windows u32,
//!            then per window: grid_t*grid_f*d f32 (spatial, cell-major), d f32 (mean)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;
use crate::model::EmbeddingPair;

pub const MAGIC: &[u8; 4] = b"BEK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WindowEmbedding {
    pub spatial: Vec<f32>,
    pub mean: Vec<f32>,
}

impl WindowEmbedding {
    pub fn from_pair(pair: &EmbeddingPair) -> Self {
        Self {
            spatial: pair.spatial.iter().map(|&x| x as f32).collect(),
            mean: pair.mean.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn spatial_f64(&self) -> Vec<f64> {
        self.spatial.iter().map(|&x| x as f64).collect()
    }

    pub fn mean_f64(&self) -> Vec<f64> {
        self.mean.iter().map(|&x| x as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub recording_id: String,
    pub duration_s: f64,
    pub windows: Vec<WindowEmbedding>,
}

impl EmbeddingRecord {
    /// Average of the window mean embeddings.
    pub fn recording_mean(&self) -> Vec<f64> {
        let d = self.windows.first().map_or(0, |w| w.mean.len());
        let mut out = vec![0.0; d];
        for w in &self.windows {
            for (o, &v) in out.iter_mut().zip(&w.mean) {
                *o += v as f64;
            }
        }
        let n = self.windows.len().max(1) as f64;
        out.iter_mut().for_each(|x| *x /= n);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingsFile {
    pub d: u32,
    pub grid_t: u32,
    pub grid_f: u32,
    pub stride_s: f32,
    pub checksum: [u8; 32],
    pub records: Vec<EmbeddingRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated container at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl EmbeddingsFile {
    pub fn new(d: usize, grid_t: usize, grid_f: usize, stride_s: f64, checksum: [u8; 32]) -> Self {
        Self {
            d: d as u32,
            grid_t: grid_t as u32,
            grid_f: grid_f as u32,
            stride_s: stride_s as f32,
            checksum,
            records: Vec::new(),
        }
    }

    fn cells(&self) -> usize {
        self.grid_t as usize * self.grid_f as usize
    }

    /// Store a spectrogram as a single-window record (`d` = mel bins,
    /// `grid_t` = frames, `grid_f` = 1), for golden fixtures.
    pub fn from_spectrogram(id: &str, spec: &LogMelSpectrogram) -> Self {
        let mut mean = vec![0.0f64; spec.bins];
        for t in 0..spec.frames {
            for (m, v) in mean.iter_mut().zip(spec.row(t)) {
                *m += v / spec.frames as f64;
            }
        }
        let mut f = Self::new(spec.bins, spec.frames, 1, 0.0, [0; 32]);
        f.records.push(EmbeddingRecord {
            recording_id: id.to_string(),
            duration_s: spec.frames as f64 / spec.frame_rate,
            windows: vec![WindowEmbedding {
                spatial: spec.values.iter().map(|&v| v as f32).collect(),
                mean: mean.iter().map(|&v| v as f32).collect(),
            }],
        });
        f
    }

    pub fn validate(&self) -> Result<()> {
        let (cells, d) = (self.cells(), self.d as usize);
        for r in &self.records {
            for w in &r.windows {
                if w.spatial.len() != cells * d || w.mean.len() != d {
                    return Err(Error::Format(format!(
                        "record {}: window payload does not match dims ({} cells x {d})",
                        r.recording_id, cells
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.d);
        put_u32(&mut out, self.grid_t);
        put_u32(&mut out, self.grid_f);
        out.extend_from_slice(&self.stride_s.to_le_bytes());
        out.extend_from_slice(&self.checksum);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            put_u32(&mut out, r.recording_id.len() as u32);
            out.extend_from_slice(r.recording_id.as_bytes());
            out.extend_from_slice(&r.duration_s.to_le_bytes());
            put_u32(&mut out, r.windows.len() as u32);
            for w in &r.windows {
                for v in w.spatial.iter().chain(&w.mean) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Format("not a BEK1 embeddings file".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let d = c.u32()?;
        let grid_t = c.u32()?;
        let grid_f = c.u32()?;
        let stride_s = f32::from_le_bytes(c.take(4)?.try_into().unwrap());
        let checksum: [u8; 32] = c.take(32)?.try_into().unwrap();
        let count = c.u64()?;
        let mut file = Self {
            d,
            grid_t,
            grid_f,
            stride_s,
            checksum,
            records: Vec::new(),
        };
        let dd = d as usize;
        let window_bytes = file
            .cells()
            .checked_add(1)
            .and_then(|k| k.checked_mul(dd))
            .and_then(|k| k.checked_mul(4))
            .ok_or_else(|| Error::Format("container dims overflow".into()))?;
        for _ in 0..count {
            let len = c.u32()? as usize;
            let id = std::str::from_utf8(c.take(len)?)
                .map_err(|e| Error::Format(format!("record id: {e}")))?
                .to_string();
            let duration_s = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
            let n = c.u32()? as usize;
            if n.checked_mul(window_bytes).is_none_or(|b| b > buf.len() - c.pos) {
                return Err(Error::Format(format!("truncated container at byte {}", c.pos)));
            }
            let mut windows = Vec::with_capacity(n);
            for _ in 0..n {
                let spatial = c.f32s(window_bytes / 4 - dd)?;
                let mean = c.f32s(dd)?;
                windows.push(WindowEmbedding { spatial, mean });
            }
            file.records.push(EmbeddingRecord {
                recording_id: id,
                duration_s,
                windows,
            });
        }
        if c.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(file)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn record(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.recording_id == id)
    }
}
