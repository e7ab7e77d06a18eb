//! The `MAFB1` feature file: 5 magic bytes, then `T`, `P`, `C` as
//! little-endian `u32`, then `T * P * C` little-endian `f32` values in
//! frame, position, channel order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FeatureStream;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 5] = *b"MAFB1";
pub const HEADER_BYTES: u64 = 17;

fn format_err(path: &Path, msg: String) -> Error {
    Error::FeatureFormat(format!("{}: {msg}", path.display()))
}

/// Incremental writer; the frame count is fixed up front and checked on
/// [`FeatureWriter::finish`].
pub struct FeatureWriter {
    out: BufWriter<File>,
    frames: usize,
    tokens: usize,
    channels: usize,
    written: usize,
}

impl FeatureWriter {
    pub fn create(path: &Path, frames: usize, tokens: usize, channels: usize) -> Result<Self> {
        if frames == 0 || tokens == 0 || channels == 0 {
            return Err(Error::Config("feature file needs T, P, C >= 1".into()));
        }
        let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Config(format!("dimension {v} exceeds u32")));
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&MAGIC)?;
        for v in [frames, tokens, channels] {
            out.write_all(&dim(v)?.to_le_bytes())?;
        }
        Ok(FeatureWriter {
            out,
            frames,
            tokens,
            channels,
            written: 0,
        })
    }

    /// Values are stored as `f32`, so anything not exactly representable
    /// is rounded.
    pub fn write_frame(&mut self, frame: &Tensor) -> Result<()> {
        if frame.shape() != [self.tokens, self.channels] {
            return Err(Error::GridDimension {
                got_tokens: frame.rows(),
                got_channels: frame.cols(),
                want_tokens: self.tokens,
                want_channels: self.channels,
            });
        }
        if self.written == self.frames {
            return Err(Error::Config(format!("header declares {} frames", self.frames)));
        }
        for &x in frame.data() {
            self.out.write_all(&(x as f32).to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.frames {
            return Err(Error::Config(format!(
                "wrote {} frames, header declares {}",
                self.written, self.frames
            )));
        }
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_features(path: &Path, frames: &[Tensor]) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::Config("no frames to write".into()))?;
    let mut w = FeatureWriter::create(path, frames.len(), first.rows(), first.cols())?;
    for f in frames {
        w.write_frame(f)?;
    }
    w.finish()
}

/// Opens and validates the header and total size, then yields frames one at
/// a time from disk.
pub fn load_features(path: &Path) -> Result<FeatureStream> {
    let file = File::open(path)?;
    let actual = file.metadata()?.len();
    let mut input = BufReader::new(file);
    let mut header = [0u8; HEADER_BYTES as usize];
    if actual < HEADER_BYTES {
        return Err(format_err(
            path,
            format!("truncated header: expected {HEADER_BYTES} bytes, found {actual}"),
        ));
    }
    input.read_exact(&mut header)?;
    if header[..5] != MAGIC {
        return Err(format_err(path, format!("bad magic {:02X?} at byte offset 0", &header[..5])));
    }
    let field = |i: usize| u32::from_le_bytes(header[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes"));
    let (t, p, c) = (field(0), field(1), field(2));
    for (i, (name, v)) in [("T", t), ("P", p), ("C", c)].into_iter().enumerate() {
        if v == 0 {
            return Err(format_err(path, format!("{name}=0 in header at byte offset {}", 5 + 4 * i)));
        }
    }
    let frame_bytes = p as u64 * c as u64 * 4;
    let expected = HEADER_BYTES + t as u64 * frame_bytes;
    if actual != expected {
        let what = if actual < expected { "truncated" } else { "trailing data" };
        return Err(format_err(
            path,
            format!("{what}: expected {expected} bytes for T={t} P={p} C={c}, found {actual}"),
        ));
    }
    let (t, p, c) = (t as usize, p as usize, c as usize);
    let display = path.display().to_string();
    let mut index = 0u64;
    let frames = std::iter::from_fn(move || {
        if index == t as u64 {
            return None;
        }
        let offset = HEADER_BYTES + index * frame_bytes;
        index += 1;
        let mut buf = vec![0u8; frame_bytes as usize];
        Some(match input.read_exact(&mut buf) {
            Ok(()) => {
                let data = buf
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect();
                Tensor::matrix(p, c, data)
            }
            Err(e) => Err(Error::FeatureFormat(format!(
                "{display}: reading frame at byte offset {offset}: {e}"
            ))),
        })
    });
    FeatureStream::new(t, p, c, frames)
}
