// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary activation tapes.
//!
//! A tape records the FFN output of every block at every flow step for one
//! utterance. Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "TRUS"
//! version      u16
//! num_layers   u16      L >= 1
//! num_steps    u16      T >= 1
//! channels     u32      d >= 1
//! frames       u32      F >= 1 (F == 1 when pooled)
//! speaker_len  u32
//! speaker_id   speaker_len bytes of UTF-8
//! pooled       u8       1 = pooled cells, 0 = full frame matrices
//! payload      L*T*F*d f32, layer-major, steps T..1, frame-major, channel
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Result, TrusError};
use crate::grid::{Cell, CellGrid, GridShape};
use crate::tensor::{pool_frames, ChannelVector, FrameMatrix};

pub const TAPE_MAGIC: [u8; 4] = *b"TRUS";
pub const TAPE_VERSION: u16 = 1;

/// Fixed-width part of the header, excluding the speaker id bytes.
const FIXED_HEADER_BYTES: usize = 4 + 2 + 2 + 2 + 4 + 4 + 4 + 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapeHeader {
    pub version: u16,
    pub num_layers: u16,
    pub num_steps: u16,
    pub channels: u32,
    pub frames: u32,
    pub speaker_id: String,
    pub pooled: bool,
}

impl TapeHeader {
    pub fn new(
        speaker_id: impl Into<String>,
        num_layers: u16,
        num_steps: u16,
        channels: u32,
        frames: u32,
        pooled: bool,
    ) -> Self {
        Self {
            version: TAPE_VERSION,
            num_layers,
            num_steps,
            channels,
            frames,
            speaker_id: speaker_id.into(),
            pooled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_steps == 0 || self.channels == 0 || self.frames == 0 {
            return Err(TrusError::InvalidHeader(format!(
                "zero dimension in L={} T={} d={} F={}",
                self.num_layers, self.num_steps, self.channels, self.frames
            )));
        }
        if self.pooled && self.frames != 1 {
            return Err(TrusError::InvalidHeader(format!(
                "pooled tape must have F=1, found F={}",
                self.frames
            )));
        }
        if u32::try_from(self.speaker_id.len()).is_err() {
            return Err(TrusError::InvalidHeader("speaker id too long".into()));
        }
        Ok(())
    }

    pub fn grid_shape(&self) -> GridShape {
        GridShape::new(self.num_layers.into(), self.num_steps.into())
    }

    pub fn header_bytes(&self) -> usize {
        FIXED_HEADER_BYTES + self.speaker_id.len()
    }

    pub fn payload_bytes(&self) -> u64 {
        u64::from(self.num_layers) * u64::from(self.num_steps) * u64::from(self.frames) * u64::from(self.channels) * 4
    }

    /// Total encoded size, known before any payload is read.
    pub fn tape_bytes(&self) -> u64 {
        self.header_bytes() as u64 + self.payload_bytes()
    }

    /// True when two tapes can be compared cell by cell.
    pub fn same_geometry(&self, other: &TapeHeader) -> bool {
        self.num_layers == other.num_layers && self.num_steps == other.num_steps && self.channels == other.channels
    }
}

/// A full L × T grid of activations for one speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTape {
    header: TapeHeader,
    cells: CellGrid<FrameMatrix>,
}

impl ActivationTape {
    /// Validates the header and every cell against it.
    pub fn new(header: TapeHeader, cells: CellGrid<FrameMatrix>) -> Result<Self> {
        header.validate()?;
        if cells.shape() != header.grid_shape() {
            return Err(TrusError::ShapeMismatch(format!(
                "grid {}x{} vs header {}x{}",
                cells.shape().layers,
                cells.shape().steps,
                header.num_layers,
                header.num_steps
            )));
        }
        let (rows, cols) = (header.frames as usize, header.channels as usize);
        let mut offset = 0;
        for (cell, m) in cells.iter() {
            if m.rows() != rows || m.cols() != cols {
                return Err(TrusError::ShapeMismatch(format!(
                    "cell {cell} is {}x{}, header promises {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            if let Some(i) = m.first_non_finite() {
                return Err(TrusError::NonFiniteValue(offset + i));
            }
            offset += rows * cols;
        }
        Ok(Self { header, cells })
    }

    /// Pooled tape from one vector per cell.
    pub fn from_pooled(speaker_id: impl Into<String>, cells: CellGrid<ChannelVector>) -> Result<Self> {
        let shape = cells.shape();
        let d = cells.values().first().map_or(0, |v| v.len());
        let header = TapeHeader::new(
            speaker_id,
            dim_u16(shape.layers, "layers")?,
            dim_u16(shape.steps, "steps")?,
            dim_u32(d, "channels")?,
            1,
            true,
        );
        Self::new(header, cells.map(|_, v| FrameMatrix::from_vector(v)))
    }

    pub fn header(&self) -> &TapeHeader {
        &self.header
    }

    pub fn speaker_id(&self) -> &str {
        &self.header.speaker_id
    }

    pub fn shape(&self) -> GridShape {
        self.cells.shape()
    }

    pub fn channels(&self) -> usize {
        self.header.channels as usize
    }

    pub fn cells(&self) -> &CellGrid<FrameMatrix> {
        &self.cells
    }

    pub fn cell(&self, cell: Cell) -> Option<&FrameMatrix> {
        self.cells.get(cell)
    }

    /// Frame-mean of one cell (the cell itself for pooled tapes).
    pub fn pooled_cell(&self, cell: Cell) -> Result<ChannelVector> {
        let m = self
            .cells
            .get(cell)
            .ok_or_else(|| TrusError::ShapeMismatch(format!("cell {cell} outside tape")))?;
        pool_frames(m)
    }

    /// Every cell frame-pooled.
    pub fn pooled_grid(&self) -> Result<CellGrid<ChannelVector>> {
        CellGrid::try_from_fn(self.shape(), |c| self.pooled_cell(c))
    }

    pub fn to_pooled(&self) -> Result<ActivationTape> {
        if self.header.pooled {
            return Ok(self.clone());
        }
        Self::from_pooled(self.header.speaker_id.clone(), self.pooled_grid()?)
    }

    pub fn into_parts(self) -> (TapeHeader, CellGrid<FrameMatrix>) {
        (self.header, self.cells)
    }

    pub fn write_to_path(&self, path: &Path) -> Result<u64> {
        let file = File::create(path).map_err(TrusError::SinkFailure)?;
        let mut w = BufWriter::new(file);
        let n = write_tape(self, &mut w)?;
        w.flush().map_err(TrusError::SinkFailure)?;
        Ok(n)
    }

    pub fn read_from_path(path: &Path) -> Result<ActivationTape> {
        read_tape(&mut BufReader::new(File::open(path)?))
    }
}

pub(crate) fn dim_u16(n: usize, what: &str) -> Result<u16> {
    u16::try_from(n).map_err(|_| TrusError::InvalidHeader(format!("{what} = {n} exceeds u16")))
}

pub(crate) fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| TrusError::InvalidHeader(format!("{what} = {n} exceeds u32")))
}

/// Serializes `tape`; returns the number of bytes written.
pub fn write_tape<W: Write>(tape: &ActivationTape, sink: &mut W) -> Result<u64> {
    let h = &tape.header;
    let mut head = Vec::with_capacity(h.header_bytes());
    head.extend_from_slice(&TAPE_MAGIC);
    head.extend_from_slice(&h.version.to_le_bytes());
    head.extend_from_slice(&h.num_layers.to_le_bytes());
    head.extend_from_slice(&h.num_steps.to_le_bytes());
    head.extend_from_slice(&h.channels.to_le_bytes());
    head.extend_from_slice(&h.frames.to_le_bytes());
    head.extend_from_slice(&(h.speaker_id.len() as u32).to_le_bytes());
    head.extend_from_slice(h.speaker_id.as_bytes());
    head.push(u8::from(h.pooled));
    sink.write_all(&head).map_err(TrusError::SinkFailure)?;

    let mut buf = Vec::with_capacity(h.frames as usize * h.channels as usize * 4);
    for m in tape.cells.values() {
        buf.clear();
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf).map_err(TrusError::SinkFailure)?;
    }
    Ok(h.tape_bytes())
}

fn read_exact_or<R: Read>(src: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => TrusError::TruncatedPayload(format!("stream ended inside {what}")),
        _ => TrusError::Io(e),
    })
}

fn read_u16<R: Read>(src: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_or(src, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(src: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(src, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_header<R: Read>(src: &mut R) -> Result<TapeHeader> {
    let mut magic = [0u8; 4];
    read_exact_or(src, &mut magic, "magic")?;
    if magic != TAPE_MAGIC {
        return Err(TrusError::BadMagic(magic));
    }
    let version = read_u16(src, "version")?;
    if version != TAPE_VERSION {
        return Err(TrusError::VersionUnsupported(version));
    }
    let num_layers = read_u16(src, "header")?;
    let num_steps = read_u16(src, "header")?;
    let channels = read_u32(src, "header")?;
    let frames = read_u32(src, "header")?;
    let id_len = read_u32(src, "header")? as usize;
    let mut id = vec![0u8; id_len];
    read_exact_or(src, &mut id, "speaker id")?;
    let speaker_id = String::from_utf8(id).map_err(|_| TrusError::InvalidHeader("speaker id is not UTF-8".into()))?;
    let mut flag = [0u8; 1];
    read_exact_or(src, &mut flag, "pooled flag")?;
    let pooled = match flag[0] {
        0 => false,
        1 => true,
        other => return Err(TrusError::InvalidHeader(format!("pooled flag {other}"))),
    };
    let header = TapeHeader {
        version,
        num_layers,
        num_steps,
        channels,
        frames,
        speaker_id,
        pooled,
    };
    header.validate()?;
    Ok(header)
}

/// Reads exactly one tape from `src`, leaving any trailing bytes unread.
pub fn read_tape<R: Read>(src: &mut R) -> Result<ActivationTape> {
    let header = read_header(src)?;
    let shape = header.grid_shape();
    let (rows, cols) = (header.frames as usize, header.channels as usize);
    let cell_floats = rows * cols;
    let mut bytes = vec![0u8; cell_floats * 4];
    let mut offset = 0usize;
    let cells = CellGrid::try_from_fn(shape, |cell| {
        src.read_exact(&mut bytes).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => TrusError::TruncatedPayload(format!(
                "payload ended at cell {cell}; header promises {} payload bytes",
                header.payload_bytes()
            )),
            _ => TrusError::Io(e),
        })?;
        let mut data = Vec::with_capacity(cell_floats);
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(TrusError::NonFiniteValue(offset + i));
            }
            data.push(v);
        }
        offset += cell_floats;
        FrameMatrix::new(rows, cols, data)
    })?;
    ActivationTape::new(header, cells)
}
