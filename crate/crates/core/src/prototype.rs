// SPDX-License-Identifier: MIT OR Apache-2.0

//! ID-prototype: the per-cell centroid of retain speakers' pooled activations.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrusError};
use crate::grid::{Cell, CellGrid, GridShape};
use crate::tape::ActivationTape;
use crate::tensor::ChannelVector;

/// Pool size used when none is given.
pub const DEFAULT_POOL_SIZE: usize = 30;

/// Speaker id written into the header of a saved prototype tape.
pub const PROTOTYPE_TAPE_ID: &str = "__prototype__";

#[derive(Debug, Clone, PartialEq)]
pub struct IdPrototype {
    grid: CellGrid<ChannelVector>,
    source_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    n: usize,
    source_ids: Vec<String>,
}

impl IdPrototype {
    /// Checks that ids are non-empty and pairwise distinct.
    pub fn new(grid: CellGrid<ChannelVector>, source_ids: Vec<String>) -> Result<Self> {
        if source_ids.is_empty() {
            return Err(TrusError::EmptyPool);
        }
        let mut seen = HashSet::new();
        for id in &source_ids {
            if !seen.insert(id.as_str()) {
                return Err(TrusError::DuplicateSpeaker(id.clone()));
            }
        }
        let d = grid.values()[0].len();
        if grid.values().iter().any(|v| v.len() != d) {
            return Err(TrusError::ShapeMismatch("prototype cells differ in length".into()));
        }
        Ok(Self { grid, source_ids })
    }

    pub fn grid(&self) -> &CellGrid<ChannelVector> {
        &self.grid
    }

    pub fn cell(&self, cell: Cell) -> Option<&ChannelVector> {
        self.grid.get(cell)
    }

    pub fn shape(&self) -> GridShape {
        self.grid.shape()
    }

    pub fn channels(&self) -> usize {
        self.grid.values()[0].len()
    }

    pub fn pool_size(&self) -> usize {
        self.source_ids.len()
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    /// Errors unless `tape` has the same L, T and d.
    pub fn check_compatible(&self, tape: &ActivationTape) -> Result<()> {
        if tape.shape() != self.shape() || tape.channels() != self.channels() {
            return Err(TrusError::ShapeMismatch(format!(
                "tape '{}' is {}x{}x{}, prototype is {}x{}x{}",
                tape.speaker_id(),
                tape.shape().layers,
                tape.shape().steps,
                tape.channels(),
                self.shape().layers,
                self.shape().steps,
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn to_tape(&self) -> Result<ActivationTape> {
        ActivationTape::from_pooled(PROTOTYPE_TAPE_ID, self.grid.clone())
    }
}

/// Averages the frame-pooled cells of `tapes`, one tape per speaker.
pub fn build_prototype<'a, I>(tapes: I) -> Result<IdPrototype>
where
    I: IntoIterator<Item = &'a ActivationTape>,
{
    let mut tapes = tapes.into_iter().peekable();
    let first = tapes.peek().ok_or(TrusError::EmptyPool)?;
    let header = first.header().clone();
    let shape = first.shape();
    let d = first.channels();

    let mut sums = vec![0.0f64; shape.len() * d];
    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    for tape in tapes {
        if !tape.header().same_geometry(&header) {
            return Err(TrusError::ShapeMismatch(format!(
                "tape '{}' does not match the geometry of '{}'",
                tape.speaker_id(),
                header.speaker_id
            )));
        }
        if !seen.insert(tape.speaker_id().to_owned()) {
            return Err(TrusError::DuplicateSpeaker(tape.speaker_id().to_owned()));
        }
        for (i, cell) in shape.cells().enumerate() {
            let pooled = tape.pooled_cell(cell)?;
            for (s, &v) in sums[i * d..(i + 1) * d].iter_mut().zip(pooled.iter()) {
                *s += f64::from(v);
            }
        }
        ids.push(tape.speaker_id().to_owned());
    }

    let n = ids.len() as f64;
    let grid = CellGrid::from_fn(shape, |cell| {
        let i = shape.index(cell).expect("cell from shape");
        ChannelVector::new(sums[i * d..(i + 1) * d].iter().map(|s| (s / n) as f32).collect())
    });
    IdPrototype::new(grid, ids)
}

/// `<path>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the pooled prototype tape to `path` and its metadata next to it.
pub fn save_prototype(proto: &IdPrototype, path: &Path) -> Result<()> {
    proto.to_tape()?.write_to_path(path)?;
    let sidecar = Sidecar {
        n: proto.pool_size(),
        source_ids: proto.source_ids.clone(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?).map_err(TrusError::SinkFailure)?;
    Ok(())
}

pub fn load_prototype(path: &Path) -> Result<IdPrototype> {
    let meta_path = sidecar_path(path);
    if !meta_path.exists() {
        return Err(TrusError::MissingMetadata(meta_path));
    }
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&meta_path)?)?;
    if sidecar.n != sidecar.source_ids.len() {
        return Err(TrusError::Validation(format!(
            "sidecar says n={} but lists {} source ids",
            sidecar.n,
            sidecar.source_ids.len()
        )));
    }
    let tape = ActivationTape::read_from_path(path)?;
    if !tape.header().pooled {
        return Err(TrusError::Validation("prototype tape is not pooled".into()));
    }
    let grid = tape.pooled_grid()?;
    IdPrototype::new(grid, sidecar.source_ids)
}
