// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use rand::Rng;
use trus::grid::{Cell, CellGrid, GridShape};
use trus::tape::{ActivationTape, TapeHeader};
use trus::tensor::{ChannelVector, FrameMatrix};

pub fn pooled_tape(id: &str, shape: GridShape, f: impl Fn(Cell) -> Vec<f32>) -> ActivationTape {
    ActivationTape::from_pooled(id, CellGrid::from_fn(shape, |c| ChannelVector::new(f(c)))).unwrap()
}

pub fn random_vec(rng: &mut impl Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Full or pooled tape with uniform entries in `[-scale, scale)`.
pub fn random_tape(
    rng: &mut impl Rng,
    id: &str,
    shape: GridShape,
    channels: usize,
    frames: usize,
    pooled: bool,
) -> ActivationTape {
    let frames = if pooled { 1 } else { frames };
    let header = TapeHeader::new(
        id,
        shape.layers as u16,
        shape.steps as u16,
        channels as u32,
        frames as u32,
        pooled,
    );
    let cells = CellGrid::from_fn(shape, |_| {
        FrameMatrix::new(frames, channels, random_vec(rng, frames * channels, 2.0)).unwrap()
    });
    ActivationTape::new(header, cells).unwrap()
}

pub fn bytes_of(tape: &ActivationTape) -> Vec<u8> {
    let mut out = Vec::new();
    trus::tape::write_tape(tape, &mut out).unwrap();
    out
}
