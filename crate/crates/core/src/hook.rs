// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation hooks invoked at every (layer, flow step) during synthesis.

use crate::error::Result;
use crate::grid::Cell;
use crate::selection::InterventionMask;
use crate::steering::{apply_steering, check_strength, SteeringGrid};
use crate::tensor::FrameMatrix;

/// Receives each block's FFN output and may replace it.
///
/// Returning `Ok(None)` leaves the activations untouched. A replacement must
/// keep the input's shape.
pub trait ActivationHook {
    fn intervene(&mut self, cell: Cell, activations: &FrameMatrix) -> Result<Option<FrameMatrix>>;
}

impl<F> ActivationHook for F
where
    F: FnMut(Cell, &FrameMatrix) -> Result<Option<FrameMatrix>>,
{
    fn intervene(&mut self, cell: Cell, activations: &FrameMatrix) -> Result<Option<FrameMatrix>> {
        self(cell, activations)
    }
}

/// Applies cached directions at the masked cells.
#[derive(Debug, Clone, Copy)]
pub struct SteeringHook<'a> {
    grid: &'a SteeringGrid,
    mask: &'a InterventionMask,
    alpha: f64,
}

impl<'a> SteeringHook<'a> {
    /// Uses the grid's own strength.
    pub fn new(grid: &'a SteeringGrid, mask: &'a InterventionMask) -> Self {
        Self {
            grid,
            mask,
            alpha: grid.alpha(),
        }
    }

    /// Overrides the strength; zero turns the hook into a no-op.
    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        check_strength(alpha)?;
        self.alpha = alpha;
        Ok(self)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl ActivationHook for SteeringHook<'_> {
    fn intervene(&mut self, cell: Cell, activations: &FrameMatrix) -> Result<Option<FrameMatrix>> {
        if self.alpha == 0.0 || !self.mask.contains(cell) {
            return Ok(None);
        }
        match self.grid.direction(cell) {
            Some(s) => apply_steering(activations, s, self.alpha).map(Some),
            None => Ok(None),
        }
    }
}
