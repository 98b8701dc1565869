// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer × flow-step addressing.
//!
//! Layers are numbered `1..=L`. Flow steps are numbered `1..=T` and run in
//! descending order during generation (`T` first, `1` last), so storage
//! position 0 of every layer holds step `T`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// One (layer, flow step) intervention point, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub layer: usize,
    pub step: usize,
}

impl Cell {
    pub const fn new(layer: usize, step: usize) -> Self {
        Self { layer, step }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(l={}, t={})", self.layer, self.step)
    }
}

/// Dimensions of a layer × step grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub layers: usize,
    pub steps: usize,
}

impl GridShape {
    pub const fn new(layers: usize, steps: usize) -> Self {
        Self { layers, steps }
    }

    pub const fn len(&self) -> usize {
        self.layers * self.steps
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, cell: Cell) -> bool {
        (1..=self.layers).contains(&cell.layer) && (1..=self.steps).contains(&cell.step)
    }

    /// Storage position: layer-major, steps descending `T..1`.
    pub fn index(&self, cell: Cell) -> Option<usize> {
        self.contains(cell)
            .then(|| (cell.layer - 1) * self.steps + (self.steps - cell.step))
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        let layer = index / self.steps + 1;
        let step = self.steps - index % self.steps;
        Cell { layer, step }
    }

    /// Every cell in storage order.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.len()).map(|i| self.cell_at(i))
    }
}

/// A value per (layer, step) cell, stored in tape order.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid<T> {
    shape: GridShape,
    items: Vec<T>,
}

impl<T> CellGrid<T> {
    /// Panics if `items.len()` does not match the shape.
    pub fn from_vec(shape: GridShape, items: Vec<T>) -> Self {
        assert_eq!(items.len(), shape.len(), "grid item count");
        Self { shape, items }
    }

    pub fn from_fn(shape: GridShape, mut f: impl FnMut(Cell) -> T) -> Self {
        let items = shape.cells().map(&mut f).collect();
        Self { shape, items }
    }

    pub fn try_from_fn<E>(shape: GridShape, mut f: impl FnMut(Cell) -> Result<T, E>) -> Result<Self, E> {
        let items = shape.cells().map(&mut f).collect::<Result<_, _>>()?;
        Ok(Self { shape, items })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn get(&self, cell: Cell) -> Option<&T> {
        self.shape.index(cell).map(|i| &self.items[i])
    }

    pub fn get_mut(&mut self, cell: Cell) -> Option<&mut T> {
        self.shape.index(cell).map(|i| &mut self.items[i])
    }

    /// Values in tape order.
    pub fn values(&self) -> &[T] {
        &self.items
    }

    pub fn into_values(self) -> Vec<T> {
        self.items
    }

    pub fn iter(&self) -> impl Iterator<Item = (Cell, &T)> + '_ {
        self.items.iter().enumerate().map(|(i, v)| (self.shape.cell_at(i), v))
    }

    /// Values of one layer, ordered `T..1`.
    pub fn layer(&self, layer: usize) -> &[T] {
        let start = (layer - 1) * self.shape.steps;
        &self.items[start..start + self.shape.steps]
    }

    pub fn map<U>(&self, mut f: impl FnMut(Cell, &T) -> U) -> CellGrid<U> {
        CellGrid {
            shape: self.shape,
            items: self.iter().map(|(c, v)| f(c, v)).collect(),
        }
    }
}
