// SPDX-License-Identifier: MIT OR Apache-2.0

//! Identity steering directions and projection-subtraction intervention.
//!
//! A direction points from the prototype toward the opt-out speaker's pooled
//! activation. Steering removes `alpha` times the projection of each frame
//! onto that direction; everything orthogonal to it is left alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrusError};
use crate::grid::{Cell, CellGrid, GridShape};
use crate::prototype::{sidecar_path, IdPrototype};
use crate::tape::ActivationTape;
use crate::tensor::{dot, squared_norm, ChannelVector, FrameMatrix, EPS};

/// Default steering strength.
pub const DEFAULT_ALPHA: f64 = 1.2;

/// Allowed deviation of a direction's norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-4;

/// Unit direction `(x_opt - p) / ‖x_opt - p‖`.
pub fn compute_steering_vector(x_opt: &[f32], p: &[f32]) -> Result<ChannelVector> {
    if x_opt.len() != p.len() {
        return Err(TrusError::ShapeMismatch(format!(
            "activation length {} vs prototype length {}",
            x_opt.len(),
            p.len()
        )));
    }
    let diff: Vec<f64> = x_opt
        .iter()
        .zip(p)
        .map(|(&a, &b)| f64::from(a) - f64::from(b))
        .collect();
    let sq: f64 = diff.iter().map(|v| v * v).sum();
    if sq < EPS {
        return Err(TrusError::DegenerateDirection);
    }
    let norm = sq.sqrt();
    Ok(ChannelVector::new(
        diff.into_iter().map(|v| (v / norm) as f32).collect(),
    ))
}

/// Rejects NaN and negative strengths. Zero is a valid no-op strength at
/// serving time; grids themselves require a positive value.
pub fn check_strength(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(TrusError::InvalidStrength(alpha))
    }
}

fn check_direction(cols: usize, s: &[f32]) -> Result<()> {
    if cols != s.len() {
        return Err(TrusError::ShapeMismatch(format!(
            "frames have {cols} channels, direction has {}",
            s.len()
        )));
    }
    let norm = squared_norm(s).sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(TrusError::NonUnitDirection(norm));
    }
    Ok(())
}

/// Steers every row of a row-major `rows × s.len()` buffer in place.
///
/// Any finite `alpha` is accepted here; range checks belong to callers that
/// store a strength.
pub fn apply_steering_in_place(frames: &mut [f32], s: &[f32], alpha: f64) -> Result<()> {
    if !alpha.is_finite() {
        return Err(TrusError::InvalidStrength(alpha));
    }
    let cols = s.len();
    if cols == 0 || !frames.len().is_multiple_of(cols) {
        return Err(TrusError::ShapeMismatch(format!(
            "{} values do not form rows of width {cols}",
            frames.len()
        )));
    }
    check_direction(cols, s)?;
    for row in frames.chunks_exact_mut(cols) {
        let k = alpha * dot(row, s);
        for (x, &sv) in row.iter_mut().zip(s) {
            *x = (f64::from(*x) - k * f64::from(sv)) as f32;
        }
    }
    Ok(())
}

/// `x_f - alpha (x_f · s) s` for each frame `x_f`.
pub fn apply_steering(x: &FrameMatrix, s: &[f32], alpha: f64) -> Result<FrameMatrix> {
    check_direction(x.cols(), s)?;
    let mut out = x.clone();
    apply_steering_in_place(out.as_mut_slice(), s, alpha)?;
    Ok(out)
}

/// Precomputed directions for one opt-out speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringGrid {
    cells: CellGrid<Option<ChannelVector>>,
    alpha: f64,
}

impl SteeringGrid {
    pub fn new(cells: CellGrid<Option<ChannelVector>>, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(TrusError::InvalidStrength(alpha));
        }
        for (cell, v) in cells.iter() {
            if let Some(v) = v {
                let norm = v.norm();
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(TrusError::Validation(format!("direction at {cell} has norm {norm}")));
                }
            }
        }
        Ok(Self { cells, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn shape(&self) -> GridShape {
        self.cells.shape()
    }

    pub fn direction(&self, cell: Cell) -> Option<&ChannelVector> {
        self.cells.get(cell).and_then(Option::as_ref)
    }

    pub fn cells(&self) -> &CellGrid<Option<ChannelVector>> {
        &self.cells
    }

    pub fn present_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.cells.iter().filter(|(_, v)| v.is_some()).map(|(c, _)| c)
    }

    pub fn present_count(&self) -> usize {
        self.cells.values().iter().filter(|v| v.is_some()).count()
    }

    /// Cells skipped because the activation coincided with the prototype.
    pub fn degenerate_cells(&self) -> Vec<Cell> {
        self.cells.iter().filter(|(_, v)| v.is_none()).map(|(c, _)| c).collect()
    }

    /// Presence bitmap in tape order, `'1'` where a direction exists.
    pub fn presence_bitmap(&self) -> String {
        self.cells
            .values()
            .iter()
            .map(|v| if v.is_some() { '1' } else { '0' })
            .collect()
    }

    /// Pooled tape holding each direction, zeros where absent.
    pub fn to_tape(&self, speaker_id: &str, channels: usize) -> Result<ActivationTape> {
        ActivationTape::from_pooled(
            speaker_id,
            self.cells
                .map(|_, v| v.clone().unwrap_or_else(|| ChannelVector::zeros(channels))),
        )
    }

    /// Inverse of [`SteeringGrid::to_tape`] plus [`SteeringGrid::presence_bitmap`].
    pub fn from_tape(tape: &ActivationTape, presence: &str, alpha: f64) -> Result<Self> {
        let shape = tape.shape();
        if presence.len() != shape.len() {
            return Err(TrusError::Validation(format!(
                "presence bitmap has {} entries, grid has {}",
                presence.len(),
                shape.len()
            )));
        }
        let bits: Vec<bool> = presence
            .chars()
            .map(|ch| match ch {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(TrusError::Validation(format!("bitmap character {other:?}"))),
            })
            .collect::<Result<_>>()?;
        let cells = CellGrid::try_from_fn(shape, |cell| {
            let i = shape.index(cell).expect("cell from shape");
            Ok::<_, TrusError>(if bits[i] { Some(tape.pooled_cell(cell)?) } else { None })
        })?;
        Self::new(cells, alpha)
    }
}

/// Directions for every cell where the opt-out activation differs from the
/// prototype.
pub fn compute_steering_grid(opt_tape: &ActivationTape, proto: &IdPrototype, alpha: f64) -> Result<SteeringGrid> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(TrusError::InvalidStrength(alpha));
    }
    proto.check_compatible(opt_tape)?;
    let cells = CellGrid::try_from_fn(opt_tape.shape(), |cell| {
        let x = opt_tape.pooled_cell(cell)?;
        let p = proto.cell(cell).expect("compatible shape");
        match compute_steering_vector(&x, p) {
            Ok(s) => Ok(Some(s)),
            Err(TrusError::DegenerateDirection) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    SteeringGrid::new(cells, alpha)
}

#[derive(Debug, Serialize, Deserialize)]
struct GridSidecar {
    alpha: f64,
    presence: String,
}

/// Pooled direction tape at `path`, `{"alpha", "presence"}` at `<path>.json`.
pub fn save_steering_grid(grid: &SteeringGrid, speaker_id: &str, channels: usize, path: &Path) -> Result<()> {
    grid.to_tape(speaker_id, channels)?.write_to_path(path)?;
    let meta = GridSidecar {
        alpha: grid.alpha,
        presence: grid.presence_bitmap(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?).map_err(TrusError::SinkFailure)?;
    Ok(())
}

pub fn load_steering_grid(path: &Path) -> Result<SteeringGrid> {
    let meta_path = sidecar_path(path);
    if !meta_path.exists() {
        return Err(TrusError::MissingMetadata(meta_path));
    }
    let meta: GridSidecar = serde_json::from_slice(&fs::read(&meta_path)?)?;
    let tape = ActivationTape::read_from_path(path)?;
    SteeringGrid::from_tape(&tape, &meta.presence, meta.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototype::build_prototype;
    use proptest::prelude::*;

    fn rows(m: &FrameMatrix) -> Vec<Vec<f32>> {
        m.iter_rows().map(<[f32]>::to_vec).collect()
    }

    #[test]
    fn projection_examples() {
        let x = FrameMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let s = [1.0, 0.0];
        assert_eq!(rows(&apply_steering(&x, &s, 1.0).unwrap()), vec![vec![0.0, 4.0]]);
        let over = apply_steering(&x, &s, 1.2).unwrap();
        assert!((over.row(0)[0] + 0.6).abs() < 1e-6);
        assert_eq!(over.row(0)[1], 4.0);
        assert_eq!(apply_steering(&x, &s, 0.0).unwrap(), x);
    }

    #[test]
    fn projection_errors() {
        let x = FrameMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert!(matches!(
            apply_steering(&x, &[1.0, 0.0, 0.0], 1.0),
            Err(TrusError::ShapeMismatch(_))
        ));
        assert!(matches!(
            apply_steering(&x, &[2.0, 0.0], 1.0),
            Err(TrusError::NonUnitDirection(_))
        ));
    }

    #[test]
    fn direction_examples() {
        let s = compute_steering_vector(&[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.0]);
        assert!(matches!(
            compute_steering_vector(&[0.5, 0.25], &[0.5, 0.25]),
            Err(TrusError::DegenerateDirection)
        ));
    }

    fn pooled(id: &str, shape: GridShape, f: impl FnMut(Cell) -> ChannelVector) -> ActivationTape {
        ActivationTape::from_pooled(id, CellGrid::from_fn(shape, f)).unwrap()
    }

    #[test]
    fn grid_skips_cells_equal_to_prototype() {
        let shape = GridShape::new(2, 2);
        let t = pooled("x", shape, |c| ChannelVector::new(vec![c.layer as f32, c.step as f32]));
        let proto = build_prototype([&t]).unwrap();
        let grid = compute_steering_grid(&t, &proto, 1.2).unwrap();
        assert_eq!(grid.present_count(), 0);
        assert_eq!(grid.degenerate_cells().len(), 4);
    }

    #[test]
    fn grid_has_one_direction_per_distinct_cell() {
        let shape = GridShape::new(2, 2);
        let r = pooled("r", shape, |_| ChannelVector::new(vec![0.0, 0.0, 1.0]));
        let opt = pooled("o", shape, |c| {
            ChannelVector::new(vec![c.layer as f32, -(c.step as f32), 1.0])
        });
        let proto = build_prototype([&r]).unwrap();
        let grid = compute_steering_grid(&opt, &proto, 1.2).unwrap();
        assert_eq!(grid.present_count(), 4);
        for cell in shape.cells() {
            let s = grid.direction(cell).unwrap();
            let (a, b) = (cell.layer as f64, -(cell.step as f64));
            let n = (a * a + b * b).sqrt();
            assert!((f64::from(s[0]) - a / n).abs() < 1e-6);
            assert!((f64::from(s[1]) - b / n).abs() < 1e-6);
            assert_eq!(s[2], 0.0);
        }
        assert!(matches!(
            compute_steering_grid(&opt, &proto, 0.0),
            Err(TrusError::InvalidStrength(_))
        ));
        assert!(matches!(
            compute_steering_grid(&opt, &proto, -1.0),
            Err(TrusError::InvalidStrength(_))
        ));
    }

    #[test]
    fn grid_file_round_trip() {
        let shape = GridShape::new(2, 3);
        let r = pooled("r", shape, |_| ChannelVector::new(vec![1.0, 1.0]));
        let opt = pooled("o", shape, |c| {
            if c.step == 2 {
                ChannelVector::new(vec![1.0, 1.0])
            } else {
                ChannelVector::new(vec![c.layer as f32, 0.5])
            }
        });
        let proto = build_prototype([&r]).unwrap();
        let grid = compute_steering_grid(&opt, &proto, 0.7).unwrap();
        assert_eq!(grid.present_count(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.tape");
        save_steering_grid(&grid, "o", 2, &path).unwrap();
        assert_eq!(load_steering_grid(&path).unwrap(), grid);
    }

    fn unit_vec(len: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-1.0f32..1.0, len)
            .prop_filter("non-degenerate", |v| squared_norm(v) > 1e-2)
            .prop_map(|v| crate::tensor::l2_normalize(&v).unwrap().into_inner())
    }

    proptest! {
        #[test]
        fn random_direction_is_unit_and_aligned(
            x in prop::collection::vec(-10.0f32..10.0, 16),
            p in prop::collection::vec(-10.0f32..10.0, 16),
        ) {
            let diff: Vec<f32> = x.iter().zip(&p).map(|(a, b)| a - b).collect();
            prop_assume!(squared_norm(&diff) > 1e-6);
            let s = compute_steering_vector(&x, &p).unwrap();
            prop_assert!((s.norm() - 1.0).abs() < 1e-6);
            prop_assert!((crate::tensor::cosine_sim(&s, &diff).unwrap() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn orthogonal_part_is_preserved(
            (s, x) in (1usize..48).prop_flat_map(|d| (unit_vec(d), prop::collection::vec(-5.0f32..5.0, d))),
            alpha in 0.0f64..3.0,
        ) {
            let m = FrameMatrix::new(1, x.len(), x.clone()).unwrap();
            let out = apply_steering(&m, &s, alpha).unwrap();
            let proj = dot(&x, &s);
            let xn = squared_norm(&x).sqrt();
            let mut err = 0.0f64;
            for i in 0..x.len() {
                let delta = f64::from(out.row(0)[i]) - f64::from(x[i]);
                let expected = -alpha * proj * f64::from(s[i]);
                err += (delta - expected).powi(2);
            }
            prop_assert!(err.sqrt() <= 1e-5 * xn);
        }
    }
}
