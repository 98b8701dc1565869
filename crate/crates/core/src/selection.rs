// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dynamic choice of intervention points.
//!
//! For an opt-out speaker, `c(l, t)` is the cosine between its pooled
//! activation and the prototype. Layer means `c̄(l)` give a global mean `μ`
//! and population standard deviation `σ`; the threshold is `τ = μ + kσ`.
//! Layers with `c̄(l) < τ` are selected, and within them only steps with
//! `c(l, t) < c̄(l)`. Both comparisons are strict.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrusError};
use crate::grid::{Cell, CellGrid, GridShape};
use crate::prototype::IdPrototype;
use crate::tape::ActivationTape;
use crate::tensor::cosine_sim;

/// Default tolerance multiplier (the μ+σ band).
pub const DEFAULT_K: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityProfile {
    c: CellGrid<Option<f64>>,
    layer_means: Vec<Option<f64>>,
    mu: f64,
    sigma: f64,
    k: f64,
    tau: f64,
}

/// Mean taken relative to the first element, exact for constant input.
fn shifted_mean(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

impl SimilarityProfile {
    /// Statistics from a raw similarity grid. `None` marks a degenerate cell;
    /// it is left out of its layer mean, and a layer with no valid cell is
    /// left out of `μ` and `σ`.
    pub fn from_similarities(c: CellGrid<Option<f64>>, k: f64) -> Result<Self> {
        if !k.is_finite() {
            return Err(TrusError::Validation(format!("tolerance k = {k}")));
        }
        let shape = c.shape();
        let layer_means: Vec<Option<f64>> = (1..=shape.layers)
            .map(|l| {
                let valid: Vec<f64> = c.layer(l).iter().flatten().copied().collect();
                (!valid.is_empty()).then(|| shifted_mean(&valid))
            })
            .collect();
        let present: Vec<f64> = layer_means.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(TrusError::Validation("every similarity cell is degenerate".into()));
        }
        let n = present.len() as f64;
        let mu = shifted_mean(&present);
        let var = present.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n;
        let sigma = var.sqrt();
        Ok(Self {
            c,
            layer_means,
            mu,
            sigma,
            k,
            tau: mu + k * sigma,
        })
    }

    /// Same similarities, different tolerance.
    pub fn with_k(&self, k: f64) -> Self {
        Self {
            k,
            tau: self.mu + k * self.sigma,
            ..self.clone()
        }
    }

    pub fn shape(&self) -> GridShape {
        self.c.shape()
    }

    pub fn similarity(&self, cell: Cell) -> Option<f64> {
        self.c.get(cell).copied().flatten()
    }

    pub fn similarities(&self) -> &CellGrid<Option<f64>> {
        &self.c
    }

    /// `c̄` for a 1-based layer.
    pub fn layer_mean(&self, layer: usize) -> Option<f64> {
        self.layer_means.get(layer.wrapping_sub(1)).copied().flatten()
    }

    pub fn layer_means(&self) -> &[Option<f64>] {
        &self.layer_means
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn summary(&self) -> ProfileSummary {
        ProfileSummary {
            mu: self.mu,
            sigma: self.sigma,
            tau: self.tau,
            k: self.k,
        }
    }

    /// Writes one row per cell: `layer,step,c,layer_mean,mu,sigma,tau`.
    /// Degenerate similarities are written as empty fields.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["layer", "step", "c", "layer_mean", "mu", "sigma", "tau"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (cell, c) in self.c.iter() {
            w.write_record([
                cell.layer.to_string(),
                cell.step.to_string(),
                opt(*c),
                opt(self.layer_mean(cell.layer)),
                self.mu.to_string(),
                self.sigma.to_string(),
                self.tau.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(TrusError::SinkFailure)?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> TrusError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => TrusError::SinkFailure(io),
        other => TrusError::Validation(format!("csv: {other:?}")),
    }
}

/// `(μ, σ, τ, k)` of a profile, kept with registry records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub mu: f64,
    pub sigma: f64,
    pub tau: f64,
    pub k: f64,
}

/// Cosine similarity of every pooled opt-out cell to the prototype.
pub fn compute_profile(opt_tape: &ActivationTape, proto: &IdPrototype, k: f64) -> Result<SimilarityProfile> {
    proto.check_compatible(opt_tape)?;
    let c = CellGrid::try_from_fn(opt_tape.shape(), |cell| {
        let x = opt_tape.pooled_cell(cell)?;
        let p = proto.cell(cell).expect("compatible shape");
        match cosine_sim(&x, p) {
            Ok(v) => Ok(Some(v)),
            Err(TrusError::DegenerateVector(_)) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    SimilarityProfile::from_similarities(c, k)
}

/// Sparse set of (layer, step) cells to steer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionMask {
    cells: BTreeSet<Cell>,
    selected_layers: BTreeSet<usize>,
}

impl InterventionMask {
    /// Fails if a cell's layer is not among `selected_layers`.
    pub fn new(cells: BTreeSet<Cell>, selected_layers: BTreeSet<usize>) -> Result<Self> {
        if let Some(c) = cells.iter().find(|c| !selected_layers.contains(&c.layer)) {
            return Err(TrusError::Validation(format!(
                "mask cell {c} lies in an unselected layer"
            )));
        }
        Ok(Self { cells, selected_layers })
    }

    pub fn contains(&self, cell: Cell) -> bool {
        self.cells.contains(&cell)
    }

    pub fn cells(&self) -> &BTreeSet<Cell> {
        &self.cells
    }

    pub fn selected_layers(&self) -> &BTreeSet<usize> {
        &self.selected_layers
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn is_subset(&self, other: &InterventionMask) -> bool {
        self.cells.is_subset(&other.cells) && self.selected_layers.is_subset(&other.selected_layers)
    }

    /// Drops cells for which `keep` is false; layers stay selected.
    pub fn retain(&mut self, mut keep: impl FnMut(Cell) -> bool) {
        self.cells.retain(|c| keep(*c));
    }
}

fn mask_for_layers(profile: &SimilarityProfile, mut layer_selected: impl FnMut(f64) -> bool) -> InterventionMask {
    let shape = profile.shape();
    let mut mask = InterventionMask::default();
    for layer in 1..=shape.layers {
        let Some(mean) = profile.layer_mean(layer) else {
            continue;
        };
        if !layer_selected(mean) {
            continue;
        }
        mask.selected_layers.insert(layer);
        for step in (1..=shape.steps).rev() {
            let cell = Cell::new(layer, step);
            if profile.similarity(cell).is_some_and(|c| c < mean) {
                mask.cells.insert(cell);
            }
        }
    }
    mask
}

/// Layers with `c̄ < τ`, then steps with `c < c̄`.
pub fn select_mask(profile: &SimilarityProfile) -> InterventionMask {
    let tau = profile.tau();
    mask_for_layers(profile, |mean| mean < tau)
}

/// Every layer selected; only the step filter applies.
pub fn select_all_layers(profile: &SimilarityProfile) -> InterventionMask {
    mask_for_layers(profile, |_| true)
}

/// Layer-selection bands compared in the threshold ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Band {
    MuMinusSigma,
    Mu,
    MuPlusSigma,
    All,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::MuMinusSigma, Band::Mu, Band::MuPlusSigma, Band::All];

    pub fn label(self) -> &'static str {
        match self {
            Band::MuMinusSigma => "mu-sigma",
            Band::Mu => "mu",
            Band::MuPlusSigma => "mu+sigma",
            Band::All => "all",
        }
    }

    /// Tolerance multiplier; `None` for the all-layers band.
    pub fn k(self) -> Option<f64> {
        match self {
            Band::MuMinusSigma => Some(-1.0),
            Band::Mu => Some(0.0),
            Band::MuPlusSigma => Some(1.0),
            Band::All => None,
        }
    }

    pub fn mask(self, profile: &SimilarityProfile) -> InterventionMask {
        match self.k() {
            Some(k) => select_mask(&profile.with_k(k)),
            None => select_all_layers(profile),
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Band {
    type Err = TrusError;

    fn from_str(s: &str) -> Result<Self> {
        Band::ALL
            .into_iter()
            .find(|b| b.label() == s)
            .ok_or_else(|| TrusError::Validation(format!("unknown band '{s}'")))
    }
}

pub fn ablation_masks(profile: &SimilarityProfile) -> BTreeMap<Band, InterventionMask> {
    Band::ALL.into_iter().map(|b| (b, b.mask(profile))).collect()
}
