// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy-scale evaluation: suppression, threshold bands and pool size.
//!
//! Every run is a pure function of [`EvalConfig`]. Speaker identities and
//! text seeds are derived from the master seed, so a stored
//! [`SeedManifest`] is enough to reproduce a report byte for byte.
//!
//! Paired comparisons share speaker, text seed and model; only the
//! intervention differs. Similarity is measured between the output
//! embedding and the speaker's identity direction. Content error is the
//! relative change of the output orthogonal to that direction.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TrusError};
use crate::grid::CellGrid;
use crate::pipeline::{serve, ServeOptions};
use crate::prototype::{build_prototype, IdPrototype};
use crate::registry::{OptOutPool, OptOutRecord, DEFAULT_MATCH_THRESHOLD};
use crate::selection::csv_err;
use crate::selection::{compute_profile, select_mask, Band, InterventionMask, DEFAULT_K};
use crate::steering::{check_strength, DEFAULT_ALPHA};
use crate::tape::ActivationTape;
use crate::toy::{
    content_error, identity_similarity, SynthesisOutput, ToyConfig, ToyModel, ToySpeaker, CALIBRATION_TEXT_SEED,
    DEFAULT_CHANNELS, DEFAULT_CONTENT_SEED, DEFAULT_FRAMES, DEFAULT_LAYERS, DEFAULT_STEPS,
};

pub const RETAIN: &str = "retain";
pub const SEEN_OPTOUT: &str = "seen-optout";
pub const UNSEEN_OPTOUT: &str = "unseen-optout";
pub const CONDITIONS: [&str; 3] = [RETAIN, SEEN_OPTOUT, UNSEEN_OPTOUT];

/// Fewest speakers a condition mean may be taken over.
pub const MIN_SPEAKERS_PER_CONDITION: usize = 10;
pub const DEFAULT_EVAL_SEED: u64 = 20_250_101;
pub const DEFAULT_POOL_SIZES: [usize; 3] = [10, 30, 50];
pub const DEFAULT_RESAMPLES: usize = 20;
pub const DEFAULT_RETAIN_POPULATION: usize = 100;

/// Column order of every report CSV.
pub const CSV_HEADER: [&str; 8] = ["condition", "speaker_id", "metric", "value", "k", "N", "alpha", "seed"];

/// Per-speaker metric names, in CSV order.
pub const METRICS: [&str; 7] = [
    "identity_similarity",
    "baseline_similarity",
    "content_error",
    "cells_steered",
    "layers_selected",
    "matched",
    "bit_identical",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub layers: usize,
    pub steps: usize,
    pub channels: usize,
    pub frames: usize,
    pub content_seed: u64,
    /// Retain speakers averaged into the prototype.
    pub n_retain: usize,
    /// Retain speakers whose outputs are checked (drawn from the prototype pool).
    pub n_retain_eval: usize,
    pub n_optout_seen: usize,
    pub n_optout_unseen: usize,
    pub k: f64,
    pub alpha: f64,
    pub match_threshold: f64,
    pub seed: u64,
    pub pool_sizes: Vec<usize>,
    /// Candidate retain speakers the pool ablation resamples from.
    pub retain_population: usize,
    pub resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            layers: DEFAULT_LAYERS,
            steps: DEFAULT_STEPS,
            channels: DEFAULT_CHANNELS,
            frames: DEFAULT_FRAMES,
            content_seed: DEFAULT_CONTENT_SEED,
            n_retain: 30,
            n_retain_eval: MIN_SPEAKERS_PER_CONDITION,
            n_optout_seen: MIN_SPEAKERS_PER_CONDITION,
            n_optout_unseen: MIN_SPEAKERS_PER_CONDITION,
            k: DEFAULT_K,
            alpha: DEFAULT_ALPHA,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            seed: DEFAULT_EVAL_SEED,
            pool_sizes: DEFAULT_POOL_SIZES.to_vec(),
            retain_population: DEFAULT_RETAIN_POPULATION,
            resamples: DEFAULT_RESAMPLES,
        }
    }
}

impl EvalConfig {
    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig::new(self.layers, self.steps, self.channels, self.frames, self.content_seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrusError::Config(msg));
        for (name, n) in [
            ("retain eval", self.n_retain_eval),
            ("seen opt-out", self.n_optout_seen),
            ("unseen opt-out", self.n_optout_unseen),
        ] {
            if n < MIN_SPEAKERS_PER_CONDITION {
                return bad(format!(
                    "{name} condition has {n} speakers, need at least {MIN_SPEAKERS_PER_CONDITION}"
                ));
            }
        }
        if self.n_retain_eval > self.n_retain {
            return bad(format!(
                "{} retain speakers evaluated but only {} in the prototype pool",
                self.n_retain_eval, self.n_retain
            ));
        }
        if !self.k.is_finite() {
            return bad(format!("k = {}", self.k));
        }
        if check_strength(self.alpha).is_err() {
            return bad(format!("alpha = {}", self.alpha));
        }
        if !(self.match_threshold.is_finite() && self.match_threshold <= 1.0) {
            return bad(format!("match threshold = {}", self.match_threshold));
        }
        if let Some(&n) = self.pool_sizes.iter().find(|&&n| n == 0 || n > self.retain_population) {
            return bad(format!("pool size {n} outside 1..={}", self.retain_population));
        }
        if self.pool_sizes.iter().any(|&n| n < self.n_retain_eval) {
            return bad("every pool size must cover the evaluated retain speakers".into());
        }
        if self.resamples < 2 {
            return bad(format!("{} resamples, need at least 2", self.resamples));
        }
        self.toy_config()
            .validate()
            .map_err(|e| TrusError::Config(e.to_string()))
    }
}

/// One speaker taking part in a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerEntry {
    pub speaker_id: String,
    pub condition: String,
    /// Identity seed.
    pub seed: u64,
    /// Text seed of the evaluated synthesis.
    pub text_seed: u64,
}

impl SpeakerEntry {
    pub fn speaker(&self, channels: usize) -> ToySpeaker {
        ToySpeaker::from_seed(self.speaker_id.clone(), self.seed, channels)
    }
}

/// Who plays which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roster {
    /// Candidate retain speakers; prototypes use a prefix of this list.
    pub retain: Vec<SpeakerEntry>,
    pub seen: Vec<SpeakerEntry>,
    pub unseen: Vec<SpeakerEntry>,
}

/// Stable 64-bit seed for `(master, tag, index)`.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

impl Roster {
    pub fn from_config(cfg: &EvalConfig) -> Self {
        let n_candidates = cfg
            .n_retain
            .max(cfg.retain_population)
            .max(cfg.pool_sizes.iter().copied().max().unwrap_or(0));
        let make = |condition: &str, n: usize| -> Vec<SpeakerEntry> {
            (0..n)
                .map(|i| SpeakerEntry {
                    speaker_id: format!("{condition}-{i:04}"),
                    condition: condition.to_owned(),
                    seed: derive_seed(cfg.seed, condition, i as u64),
                    text_seed: derive_seed(cfg.seed, &format!("{condition}/text"), i as u64),
                })
                .collect()
        };
        Self {
            retain: make(RETAIN, n_candidates),
            seen: make(SEEN_OPTOUT, cfg.n_optout_seen),
            unseen: make(UNSEEN_OPTOUT, cfg.n_optout_unseen),
        }
    }

    /// Rejects any id or identity seed shared between two roles, and
    /// duplicates within one role.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut ids: BTreeMap<&str, &str> = BTreeMap::new();
        let mut seeds: BTreeMap<u64, &str> = BTreeMap::new();
        for e in self.retain.iter().chain(&self.seen).chain(&self.unseen) {
            if let Some(prev) = ids.insert(&e.speaker_id, &e.condition) {
                return Err(TrusError::Config(format!(
                    "speaker '{}' appears in both {prev} and {}",
                    e.speaker_id, e.condition
                )));
            }
            if let Some(prev) = seeds.insert(e.seed, &e.speaker_id) {
                return Err(TrusError::Config(format!(
                    "speakers '{prev}' and '{}' share identity seed {}",
                    e.speaker_id, e.seed
                )));
            }
        }
        Ok(())
    }

    fn optout(&self) -> impl Iterator<Item = &SpeakerEntry> {
        self.seen.iter().chain(&self.unseen)
    }
}

/// Which experiment produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    Suppression,
    Threshold,
    Pool,
}

impl SuiteKind {
    pub fn label(self) -> &'static str {
        match self {
            SuiteKind::Suppression => "suppression",
            SuiteKind::Threshold => "threshold",
            SuiteKind::Pool => "pool",
        }
    }
}

/// Everything needed to rerun a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub suite: SuiteKind,
    pub config: EvalConfig,
    pub calibration_text_seed: u64,
    pub roster: Roster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerResult {
    pub condition: String,
    pub speaker_id: String,
    pub text_seed: u64,
    pub identity_similarity: f64,
    pub baseline_similarity: f64,
    pub content_error: f64,
    pub cells_steered: usize,
    pub layers_selected: usize,
    pub matched: bool,
    /// Served tape and embedding equal the unhooked run bit for bit.
    pub bit_identical: bool,
}

impl SpeakerResult {
    fn metric_values(&self) -> [f64; 7] {
        [
            self.identity_similarity,
            self.baseline_similarity,
            self.content_error,
            self.cells_steered as f64,
            self.layers_selected as f64,
            f64::from(u8::from(self.matched)),
            f64::from(u8::from(self.bit_identical)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub speakers: usize,
    pub mean_identity_similarity: f64,
    pub mean_baseline_similarity: f64,
    pub mean_content_error: f64,
    pub mean_cells_steered: f64,
    pub mean_layers_selected: f64,
    pub matched: usize,
    pub bit_identical: usize,
}

impl ConditionSummary {
    /// `1 - steered / baseline` for the mean similarity.
    pub fn relative_drop(&self) -> f64 {
        1.0 - self.mean_identity_similarity / self.mean_baseline_similarity
    }

    fn from_results(condition: &str, results: &[&SpeakerResult]) -> Self {
        let n = results.len();
        let mean = |f: &dyn Fn(&SpeakerResult) -> f64| -> f64 {
            if n == 0 {
                f64::NAN
            } else {
                results.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        Self {
            condition: condition.to_owned(),
            speakers: n,
            mean_identity_similarity: mean(&|r| r.identity_similarity),
            mean_baseline_similarity: mean(&|r| r.baseline_similarity),
            mean_content_error: mean(&|r| r.content_error),
            mean_cells_steered: mean(&|r| r.cells_steered as f64),
            mean_layers_selected: mean(&|r| r.layers_selected as f64),
            matched: results.iter().filter(|r| r.matched).count(),
            bit_identical: results.iter().filter(|r| r.bit_identical).count(),
        }
    }
}

/// One setting of the ablation axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBlock {
    /// `k` column value: the numeric tolerance or a band label.
    pub k: String,
    pub n: usize,
    pub alpha: f64,
    pub results: Vec<SpeakerResult>,
    /// Mean per-entry variance of the prototype across retain resamples.
    pub prototype_variance: Option<f64>,
}

impl ReportBlock {
    pub fn summary(&self, condition: &str) -> ConditionSummary {
        let rows: Vec<&SpeakerResult> = self.results.iter().filter(|r| r.condition == condition).collect();
        ConditionSummary::from_results(condition, &rows)
    }

    pub fn summaries(&self) -> Vec<ConditionSummary> {
        CONDITIONS.iter().map(|c| self.summary(c)).collect()
    }

    /// Both opt-out conditions pooled together.
    pub fn optout_summary(&self) -> ConditionSummary {
        let rows: Vec<&SpeakerResult> = self.results.iter().filter(|r| r.condition != RETAIN).collect();
        ConditionSummary::from_results("optout", &rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub manifest: SeedManifest,
    pub blocks: Vec<ReportBlock>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        let seed_of: BTreeMap<&str, u64> = self
            .manifest
            .roster
            .retain
            .iter()
            .chain(&self.manifest.roster.seen)
            .chain(&self.manifest.roster.unseen)
            .map(|e| (e.speaker_id.as_str(), e.text_seed))
            .collect();
        for block in &self.blocks {
            let (n, alpha) = (block.n.to_string(), fmt_f64(block.alpha));
            for r in &block.results {
                let seed = seed_of
                    .get(r.speaker_id.as_str())
                    .copied()
                    .unwrap_or(r.text_seed)
                    .to_string();
                for (metric, value) in METRICS.iter().zip(r.metric_values()) {
                    w.write_record([
                        r.condition.as_str(),
                        &r.speaker_id,
                        metric,
                        &fmt_f64(value),
                        &block.k,
                        &n,
                        &alpha,
                        &seed,
                    ])
                    .map_err(csv_err)?;
                }
            }
            if let Some(v) = block.prototype_variance {
                w.write_record([
                    "prototype",
                    "",
                    "resample_variance",
                    &fmt_f64(v),
                    &block.k,
                    &n,
                    &alpha,
                    &self.manifest.config.seed.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| TrusError::Validation(e.to_string()))
    }

    pub fn write_manifest<W: Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer_pretty(sink, &self.manifest)?;
        Ok(())
    }
}

/// Reruns the suite a manifest describes.
pub fn rerun(manifest: &SeedManifest) -> Result<EvalReport> {
    let cfg = &manifest.config;
    if manifest.calibration_text_seed != CALIBRATION_TEXT_SEED {
        return Err(TrusError::Config(format!(
            "manifest calibration seed {} differs from this build's {CALIBRATION_TEXT_SEED}",
            manifest.calibration_text_seed
        )));
    }
    let bands = &Band::ALL;
    match manifest.suite {
        SuiteKind::Suppression => run_suppression_suite_with_roster(cfg, manifest.roster.clone()),
        SuiteKind::Threshold => run_threshold_ablation_with_roster(cfg, manifest.roster.clone(), bands),
        SuiteKind::Pool => run_pool_ablation_with_roster(cfg, manifest.roster.clone()),
    }
}

/// Shared state: model, references and unhooked baselines.
struct Bench {
    cfg: EvalConfig,
    model: ToyModel,
    roster: Roster,
    /// Pooled calibration tapes, by speaker id.
    references: BTreeMap<String, ActivationTape>,
    baselines: BTreeMap<String, SynthesisOutput>,
}

impl Bench {
    fn new(cfg: &EvalConfig, roster: Roster, n_references: usize) -> Result<Self> {
        cfg.validate()?;
        roster.check_disjoint()?;
        if roster.retain.len() < n_references.max(cfg.n_retain) {
            return Err(TrusError::Config(format!(
                "roster has {} retain speakers, need {}",
                roster.retain.len(),
                n_references.max(cfg.n_retain)
            )));
        }
        if roster.seen.len() < MIN_SPEAKERS_PER_CONDITION || roster.unseen.len() < MIN_SPEAKERS_PER_CONDITION {
            return Err(TrusError::Config(
                "opt-out conditions need at least 10 speakers each".into(),
            ));
        }
        let model = ToyModel::new(cfg.toy_config())?;
        let mut bench = Self {
            cfg: cfg.clone(),
            model,
            roster,
            references: BTreeMap::new(),
            baselines: BTreeMap::new(),
        };
        let wanted: Vec<SpeakerEntry> = bench.roster.retain[..n_references.max(cfg.n_retain)]
            .iter()
            .chain(bench.roster.optout())
            .cloned()
            .collect();
        for e in &wanted {
            let tape = bench.model.reference_tape(&e.speaker(cfg.channels))?.to_pooled()?;
            bench.references.insert(e.speaker_id.clone(), tape);
        }
        let evaluated: Vec<SpeakerEntry> = bench.evaluated().cloned().collect();
        for e in &evaluated {
            let out = bench.model.synthesize(&e.speaker(cfg.channels), e.text_seed, None)?;
            bench.baselines.insert(e.speaker_id.clone(), out);
        }
        Ok(bench)
    }

    fn evaluated(&self) -> impl Iterator<Item = &SpeakerEntry> {
        self.roster.retain[..self.cfg.n_retain_eval]
            .iter()
            .chain(self.roster.optout())
    }

    fn reference(&self, id: &str) -> &ActivationTape {
        &self.references[id]
    }

    fn prototype(&self, retain: &[SpeakerEntry]) -> Result<IdPrototype> {
        build_prototype(retain.iter().map(|e| self.reference(&e.speaker_id)))
    }

    /// Records for every opt-out speaker, with the mask picked by `choose`.
    fn optout_pool(
        &self,
        proto: &IdPrototype,
        choose: &dyn Fn(&crate::selection::SimilarityProfile) -> InterventionMask,
    ) -> Result<OptOutPool> {
        // a record must carry a positive strength; zero is applied when serving
        let register_alpha = if self.cfg.alpha > 0.0 {
            self.cfg.alpha
        } else {
            DEFAULT_ALPHA
        };
        let mut pool = OptOutPool::new(self.cfg.match_threshold);
        for e in self.roster.optout() {
            let reference = self.reference(&e.speaker_id);
            let mut record = OptOutRecord::build(&e.speaker_id, reference, proto, self.cfg.k, register_alpha)?;
            let profile = compute_profile(reference, proto, self.cfg.k)?;
            let mut mask = choose(&profile);
            mask.retain(|c| record.steering.direction(c).is_some());
            record.mask = mask;
            pool.insert(record);
        }
        Ok(pool)
    }

    fn run_block(&self, pool: &OptOutPool, k: String, n: usize) -> Result<ReportBlock> {
        let opts = ServeOptions {
            no_steer: false,
            alpha: Some(self.cfg.alpha),
        };
        let mut results = Vec::new();
        for e in self.evaluated() {
            let speaker = e.speaker(self.cfg.channels);
            let served = serve(
                &self.model,
                pool,
                &speaker,
                self.reference(&e.speaker_id),
                e.text_seed,
                opts,
            )?;
            let base = &self.baselines[&e.speaker_id];
            let layers_selected = served
                .matched
                .as_deref()
                .and_then(|id| pool.lookup(id))
                .map_or(0, |r| r.mask.selected_layers().len());
            results.push(SpeakerResult {
                condition: e.condition.clone(),
                speaker_id: e.speaker_id.clone(),
                text_seed: e.text_seed,
                identity_similarity: identity_similarity(&served.output, &speaker)?,
                baseline_similarity: identity_similarity(base, &speaker)?,
                content_error: content_error(base, &served.output, &speaker)?,
                cells_steered: served.output.steered_cells_applied.len(),
                layers_selected,
                matched: served.matched.is_some(),
                bit_identical: served.output.tape == base.tape
                    && served.output.output_embedding == base.output_embedding,
            });
        }
        Ok(ReportBlock {
            k,
            n,
            alpha: self.cfg.alpha,
            results,
            prototype_variance: None,
        })
    }

    fn manifest(&self, suite: SuiteKind) -> SeedManifest {
        SeedManifest {
            suite,
            config: self.cfg.clone(),
            calibration_text_seed: CALIBRATION_TEXT_SEED,
            roster: self.roster.clone(),
        }
    }
}

/// Retain, seen and unseen opt-out conditions at the configured `k` and `α`.
pub fn run_suppression_suite(cfg: &EvalConfig) -> Result<EvalReport> {
    run_suppression_suite_with_roster(cfg, Roster::from_config(cfg))
}

pub fn run_suppression_suite_with_roster(cfg: &EvalConfig, roster: Roster) -> Result<EvalReport> {
    let bench = Bench::new(cfg, roster, cfg.n_retain)?;
    let proto = bench.prototype(&bench.roster.retain[..cfg.n_retain])?;
    let pool = bench.optout_pool(&proto, &select_mask)?;
    let block = bench.run_block(&pool, fmt_f64(cfg.k), cfg.n_retain)?;
    Ok(EvalReport {
        manifest: bench.manifest(SuiteKind::Suppression),
        blocks: vec![block],
    })
}

/// One block per band, sharing speakers, seeds and baselines.
pub fn run_threshold_ablation(cfg: &EvalConfig, bands: &[Band]) -> Result<EvalReport> {
    run_threshold_ablation_with_roster(cfg, Roster::from_config(cfg), bands)
}

pub fn run_threshold_ablation_with_roster(cfg: &EvalConfig, roster: Roster, bands: &[Band]) -> Result<EvalReport> {
    let bench = Bench::new(cfg, roster, cfg.n_retain)?;
    let proto = bench.prototype(&bench.roster.retain[..cfg.n_retain])?;
    let mut blocks = Vec::with_capacity(bands.len());
    for &band in bands {
        let pool = bench.optout_pool(&proto, &|p| band.mask(p))?;
        blocks.push(bench.run_block(&pool, band.label().to_owned(), cfg.n_retain)?);
    }
    Ok(EvalReport {
        manifest: bench.manifest(SuiteKind::Threshold),
        blocks,
    })
}

/// One block per pool size; each also carries the prototype's resampling
/// variance.
pub fn run_pool_ablation(cfg: &EvalConfig) -> Result<EvalReport> {
    run_pool_ablation_with_roster(cfg, Roster::from_config(cfg))
}

pub fn run_pool_ablation_with_roster(cfg: &EvalConfig, roster: Roster) -> Result<EvalReport> {
    let bench = Bench::new(cfg, roster, cfg.retain_population)?;
    let population: Vec<&ActivationTape> = bench.roster.retain[..cfg.retain_population]
        .iter()
        .map(|e| bench.reference(&e.speaker_id))
        .collect();
    let mut blocks = Vec::with_capacity(cfg.pool_sizes.len());
    for &n in &cfg.pool_sizes {
        let proto = bench.prototype(&bench.roster.retain[..n])?;
        let pool = bench.optout_pool(&proto, &select_mask)?;
        let mut block = bench.run_block(&pool, fmt_f64(cfg.k), n)?;
        block.prototype_variance = Some(resampling_variance(&population, n, cfg.resamples, cfg.seed)?);
        blocks.push(block);
    }
    Ok(EvalReport {
        manifest: bench.manifest(SuiteKind::Pool),
        blocks,
    })
}

/// Mean over cells and channels of the variance of the prototype across
/// `resamples` draws of `n` speakers (without replacement) from `population`.
pub fn resampling_variance(population: &[&ActivationTape], n: usize, resamples: usize, seed: u64) -> Result<f64> {
    if n == 0 || n > population.len() || resamples < 2 {
        return Err(TrusError::Config(format!(
            "cannot draw {resamples} pools of {n} from {} speakers",
            population.len()
        )));
    }
    let mut protos = Vec::with_capacity(resamples);
    for r in 0..resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("resample/{n}"), r as u64));
        let picked = sample(&mut rng, population.len(), n);
        protos.push(build_prototype(picked.iter().map(|i| population[i]))?);
    }
    Ok(prototype_variance(&protos))
}

/// Mean per-entry population variance across prototypes of equal shape.
pub fn prototype_variance(protos: &[IdPrototype]) -> f64 {
    let m = protos.len() as f64;
    let grids: Vec<&CellGrid<_>> = protos.iter().map(|p| p.grid()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for (cell, first) in grids[0].iter() {
        for ch in 0..first.len() {
            let vals: Vec<f64> = grids
                .iter()
                .map(|g| f64::from(g.get(cell).expect("same shape")[ch]))
                .collect();
            let mean = vals.iter().sum::<f64>() / m;
            total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            count += 1;
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EvalConfig {
        EvalConfig {
            layers: 4,
            steps: 4,
            channels: 16,
            frames: 4,
            n_retain: 12,
            retain_population: 24,
            pool_sizes: vec![10, 20],
            resamples: 4,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn roster_is_disjoint_and_deterministic() {
        let cfg = small();
        let a = Roster::from_config(&cfg);
        assert_eq!(a, Roster::from_config(&cfg));
        a.check_disjoint().unwrap();
        assert_eq!(a.retain.len(), 24);
    }

    #[test]
    fn overlapping_roster_is_a_config_error() {
        let cfg = small();
        let mut roster = Roster::from_config(&cfg);
        roster.unseen[0] = roster.retain[3].clone();
        assert!(matches!(
            run_suppression_suite_with_roster(&cfg, roster),
            Err(TrusError::Config(_))
        ));
    }

    #[test]
    fn too_few_speakers_is_a_config_error() {
        let cfg = EvalConfig {
            n_optout_seen: 3,
            ..small()
        };
        assert!(matches!(run_suppression_suite(&cfg), Err(TrusError::Config(_))));
    }

    #[test]
    fn suppression_suite_shape_and_retain_path() {
        let cfg = small();
        let report = run_suppression_suite(&cfg).unwrap();
        assert_eq!(report.blocks.len(), 1);
        let block = &report.blocks[0];
        let retain = block.summary(RETAIN);
        assert_eq!(retain.speakers, 10);
        assert_eq!(retain.bit_identical, 10);
        assert_eq!(retain.matched, 0);
        for c in [SEEN_OPTOUT, UNSEEN_OPTOUT] {
            assert_eq!(block.summary(c).matched, 10);
        }
        let csv = report.csv_string().unwrap();
        assert_eq!(csv.lines().count(), 1 + 30 * METRICS.len());
        assert!(csv.starts_with("condition,speaker_id,metric,value,k,N,alpha,seed\n"));
    }

    #[test]
    fn zero_alpha_matches_baseline_everywhere() {
        let cfg = EvalConfig { alpha: 0.0, ..small() };
        let report = run_suppression_suite(&cfg).unwrap();
        for r in &report.blocks[0].results {
            assert!(r.bit_identical, "{}", r.speaker_id);
            assert_eq!(r.identity_similarity, r.baseline_similarity);
        }
    }

    #[test]
    fn manifest_reproduces_report() {
        let cfg = small();
        let report = run_threshold_ablation(&cfg, &Band::ALL).unwrap();
        let mut json = Vec::new();
        report.write_manifest(&mut json).unwrap();
        let manifest: SeedManifest = serde_json::from_slice(&json).unwrap();
        let again = rerun(&manifest).unwrap();
        assert_eq!(again.csv_string().unwrap(), report.csv_string().unwrap());
    }

    #[test]
    fn pool_blocks_carry_variance() {
        let report = run_pool_ablation(&small()).unwrap();
        let v: Vec<f64> = report.blocks.iter().map(|b| b.prototype_variance.unwrap()).collect();
        assert_eq!(v.len(), 2);
        assert!(v[1] < v[0]);
        assert_eq!(report.blocks[1].n, 20);
    }

    #[test]
    fn variance_of_identical_prototypes_is_zero() {
        let cfg = small();
        let model = ToyModel::new(cfg.toy_config()).unwrap();
        let t = model.reference_tape(&ToySpeaker::from_seed("a", 1, 16)).unwrap();
        let p = build_prototype([&t]).unwrap();
        assert_eq!(prototype_variance(&[p.clone(), p]), 0.0);
    }
}
