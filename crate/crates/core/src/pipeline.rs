// SPDX-License-Identifier: MIT OR Apache-2.0

//! Serving-time path: match the reference, steer only on a match.
//!
//! A reference that matches no record synthesizes with no hook installed at
//! all, so retain speakers get exactly the baseline computation.

use crate::error::Result;
use crate::hook::{ActivationHook, SteeringHook};
use crate::registry::OptOutPool;
use crate::steering::check_strength;
use crate::tape::ActivationTape;
use crate::toy::{SynthesisOutput, ToyModel, ToySpeaker};

/// Per-request switches.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ServeOptions {
    /// Skip matching and steering entirely.
    pub no_steer: bool,
    /// Overrides the record's stored strength.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Served {
    pub output: SynthesisOutput,
    /// Id of the matched opt-out record, if any.
    pub matched: Option<String>,
}

pub fn serve(
    model: &ToyModel,
    pool: &OptOutPool,
    speaker: &ToySpeaker,
    reference: &ActivationTape,
    text_seed: u64,
    opts: ServeOptions,
) -> Result<Served> {
    if let Some(a) = opts.alpha {
        check_strength(a)?;
    }
    let record = if opts.no_steer {
        None
    } else {
        pool.match_reference(reference)
    };
    let Some(record) = record else {
        return Ok(Served {
            output: model.synthesize(speaker, text_seed, None)?,
            matched: None,
        });
    };
    let mut hook = SteeringHook::new(&record.steering, &record.mask);
    if let Some(a) = opts.alpha {
        hook = hook.with_alpha(a)?;
    }
    let output = model.synthesize(speaker, text_seed, Some(&mut hook as &mut dyn ActivationHook))?;
    Ok(Served {
        output,
        matched: Some(record.speaker_id.clone()),
    })
}
