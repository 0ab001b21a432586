//! Dynamic visual-token masking.
//!
//! A mask rate is drawn per sample, a uniformly random subset of the visual
//! positions of that size is chosen regardless of frame, and the chosen
//! positions are removed from the sequence. Text, start and end tokens are
//! never touched.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape};
use crate::tokens::{Origin, TokenSequence};

/// Mean of the dynamic mask-rate distribution.
pub const RATE_MEAN: f64 = 0.5;
/// Bounds the dynamic mask rate is truncated to.
pub const RATE_BOUNDS: (f64, f64) = (0.3, 0.7);

/// Draws a mask rate from Normal(0.5, sigma) truncated to [0.3, 0.7] by
/// rejection. `sigma` is a standard deviation; zero returns exactly 0.5.
pub fn sample_mask_rate<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Result<f64> {
    sample_truncated_normal(RATE_MEAN, sigma, RATE_BOUNDS, rng)
}

fn sample_truncated_normal<R: Rng + ?Sized>(
    mean: f64,
    sigma: f64,
    (lo, hi): (f64, f64),
    rng: &mut R,
) -> Result<f64> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!(
            "mask-rate standard deviation must be a non-negative number, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(mean);
    }
    let dist = Normal::new(mean, sigma).map_err(|e| Error::config(e.to_string()))?;
    loop {
        let x = dist.sample(rng);
        if (lo..=hi).contains(&x) {
            return Ok(x);
        }
    }
}

/// How the per-sample mask rate is chosen during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum MaskMode {
    Off,
    Static { rho: f64 },
    /// Normal(0.5, sigma) truncated to [0.3, 0.7].
    DynamicNormal { sigma: f64 },
    DynamicUniform { low: f64, high: f64 },
}

impl Default for MaskMode {
    fn default() -> Self {
        MaskMode::Off
    }
}

impl MaskMode {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        match *self {
            MaskMode::Off => Ok(()),
            MaskMode::Static { rho } if unit(rho) => Ok(()),
            MaskMode::DynamicNormal { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            MaskMode::DynamicUniform { low, high } if unit(low) && unit(high) && low <= high => {
                Ok(())
            }
            other => Err(Error::config(format!("invalid mask mode {other:?}"))),
        }
    }

    pub fn is_off(&self) -> bool {
        matches!(self, MaskMode::Off)
    }

    /// Mask rate for one sample, or `None` when masking is off.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Option<f64>> {
        self.validate()?;
        Ok(match *self {
            MaskMode::Off => None,
            MaskMode::Static { rho } => Some(rho),
            MaskMode::DynamicNormal { sigma } => Some(sample_mask_rate(sigma, rng)?),
            MaskMode::DynamicUniform { low, high } => Some(if low == high {
                low
            } else {
                rng.gen_range(low..=high)
            }),
        })
    }

    /// Short label used in summaries.
    pub fn label(&self) -> String {
        match *self {
            MaskMode::Off => "off".into(),
            MaskMode::Static { rho } => format!("static({rho})"),
            MaskMode::DynamicNormal { sigma } => format!("normal(0.5,{sigma})"),
            MaskMode::DynamicUniform { low, high } => format!("uniform({low},{high})"),
        }
    }
}

/// Number of masked positions out of `total` at rate `rho`: round half to
/// even, capped so that at least one visual token survives.
pub fn masked_count(rho: f64, total: usize) -> usize {
    let n = (rho * total as f64).round_ties_even() as usize;
    n.min(total.saturating_sub(1))
}

/// A sampled rate and the visual positions it removes.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub rho: f64,
    pub frames: usize,
    pub slots: usize,
    /// Sorted flat indices `frame * slots + slot` that are removed.
    pub masked: Vec<usize>,
    /// Remaining flat indices in original order.
    pub kept: Vec<usize>,
}

impl MaskPlan {
    /// A plan that removes nothing.
    pub fn empty(frames: usize, slots: usize) -> Self {
        Self {
            rho: 0.0,
            frames,
            slots,
            masked: Vec::new(),
            kept: (0..frames * slots).collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.frames * self.slots
    }

    pub fn is_masked(&self, flat: usize) -> bool {
        self.masked.binary_search(&flat).is_ok()
    }
}

/// Chooses `masked_count(rho, T*K)` visual positions uniformly without
/// replacement across all frames.
pub fn build_mask_plan<R: Rng + ?Sized>(frames: usize, slots: usize, rho: f64, rng: &mut R) -> Result<MaskPlan> {
    let total = frames * slots;
    if total == 0 {
        return Err(Error::config("mask plan over zero visual tokens"));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config(format!("mask rate {rho} outside [0, 1]")));
    }
    let count = masked_count(rho, total);
    let mut masked = rand::seq::index::sample(rng, total, count).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; total];
    for &m in &masked {
        is_masked[m] = true;
    }
    let kept = (0..total).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        rho,
        frames,
        slots,
        masked,
        kept,
    })
}

/// Position ids given to the tokens that survive masking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionPolicy {
    /// `0..L'` as if the shorter sequence were the only input.
    #[default]
    Renumber,
    /// The ids the tokens had before masking.
    KeepOriginal,
}

/// Removes the masked visual positions with consecutive renumbering.
pub fn apply_mask<F: Real>(tape: &mut Tape<F>, seq: &TokenSequence, plan: &MaskPlan) -> Result<TokenSequence> {
    apply_mask_with(tape, seq, plan, PositionPolicy::Renumber)
}

pub fn apply_mask_with<F: Real>(
    tape: &mut Tape<F>,
    seq: &TokenSequence,
    plan: &MaskPlan,
    policy: PositionPolicy,
) -> Result<TokenSequence> {
    if seq.grid != (plan.frames, plan.slots) || seq.visual_count() != plan.total() {
        return Err(Error::contract(format!(
            "mask plan for {}x{} visual tokens applied to a sequence built from {}x{} ({} visual)",
            plan.frames,
            plan.slots,
            seq.grid.0,
            seq.grid.1,
            seq.visual_count()
        )));
    }
    let mut rows = Vec::with_capacity(seq.len() - plan.masked.len());
    for (r, o) in seq.origins.iter().enumerate() {
        if let Origin::Visual { frame, slot } = *o {
            if plan.is_masked(frame * plan.slots + slot) {
                continue;
            }
        }
        rows.push(r);
    }
    let embeddings = if rows.len() == seq.len() {
        seq.embeddings
    } else {
        tape.gather_rows(seq.embeddings, &rows)?
    };
    let positions = match policy {
        PositionPolicy::Renumber => (0..rows.len()).collect(),
        PositionPolicy::KeepOriginal => rows.iter().map(|&r| seq.positions[r]).collect(),
    };
    Ok(TokenSequence {
        embeddings,
        positions,
        origins: rows.iter().map(|&r| seq.origins[r]).collect(),
        text_ids: seq.text_ids.clone(),
        answer: seq.answer.clone(),
        grid: seq.grid,
    })
}
