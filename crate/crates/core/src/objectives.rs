//! Masked video modeling loss and the combined training objective.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::model::ModelOutput;
use crate::numerics::{DiffArray, Real, Tape, Var};
use crate::tokens::{Origin, TokenSequence};

/// Row pairs `(masked run, reference run)` for every surviving visual token.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairSelection {
    pub pairs: Vec<(usize, usize)>,
}

impl PairSelection {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Matches surviving visual tokens of `masked` to their rows in `full` by
/// origin tag.
pub fn select_pairs(masked: &TokenSequence, full: &TokenSequence, plan: &MaskPlan) -> Result<PairSelection> {
    if masked.grid != full.grid || full.grid != (plan.frames, plan.slots) {
        return Err(Error::contract(format!(
            "sequences from grids {:?} and {:?} paired under a {}x{} plan",
            masked.grid, full.grid, plan.frames, plan.slots
        )));
    }
    if masked.text_ids != full.text_ids {
        return Err(Error::contract("masked and reference runs carry different text"));
    }
    let mut rows = HashMap::with_capacity(full.len());
    for (r, o) in full.origins.iter().enumerate() {
        if let Origin::Visual { frame, slot } = *o {
            rows.insert((frame, slot), r);
        }
    }
    let mut pairs = Vec::with_capacity(plan.kept.len());
    for (r, o) in masked.origins.iter().enumerate() {
        let Origin::Visual { frame, slot } = *o else { continue };
        if plan.is_masked(frame * plan.slots + slot) {
            return Err(Error::contract(format!(
                "masked token ({frame}, {slot}) survived in the masked run"
            )));
        }
        let full_row = rows.get(&(frame, slot)).ok_or_else(|| {
            Error::contract(format!("visual token ({frame}, {slot}) missing from the reference run"))
        })?;
        pairs.push((r, *full_row));
    }
    if pairs.len() != plan.kept.len() {
        return Err(Error::contract(format!(
            "{} surviving visual tokens for {} kept positions",
            pairs.len(),
            plan.kept.len()
        )));
    }
    Ok(PairSelection { pairs })
}

/// Which representation the masked run is pulled toward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MvmTarget {
    /// Final normalised hidden states.
    #[default]
    Hidden,
    Logits,
}

impl MvmTarget {
    pub fn pick(self, out: &ModelOutput) -> Var {
        match self {
            MvmTarget::Hidden => out.hidden,
            MvmTarget::Logits => out.logits,
        }
    }
}

/// Reference-run states copied off the tape. Holding plain values rather than
/// a tape node guarantees no gradient can reach the reference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceHidden<F> {
    values: DiffArray<F>,
}

impl<F: Real> ReferenceHidden<F> {
    /// Copies `var`, which must not require a gradient.
    pub fn capture(tape: &Tape<F>, var: Var) -> Result<Self> {
        if tape.requires_grad(var) {
            return Err(Error::contract(
                "reference states must come from a gradient-free pass",
            ));
        }
        Ok(Self {
            values: tape.value(var).clone(),
        })
    }

    pub fn from_array(values: DiffArray<F>) -> Self {
        Self { values }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &DiffArray<F> {
        &self.values
    }

    fn gather(&self, rows: impl Iterator<Item = usize>) -> Result<Vec<F>> {
        let mut out = Vec::new();
        for r in rows {
            if r >= self.rows() {
                return Err(Error::Index {
                    what: "reference rows",
                    index: r,
                    len: self.rows(),
                });
            }
            out.extend_from_slice(self.values.row(r));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MvmLoss {
    pub value: Var,
    /// Set when no visual token survived, in which case `value` is zero.
    pub degenerate: bool,
}

/// Mean over pairs and feature dims of the squared difference between the
/// masked-run states and the reference states.
pub fn mvm_loss<F: Real>(
    tape: &mut Tape<F>,
    masked: Var,
    reference: &ReferenceHidden<F>,
    selection: &PairSelection,
) -> Result<MvmLoss> {
    let cols = tape.shape(masked).get(1).copied().unwrap_or(0);
    if cols != reference.cols() {
        return Err(Error::Dimension {
            op: "mvm_loss",
            lhs: tape.shape(masked).to_vec(),
            rhs: reference.values.shape().to_vec(),
        });
    }
    if selection.is_empty() {
        log::warn!("masked video modeling loss over zero pairs");
        return Ok(MvmLoss {
            value: tape.constant(DiffArray::scalar(F::zero())),
            degenerate: true,
        });
    }
    let rows: Vec<usize> = selection.pairs.iter().map(|p| p.0).collect();
    let picked = tape.gather_rows(masked, &rows)?;
    let target = reference.gather(selection.pairs.iter().map(|p| p.1))?;
    Ok(MvmLoss {
        value: tape.mse_pairs(picked, &target)?,
        degenerate: false,
    })
}

/// Relative weights of the two loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mvm: f64,
    pub llm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mvm: 1.0, llm: 1.0 }
    }
}

/// `w_mvm * l_mvm + w_llm * l_llm`, plain sum at the default weights.
pub fn total_loss<F: Real>(tape: &mut Tape<F>, l_mvm: Var, l_llm: Var, weights: LossWeights) -> Result<Var> {
    for (term, v) in [("l_mvm", l_mvm), ("l_llm", l_llm)] {
        let value = tape.value(v).item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { term, value });
        }
    }
    let weigh = |tape: &mut Tape<F>, v: Var, w: f64| if w == 1.0 { v } else { tape.scale(v, F::lit(w)) };
    let a = weigh(tape, l_mvm, weights.mvm);
    let b = weigh(tape, l_llm, weights.llm);
    tape.add(a, b)
}

#[cfg(test)]
mod tests;
