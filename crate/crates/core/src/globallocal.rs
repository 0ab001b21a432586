//! Global-local input for long clips.
//!
//! The global branch averages the tokens of all `T` frames slot by slot; the
//! local branch keeps `T_local` evenly spaced frames. A two-layer MLP whose
//! last layer starts at zero maps the pooled tokens to a residual that is
//! added to every local frame, so at initialisation the fused input is
//! exactly the local input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Var};
use crate::params::{Bindings, Linear, ParamStore};
use crate::tokens::TokenGrid;

/// How the long clip is turned into visual tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalLocalVariant {
    /// Only the pooled tokens, as a single frame.
    GlobalOnly,
    /// Only the sub-sampled frames.
    LocalOnly,
    /// Pooled tokens added to every local frame without a projector.
    SimpleAdd,
    /// Zero-initialised MLP residual shared by every local frame.
    #[default]
    Adapter,
    /// Zero-initialised MLP emitting a separate residual for each local frame.
    AdapterPerFrame,
}

impl GlobalLocalVariant {
    pub fn name(self) -> &'static str {
        match self {
            GlobalLocalVariant::GlobalOnly => "global-only",
            GlobalLocalVariant::LocalOnly => "local-only",
            GlobalLocalVariant::SimpleAdd => "simple-add",
            GlobalLocalVariant::Adapter => "adapter",
            GlobalLocalVariant::AdapterPerFrame => "adapter-per-frame",
        }
    }

    pub fn uses_mlp(self) -> bool {
        matches!(
            self,
            GlobalLocalVariant::Adapter | GlobalLocalVariant::AdapterPerFrame
        )
    }
}

impl std::str::FromStr for GlobalLocalVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            GlobalLocalVariant::GlobalOnly,
            GlobalLocalVariant::LocalOnly,
            GlobalLocalVariant::SimpleAdd,
            GlobalLocalVariant::Adapter,
            GlobalLocalVariant::AdapterPerFrame,
        ]
        .into_iter()
        .find(|v| v.name() == s || (s == "simply-add" && *v == GlobalLocalVariant::SimpleAdd))
        .ok_or_else(|| Error::config(format!("unknown global-local variant {s:?}")))
    }
}

/// Slot-wise mean over frames, `[K, D]`. Independent of frame order.
pub fn global_pool<F: Real>(tape: &mut Tape<F>, grid: TokenGrid) -> Result<Var> {
    tape.frame_mean(grid.tokens, grid.frames)
}

/// Frames `floor((k + 1/2) * T / T_local)` for `k < T_local`.
pub fn local_indices(total: usize, local: usize) -> Result<Vec<usize>> {
    if local == 0 || local > total {
        return Err(Error::config(format!(
            "cannot sample {local} local frames from {total}"
        )));
    }
    Ok((0..local).map(|k| (2 * k + 1) * total / (2 * local)).collect())
}

pub fn sample_local<F: Real>(tape: &mut Tape<F>, grid: TokenGrid, local: usize) -> Result<TokenGrid> {
    let frames = local_indices(grid.frames, local)?;
    if local == grid.frames {
        return Ok(grid);
    }
    let rows: Vec<usize> = frames
        .iter()
        .flat_map(|&f| (0..grid.slots).map(move |s| f * grid.slots + s))
        .collect();
    let tokens = tape.gather_rows(grid.tokens, &rows)?;
    TokenGrid::new(tape, tokens, local, grid.slots)
}

/// `D -> 4D -> out` per-token MLP with GELU; the second layer starts at zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionMlp {
    pub up: Linear,
    pub down: Linear,
    pub dim: usize,
    /// Local frames receiving distinct residuals; 1 when shared.
    pub per_frame: usize,
}

impl FusionMlp {
    /// Residual shared by every local frame.
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, dim: usize, rng: &mut R) -> Self {
        Self::build(store, dim, 1, rng)
    }

    /// One residual per local frame, `local` of them.
    pub fn per_frame<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        dim: usize,
        local: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, dim, local, rng)
    }

    fn build<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, dim: usize, per_frame: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, "fusion.up", dim, 4 * dim, rng),
            down: Linear::zeroed(store, "fusion.down", 4 * dim, per_frame * dim),
            dim,
            per_frame,
        }
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, params: &Bindings, pooled: Var) -> Result<Var> {
        let h = self.up.apply(tape, params, pooled)?;
        let h = tape.gelu(h);
        self.down.apply(tape, params, h)
    }
}

/// `local(i, j) + f_m(global)(j)` for every local frame `i`.
pub fn fuse_global_local<F: Real>(
    tape: &mut Tape<F>,
    local: TokenGrid,
    global: Var,
    fm: &FusionMlp,
    params: &Bindings,
) -> Result<TokenGrid> {
    let gshape = tape.shape(global).to_vec();
    if gshape != [local.slots, local.dim] || fm.dim != local.dim {
        return Err(Error::contract(format!(
            "global tokens {gshape:?} do not fit local grid of {} slots x {} dims",
            local.slots, local.dim
        )));
    }
    let residual = fm.apply(tape, params, global)?;
    let spread = if fm.per_frame == 1 {
        tape.tile_rows(residual, local.frames)?
    } else {
        if fm.per_frame != local.frames {
            return Err(Error::contract(format!(
                "per-frame projector built for {} frames, local grid has {}",
                fm.per_frame, local.frames
            )));
        }
        let parts = (0..local.frames)
            .map(|i| tape.slice_cols(residual, i * local.dim, local.dim))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&parts)?
    };
    let tokens = tape.add(local.tokens, spread)?;
    TokenGrid::new(tape, tokens, local.frames, local.slots)
}

/// Visual tokens for one variant, from the projected tokens of all frames.
pub fn global_local_input<F: Real>(
    tape: &mut Tape<F>,
    grid: TokenGrid,
    variant: GlobalLocalVariant,
    local: usize,
    fm: Option<&FusionMlp>,
    params: &Bindings,
) -> Result<TokenGrid> {
    match variant {
        GlobalLocalVariant::GlobalOnly => {
            let pooled = global_pool(tape, grid)?;
            TokenGrid::new(tape, pooled, 1, grid.slots)
        }
        GlobalLocalVariant::LocalOnly => sample_local(tape, grid, local),
        GlobalLocalVariant::SimpleAdd => {
            let pooled = global_pool(tape, grid)?;
            let l = sample_local(tape, grid, local)?;
            let spread = tape.tile_rows(pooled, l.frames)?;
            let tokens = tape.add(l.tokens, spread)?;
            TokenGrid::new(tape, tokens, l.frames, l.slots)
        }
        GlobalLocalVariant::Adapter | GlobalLocalVariant::AdapterPerFrame => {
            let fm = fm.ok_or_else(|| Error::config("adapter variant needs a fusion projector"))?;
            let pooled = global_pool(tape, grid)?;
            let l = sample_local(tape, grid, local)?;
            fuse_global_local(tape, l, pooled, fm, params)
        }
    }
}
