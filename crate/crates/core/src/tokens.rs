//! Frame encoding, visual projection and input sequence assembly.
//!
//! The assembled layout is
//! `START, v(1,1) .. v(1,K), v(2,1) .. v(T,K), c(1) .. c(N), END`
//! with no separators and no position features other than the position ids
//! consumed by the rotary attention.

use std::ops::Range;

use rand::Rng;

use crate::data::vocab::{END, START};
use crate::error::{Error, Result};
use crate::numerics::{DiffArray, Real, Tape, Var};
use crate::params::{Bindings, Linear, ParamId, ParamStore};

/// `T` square grayscale frames with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    size: usize,
    frames: Vec<Vec<f64>>,
}

impl SyntheticVideo {
    pub fn new(size: usize, frames: Vec<Vec<f64>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::contract("a video needs at least one frame"));
        }
        for f in &frames {
            if f.len() != size * size {
                return Err(Error::Dimension {
                    op: "video",
                    lhs: vec![size, size],
                    rhs: vec![f.len()],
                });
            }
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract("pixel values must lie in [0, 1]"));
            }
        }
        Ok(Self { size, frames })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    /// Same frames in reverse order.
    pub fn reversed(&self) -> Self {
        let mut frames = self.frames.clone();
        frames.reverse();
        Self {
            size: self.size,
            frames,
        }
    }

    /// Clip made of the frames at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let frames = indices
            .iter()
            .map(|&i| {
                self.frames.get(i).cloned().ok_or(Error::Index {
                    what: "frames",
                    index: i,
                    len: self.frames.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.size, frames)
    }
}

/// Visual tokens of a clip: `frames x slots` rows of width `dim`, frame-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens: Var,
    pub frames: usize,
    pub slots: usize,
    pub dim: usize,
}

impl TokenGrid {
    pub fn new<F: Real>(tape: &Tape<F>, tokens: Var, frames: usize, slots: usize) -> Result<Self> {
        let shape = tape.shape(tokens);
        if shape.len() != 2 || shape[0] != frames * slots {
            return Err(Error::Dimension {
                op: "token_grid",
                lhs: shape.to_vec(),
                rhs: vec![frames, slots],
            });
        }
        Ok(Self {
            tokens,
            frames,
            slots,
            dim: shape[1],
        })
    }

    pub fn len(&self) -> usize {
        self.frames * self.slots
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row of token `(frame, slot)`, both zero-based.
    pub fn row(&self, frame: usize, slot: usize) -> usize {
        frame * self.slots + slot
    }
}

/// Per-frame patch encoder: each frame is cut into a `P x P` grid of
/// non-overlapping patches (`K = P^2` tokens per frame, row-major), and every
/// flattened patch goes through one shared affine map to `dim` features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameEncoder {
    pub frame_size: usize,
    pub patch_grid: usize,
    pub dim: usize,
    pub map: Linear,
}

impl FrameEncoder {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        frame_size: usize,
        patch_grid: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if patch_grid == 0 || frame_size % patch_grid != 0 {
            return Err(Error::config(format!(
                "frame size {frame_size} is not divisible into a {patch_grid}x{patch_grid} patch grid"
            )));
        }
        let side = frame_size / patch_grid;
        Ok(Self {
            frame_size,
            patch_grid,
            dim,
            map: Linear::new(store, "encoder", side * side, dim, rng),
        })
    }

    pub fn slots(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    fn patch_side(&self) -> usize {
        self.frame_size / self.patch_grid
    }

    /// Flattened patches of every frame, `[T*K, side*side]`.
    pub fn patches<F: Real>(&self, video: &SyntheticVideo) -> Result<DiffArray<F>> {
        if video.size() != self.frame_size {
            return Err(Error::config(format!(
                "encoder expects {0}x{0} frames, got {1}x{1}",
                self.frame_size,
                video.size()
            )));
        }
        let (g, p, s) = (self.frame_size, self.patch_grid, self.patch_side());
        let mut data = Vec::with_capacity(video.frame_count() * g * g);
        for frame in video.frames() {
            for pr in 0..p {
                for pc in 0..p {
                    for r in 0..s {
                        let row = (pr * s + r) * g + pc * s;
                        data.extend(frame[row..row + s].iter().map(|&v| F::lit(v)));
                    }
                }
            }
        }
        DiffArray::new(vec![video.frame_count() * p * p, s * s], data)
    }
}

/// Encodes every frame independently into `K` tokens.
pub fn encode_frames<F: Real>(
    tape: &mut Tape<F>,
    video: &SyntheticVideo,
    encoder: &FrameEncoder,
    params: &Bindings,
) -> Result<TokenGrid> {
    let patches = tape.constant(encoder.patches(video)?);
    let tokens = encoder.map.apply(tape, params, patches)?;
    TokenGrid::new(tape, tokens, video.frame_count(), encoder.slots())
}

/// Applies the visual projection to every token.
pub fn project_visual<F: Real>(
    tape: &mut Tape<F>,
    grid: TokenGrid,
    projection: &Linear,
    params: &Bindings,
) -> Result<TokenGrid> {
    let w = tape.shape(params.var(projection.weight)).to_vec();
    if w[0] != grid.dim {
        return Err(Error::config(format!(
            "projection expects width {}, tokens have {}",
            w[0], grid.dim
        )));
    }
    let tokens = projection.apply(tape, params, grid.tokens)?;
    TokenGrid::new(tape, tokens, grid.frames, grid.slots)
}

/// Where a sequence position came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Start,
    /// Zero-based frame and slot.
    Visual { frame: usize, slot: usize },
    /// Zero-based index into the text ids.
    Text(usize),
    End,
}

/// Model input: embeddings plus bookkeeping for every position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Var,
    pub positions: Vec<usize>,
    pub origins: Vec<Origin>,
    pub text_ids: Vec<usize>,
    /// Answer tokens as a range over `text_ids`.
    pub answer: Range<usize>,
    /// Frames and slots of the visual grid the sequence was built from.
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn visual_count(&self) -> usize {
        self.origins
            .iter()
            .filter(|o| matches!(o, Origin::Visual { .. }))
            .count()
    }

    /// Sequence row of each answer token.
    pub fn answer_rows(&self) -> Vec<usize> {
        self.origins
            .iter()
            .enumerate()
            .filter_map(|(r, o)| match o {
                Origin::Text(n) if self.answer.contains(n) => Some(r),
                _ => None,
            })
            .collect()
    }
}

/// Token embedding table shared with the output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Embedder {
    pub table: ParamId,
    pub vocab: usize,
}

/// Builds `START, visual tokens, text, END`.
pub fn assemble_sequence<F: Real>(
    tape: &mut Tape<F>,
    grid: TokenGrid,
    text_ids: &[usize],
    answer: Range<usize>,
    embedder: &Embedder,
    params: &Bindings,
) -> Result<TokenSequence> {
    assemble(tape, grid, text_ids, answer, embedder, params, true)
}

/// Builds `START, visual tokens, text` with no closing token, for decoding.
pub fn assemble_prompt<F: Real>(
    tape: &mut Tape<F>,
    grid: TokenGrid,
    text_ids: &[usize],
    embedder: &Embedder,
    params: &Bindings,
) -> Result<TokenSequence> {
    let n = text_ids.len();
    assemble(tape, grid, text_ids, n..n, embedder, params, false)
}

fn assemble<F: Real>(
    tape: &mut Tape<F>,
    grid: TokenGrid,
    text_ids: &[usize],
    answer: Range<usize>,
    embedder: &Embedder,
    params: &Bindings,
    close: bool,
) -> Result<TokenSequence> {
    if text_ids.is_empty() {
        return Err(Error::contract("sequence needs at least one text token"));
    }
    if answer.end > text_ids.len() || answer.start > answer.end {
        return Err(Error::contract(format!(
            "answer range {answer:?} outside {} text tokens",
            text_ids.len()
        )));
    }
    if let Some(&bad) = text_ids.iter().find(|&&id| id >= embedder.vocab) {
        return Err(Error::Index {
            what: "vocabulary",
            index: bad,
            len: embedder.vocab,
        });
    }
    let table = params.var(embedder.table);
    let width = tape.shape(table)[1];
    if width != grid.dim {
        return Err(Error::Dimension {
            op: "assemble_sequence",
            lhs: vec![grid.len(), grid.dim],
            rhs: tape.shape(table).to_vec(),
        });
    }
    let start = tape.gather_rows(table, &[START])?;
    let text = tape.gather_rows(table, text_ids)?;
    let mut parts = vec![start, grid.tokens, text];
    let mut origins = Vec::with_capacity(grid.len() + text_ids.len() + 2);
    origins.push(Origin::Start);
    for frame in 0..grid.frames {
        for slot in 0..grid.slots {
            origins.push(Origin::Visual { frame, slot });
        }
    }
    origins.extend((0..text_ids.len()).map(Origin::Text));
    if close {
        parts.push(tape.gather_rows(table, &[END])?);
        origins.push(Origin::End);
    }
    let embeddings = tape.concat_rows(&parts)?;
    Ok(TokenSequence {
        embeddings,
        positions: (0..origins.len()).collect(),
        origins,
        text_ids: text_ids.to_vec(),
        answer,
        grid: (grid.frames, grid.slots),
    })
}
