//! Synthetic video question-answering tasks.
//!
//! Every task is a short grayscale clip of one bright square plus a prompt and
//! a one-word answer. The reversal task is the central one: a clip and its exact
//! time reversal carry opposite labels while containing the same frames, so any
//! summary that ignores frame order cannot beat chance on it.

use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokens::SyntheticVideo;

pub mod vocab;

pub use vocab::Vocab;

/// Side of the moving square in the direction task, in pixels.
const DIRECTION_SIDE: usize = 2;
/// Side of the square in the reversal, count and static tasks, in pixels.
const SQUARE_SIDE: u32 = 3;
/// Reversal trajectories move at least this far to the right, in pixels.
const MIN_TRAVEL: u32 = 4;
/// Positions in the reversal task live on a quarter-pixel lattice.
const SUBPIXEL: u32 = 4;
/// One in this many start states belongs to the test split.
const TEST_SHARE: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Direction,
    Reversal,
    Count,
    StaticScene,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Direction => "direction",
            TaskKind::Reversal => "reversal",
            TaskKind::Count => "count",
            TaskKind::StaticScene => "static-scene",
        }
    }

    /// Fewest frames a clip of this kind can have.
    pub fn min_frames(self) -> usize {
        match self {
            TaskKind::Direction => 2,
            TaskKind::Reversal => 3,
            TaskKind::Count | TaskKind::StaticScene => 1,
        }
    }

    /// Every answer word this kind can produce.
    pub fn answers(self) -> &'static [&'static str] {
        match self {
            TaskKind::Direction => &["left", "right", "up", "down"],
            TaskKind::Reversal => &["forward", "backward"],
            TaskKind::Count => &["1", "2", "3", "4", "5", "6", "7", "8", "9"],
            TaskKind::StaticScene => &["top-left", "top-right", "bottom-left", "bottom-right"],
        }
    }

    fn prompt(self) -> [&'static str; 2] {
        match self {
            TaskKind::Direction => ["video", "direction?"],
            TaskKind::Reversal => ["video", "order?"],
            TaskKind::Count => ["video", "count?"],
            TaskKind::StaticScene => ["video", "where?"],
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direction" => Ok(TaskKind::Direction),
            "reversal" => Ok(TaskKind::Reversal),
            "count" => Ok(TaskKind::Count),
            "static-scene" | "static" => Ok(TaskKind::StaticScene),
            other => Err(Error::config(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Which side of the train/test partition of start states to draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Any,
}

impl Split {
    fn admits(self, key: u64) -> bool {
        let test = key % TEST_SHARE == 0;
        match self {
            Split::Train => !test,
            Split::Test => test,
            Split::Any => true,
        }
    }
}

/// A clip with its question and answer.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub video: SyntheticVideo,
    pub prompt_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    /// Seed the task was generated from.
    pub seed: u64,
    /// Hash of the start state; decides the split.
    pub state_key: u64,
}

impl Task {
    /// Prompt followed by answer.
    pub fn text_ids(&self) -> Vec<usize> {
        let mut ids = self.prompt_ids.clone();
        ids.extend_from_slice(&self.answer_ids);
        ids
    }

    /// Range of the answer inside [`Task::text_ids`].
    pub fn answer_range(&self) -> std::ops::Range<usize> {
        self.prompt_ids.len()..self.prompt_ids.len() + self.answer_ids.len()
    }

    /// Positions of the answer tokens in an assembled sequence holding
    /// `visual_tokens` visual positions (after the start token).
    pub fn answer_span(&self, visual_tokens: usize) -> std::ops::Range<usize> {
        let first = 1 + visual_tokens + self.prompt_ids.len();
        first..first + self.answer_ids.len()
    }
}

fn state_key(kind: TaskKind, state: &[u32]) -> u64 {
    let mut h = Sha256::new();
    h.update(kind.name().as_bytes());
    for v in state {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn check_frames(kind: TaskKind, frames: usize) -> Result<()> {
    if frames < kind.min_frames() {
        return Err(Error::config(format!(
            "{} needs at least {} frames, got {frames}",
            kind.name(),
            kind.min_frames()
        )));
    }
    Ok(())
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 256.0).round() / 256.0
}

/// Square of side `side` at real-valued top-left `(x, y)`, box-filtered onto
/// the pixel grid. Intensities are multiples of 1/256.
fn render_square(size: usize, x: f64, y: f64, side: f64) -> Vec<f64> {
    let overlap = |p: usize, lo: f64| {
        let (a, b) = (p as f64, p as f64 + 1.0);
        (b.min(lo + side) - a.max(lo)).max(0.0)
    };
    let mut frame = vec![0.0; size * size];
    for py in 0..size {
        let cy = overlap(py, y);
        if cy == 0.0 {
            continue;
        }
        for px in 0..size {
            frame[py * size + px] = quantize(cy * overlap(px, x));
        }
    }
    frame
}

fn check_grid(size: usize) -> Result<()> {
    let need = (SQUARE_SIDE + MIN_TRAVEL + 1) as usize;
    if size < need {
        return Err(Error::config(format!(
            "frame size {size} is below the minimum of {need}"
        )));
    }
    Ok(())
}

fn task(kind: TaskKind, frames: Vec<Vec<f64>>, size: usize, answer: &str, seed: u64, key: u64) -> Result<Task> {
    let vocab = Vocab::default();
    Ok(Task {
        kind,
        video: SyntheticVideo::new(size, frames)?,
        prompt_ids: vocab.ids(&kind.prompt())?,
        answer_ids: vec![vocab.id(answer)?],
        seed,
        state_key: key,
    })
}

/// A 2x2 square steps one pixel per frame in one of four directions,
/// wrapping around the frame edges.
pub fn gen_direction<R: Rng + ?Sized>(rng: &mut R, frames: usize, size: usize) -> Result<Task> {
    gen_direction_in(rng, frames, size, Split::Any, 0)
}

fn gen_direction_in<R: Rng + ?Sized>(
    rng: &mut R,
    frames: usize,
    size: usize,
    split: Split,
    seed: u64,
) -> Result<Task> {
    check_frames(TaskKind::Direction, frames)?;
    check_grid(size)?;
    loop {
        let x0 = rng.gen_range(0..size);
        let y0 = rng.gen_range(0..size);
        let dir = rng.gen_range(0..4usize);
        let key = state_key(TaskKind::Direction, &[x0 as u32, y0 as u32, dir as u32]);
        if !split.admits(key) {
            continue;
        }
        let video = render_direction(x0, y0, dir, frames, size);
        let answer = TaskKind::Direction.answers()[dir];
        return task(TaskKind::Direction, video, size, answer, seed, key);
    }
}

/// Unit step of each direction word, in `(dx, dy)` with y growing downwards.
pub const DIRECTION_STEPS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn render_direction(x0: usize, y0: usize, dir: usize, frames: usize, size: usize) -> Vec<Vec<f64>> {
    let (dx, dy) = DIRECTION_STEPS[dir];
    let n = size as isize;
    (0..frames)
        .map(|t| {
            let x = (x0 as isize + dx * t as isize).rem_euclid(n);
            let y = (y0 as isize + dy * t as isize).rem_euclid(n);
            let mut frame = vec![0.0; size * size];
            for a in 0..DIRECTION_SIDE as isize {
                for b in 0..DIRECTION_SIDE as isize {
                    let px = (x + a).rem_euclid(n) as usize;
                    let py = (y + b).rem_euclid(n) as usize;
                    frame[py * size + px] = 1.0;
                }
            }
            frame
        })
        .collect()
}

/// Straight-line motion of a 3x3 square with net rightward travel of at least
/// four pixels. Endpoints sit on a quarter-pixel lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Trajectory {
    pub start: (u32, u32),
    pub end: (u32, u32),
}

impl Trajectory {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<Self> {
        check_grid(size)?;
        let max = SUBPIXEL * (size as u32 - SQUARE_SIDE);
        let travel = SUBPIXEL * MIN_TRAVEL;
        let x0 = rng.gen_range(0..=max - travel);
        let x1 = rng.gen_range(x0 + travel..=max);
        let y0 = rng.gen_range(0..=max);
        let y1 = rng.gen_range(0..=max);
        Ok(Self {
            start: (x0, y0),
            end: (x1, y1),
        })
    }

    fn key(&self) -> u64 {
        state_key(
            TaskKind::Reversal,
            &[self.start.0, self.start.1, self.end.0, self.end.1],
        )
    }

    /// Forward-time frames, sampled uniformly from start to end.
    pub fn render(&self, frames: usize, size: usize) -> Vec<Vec<f64>> {
        let q = SUBPIXEL as f64;
        let (x0, y0) = (self.start.0 as f64 / q, self.start.1 as f64 / q);
        let (x1, y1) = (self.end.0 as f64 / q, self.end.1 as f64 / q);
        (0..frames)
            .map(|t| {
                let s = if frames == 1 {
                    0.0
                } else {
                    t as f64 / (frames - 1) as f64
                };
                render_square(
                    size,
                    x0 + (x1 - x0) * s,
                    y0 + (y1 - y0) * s,
                    SQUARE_SIDE as f64,
                )
            })
            .collect()
    }

    /// The clip labelled `forward`, and its exact reversal labelled `backward`.
    pub fn pair(&self, frames: usize, size: usize, seed: u64) -> Result<(Task, Task)> {
        check_frames(TaskKind::Reversal, frames)?;
        let fwd = self.render(frames, size);
        let mut bwd = fwd.clone();
        bwd.reverse();
        let key = self.key();
        Ok((
            task(TaskKind::Reversal, fwd, size, "forward", seed, key)?,
            task(TaskKind::Reversal, bwd, size, "backward", seed, key)?,
        ))
    }
}

/// A trajectory shown forwards or reversed, each with probability one half.
pub fn gen_reversal<R: Rng + ?Sized>(rng: &mut R, frames: usize, size: usize) -> Result<Task> {
    gen_reversal_in(rng, frames, size, Split::Any, 0)
}

fn sample_trajectory_in<R: Rng + ?Sized>(rng: &mut R, size: usize, split: Split) -> Result<Trajectory> {
    loop {
        let traj = Trajectory::sample(rng, size)?;
        if split.admits(traj.key()) {
            return Ok(traj);
        }
    }
}

fn gen_reversal_in<R: Rng + ?Sized>(
    rng: &mut R,
    frames: usize,
    size: usize,
    split: Split,
    seed: u64,
) -> Result<Task> {
    check_frames(TaskKind::Reversal, frames)?;
    let traj = sample_trajectory_in(rng, size, split)?;
    let forward = rng.gen_bool(0.5);
    let (f, b) = traj.pair(frames, size, seed)?;
    Ok(if forward { f } else { b })
}

/// A static square that is visible in `n` randomly chosen frames; the answer
/// is `n` (at most 9).
pub fn gen_count<R: Rng + ?Sized>(rng: &mut R, frames: usize, size: usize) -> Result<Task> {
    gen_count_in(rng, frames, size, Split::Any, 0)
}

fn gen_count_in<R: Rng + ?Sized>(
    rng: &mut R,
    frames: usize,
    size: usize,
    split: Split,
    seed: u64,
) -> Result<Task> {
    check_frames(TaskKind::Count, frames)?;
    check_grid(size)?;
    let side = SQUARE_SIDE as usize;
    loop {
        let x = rng.gen_range(0..=size - side);
        let y = rng.gen_range(0..=size - side);
        let count = rng.gen_range(1..=frames.min(9));
        let key = state_key(TaskKind::Count, &[x as u32, y as u32, count as u32]);
        if !split.admits(key) {
            continue;
        }
        let shown = rand::seq::index::sample(rng, frames, count).into_vec();
        let lit = render_square(size, x as f64, y as f64, side as f64);
        let video = (0..frames)
            .map(|t| {
                if shown.contains(&t) {
                    lit.clone()
                } else {
                    vec![0.0; size * size]
                }
            })
            .collect();
        let answer = TaskKind::Count.answers()[count - 1];
        return task(TaskKind::Count, video, size, answer, seed, key);
    }
}

/// A square that stays put inside one quadrant.
pub fn gen_static_scene<R: Rng + ?Sized>(rng: &mut R, frames: usize, size: usize) -> Result<Task> {
    gen_static_in(rng, frames, size, Split::Any, 0)
}

fn gen_static_in<R: Rng + ?Sized>(
    rng: &mut R,
    frames: usize,
    size: usize,
    split: Split,
    seed: u64,
) -> Result<Task> {
    check_frames(TaskKind::StaticScene, frames)?;
    check_grid(size)?;
    let side = SQUARE_SIDE as usize;
    let half = size / 2;
    loop {
        let quadrant = rng.gen_range(0..4usize);
        let x = rng.gen_range(0..=half - side) + if quadrant % 2 == 1 { half } else { 0 };
        let y = rng.gen_range(0..=half - side) + if quadrant >= 2 { half } else { 0 };
        let key = state_key(TaskKind::StaticScene, &[x as u32, y as u32]);
        if !split.admits(key) {
            continue;
        }
        let frame = render_square(size, x as f64, y as f64, side as f64);
        let answer = TaskKind::StaticScene.answers()[quadrant];
        return task(TaskKind::StaticScene, vec![frame; frames], size, answer, seed, key);
    }
}

/// One task of `kind` from its own seed, restricted to `split`.
pub fn gen_task(kind: TaskKind, seed: u64, frames: usize, size: usize, split: Split) -> Result<Task> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        TaskKind::Direction => gen_direction_in(&mut rng, frames, size, split, seed),
        TaskKind::Reversal => gen_reversal_in(&mut rng, frames, size, split, seed),
        TaskKind::Count => gen_count_in(&mut rng, frames, size, split, seed),
        TaskKind::StaticScene => gen_static_in(&mut rng, frames, size, split, seed),
    }
}

/// `batch_size` independent tasks; item `i` is generated from the `i`-th
/// seed drawn from `rng`.
pub fn gen_batch<R: RngCore + ?Sized>(
    kind: TaskKind,
    batch_size: usize,
    frames: usize,
    size: usize,
    split: Split,
    rng: &mut R,
) -> Result<Vec<Task>> {
    (0..batch_size)
        .map(|_| gen_task(kind, rng.next_u64(), frames, size, split))
        .collect()
}

/// Same as [`gen_batch`] with the kind given by name.
pub fn gen_batch_named<R: RngCore + ?Sized>(
    kind: &str,
    batch_size: usize,
    frames: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<Task>> {
    gen_batch(kind.parse()?, batch_size, frames, size, Split::Any, rng)
}

/// Balanced reversal evaluation set: every trajectory appears once forwards
/// and once reversed. The trajectories depend only on `seed`, so the same
/// clips can be rendered at any frame count.
pub fn reversal_pairs(pairs: usize, frames: usize, size: usize, split: Split, seed: u64) -> Result<Vec<Task>> {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let item = seeds.next_u64();
        let mut rng = ChaCha8Rng::seed_from_u64(item);
        let traj = sample_trajectory_in(&mut rng, size, split)?;
        let (f, b) = traj.pair(frames, size, item)?;
        out.push(f);
        out.push(b);
    }
    Ok(out)
}

/// One JSON-lines record of a dumped task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub kind: TaskKind,
    /// `frames[t][row][col]`.
    pub frames: Vec<Vec<Vec<f64>>>,
    pub prompt_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    pub seed: u64,
}

impl From<&Task> for TaskRecord {
    fn from(t: &Task) -> Self {
        let size = t.video.size();
        TaskRecord {
            kind: t.kind,
            frames: t
                .video
                .frames()
                .iter()
                .map(|f| f.chunks(size).map(<[f64]>::to_vec).collect())
                .collect(),
            prompt_ids: t.prompt_ids.clone(),
            answer_ids: t.answer_ids.clone(),
            seed: t.seed,
        }
    }
}

pub fn write_jsonl<W: Write>(mut out: W, tasks: &[Task]) -> Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut out, &TaskRecord::from(t))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
