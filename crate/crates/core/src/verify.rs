//! Invariant suite: quick numeric checks of every module's properties, each
//! reported as one pass/fail line with the measured value.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_batch, reversal_pairs, Split, TaskKind};
use crate::error::Result;
use crate::globallocal::{global_local_input, FusionMlp, GlobalLocalVariant};
use crate::masking::{apply_mask, build_mask_plan, sample_mask_rate, MaskMode, MaskPlan, RATE_BOUNDS, RATE_MEAN};
use crate::model::{checkpoint, decoder_loss, Mode, Model, ModelConfig};
use crate::numerics::gradcheck::{check_params, GradCheckReport, DEFAULT_STEP};
use crate::numerics::{DiffArray, Tape};
use crate::objectives::{mvm_loss, select_pairs, ReferenceHidden};
use crate::params::{Bindings, ParamStore};
use crate::tokens::{assemble_sequence, TokenGrid, TokenSequence};
use crate::trainer::{init, run, sample_loss, stream, RunConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {:<34} {}", self.name, self.detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mean surviving visual tokens over `plans` masks drawn with normal rates.
pub fn mean_surviving(frames: usize, slots: usize, sigma: f64, plans: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut kept = 0usize;
    for _ in 0..plans {
        let rho = sample_mask_rate(sigma, &mut r)?;
        kept += build_mask_plan(frames, slots, rho, &mut r)?.kept.len();
    }
    Ok(kept as f64 / plans as f64)
}

/// Minimum, maximum and mean of `draws` mask rates.
pub fn rate_summary(sigma: f64, draws: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let mut r = rng(seed);
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for _ in 0..draws {
        let x = sample_mask_rate(sigma, &mut r)?;
        lo = lo.min(x);
        hi = hi.max(x);
        sum += x;
    }
    Ok((lo, hi, sum / draws as f64))
}

fn small_model(layers: usize, heads: usize, dim: usize, seed: u64) -> Result<(ParamStore<f64>, Model)> {
    let config = ModelConfig {
        layers,
        heads,
        dim,
        vocab: 32,
        ffn_mult: 2,
        rope_base: 10_000.0,
    };
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, config, &mut rng(seed))?;
    Ok((store, model))
}

fn random_sequence(
    tape: &mut Tape<f64>,
    model: &Model,
    b: &Bindings,
    frames: usize,
    slots: usize,
    text: &[usize],
    seed: u64,
) -> Result<TokenSequence> {
    let mut r = rng(seed);
    let d = model.config.dim;
    let data: Vec<f64> = (0..frames * slots * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let tokens = tape.constant(DiffArray::from_f64(vec![frames * slots, d], &data)?);
    let grid = TokenGrid::new(tape, tokens, frames, slots)?;
    let n = text.len();
    assemble_sequence(tape, grid, text, n - 1..n, &model.embedder(), b)
}

/// MVM loss of an empty plan, where masked and reference runs coincide.
pub fn empty_plan_mvm(seed: u64) -> Result<f64> {
    let (store, model) = small_model(2, 2, 8, seed)?;
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let full = random_sequence(&mut tape, &model, &b, 3, 2, &[3, 5, 12], seed + 1)?;
    let r = model.forward(&mut tape, &b, &full, Mode::Reference)?;
    let reference = ReferenceHidden::capture(&tape, r.hidden)?;
    let plan = MaskPlan::empty(3, 2);
    let masked = apply_mask(&mut tape, &full, &plan)?;
    let out = model.forward(&mut tape, &b, &masked, Mode::Train)?;
    let sel = select_pairs(&masked, &full, &plan)?;
    let loss = mvm_loss(&mut tape, out.hidden, &reference, &sel)?;
    Ok(tape.value(loss.value).item()?)
}

/// Largest gradient difference between the trainer's objective and an oracle
/// that rebuilds the reference states as literal constants, and between the
/// trainer and a variant whose reference stays on the graph.
pub fn detachment_gaps(seed: u64) -> Result<(f64, f64)> {
    let cfg = RunConfig {
        seed,
        frame_size: 8,
        patch_grid: 2,
        train_frames: 3,
        eval_frames: vec![3],
        mvm: true,
        mask_mode: MaskMode::Static { rho: 0.5 },
        model: ModelConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            vocab: 32,
            ffn_mult: 2,
            rope_base: 10_000.0,
        },
        ..RunConfig::default()
    };
    let (net, store) = init::<f64>(&cfg)?;
    let task = gen_batch(cfg.task, 1, cfg.train_frames, cfg.frame_size, Split::Train, &mut rng(seed))?.remove(0);
    let grads = |tape: &Tape<f64>, b: &Bindings| {
        let mut s = store.clone();
        s.zero_grads();
        s.accumulate(tape, b, 1.0);
        s.ids().flat_map(|id| s.grad(id).to_vec()).collect::<Vec<f64>>()
    };

    let mut s = sample_loss(&net, &store, &cfg, &task, Some(0.5), &mut stream(seed, 2))?;
    s.tape.backward(s.loss)?;
    let implementation = grads(&s.tape, &s.bindings);

    let plan = build_mask_plan(cfg.train_frames, cfg.slots(), 0.5, &mut stream(seed, 2))?;
    let literal = {
        let mut t = Tape::no_grad();
        let b = store.bind(&mut t);
        let full = net.sequence(&mut t, &b, &task, cfg.input_mode)?;
        let out = net.model.forward(&mut t, &b, &full, Mode::Reference)?;
        t.value(out.hidden).clone()
    };
    let other = |live: bool| -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let full = net.sequence(&mut t, &b, &task, cfg.input_mode)?;
        let reference = if live {
            net.model.forward(&mut t, &b, &full, Mode::Train)?.hidden
        } else {
            t.constant(DiffArray::new(literal.shape().to_vec(), literal.data().to_vec())?)
        };
        let masked = apply_mask(&mut t, &full, &plan)?;
        let out = net.model.forward(&mut t, &b, &masked, Mode::Train)?;
        let llm = decoder_loss(&mut t, &out, &masked)?;
        let sel = select_pairs(&masked, &full, &plan)?;
        let rows_m: Vec<usize> = sel.pairs.iter().map(|p| p.0).collect();
        let rows_f: Vec<usize> = sel.pairs.iter().map(|p| p.1).collect();
        let pm = t.gather_rows(out.hidden, &rows_m)?;
        let pf = t.gather_rows(reference, &rows_f)?;
        let diff = t.sub(pm, pf)?;
        let sq = t.mul(diff, diff)?;
        let total = t.sum(sq);
        let n = t.value(pm).len() as f64;
        let mvm = t.scale(total, 1.0 / n);
        let loss = t.add(mvm, llm)?;
        t.backward(loss)?;
        Ok(grads(&t, &b))
    };
    let oracle = other(false)?;
    let live = other(true)?;
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok((gap(&implementation, &oracle), gap(&implementation, &live)))
}

/// Whether zero-initialised adapter logits equal local-only logits bit for bit.
pub fn adapter_identity(seed: u64) -> Result<bool> {
    let config = ModelConfig {
        layers: 2,
        heads: 2,
        dim: 8,
        vocab: 32,
        ffn_mult: 2,
        rope_base: 10_000.0,
    };
    let mut r = rng(seed);
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&mut store, config, &mut r)?;
    let fm = FusionMlp::new(&mut store, 8, &mut r);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let data: Vec<f64> = (0..32 * 2 * 8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let tokens = tape.constant(DiffArray::from_f64(vec![64, 8], &data)?);
    let g = TokenGrid::new(&tape, tokens, 32, 2)?;
    let mut logits = |variant| -> Result<Vec<u32>> {
        let v = global_local_input(&mut tape, g, variant, 8, Some(&fm), &b)?;
        let seq = assemble_sequence(&mut tape, v, &[3, 5, 12], 2..3, &model.embedder(), &b)?;
        let out = model.forward(&mut tape, &b, &seq, Mode::Train)?;
        Ok(tape.data(out.logits).iter().map(|x| x.to_bits()).collect())
    };
    Ok(logits(GlobalLocalVariant::Adapter)? == logits(GlobalLocalVariant::LocalOnly)?)
}

/// Finite-difference check of the full network's decoder loss: frame
/// encoder, projection and transformer, on one reversal clip.
pub fn network_gradcheck(seed: u64, samples: usize) -> Result<(GradCheckReport, usize, usize)> {
    let cfg = RunConfig {
        seed,
        frame_size: 8,
        patch_grid: 1,
        train_frames: 3,
        eval_frames: vec![3],
        model: ModelConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            vocab: 32,
            ffn_mult: 2,
            rope_base: 10_000.0,
        },
        ..RunConfig::default()
    };
    let (net, mut store) = init::<f64>(&cfg)?;
    let task = gen_batch(cfg.task, 1, cfg.train_frames, cfg.frame_size, Split::Train, &mut rng(seed))?.remove(0);
    let len = {
        let mut t = Tape::no_grad();
        let b = store.bind(&mut t);
        net.sequence(&mut t, &b, &task, cfg.input_mode)?.len()
    };
    let build = |t: &mut Tape<f64>, b: &Bindings| {
        let seq = net.sequence(t, b, &task, cfg.input_mode)?;
        let out = net.model.forward(t, b, &seq, Mode::Train)?;
        decoder_loss(t, &out, &seq)
    };
    let report = check_params(&mut store, build, samples, DEFAULT_STEP, &mut rng(seed + 1))?;
    Ok((report, len, samples))
}

/// Whether perturbing any position leaves every earlier output bitwise equal.
pub fn causality(seed: u64) -> Result<bool> {
    let (store, model) = small_model(2, 2, 16, seed)?;
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let seq = random_sequence(&mut tape, &model, &b, 3, 2, &[3, 4], seed + 1)?;
    let base = model.forward(&mut tape, &b, &seq, Mode::Train)?;
    let len = seq.len();
    let d = model.config.dim;
    for p in 0..len {
        let mut data = tape.data(seq.embeddings).to_vec();
        for x in &mut data[p * d..] {
            *x += 0.37;
        }
        let e = tape.constant(DiffArray::new(vec![len, d], data)?);
        let moved = TokenSequence {
            embeddings: e,
            ..seq.clone()
        };
        let out = model.forward(&mut tape, &b, &moved, Mode::Train)?;
        for (v0, v1) in [(base.hidden, out.hidden), (base.logits, out.logits)] {
            let w = tape.shape(v0)[1];
            let same = tape.data(v0)[..p * w]
                .iter()
                .zip(&tape.data(v1)[..p * w])
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Largest change of any attention score when every position id is shifted
/// by the same offset.
pub fn rope_offset_shift(seed: u64, offsets: &[usize]) -> Result<f64> {
    let (store, model) = small_model(2, 2, 16, seed)?;
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let seq = random_sequence(&mut tape, &model, &b, 2, 2, &[3, 4, 5], seed + 1)?;
    let (_, base) = model.forward_traced(&mut tape, &b, &seq, Mode::Train)?;
    let mut worst = 0.0f64;
    for &offset in offsets {
        let shifted = TokenSequence {
            positions: seq.positions.iter().map(|p| p + offset).collect(),
            ..seq.clone()
        };
        let (_, scores) = model.forward_traced(&mut tape, &b, &shifted, Mode::Train)?;
        for (s0, s1) in base.iter().zip(&scores) {
            for (x, y) in tape.data(*s0).iter().zip(tape.data(*s1)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(worst)
}

fn reversal_multisets(seed: u64) -> Result<bool> {
    let tasks = reversal_pairs(20, 6, 8, Split::Train, seed)?;
    Ok(tasks.chunks(2).all(|p| {
        let key = |t: &crate::data::Task| {
            let mut frames: Vec<Vec<u64>> = t
                .video
                .frames()
                .iter()
                .map(|f| f.iter().map(|x| x.to_bits()).collect())
                .collect();
            frames.sort();
            frames
        };
        key(&p[0]) == key(&p[1]) && p[0].answer_ids != p[1].answer_ids
    }))
}

fn checkpoint_round_trip(seed: u64) -> Result<bool> {
    let (store, model) = small_model(1, 2, 8, seed)?;
    let store = store.cast::<f32>();
    let config = serde_json::to_value(&model.config)?;
    let mut bytes = Vec::new();
    checkpoint::write(&mut bytes, &config, &store)?;
    let (_, loaded) = checkpoint::read::<f32, _>(bytes.as_slice())?;
    Ok(store.ids().all(|id| {
        let (a, b) = (store.get(id).data(), loaded.get(id).data());
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    }))
}

fn reproducible_run(seed: u64) -> Result<bool> {
    let cfg = RunConfig {
        seed,
        frame_size: 8,
        train_frames: 4,
        eval_frames: vec![4],
        eval_samples: 4,
        mvm: true,
        mask_mode: MaskMode::DynamicNormal { sigma: 0.1 },
        model: ModelConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            vocab: 32,
            ffn_mult: 2,
            rope_base: 10_000.0,
        },
        steps: 2,
        batch_size: 2,
        ..RunConfig::default()
    };
    let a = run::<f32>(&cfg, |_| {})?;
    let b = run::<f32>(&cfg, |_| {})?;
    Ok(a.records == b.records)
}

fn balanced_labels(seed: u64) -> Result<(bool, String)> {
    let n = 2000;
    let tasks = gen_batch(TaskKind::Reversal, n, 4, 8, Split::Train, &mut rng(seed))?;
    let first = tasks.iter().filter(|t| t.answer_ids == tasks[0].answer_ids).count() as f64 / n as f64;
    let bound = 3.0 * (0.25 / n as f64).sqrt();
    Ok(((first - 0.5).abs() <= bound, format!("share {first:.4} (3 sigma {bound:.4})")))
}

/// Runs every check with the given seed.
pub fn run_suite(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    out.push(Check::from_result(
        "masking.surviving_tokens",
        mean_surviving(16, 32, 0.1, 10_000, seed).map(|m| ((m - 256.0).abs() <= 2.0, format!("mean kept {m:.3} (256 +- 2)"))),
    ));
    out.push(Check::from_result(
        "masking.rate_bounds",
        rate_summary(0.1, 100_000, seed).and_then(|(lo, hi, mean)| {
            let zero = sample_mask_rate(0.0, &mut rng(seed))?;
            let ok = lo >= RATE_BOUNDS.0 && hi <= RATE_BOUNDS.1 && (mean - RATE_MEAN).abs() <= 0.01 && zero == RATE_MEAN;
            Ok((ok, format!("min {lo:.4} max {hi:.4} mean {mean:.4} sigma0 {zero}")))
        }),
    ));
    out.push(Check::from_result(
        "objectives.empty_plan_zero",
        empty_plan_mvm(seed).map(|v| (v == 0.0, format!("l_mvm {v:e}"))),
    ));
    out.push(Check::from_result(
        "objectives.reference_detached",
        detachment_gaps(seed).map(|(o, l)| {
            (o <= 1e-12 && l > 1e-6, format!("vs constant oracle {o:.2e}, vs live graph {l:.2e}"))
        }),
    ));
    out.push(Check::from_result(
        "globallocal.zero_init_identity",
        adapter_identity(seed).map(|same| (same, format!("bitwise equal logits: {same}"))),
    ));
    out.push(Check::from_result(
        "model.gradcheck",
        network_gradcheck(seed, 60).map(|(r, len, _)| {
            (
                r.passes(1e-4) && len <= 12 && r.checked >= 50,
                format!("max rel err {:.2e} over {} params, L={len}", r.max_relative_error, r.checked),
            )
        }),
    ));
    out.push(Check::from_result(
        "model.causality",
        causality(seed).map(|ok| (ok, format!("earlier rows bitwise unchanged: {ok}"))),
    ));
    out.push(Check::from_result(
        "model.rope_offset",
        rope_offset_shift(seed, &[1, 7, 100]).map(|d| (d <= 1e-12, format!("max score change {d:.2e}"))),
    ));
    out.push(Check::from_result(
        "model.checkpoint_round_trip",
        checkpoint_round_trip(seed).map(|ok| (ok, format!("bit exact: {ok}"))),
    ));
    out.push(Check::from_result(
        "data.reversal_multisets",
        reversal_multisets(seed).map(|ok| (ok, format!("pairs share frames, differ in label: {ok}"))),
    ));
    out.push(Check::from_result("data.balanced_labels", balanced_labels(seed)));
    out.push(Check::from_result(
        "trainer.reproducible",
        reproducible_run(seed).map(|ok| (ok, format!("identical metrics: {ok}"))),
    ));
    out
}
