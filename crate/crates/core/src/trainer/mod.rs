//! Training and evaluation.
//!
//! Per sample: build the full sequence; with MVM on, run a gradient-free
//! reference pass over it, mask the visual tokens, run the masked pass and
//! add the MVM term to the decoder loss of the masked pass. Gradients are
//! averaged over the batch before one optimizer update.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_batch, reversal_pairs, Split, Task, TaskKind};
use crate::error::{Error, Result};
use crate::globallocal::{global_local_input, global_pool, FusionMlp, GlobalLocalVariant};
use crate::masking::{apply_mask_with, build_mask_plan, MaskPlan};
use crate::model::{decoder_loss, Mode, Model};
use crate::numerics::{Real, Tape, Var};
use crate::objectives::{mvm_loss, select_pairs, total_loss, ReferenceHidden};
use crate::params::{Bindings, Linear, ParamStore};
use crate::tokens::{
    assemble_prompt, assemble_sequence, encode_frames, project_visual, FrameEncoder, SyntheticVideo, TokenGrid,
    TokenSequence,
};

pub mod ablation;
pub mod config;
pub mod metrics;
pub mod optim;

pub use config::{InputMode, OptimizerConfig, RateGranularity, RunConfig};
pub use metrics::{MetricsRecord, RunSummary, TimingRecord};
pub use optim::Adam;

/// Independent random streams of a run, all derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_MASK: u64 = 2;

pub fn stream(seed: u64, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which);
    rng
}

/// Every trainable piece: frame encoder, visual projection, transformer and
/// the optional global-local projector.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub model: Model,
    pub encoder: FrameEncoder,
    pub projection: Linear,
    pub fusion: Option<FusionMlp>,
}

impl Network {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.model.dim;
        let model = Model::new(store, cfg.model.clone(), rng)?;
        let encoder = FrameEncoder::new(store, cfg.frame_size, cfg.patch_grid, d, rng)?;
        let projection = Linear::new(store, "projection", d, d, rng);
        let fusion = match cfg.input_mode {
            InputMode::GlobalLocal {
                variant: GlobalLocalVariant::Adapter,
                ..
            } => Some(FusionMlp::new(store, d, rng)),
            InputMode::GlobalLocal {
                variant: GlobalLocalVariant::AdapterPerFrame,
                local_frames,
            } => Some(FusionMlp::per_frame(store, d, local_frames, rng)),
            _ => None,
        };
        Ok(Self {
            model,
            encoder,
            projection,
            fusion,
        })
    }

    /// Projected visual tokens of `video` under `mode`.
    pub fn visual<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &Bindings,
        video: &SyntheticVideo,
        mode: InputMode,
    ) -> Result<TokenGrid> {
        let grid = encode_frames(tape, video, &self.encoder, params)?;
        let grid = project_visual(tape, grid, &self.projection, params)?;
        match mode {
            InputMode::JointSt => Ok(grid),
            InputMode::Meanpool => {
                let pooled = global_pool(tape, grid)?;
                TokenGrid::new(tape, pooled, 1, grid.slots)
            }
            InputMode::GlobalLocal {
                variant,
                local_frames,
            } => global_local_input(tape, grid, variant, local_frames, self.fusion.as_ref(), params),
        }
    }

    /// `START, visual, prompt, answer, END`.
    pub fn sequence<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &Bindings,
        task: &Task,
        mode: InputMode,
    ) -> Result<TokenSequence> {
        let grid = self.visual(tape, params, &task.video, mode)?;
        assemble_sequence(
            tape,
            grid,
            &task.text_ids(),
            task.answer_range(),
            &self.model.embedder(),
            params,
        )
    }
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub l_llm: f64,
    pub l_mvm: f64,
    pub mean_rho: f64,
    /// Model forward passes run during the step.
    pub forwards: usize,
    /// Samples whose MVM term had no pairs.
    pub degenerate: usize,
}

/// Loss of one sample on a fresh tape, with the tape and bindings needed to
/// read its gradients.
pub struct SampleLoss<F> {
    pub tape: Tape<F>,
    pub bindings: Bindings,
    pub loss: Var,
    pub l_llm: f64,
    pub l_mvm: f64,
    pub forwards: usize,
    pub degenerate: bool,
}

/// Builds the per-sample objective. `rho` is the mask rate, `None` when
/// masking is off.
pub fn sample_loss<F: Real, R: Rng + ?Sized>(
    net: &Network,
    store: &ParamStore<F>,
    cfg: &RunConfig,
    task: &Task,
    rho: Option<f64>,
    rng: &mut R,
) -> Result<SampleLoss<F>> {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let full = net.sequence(&mut tape, &params, task, cfg.input_mode)?;
    let mut forwards = 0;

    let reference = if cfg.mvm {
        let out = net.model.forward(&mut tape, &params, &full, Mode::Reference)?;
        forwards += 1;
        Some(ReferenceHidden::capture(&tape, cfg.mvm_target.pick(&out))?)
    } else {
        None
    };

    let (frames, slots) = full.grid;
    let plan = match rho {
        Some(r) => build_mask_plan(frames, slots, r, rng)?,
        None => MaskPlan::empty(frames, slots),
    };
    let input = if plan.masked.is_empty() {
        full.clone()
    } else {
        apply_mask_with(&mut tape, &full, &plan, cfg.position_policy)?
    };
    let out = net.model.forward(&mut tape, &params, &input, Mode::Train)?;
    forwards += 1;
    let l_llm = decoder_loss(&mut tape, &out, &input)?;
    let l_llm_value = tape.value(l_llm).item()?.as_f64();

    let (loss, l_mvm, degenerate) = match reference {
        Some(reference) => {
            let selection = select_pairs(&input, &full, &plan)?;
            let mvm = mvm_loss(&mut tape, cfg.mvm_target.pick(&out), &reference, &selection)?;
            let value = tape.value(mvm.value).item()?.as_f64();
            let total = total_loss(&mut tape, mvm.value, l_llm, cfg.loss_weights)?;
            (total, value, mvm.degenerate)
        }
        None => {
            if !l_llm_value.is_finite() {
                return Err(Error::NonFinite {
                    term: "l_llm",
                    value: l_llm_value,
                });
            }
            let loss = if cfg.loss_weights.llm == 1.0 {
                l_llm
            } else {
                tape.scale(l_llm, F::lit(cfg.loss_weights.llm))
            };
            (loss, 0.0, false)
        }
    };
    Ok(SampleLoss {
        tape,
        bindings: params,
        loss,
        l_llm: l_llm_value,
        l_mvm,
        forwards,
        degenerate,
    })
}

/// Mask rate for one sample, or `None` when masking is off.
fn draw_rate<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Result<Option<f64>> {
    cfg.mask_mode.sample(rng)
}

/// One optimizer update over `batch`.
pub fn train_step<F: Real, R: Rng + ?Sized>(
    net: &Network,
    store: &mut ParamStore<F>,
    optimizer: &mut Adam<F>,
    batch: &[Task],
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::contract("training step over an empty batch"));
    }
    store.zero_grads();
    let scale = F::lit(1.0 / batch.len() as f64);
    let shared = match cfg.rate_granularity {
        RateGranularity::PerBatch => Some(draw_rate(cfg, rng)?),
        RateGranularity::PerSample => None,
    };
    let mut stats = StepStats::default();
    for task in batch {
        let rho = match shared {
            Some(r) => r,
            None => draw_rate(cfg, rng)?,
        };
        let mut s = sample_loss(net, store, cfg, task, rho, rng)?;
        s.tape.backward(s.loss)?;
        store.accumulate(&s.tape, &s.bindings, scale);
        stats.l_llm += s.l_llm;
        stats.l_mvm += s.l_mvm;
        stats.mean_rho += rho.unwrap_or(0.0);
        stats.forwards += s.forwards;
        stats.degenerate += usize::from(s.degenerate);
    }
    let n = batch.len() as f64;
    stats.l_llm /= n;
    stats.l_mvm /= n;
    stats.mean_rho /= n;
    optimizer.update(store);
    Ok(stats)
}

/// Greedy decoding of the answer: one token at a time, no masking.
pub fn predict<F: Real>(net: &Network, store: &ParamStore<F>, task: &Task, mode: InputMode) -> Result<Vec<usize>> {
    let mut tape = Tape::no_grad();
    let params = store.bind(&mut tape);
    let grid = net.visual(&mut tape, &params, &task.video, mode)?;
    let mut text = task.prompt_ids.clone();
    let mut answer = Vec::with_capacity(task.answer_ids.len());
    for _ in 0..task.answer_ids.len() {
        let seq = assemble_prompt(&mut tape, grid, &text, &net.model.embedder(), &params)?;
        let out = net.model.forward(&mut tape, &params, &seq, Mode::Reference)?;
        let logits = tape.value(out.logits);
        let last = logits.row(logits.rows() - 1);
        let best = last
            .iter()
            .enumerate()
            .fold((0, F::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        answer.push(best);
        text.push(best);
    }
    Ok(answer)
}

/// Exact-match accuracy of greedy answers over `tasks`.
pub fn evaluate<F: Real>(net: &Network, store: &ParamStore<F>, tasks: &[Task], mode: InputMode) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::contract("evaluation over zero tasks"));
    }
    let mut correct = 0usize;
    for task in tasks {
        if predict(net, store, task, mode)? == task.answer_ids {
            correct += 1;
        }
    }
    Ok(correct as f64 / tasks.len() as f64)
}

/// Held-out clips at `frames` frames. Reversal sets hold each trajectory
/// forwards and reversed, so any order-blind predictor scores exactly 0.5.
pub fn eval_set(cfg: &RunConfig, frames: usize) -> Result<Vec<Task>> {
    match cfg.task {
        TaskKind::Reversal => reversal_pairs(
            (cfg.eval_samples / 2).max(1),
            frames,
            cfg.frame_size,
            Split::Test,
            cfg.eval_seed,
        ),
        kind => gen_batch(
            kind,
            cfg.eval_samples,
            frames,
            cfg.frame_size,
            Split::Test,
            &mut ChaCha8Rng::seed_from_u64(cfg.eval_seed),
        ),
    }
}

/// Accuracy at every configured frame count.
pub fn evaluate_all<F: Real>(net: &Network, store: &ParamStore<F>, cfg: &RunConfig) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for &frames in &cfg.eval_frames {
        let tasks = eval_set(cfg, frames)?;
        out.insert(frames, evaluate(net, store, &tasks, cfg.input_mode)?);
    }
    Ok(out)
}

/// Trained parameters plus everything recorded along the way.
pub struct RunOutcome<F> {
    pub network: Network,
    pub store: ParamStore<F>,
    pub records: Vec<MetricsRecord>,
    pub timing: Vec<TimingRecord>,
    pub accuracy: BTreeMap<usize, f64>,
}

/// Fresh parameters for `cfg`.
pub fn init<F: Real>(cfg: &RunConfig) -> Result<(Network, ParamStore<F>)> {
    let mut store = ParamStore::new();
    let net = Network::new(&mut store, cfg, &mut stream(cfg.seed, STREAM_INIT))?;
    Ok((net, store))
}

/// Trains for `cfg.steps` steps, calling `on_record` after every step.
pub fn run<F: Real>(cfg: &RunConfig, mut on_record: impl FnMut(&MetricsRecord)) -> Result<RunOutcome<F>> {
    cfg.validate()?;
    let hash = cfg.hash();
    let (net, mut store) = init::<F>(cfg)?;
    let mut optimizer = Adam::new(cfg.optimizer.clone(), &store);
    let mut data_rng = stream(cfg.seed, STREAM_DATA);
    let mut mask_rng = stream(cfg.seed, STREAM_MASK);
    let started = Instant::now();
    let mut records = Vec::with_capacity(cfg.steps);
    let mut timing = Vec::with_capacity(cfg.steps);
    let mut accuracy = BTreeMap::new();
    for step in 1..=cfg.steps {
        let batch = gen_batch(
            cfg.task,
            cfg.batch_size,
            cfg.train_frames,
            cfg.frame_size,
            Split::Train,
            &mut data_rng,
        )?;
        let stats = train_step(&net, &mut store, &mut optimizer, &batch, cfg, &mut mask_rng).map_err(|e| {
            log::error!(
                "step {step} failed (seed {}, config {hash}): {e}\n{}",
                cfg.seed,
                cfg.canonical_json()
            );
            e
        })?;
        let due = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let acc = if due {
            accuracy = evaluate_all(&net, &store, cfg)?;
            accuracy.clone()
        } else {
            BTreeMap::new()
        };
        let record = MetricsRecord {
            step,
            l_llm: stats.l_llm,
            l_mvm: stats.l_mvm,
            mean_rho: stats.mean_rho,
            accuracy: acc,
            config_hash: hash.clone(),
        };
        record.check()?;
        on_record(&record);
        records.push(record);
        timing.push(TimingRecord {
            step,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    if cfg.steps == 0 {
        accuracy = evaluate_all(&net, &store, cfg)?;
    }
    Ok(RunOutcome {
        network: net,
        store,
        records,
        timing,
        accuracy,
    })
}

#[cfg(test)]
mod tests;
