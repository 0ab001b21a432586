use super::*;
use crate::data::gen_batch;
use crate::masking::MaskMode;
use crate::model::ModelConfig;

fn tiny(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        frame_size: 8,
        patch_grid: 2,
        train_frames: 4,
        eval_frames: vec![4],
        eval_samples: 8,
        model: ModelConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            vocab: 32,
            ffn_mult: 2,
            rope_base: 10000.0,
        },
        steps: 3,
        batch_size: 2,
        ..RunConfig::default()
    }
}

fn batch(cfg: &RunConfig, n: usize) -> Vec<Task> {
    gen_batch(
        cfg.task,
        n,
        cfg.train_frames,
        cfg.frame_size,
        Split::Train,
        &mut ChaCha8Rng::seed_from_u64(7),
    )
    .unwrap()
}

fn grads(cfg: &RunConfig, rho: Option<f64>) -> Vec<f64> {
    let (net, mut store) = init::<f64>(cfg).unwrap();
    let task = &batch(cfg, 1)[0];
    let mut s = sample_loss(&net, &store, cfg, task, rho, &mut stream(1, 9)).unwrap();
    s.tape.backward(s.loss).unwrap();
    store.accumulate(&s.tape, &s.bindings, 1.0);
    store.ids().flat_map(|id| store.grad(id).to_vec()).collect()
}

#[test]
fn mvm_off_runs_one_forward_per_sample() {
    let cfg = tiny(0);
    let (net, mut store) = init::<f64>(&cfg).unwrap();
    let mut opt = Adam::new(cfg.optimizer.clone(), &store);
    let stats = train_step(&net, &mut store, &mut opt, &batch(&cfg, 3), &cfg, &mut stream(0, 2)).unwrap();
    assert_eq!(stats.forwards, 3);
    assert_eq!(stats.l_mvm, 0.0);

    let on = RunConfig {
        mvm: true,
        mask_mode: MaskMode::DynamicNormal { sigma: 0.1 },
        ..cfg
    };
    let stats = train_step(&net, &mut store, &mut opt, &batch(&on, 3), &on, &mut stream(0, 2)).unwrap();
    assert_eq!(stats.forwards, 6);
    assert!(stats.l_mvm > 0.0);
    assert!(stats.mean_rho >= 0.3 && stats.mean_rho <= 0.7);
}

#[test]
fn zero_mask_rate_with_mvm_matches_plain_decoder_gradients() {
    let plain = grads(&tiny(3), None);
    let with_mvm = grads(
        &RunConfig {
            mvm: true,
            mask_mode: MaskMode::Static { rho: 0.0 },
            ..tiny(3)
        },
        Some(0.0),
    );
    assert_eq!(plain.len(), with_mvm.len());
    for (a, b) in plain.iter().zip(&with_mvm) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn reference_pass_adds_no_gradient_of_its_own() {
    // With every visual token kept the reference equals the masked pass, so
    // any gradient through the reference would double the MVM gradient
    // instead of leaving it at zero.
    let cfg = RunConfig {
        mvm: true,
        mask_mode: MaskMode::Static { rho: 0.0 },
        loss_weights: crate::objectives::LossWeights { mvm: 1.0, llm: 0.0 },
        ..tiny(4)
    };
    assert!(grads(&cfg, Some(0.0)).iter().all(|&g| g == 0.0));
}

#[test]
fn masking_without_mvm_runs_a_single_forward() {
    let cfg = RunConfig {
        mask_mode: MaskMode::Static { rho: 0.5 },
        ..tiny(5)
    };
    let (net, store) = init::<f64>(&cfg).unwrap();
    let task = &batch(&cfg, 1)[0];
    let s = sample_loss(&net, &store, &cfg, task, Some(0.5), &mut stream(5, 2)).unwrap();
    assert_eq!(s.forwards, 1);
    assert!(s.l_llm.is_finite() && s.l_llm > 0.0);
}

#[test]
fn overfits_a_single_batch() {
    let cfg = RunConfig {
        ..tiny(6)
    };
    let (net, mut store) = init::<f32>(&cfg).unwrap();
    let mut opt = Adam::new(cfg.optimizer.clone(), &store);
    let tasks = batch(&cfg, 4);
    let mut last = f64::INFINITY;
    for _ in 0..300 {
        last = train_step(&net, &mut store, &mut opt, &tasks, &cfg, &mut stream(6, 2))
            .unwrap()
            .l_llm;
    }
    assert!(last < 0.05, "final l_llm {last}");
    assert_eq!(evaluate(&net, &store, &tasks, cfg.input_mode).unwrap(), 1.0);
}

#[test]
fn untrained_model_answers_near_chance() {
    let cfg = RunConfig {
        eval_samples: 200,
        ..tiny(8)
    };
    let (net, store) = init::<f32>(&cfg).unwrap();
    let acc = evaluate(&net, &store, &eval_set(&cfg, 4).unwrap(), cfg.input_mode).unwrap();
    // Two answers; an untrained model can still favour one of them, which on
    // a balanced set also scores one half.
    assert!(acc <= 0.65, "accuracy {acc}");
}

#[test]
fn reversal_eval_set_pairs_both_directions() {
    let cfg = tiny(0);
    let tasks = eval_set(&cfg, 4).unwrap();
    assert_eq!(tasks.len(), 8);
    let first = tasks.iter().filter(|t| t.answer_ids == tasks[0].answer_ids).count();
    assert_eq!(first, 4);
}

#[test]
fn meanpool_ignores_frame_order() {
    let cfg = RunConfig {
        input_mode: InputMode::Meanpool,
        ..tiny(2)
    };
    let (net, store) = init::<f64>(&cfg).unwrap();
    let task = &batch(&cfg, 1)[0];
    let mut flipped = task.clone();
    flipped.video = task.video.reversed();
    let logits = |t: &Task| {
        let mut tape = Tape::no_grad();
        let p = store.bind(&mut tape);
        let seq = net.sequence(&mut tape, &p, t, cfg.input_mode).unwrap();
        let out = net.model.forward(&mut tape, &p, &seq, Mode::Reference).unwrap();
        tape.data(out.logits).to_vec()
    };
    let (a, b) = (logits(task), logits(&flipped));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn runs_are_bit_reproducible() {
    let cfg = RunConfig {
        mvm: true,
        mask_mode: MaskMode::DynamicNormal { sigma: 0.1 },
        eval_every: 2,
        steps: 4,
        ..tiny(11)
    };
    let a = run::<f32>(&cfg, |_| {}).unwrap();
    let b = run::<f32>(&cfg, |_| {}).unwrap();
    assert_eq!(a.records, b.records);
    let bits = |s: &ParamStore<f32>| {
        s.ids()
            .flat_map(|id| s.get(id).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.store), bits(&b.store));
    assert_eq!(a.records[1].accuracy.len(), 1);
    assert!(a.records[0].accuracy.is_empty());
}

#[test]
fn different_seeds_diverge() {
    let a = run::<f32>(&tiny(1), |_| {}).unwrap();
    let b = run::<f32>(&tiny(2), |_| {}).unwrap();
    assert_ne!(a.records[0].l_llm, b.records[0].l_llm);
}

#[test]
fn per_batch_rate_is_shared() {
    let cfg = RunConfig {
        mvm: true,
        mask_mode: MaskMode::DynamicUniform { low: 0.3, high: 0.7 },
        rate_granularity: RateGranularity::PerBatch,
        ..tiny(12)
    };
    let (net, mut store) = init::<f64>(&cfg).unwrap();
    let mut opt = Adam::new(cfg.optimizer.clone(), &store);
    let mut rng = stream(0, 2);
    let expected = cfg.mask_mode.sample(&mut stream(0, 2)).unwrap().unwrap();
    let stats = train_step(&net, &mut store, &mut opt, &batch(&cfg, 3), &cfg, &mut rng).unwrap();
    assert!((stats.mean_rho - expected).abs() < 1e-15);
}

#[test]
fn global_local_network_builds_its_projector() {
    let cfg = RunConfig {
        train_frames: 8,
        eval_frames: vec![8],
        input_mode: "global-local:adapter:4".parse().unwrap(),
        ..tiny(0)
    };
    let (net, store) = init::<f32>(&cfg).unwrap();
    assert!(net.fusion.is_some());
    assert!(store.find("fusion.down.weight").is_some());
    let acc = evaluate(&net, &store, &eval_set(&cfg, 8).unwrap(), cfg.input_mode).unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let plain = RunConfig {
        input_mode: "global-local:simple-add:4".parse().unwrap(),
        ..cfg
    };
    assert!(init::<f32>(&plain).unwrap().0.fusion.is_none());
}

#[test]
fn empty_batch_is_rejected() {
    let cfg = tiny(0);
    let (net, mut store) = init::<f64>(&cfg).unwrap();
    let mut opt = Adam::new(cfg.optimizer.clone(), &store);
    assert!(train_step(&net, &mut store, &mut opt, &[], &cfg, &mut stream(0, 2)).is_err());
}

#[test]
fn run_directory_holds_every_output_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(21);
    let summary = metrics::train_to_dir(&cfg, dir.path(), false).unwrap();
    for f in [
        metrics::CONFIG_FILE,
        metrics::METRICS_FILE,
        metrics::TIMING_FILE,
        metrics::SUMMARY_FILE,
        metrics::CHECKPOINT_FILE,
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert_eq!(RunConfig::load(&dir.path().join(metrics::CONFIG_FILE)).unwrap(), cfg);
    let records = metrics::read_metrics(&dir.path().join(metrics::METRICS_FILE)).unwrap();
    assert_eq!(records.len(), cfg.steps);
    assert!(records.iter().all(|r| r.config_hash == cfg.hash()));

    // the checkpoint is stored in f32, which is what this run trained in
    let (_, acc) = metrics::evaluate_run(dir.path(), None).unwrap();
    assert_eq!(acc, summary.accuracy);

    assert!(metrics::train_to_dir(&cfg, dir.path(), false).is_err());
    let again = metrics::train_to_dir(&cfg, dir.path(), true).unwrap();
    assert_eq!(again.accuracy, summary.accuracy);
    let csv = std::fs::read_to_string(dir.path().join(metrics::SUMMARY_FILE)).unwrap();
    assert!(csv.starts_with("config_hash,seed,input_mode,mask_mode,mvm,steps,l_llm,l_mvm,acc_t4,seconds\n"));
}

#[test]
fn metrics_stream_is_byte_identical_across_reruns() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = RunConfig {
        mvm: true,
        mask_mode: MaskMode::DynamicNormal { sigma: 0.1 },
        ..tiny(22)
    };
    metrics::train_to_dir(&cfg, a.path(), false).unwrap();
    metrics::train_to_dir(&cfg, b.path(), false).unwrap();
    for f in [metrics::METRICS_FILE, metrics::CHECKPOINT_FILE, metrics::CONFIG_FILE] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn ablation_grids_mirror_the_table_rows() {
    use ablation::{grid, Table};
    let base = tiny(0);
    let rows = |t| grid(t, &base).into_iter().map(|c| c.row).collect::<Vec<_>>();
    assert_eq!(rows(Table::Input), ["meanpool", "joint-st", "joint-st+mask+mvm"]);
    assert_eq!(
        rows(Table::GlobalLocal),
        ["global-only", "local-only", "simple-add", "adapter"]
    );
    assert_eq!(
        rows(Table::MaskRate),
        ["no-mask", "uniform(0.3,0.7)", "normal(0.5,0.2)", "normal(0.5,0.1)"]
    );
    let fig = grid(Table::Length, &RunConfig { train_frames: 16, ..base.clone() });
    assert_eq!(fig[0].config.eval_frames, vec![4, 8, 16, 24]);
    assert!(grid(Table::MaskRate, &base)[1..].iter().all(|c| c.config.mvm));
    assert_eq!("fig5".parse::<Table>().unwrap(), Table::Length);
    assert!("6".parse::<Table>().is_err());
}

#[test]
fn ablation_runs_cells_and_refuses_duplicates() {
    use ablation::{grid, row_stats, run_grid, Table};
    let out = tempfile::tempdir().unwrap();
    assert!(run_grid(&[], &[0, 1], out.path(), 2, false).unwrap().is_empty());
    assert!(!out.path().join("summary.csv").exists());

    let cells = grid(Table::Input, &RunConfig { steps: 1, ..tiny(0) });
    let results = run_grid(&cells, &[0, 1], out.path(), 2, false).unwrap();
    assert_eq!(results.len(), 6);
    let stats = row_stats(&results);
    assert_eq!(stats.len(), 3);
    assert!(stats.iter().all(|s| s.seeds == 2));
    let table = std::fs::read_to_string(out.path().join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);

    assert!(run_grid(&cells, &[0, 1], out.path(), 1, false).is_err());
    let dup = vec![cells[0].clone(), cells[0].clone()];
    let other = tempfile::tempdir().unwrap();
    assert!(run_grid(&dup, &[0], other.path(), 1, true).is_err());

    // one thread or two, the same numbers
    let serial = tempfile::tempdir().unwrap();
    let again = run_grid(&cells, &[0, 1], serial.path(), 1, false).unwrap();
    for (a, b) in results.iter().zip(&again) {
        assert_eq!(a.summary.accuracy, b.summary.accuracy);
        assert_eq!(a.summary.l_llm, b.summary.l_llm);
    }
}

#[test]
fn plain_setting_is_a_causal_lm_fine_tune() {
    let cfg = tiny(23);
    let (net, store) = init::<f64>(&cfg).unwrap();
    let task = &batch(&cfg, 1)[0];
    let s = sample_loss(&net, &store, &cfg, task, None, &mut stream(0, 2)).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let seq = net.sequence(&mut tape, &p, task, cfg.input_mode).unwrap();
    let out = net.model.forward(&mut tape, &p, &seq, Mode::Train).unwrap();
    let l = decoder_loss(&mut tape, &out, &seq).unwrap();
    assert_eq!(s.tape.value(s.loss).item().unwrap(), tape.value(l).item().unwrap());
}
