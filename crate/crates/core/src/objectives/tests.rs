use super::*;
use crate::masking::{apply_mask, build_mask_plan};
use crate::model::{decoder_loss, Mode, Model, ModelConfig};
use crate::numerics::gradcheck::{check_params, DEFAULT_STEP};
use crate::params::{Bindings, ParamStore};
use crate::tokens::{assemble_sequence, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn setup(seed: u64) -> (ParamStore<f64>, Model) {
    let config = ModelConfig {
        layers: 2,
        heads: 2,
        dim: 8,
        vocab: 32,
        ffn_mult: 2,
        rope_base: 10_000.0,
    };
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, config, &mut rng(seed)).unwrap();
    (store, model)
}

fn full_sequence(tape: &mut Tape<f64>, model: &Model, b: &Bindings, frames: usize, slots: usize, seed: u64) -> TokenSequence {
    let mut r = rng(seed);
    let d = model.config.dim;
    let data: Vec<f64> = (0..frames * slots * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let tokens = tape.constant(DiffArray::from_f64(vec![frames * slots, d], &data).unwrap());
    let grid = TokenGrid::new(tape, tokens, frames, slots).unwrap();
    assemble_sequence(tape, grid, &[3, 5, 12], 2..3, &model.embedder(), b).unwrap()
}

fn visual_tag(seq: &TokenSequence, row: usize) -> Origin {
    seq.origins[row]
}

#[test]
fn empty_plan_pairs_every_visual_token_with_itself() {
    let (store, model) = setup(0);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let full = full_sequence(&mut tape, &model, &b, 2, 3, 1);
    let plan = MaskPlan::empty(2, 3);
    let masked = apply_mask(&mut tape, &full, &plan).unwrap();
    let sel = select_pairs(&masked, &full, &plan).unwrap();
    assert_eq!(sel.pairs, (1..7).map(|r| (r, r)).collect::<Vec<_>>());
}

#[test]
fn single_masked_token_is_left_out() {
    let (store, model) = setup(0);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let full = full_sequence(&mut tape, &model, &b, 2, 2, 1);
    let plan = MaskPlan {
        rho: 0.25,
        frames: 2,
        slots: 2,
        masked: vec![1],
        kept: vec![0, 2, 3],
    };
    let masked = apply_mask(&mut tape, &full, &plan).unwrap();
    let sel = select_pairs(&masked, &full, &plan).unwrap();
    let tags: Vec<_> = sel.pairs.iter().map(|p| visual_tag(&full, p.1)).collect();
    let v = |frame, slot| Origin::Visual { frame, slot };
    assert_eq!(tags, vec![v(0, 0), v(1, 0), v(1, 1)]);
}

#[test]
fn pairs_match_tags_over_random_plans() {
    let (store, model) = setup(0);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let full = full_sequence(&mut tape, &model, &b, 4, 4, 2);
    let mut r = rng(3);
    for _ in 0..100 {
        let rho = r.gen_range(0.0..=1.0);
        let plan = build_mask_plan(4, 4, rho, &mut r).unwrap();
        let masked = apply_mask(&mut tape, &full, &plan).unwrap();
        let sel = select_pairs(&masked, &full, &plan).unwrap();
        assert_eq!(sel.len(), plan.kept.len());
        for &(m, f) in &sel.pairs {
            assert_eq!(masked.origins[m], full.origins[f]);
            let Origin::Visual { frame, slot } = full.origins[f] else { panic!() };
            assert!(!plan.is_masked(frame * 4 + slot));
        }
    }
}

#[test]
fn mismatched_runs_are_contract_errors() {
    let (store, model) = setup(0);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let full = full_sequence(&mut tape, &model, &b, 2, 2, 1);
    let plan = build_mask_plan(2, 2, 0.5, &mut rng(0)).unwrap();
    let other = build_mask_plan(2, 2, 0.5, &mut rng(77)).unwrap();
    assert_ne!(plan.masked, other.masked);
    let masked = apply_mask(&mut tape, &full, &plan).unwrap();
    assert!(matches!(select_pairs(&masked, &full, &other), Err(Error::Contract(_))));
    let wrong_grid = MaskPlan::empty(4, 1);
    assert!(matches!(select_pairs(&masked, &full, &wrong_grid), Err(Error::Contract(_))));
}

#[test]
fn identical_runs_give_exactly_zero() {
    let (store, model) = setup(4);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let full = full_sequence(&mut tape, &model, &b, 2, 3, 5);
    let reference = model.forward(&mut tape, &b, &full, Mode::Reference).unwrap();
    let reference = ReferenceHidden::capture(&tape, reference.hidden).unwrap();
    let plan = MaskPlan::empty(2, 3);
    let masked = apply_mask(&mut tape, &full, &plan).unwrap();
    let out = model.forward(&mut tape, &b, &masked, Mode::Train).unwrap();
    let sel = select_pairs(&masked, &full, &plan).unwrap();
    let loss = mvm_loss(&mut tape, out.hidden, &reference, &sel).unwrap();
    assert!(!loss.degenerate);
    assert_eq!(tape.data(loss.value)[0], 0.0);
}

#[test]
fn one_pair_one_dim_formula() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(DiffArray::from_f64(vec![1, 1], &[1.0]).unwrap());
    let reference = ReferenceHidden::from_array(DiffArray::from_f64(vec![1, 1], &[1.5]).unwrap());
    let sel = PairSelection { pairs: vec![(0, 0)] };
    let loss = mvm_loss(&mut tape, a, &reference, &sel).unwrap();
    assert_eq!(tape.data(loss.value)[0], 0.25);
}

#[test]
fn duplicated_dims_keep_the_scale() {
    let mut tape = Tape::<f64>::new();
    let (x, y) = ([0.3, -1.2, 2.0, 0.7], [1.0, 0.5, -0.5, 0.0]);
    let a = tape.param(DiffArray::from_f64(vec![2, 2], &x).unwrap());
    let r = ReferenceHidden::from_array(DiffArray::from_f64(vec![2, 2], &y).unwrap());
    let dup = |v: &[f64]| vec![v[0], v[1], v[0], v[1], v[2], v[3], v[2], v[3]];
    let a2 = tape.param(DiffArray::from_f64(vec![2, 4], &dup(&x)).unwrap());
    let r2 = ReferenceHidden::from_array(DiffArray::from_f64(vec![2, 4], &dup(&y)).unwrap());
    let sel = PairSelection {
        pairs: vec![(0, 0), (1, 1)],
    };
    let l1 = mvm_loss(&mut tape, a, &r, &sel).unwrap().value;
    let l2 = mvm_loss(&mut tape, a2, &r2, &sel).unwrap().value;
    assert!((tape.data(l1)[0] - tape.data(l2)[0]).abs() < 1e-15);
    assert!(tape.data(l1)[0] > 0.0);
}

#[test]
fn empty_selection_is_zero_and_flagged() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(DiffArray::zeros(vec![3, 2]));
    let r = ReferenceHidden::from_array(DiffArray::zeros(vec![3, 2]));
    let loss = mvm_loss(&mut tape, a, &r, &PairSelection::default()).unwrap();
    assert!(loss.degenerate);
    assert_eq!(tape.data(loss.value)[0], 0.0);
}

#[test]
fn capture_refuses_live_nodes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(DiffArray::zeros(vec![1, 2]));
    assert!(matches!(ReferenceHidden::capture(&tape, a), Err(Error::Contract(_))));
}

/// Loss of the masked run against a reference computed once at the current
/// parameters.
fn masked_mvm(store: &ParamStore<f64>, model: &Model, seed: u64) -> (ReferenceHidden<f64>, MaskPlan) {
    let mut tape = Tape::no_grad();
    let b = store.bind(&mut tape);
    let full = full_sequence(&mut tape, model, &b, 3, 2, seed);
    let out = model.forward(&mut tape, &b, &full, Mode::Reference).unwrap();
    let plan = build_mask_plan(3, 2, 0.5, &mut rng(seed)).unwrap();
    (ReferenceHidden::capture(&tape, out.hidden).unwrap(), plan)
}

#[test]
fn mvm_gradient_matches_finite_differences_with_constant_reference() {
    let (mut store, model) = setup(6);
    let (reference, plan) = masked_mvm(&store, &model, 7);
    let report = check_params(
        &mut store,
        |tape, b| {
            let full = full_sequence(tape, &model, b, 3, 2, 7);
            let masked = apply_mask(tape, &full, &plan)?;
            let out = model.forward(tape, b, &masked, Mode::Train)?;
            let sel = select_pairs(&masked, &full, &plan)?;
            Ok(mvm_loss(tape, out.hidden, &reference, &sel)?.value)
        },
        60,
        DEFAULT_STEP,
        &mut rng(8),
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn detached_reference_matches_the_constant_oracle_not_the_live_graph() {
    let (store, model) = setup(9);
    let plan = build_mask_plan(3, 2, 0.5, &mut rng(10)).unwrap();

    // implementation: reference pass in reference mode on the same tape
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let full = full_sequence(&mut tape, &model, &b, 3, 2, 11);
    let r = model.forward(&mut tape, &b, &full, Mode::Reference).unwrap();
    let reference = ReferenceHidden::capture(&tape, r.hidden).unwrap();
    let masked = apply_mask(&mut tape, &full, &plan).unwrap();
    let out = model.forward(&mut tape, &b, &masked, Mode::Train).unwrap();
    let sel = select_pairs(&masked, &full, &plan).unwrap();
    let loss = mvm_loss(&mut tape, out.hidden, &reference, &sel).unwrap().value;
    tape.backward(loss).unwrap();
    let mut imp = store.clone();
    imp.zero_grads();
    imp.accumulate(&tape, &b, 1.0);

    // oracle: reference values rebuilt as literal constants on a fresh tape
    let literals: Vec<f64> = reference.values().data().to_vec();
    let mut tape2 = Tape::new();
    let b2 = store.bind(&mut tape2);
    let full2 = full_sequence(&mut tape2, &model, &b2, 3, 2, 11);
    let masked2 = apply_mask(&mut tape2, &full2, &plan).unwrap();
    let out2 = model.forward(&mut tape2, &b2, &masked2, Mode::Train).unwrap();
    let constant = tape2.constant(DiffArray::new(reference.values().shape().to_vec(), literals).unwrap());
    let rows_m: Vec<usize> = sel.pairs.iter().map(|p| p.0).collect();
    let rows_f: Vec<usize> = sel.pairs.iter().map(|p| p.1).collect();
    let pm = tape2.gather_rows(out2.hidden, &rows_m).unwrap();
    let pf = tape2.gather_rows(constant, &rows_f).unwrap();
    let diff = tape2.sub(pm, pf).unwrap();
    let sq = tape2.mul(diff, diff).unwrap();
    let s = tape2.sum(sq);
    let n = tape2.value(pm).len() as f64;
    let oracle_loss = tape2.scale(s, 1.0 / n);
    tape2.backward(oracle_loss).unwrap();
    let mut oracle = store.clone();
    oracle.zero_grads();
    oracle.accumulate(&tape2, &b2, 1.0);

    // live: reference states left on the graph
    let mut tape3 = Tape::new();
    let b3 = store.bind(&mut tape3);
    let full3 = full_sequence(&mut tape3, &model, &b3, 3, 2, 11);
    let live_ref = model.forward(&mut tape3, &b3, &full3, Mode::Train).unwrap();
    let masked3 = apply_mask(&mut tape3, &full3, &plan).unwrap();
    let out3 = model.forward(&mut tape3, &b3, &masked3, Mode::Train).unwrap();
    let pm = tape3.gather_rows(out3.hidden, &rows_m).unwrap();
    let pf = tape3.gather_rows(live_ref.hidden, &rows_f).unwrap();
    let diff = tape3.sub(pm, pf).unwrap();
    let sq = tape3.mul(diff, diff).unwrap();
    let s = tape3.sum(sq);
    let live_loss = tape3.scale(s, 1.0 / n);
    tape3.backward(live_loss).unwrap();
    let mut live = store.clone();
    live.zero_grads();
    live.accumulate(&tape3, &b3, 1.0);

    let (mut to_oracle, mut to_live) = (0.0f64, 0.0f64);
    for id in store.ids() {
        for ((a, o), l) in imp.grad(id).iter().zip(oracle.grad(id)).zip(live.grad(id)) {
            to_oracle = to_oracle.max((a - o).abs());
            to_live = to_live.max((a - l).abs());
        }
    }
    assert!(to_oracle <= 1e-12, "{to_oracle}");
    assert!(to_live > 1e-6, "{to_live}");
    assert!((tape.data(loss)[0] - tape2.data(oracle_loss)[0]).abs() < 1e-14);
}

#[test]
fn total_loss_sums_and_reports_the_bad_term() {
    let mut tape = Tape::<f64>::new();
    let zero = tape.constant(DiffArray::scalar(0.0));
    let x = tape.param(DiffArray::scalar(1.75));
    let t = total_loss(&mut tape, zero, x, LossWeights::default()).unwrap();
    assert_eq!(tape.data(t)[0], 1.75);
    let t = total_loss(&mut tape, x, zero, LossWeights::default()).unwrap();
    assert_eq!(tape.data(t)[0], 1.75);
    let w = LossWeights { mvm: 0.5, llm: 2.0 };
    let t = total_loss(&mut tape, x, x, w).unwrap();
    assert_eq!(tape.data(t)[0], 1.75 * 2.5);

    let nan = tape.constant(DiffArray::scalar(f64::NAN));
    match total_loss(&mut tape, nan, x, LossWeights::default()) {
        Err(Error::NonFinite { term, .. }) => assert_eq!(term, "l_mvm"),
        other => panic!("{other:?}"),
    }
    let inf = tape.constant(DiffArray::scalar(f64::INFINITY));
    match total_loss(&mut tape, x, inf, LossWeights::default()) {
        Err(Error::NonFinite { term, .. }) => assert_eq!(term, "l_llm"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn total_gradient_is_the_sum_of_term_gradients() {
    let (store, model) = setup(12);
    let (reference, plan) = masked_mvm(&store, &model, 13);
    let grads = |which: u8| {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let full = full_sequence(&mut tape, &model, &b, 3, 2, 13);
        let masked = apply_mask(&mut tape, &full, &plan).unwrap();
        let out = model.forward(&mut tape, &b, &masked, Mode::Train).unwrap();
        let sel = select_pairs(&masked, &full, &plan).unwrap();
        let mvm = mvm_loss(&mut tape, out.hidden, &reference, &sel).unwrap().value;
        let llm = decoder_loss(&mut tape, &out, &masked).unwrap();
        let loss = match which {
            0 => mvm,
            1 => llm,
            _ => total_loss(&mut tape, mvm, llm, LossWeights::default()).unwrap(),
        };
        tape.backward(loss).unwrap();
        let mut s = store.clone();
        s.zero_grads();
        s.accumulate(&tape, &b, 1.0);
        s
    };
    let (a, c, t) = (grads(0), grads(1), grads(2));
    for id in store.ids() {
        for ((x, y), z) in a.grad(id).iter().zip(c.grad(id)).zip(t.grad(id)) {
            assert!((x + y - z).abs() <= 1e-12 * (1.0 + z.abs()));
        }
    }
}
