use super::checkpoint;
use super::*;
use crate::numerics::gradcheck::{check_params, DEFAULT_STEP};
use crate::numerics::DiffArray;
use crate::tokens::{assemble_sequence, TokenGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(layers: usize, heads: usize, dim: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads,
        dim,
        vocab: 32,
        ffn_mult: 2,
        rope_base: 10_000.0,
    }
}

fn setup<F: Real>(config: ModelConfig, seed: u64) -> (ParamStore<F>, Model) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, config, &mut rng).unwrap();
    (store, model)
}

/// A sequence of `frames * slots` random visual rows and the given text.
fn sequence<F: Real>(
    tape: &mut Tape<F>,
    model: &Model,
    b: &Bindings,
    frames: usize,
    slots: usize,
    text: &[usize],
    seed: u64,
) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.config.dim;
    let data: Vec<f64> = (0..frames * slots * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tokens = tape.constant(DiffArray::from_f64(vec![frames * slots, d], &data).unwrap());
    let grid = TokenGrid::new(tape, tokens, frames, slots).unwrap();
    let n = text.len();
    assemble_sequence(tape, grid, text, n - 1..n, &model.embedder(), b).unwrap()
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    assert!(tiny(0, 2, 16).validate().is_err());
    assert!(tiny(1, 3, 16).validate().is_err());
    assert!(tiny(1, 8, 8).validate().is_err());
    let bad = ModelConfig {
        rope_base: 0.5,
        ..tiny(1, 2, 16)
    };
    assert!(bad.validate().is_err());
}

#[test]
fn output_shapes_and_width_check() {
    let (store, model) = setup::<f64>(tiny(2, 2, 16), 0);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let seq = sequence(&mut tape, &model, &b, 2, 2, &[3, 4, 5], 1);
    let out = model.forward(&mut tape, &b, &seq, Mode::Train).unwrap();
    assert_eq!(tape.shape(out.hidden), &[9, 16]);
    assert_eq!(tape.shape(out.logits), &[9, 32]);
    assert!(tape.value(out.logits).is_finite());

    let wide = tape.constant(DiffArray::zeros(vec![9, 12]));
    let bad = TokenSequence {
        embeddings: wide,
        ..seq
    };
    assert!(matches!(
        model.forward(&mut tape, &b, &bad, Mode::Train),
        Err(Error::Config(_))
    ));
}

#[test]
fn later_tokens_never_affect_earlier_outputs() {
    let (store, model) = setup::<f64>(tiny(2, 2, 16), 3);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let seq = sequence(&mut tape, &model, &b, 3, 2, &[3, 4], 2);
    let base = model.forward(&mut tape, &b, &seq, Mode::Train).unwrap();
    let len = seq.len();
    for p in 0..len {
        let mut data = tape.data(seq.embeddings).to_vec();
        for x in &mut data[p * 16..] {
            *x += 0.37;
        }
        let e = tape.constant(DiffArray::new(vec![len, 16], data).unwrap());
        let moved = TokenSequence {
            embeddings: e,
            ..seq.clone()
        };
        let out = model.forward(&mut tape, &b, &moved, Mode::Train).unwrap();
        for (v0, v1) in [(base.hidden, out.hidden), (base.logits, out.logits)] {
            let w = tape.shape(v0)[1];
            let (a, c) = (tape.data(v0), tape.data(v1));
            assert!(a[..p * w].iter().zip(&c[..p * w]).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a[p * w..(p + 1) * w] != c[p * w..(p + 1) * w]);
        }
    }
}

#[test]
fn uniform_position_offset_leaves_scores_unchanged() {
    let (store, model) = setup::<f64>(tiny(2, 2, 16), 4);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let seq = sequence(&mut tape, &model, &b, 2, 2, &[3, 4, 5], 5);
    let (_, base) = model.forward_traced(&mut tape, &b, &seq, Mode::Train).unwrap();
    for offset in [1, 7, 100] {
        let shifted = TokenSequence {
            positions: seq.positions.iter().map(|p| p + offset).collect(),
            ..seq.clone()
        };
        let (_, scores) = model.forward_traced(&mut tape, &b, &shifted, Mode::Train).unwrap();
        assert_eq!(scores.len(), 4);
        let mut worst = 0.0f64;
        for (s0, s1) in base.iter().zip(&scores) {
            for (x, y) in tape.data(*s0).iter().zip(tape.data(*s1)) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst <= 1e-12, "offset {offset}: {worst}");
    }
}

#[test]
fn single_token_attention_is_the_value_path() {
    let (store, model) = setup::<f64>(tiny(1, 2, 8), 6);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(DiffArray::from_f64(vec![1, 8], &[0.3, -1.0, 0.2, 0.9, -0.4, 0.0, 1.1, 0.5]).unwrap());
    let block = model.blocks[0];
    let attn = model.attention(&mut tape, &b, &block, &[0], x, None).unwrap();
    let v = tape.matmul(x, b.var(block.wv)).unwrap();
    let expected = tape.matmul(v, b.var(block.wo)).unwrap();
    for (a, e) in tape.data(attn).iter().zip(tape.data(expected)) {
        assert!((a - e).abs() < 1e-14);
    }
}

#[test]
fn reference_mode_matches_train_mode_and_is_constant() {
    let (store, model) = setup::<f32>(tiny(2, 2, 16), 7);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let seq = sequence(&mut tape, &model, &b, 2, 2, &[3, 4], 8);
    let train = model.forward(&mut tape, &b, &seq, Mode::Train).unwrap();
    let reference = model.forward(&mut tape, &b, &seq, Mode::Reference).unwrap();
    assert!(tape.requires_grad(train.hidden));
    assert!(!tape.requires_grad(reference.hidden));
    assert!(!tape.requires_grad(reference.logits));
    assert!(tape.grad_enabled());
    for (x, y) in [(train.hidden, reference.hidden), (train.logits, reference.logits)] {
        let same = tape
            .data(x)
            .iter()
            .zip(tape.data(y))
            .all(|(a, c)| a.to_bits() == c.to_bits());
        assert!(same);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let (store, model) = setup::<f32>(tiny(2, 2, 16), 9);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let seq = sequence(&mut tape, &model, &b, 2, 3, &[3, 4], 10);
        let out = model.forward(&mut tape, &b, &seq, Mode::Train).unwrap();
        tape.data(out.logits).to_vec()
    };
    assert_eq!(run(), run());
}

fn fake_output(tape: &mut Tape<f64>, len: usize, vocab: usize, fill: impl Fn(usize, usize) -> f64) -> ModelOutput {
    let data: Vec<f64> = (0..len * vocab).map(|i| fill(i / vocab, i % vocab)).collect();
    let logits = tape.constant(DiffArray::new(vec![len, vocab], data).unwrap());
    let hidden = tape.constant(DiffArray::zeros(vec![len, 4]));
    ModelOutput { hidden, logits }
}

fn text_only(tape: &mut Tape<f64>, text: &[usize], answer: std::ops::Range<usize>) -> TokenSequence {
    let len = text.len() + 2;
    let mut origins = vec![Origin::Start];
    origins.extend((0..text.len()).map(Origin::Text));
    origins.push(Origin::End);
    TokenSequence {
        embeddings: tape.constant(DiffArray::zeros(vec![len, 4])),
        positions: (0..len).collect(),
        origins,
        text_ids: text.to_vec(),
        answer,
        grid: (0, 0),
    }
}

#[test]
fn answer_targets_point_at_the_next_answer_token() {
    let mut tape = Tape::<f64>::new();
    let seq = text_only(&mut tape, &[3, 4, 5, 6], 2..4);
    let (targets, active) = answer_targets(&seq);
    assert_eq!(active, vec![false, false, true, true, false, false]);
    assert_eq!((targets[2], targets[3]), (5, 6));
}

#[test]
fn decoder_loss_cases() {
    let mut tape = Tape::<f64>::new();
    let seq = text_only(&mut tape, &[3, 4, 5], 1..3);
    let (targets, _) = answer_targets(&seq);
    let sure = fake_output(&mut tape, 5, 8, |r, v| if v == targets[r] { 60.0 } else { -60.0 });
    let loss = decoder_loss(&mut tape, &sure, &seq).unwrap();
    assert!(tape.data(loss)[0] < 1e-9);

    let flat = fake_output(&mut tape, 5, 8, |_, _| 0.25);
    let loss = decoder_loss(&mut tape, &flat, &seq).unwrap();
    assert!((tape.data(loss)[0] - 8f64.ln()).abs() < 1e-12);

    let empty = text_only(&mut tape, &[3, 4], 2..2);
    assert!(matches!(
        decoder_loss(&mut tape, &flat, &empty),
        Err(Error::Contract(_))
    ));
}

#[test]
fn decoder_loss_gradient_matches_finite_differences() {
    let (mut store, model) = setup::<f64>(tiny(2, 2, 16), 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let report = check_params(
        &mut store,
        |tape, b| {
            let seq = sequence(tape, &model, b, 2, 2, &[3, 4, 5], 13);
            let out = model.forward(tape, b, &seq, Mode::Train)?;
            decoder_loss(tape, &out, &seq)
        },
        60,
        DEFAULT_STEP,
        &mut rng,
    )
    .unwrap();
    assert_eq!(report.checked, 60);
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (store, model) = setup::<f32>(tiny(2, 2, 16), 14);
    let config = serde_json::to_value(&model.config).unwrap();
    let mut buf = Vec::new();
    checkpoint::write(&mut buf, &config, &store).unwrap();
    assert_eq!(&buf[..8], b"STSEQCK1");
    let (header, loaded) = checkpoint::read::<f32, _>(buf.as_slice()).unwrap();
    assert_eq!(header.config, config);
    assert_eq!(loaded.len(), store.len());
    for id in store.ids() {
        assert_eq!(loaded.name(id), store.name(id));
        assert_eq!(loaded.get(id).shape(), store.get(id).shape());
        let same = loaded
            .get(id)
            .data()
            .iter()
            .zip(store.get(id).data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{}", store.name(id));
    }
    let (mut fresh, _) = setup::<f32>(tiny(2, 2, 16), 99);
    checkpoint::restore_into(&mut fresh, &loaded).unwrap();
    assert_eq!(fresh.get(model.embed), store.get(model.embed));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &config, &store).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), buf);
    let (_, again) = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(again.get(model.embed), store.get(model.embed));
}

#[test]
fn checkpoint_rejects_corruption() {
    let (store, _) = setup::<f32>(tiny(1, 2, 8), 15);
    let mut buf = Vec::new();
    checkpoint::write(&mut buf, &serde_json::Value::Null, &store).unwrap();
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(checkpoint::read::<f32, _>(bad.as_slice()).is_err());
    let truncated = &buf[..buf.len() - 4];
    assert!(checkpoint::read::<f32, _>(truncated).is_err());
    let (other, _) = setup::<f32>(tiny(1, 2, 16), 15);
    let (_, loaded) = checkpoint::read::<f32, _>(buf.as_slice()).unwrap();
    let mut other = other;
    assert!(checkpoint::restore_into(&mut other, &loaded).is_err());
}
