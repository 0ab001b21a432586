use super::*;
use std::collections::{HashMap, HashSet};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Top-left corner of the lit block in a direction frame, accounting for wrap.
fn block_corner(frame: &[f64], size: usize) -> (usize, usize) {
    let lit = |x: usize, y: usize| frame[(y % size) * size + (x % size)] == 1.0;
    for y in 0..size {
        for x in 0..size {
            if lit(x, y) && lit(x + 1, y) && lit(x, y + 1) && lit(x + 1, y + 1) {
                return (x, y);
            }
        }
    }
    panic!("no block found");
}

fn frame_mean(video: &SyntheticVideo) -> Vec<f64> {
    let n = video.size() * video.size();
    let mut acc = vec![0.0; n];
    for f in video.frames() {
        for (a, v) in acc.iter_mut().zip(f) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / video.frame_count() as f64).collect()
}

/// Count must sit within three binomial standard deviations of `n * p`.
fn within_binomial(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd
}

#[test]
fn rightward_step_moves_one_pixel() {
    let size = 16;
    for x0 in [0, 5, 14] {
        let frames = render_direction(x0, 3, 1, 2, size);
        let (a, b) = (block_corner(&frames[0], size), block_corner(&frames[1], size));
        assert_eq!(((a.0 + 1) % size, a.1), b);
    }
}

#[test]
fn every_direction_follows_its_step() {
    let mut r = rng(3);
    for _ in 0..50 {
        let t = gen_direction(&mut r, 4, 16).unwrap();
        let word = Vocab::default().word(t.answer_ids[0]).unwrap();
        let dir = TaskKind::Direction.answers().iter().position(|w| *w == word).unwrap();
        let (dx, dy) = DIRECTION_STEPS[dir];
        let corners: Vec<_> = t.video.frames().iter().map(|f| block_corner(f, 16)).collect();
        for w in corners.windows(2) {
            let nx = (w[0].0 as isize + dx).rem_euclid(16) as usize;
            let ny = (w[0].1 as isize + dy).rem_euclid(16) as usize;
            assert_eq!((nx, ny), w[1]);
        }
    }
}

#[test]
fn direction_labels_are_uniform() {
    let n = 10_000;
    let tasks = gen_batch(TaskKind::Direction, n, 2, 8, Split::Any, &mut rng(11)).unwrap();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for t in &tasks {
        *counts.entry(t.answer_ids[0]).or_default() += 1;
    }
    assert_eq!(counts.len(), 4);
    for &c in counts.values() {
        assert!(within_binomial(c, n, 0.25), "count {c}");
    }
}

#[test]
fn mirrored_left_and_right_pool_to_mirror_images() {
    let size = 12;
    for x0 in 0..size {
        let left = render_direction(x0, 4, 0, 5, size);
        let right = render_direction((2 * size - 2 - x0) % size, 4, 1, 5, size);
        let l = frame_mean(&SyntheticVideo::new(size, left.clone()).unwrap());
        let r = frame_mean(&SyntheticVideo::new(size, right.clone()).unwrap());
        for y in 0..size {
            for x in 0..size {
                assert_eq!(l[y * size + x], r[y * size + size - 1 - x]);
            }
        }
        for (a, b) in left.iter().zip(&right) {
            let ma: f64 = a.iter().sum::<f64>() / a.len() as f64;
            let mb: f64 = b.iter().sum::<f64>() / b.len() as f64;
            assert_eq!(ma, mb);
        }
    }
}

#[test]
fn reversal_classes_are_balanced() {
    let n = 10_000;
    let tasks = gen_batch(TaskKind::Reversal, n, 3, 8, Split::Any, &mut rng(12)).unwrap();
    let fwd = Vocab::default().id("forward").unwrap();
    let count = tasks.iter().filter(|t| t.answer_ids[0] == fwd).count();
    assert!(within_binomial(count, n, 0.5), "forward count {count}");
}

#[test]
fn reversal_pair_has_equal_frame_means_and_differs_in_order() {
    for seed in 0..200 {
        let traj = Trajectory::sample(&mut rng(seed), 16).unwrap();
        for frames in [3, 4, 8, 16] {
            let (f, b) = traj.pair(frames, 16, seed).unwrap();
            assert_eq!(f.video.reversed(), b.video);
            assert_ne!(f.video.frames(), b.video.frames());
            let mut sf: Vec<_> = f.video.frames().to_vec();
            let mut sb: Vec<_> = b.video.frames().to_vec();
            sf.sort_by(|x, y| x.partial_cmp(y).unwrap());
            sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
            assert_eq!(sf, sb);
            assert_ne!(f.answer_ids, b.answer_ids);
            assert_eq!(f.prompt_ids, b.prompt_ids);
        }
    }
}

#[test]
fn reversal_frames_travel_right() {
    let traj = Trajectory {
        start: (0, 0),
        end: (16, 0),
    };
    let frames = traj.render(3, 8);
    let centroid = |f: &[f64]| {
        let total: f64 = f.iter().sum();
        f.iter()
            .enumerate()
            .map(|(i, v)| (i % 8) as f64 * v)
            .sum::<f64>()
            / total
    };
    let xs: Vec<f64> = frames.iter().map(|f| centroid(f)).collect();
    assert!(xs[0] < xs[1] && xs[1] < xs[2]);
    assert!((xs[2] - xs[0] - 4.0).abs() < 1e-9);
}

#[test]
fn same_seed_same_batch_and_empty_batch() {
    for kind in [
        TaskKind::Direction,
        TaskKind::Reversal,
        TaskKind::Count,
        TaskKind::StaticScene,
    ] {
        let a = gen_batch(kind, 8, 4, 16, Split::Train, &mut rng(5)).unwrap();
        let b = gen_batch(kind, 8, 4, 16, Split::Train, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        assert!(gen_batch(kind, 0, 4, 16, Split::Train, &mut rng(5))
            .unwrap()
            .is_empty());
    }
}

#[test]
fn unknown_kind_is_a_config_error() {
    assert!(matches!(
        gen_batch_named("spin", 2, 4, 16, &mut rng(0)),
        Err(Error::Config(_))
    ));
    assert!(gen_batch_named("static", 2, 4, 16, &mut rng(0)).is_ok());
}

#[test]
fn too_few_frames_or_small_grid_is_rejected() {
    assert!(matches!(gen_reversal(&mut rng(0), 2, 16), Err(Error::Config(_))));
    assert!(matches!(gen_direction(&mut rng(0), 1, 16), Err(Error::Config(_))));
    assert!(matches!(gen_count(&mut rng(0), 4, 4), Err(Error::Config(_))));
}

#[test]
fn train_and_test_start_states_never_collide() {
    for kind in [
        TaskKind::Direction,
        TaskKind::Reversal,
        TaskKind::Count,
        TaskKind::StaticScene,
    ] {
        let train = gen_batch(kind, 2000, 4, 16, Split::Train, &mut rng(1)).unwrap();
        let test = gen_batch(kind, 500, 4, 16, Split::Test, &mut rng(2)).unwrap();
        let train_keys: HashSet<u64> = train.iter().map(|t| t.state_key).collect();
        assert!(test.iter().all(|t| !train_keys.contains(&t.state_key)));
        let train_videos: HashSet<Vec<u64>> = train.iter().map(video_bits).collect();
        if kind == TaskKind::Reversal || kind == TaskKind::Direction {
            assert!(test.iter().all(|t| !train_videos.contains(&video_bits(t))));
        }
    }
}

fn video_bits(t: &Task) -> Vec<u64> {
    t.video.frames().iter().flatten().map(|v| v.to_bits()).collect()
}

#[test]
fn reversal_pairs_split_is_stable_across_frame_counts() {
    let a = reversal_pairs(20, 8, 16, Split::Test, 9).unwrap();
    let b = reversal_pairs(20, 16, 16, Split::Test, 9).unwrap();
    assert_eq!(a.len(), 40);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.state_key, y.state_key);
        assert_eq!(x.answer_ids, y.answer_ids);
        assert_eq!(x.state_key % TEST_SHARE, 0);
    }
}

#[test]
fn pixels_and_ids_are_valid_and_answer_span_is_text() {
    let vocab = Vocab::default();
    for kind in [
        TaskKind::Direction,
        TaskKind::Reversal,
        TaskKind::Count,
        TaskKind::StaticScene,
    ] {
        for t in gen_batch(kind, 100, 5, 16, Split::Any, &mut rng(4)).unwrap() {
            assert!(t.video.frames().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            for &id in t.text_ids().iter() {
                assert!(id < vocab.len() && !Vocab::is_reserved(id));
            }
            assert!(!t.answer_ids.is_empty());
            assert!(kind.answers().contains(&vocab.word(t.answer_ids[0]).unwrap()));
            let span = t.answer_span(5 * 4);
            assert_eq!(span.start, 1 + 20 + t.prompt_ids.len());
            assert_eq!(span.len(), t.answer_ids.len());
        }
    }
}

#[test]
fn count_task_lights_exactly_n_frames() {
    let vocab = Vocab::default();
    for t in gen_batch(TaskKind::Count, 50, 6, 16, Split::Any, &mut rng(8)).unwrap() {
        let lit = t
            .video
            .frames()
            .iter()
            .filter(|f| f.iter().any(|&v| v > 0.0))
            .count();
        let n: usize = vocab.word(t.answer_ids[0]).unwrap().parse().unwrap();
        assert_eq!(lit, n);
    }
}

#[test]
fn jsonl_round_trip() {
    let tasks = gen_batch(TaskKind::Reversal, 3, 4, 8, Split::Any, &mut rng(6)).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &tasks).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 3);
    let back = read_jsonl(buf.as_slice()).unwrap();
    for (r, t) in back.iter().zip(&tasks) {
        assert_eq!(r, &TaskRecord::from(t));
        let flat: Vec<Vec<f64>> = r.frames.iter().map(|f| f.concat()).collect();
        assert_eq!(flat, t.video.frames());
    }
}
