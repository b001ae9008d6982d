//! Dataset generation and files, training invariants, evaluation and
//! checkpoints.

mod common;

use mvadapter::config::{AdapterKind, ModelConfig, RunConfig, TrainConfig};
use mvadapter::encoders::{build_freeze_mask, ModelState};
use mvadapter::layout::TAU_PATH;
use mvadapter::numerics::Graph;
use mvadapter::retrieval::Direction;
use mvadapter::synthdata::{self, from_bytes, generate, permute_frames, subsample_frames, to_bytes, uniform_indices, DataError, Dataset};
use mvadapter::trainer::{
    batch_loss, checkpoint_bytes, checkpoint_from_bytes, count_params, evaluate, full_state_bytes, load_checkpoint, save_checkpoint, train, Adam,
    TrainError,
};

fn dataset(keys: &[(&str, &str)]) -> Dataset {
    let mut run = RunConfig::default();
    for (k, v) in keys {
        run.set(k, v).unwrap();
    }
    generate(&run.data).unwrap()
}

fn short_train() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() }
}

#[test]
fn generation_is_deterministic_and_round_trips_through_files() {
    let a = to_bytes(&dataset(&[]));
    let b = to_bytes(&dataset(&[]));
    assert_eq!(a, b);
    assert_ne!(a, to_bytes(&dataset(&[("data.seed", "1")])));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.mvad");
    synthdata::save(&from_bytes(&a).unwrap(), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), a);
    assert_eq!(to_bytes(&synthdata::load(&path).unwrap()), a);
}

#[test]
fn corrupted_files_are_rejected_with_positions() {
    let bytes = to_bytes(&dataset(&[("data.n_pairs", "8"), ("data.n_train", "4")]));
    match from_bytes(&bytes[..bytes.len() - 9]) {
        Err(DataError::Truncated { expected, actual }) => assert!(expected > actual && actual == bytes.len() - 9),
        other => panic!("{other:?}"),
    }
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x5a;
    match from_bytes(&flipped) {
        Err(e @ DataError::Checksum { .. }) => assert!(e.to_string().contains("offset")),
        other => panic!("{other:?}"),
    }
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(from_bytes(&magic), Err(DataError::BadMagic { .. })));
}

#[test]
fn frame_mean_cannot_see_order() {
    let ds = dataset(&[("data.noise_std", "0"), ("data.n_pairs", "16"), ("data.n_train", "0")]);
    let fwd = ds.samples.iter().find(|s| s.label() == (2, 0)).unwrap();
    let rev = ds.samples.iter().find(|s| s.label() == (2, 1)).unwrap();
    let f = fwd.frames.shape()[0];
    assert_eq!(permute_frames(fwd, &(0..f).rev().collect::<Vec<_>>()).unwrap().frames, rev.frames);
    let per = fwd.frames.len() / f;
    for j in 0..per {
        let m = |x: &[f64]| (0..f).map(|k| x[k * per + j]).sum::<f64>();
        assert!((m(fwd.frames.data()) - m(rev.frames.data())).abs() < 1e-12);
    }
}

#[test]
fn frame_selection_utilities() {
    assert_eq!(uniform_indices(24, 12), (0..24).step_by(2).collect::<Vec<_>>());
    let ds = dataset(&[("data.n_pairs", "8"), ("data.n_train", "0"), ("data.frames", "6")]);
    let s = &ds.samples[0];
    assert_eq!(&permute_frames(s, &[0, 1, 2, 3, 4, 5]).unwrap(), s);
    let rev: Vec<usize> = (0..6).rev().collect();
    assert_eq!(&permute_frames(&permute_frames(s, &rev).unwrap(), &rev).unwrap(), s);
    assert!(permute_frames(s, &[0, 0, 1, 2, 3, 4]).is_err());
    let sub = subsample_frames(s, 3).unwrap();
    let per = s.frames.len() / 6;
    let kept: Vec<f64> = [0, 2, 4].iter().flat_map(|&k| s.frames.data()[k * per..(k + 1) * per].to_vec()).collect();
    assert_eq!(sub.frames.data(), &kept[..]);
    assert_eq!(sub.label(), s.label());
    assert_eq!(sub.frames.shape()[0], 3);
}

#[test]
fn step_zero_loss_is_near_ln_batch() {
    let ds = dataset(&[]);
    let st = ModelState::new(ModelConfig::default(), 0, TrainConfig::default().tau_init);
    let batch: Vec<_> = ds.train()[..32].iter().collect();
    let mut g = Graph::new();
    let tau = st.params.bind(&mut g, TAU_PATH).unwrap();
    let loss = batch_loss(st.model(), &synthdata::stack_frames(&batch), &synthdata::stack_tokens(&batch), tau, &mut g).unwrap();
    let l = g.value(loss).item();
    assert!((l - 32f64.ln()).abs() <= 0.15, "{l}");
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let ds = dataset(&[]);
    let init = ModelState::new(ModelConfig::default(), 0, 12.0);
    let mut st = init.clone();
    let log = train(&mut st, ds.train(), &TrainConfig { epochs: 0, ..TrainConfig::default() }, |_| {}).unwrap();
    assert!(log.is_empty());
    assert_eq!(checkpoint_bytes(&st), checkpoint_bytes(&init));
}

#[test]
fn training_touches_only_the_tunable_set() {
    let ds = dataset(&[]);
    let init = ModelState::new(ModelConfig::default(), 0, 12.0);
    let mut st = init.clone();
    let log = train(&mut st, &ds.train()[..64], &short_train(), |_| {}).unwrap();
    assert_eq!(log.len(), 8);
    for (path, t) in init.params.frozen() {
        assert!(t.bitwise_eq(st.params.get(path).unwrap()), "{path} moved");
    }
    let moved = init.params.tunable().iter().filter(|p| !init.params.get(p).unwrap().bitwise_eq(st.params.get(p).unwrap())).count();
    assert!(moved > 0);

    // the optimizer allocates moments for exactly the freeze-mask set
    let batch: Vec<_> = ds.train()[..4].iter().collect();
    let mut g = Graph::new();
    let tau = st.params.bind(&mut g, TAU_PATH).unwrap();
    let loss = batch_loss(st.model(), &synthdata::stack_frames(&batch), &synthdata::stack_tokens(&batch), tau, &mut g).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut adam = Adam::new();
    adam.step(&mut st.params, &grads, &TrainConfig::default());
    let moments: Vec<&String> = adam.moment_paths().collect();
    assert_eq!(moments, build_freeze_mask(&st).iter().collect::<Vec<_>>());
}

#[test]
fn same_seed_same_checkpoint_and_log() {
    let ds = dataset(&[]);
    let run = |seed| {
        let mut st = ModelState::new(ModelConfig::default(), 0, 12.0);
        let log = train(&mut st, &ds.train()[..48], &TrainConfig { seed, ..short_train() }, |_| {}).unwrap();
        (checkpoint_bytes(&st), log)
    };
    let (a, la) = run(3);
    let (b, lb) = run(3);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_ne!(run(4).0, a, "the shuffle follows train.seed");
}

#[test]
fn log_lines_have_six_decimals() {
    let ds = dataset(&[]);
    let mut st = ModelState::new(ModelConfig::default(), 0, 12.0);
    let mut lines = vec![];
    train(&mut st, &ds.train()[..32], &TrainConfig { epochs: 1, ..short_train() }, |e| lines.push(e.to_string())).unwrap();
    let fields: Vec<&str> = lines[0].split(' ').collect();
    assert_eq!(fields[0], "0");
    assert!(fields[1..].iter().all(|f| f.split('.').nth(1).map(str::len) == Some(6)), "{}", lines[0]);
}

#[test]
fn untrained_model_evaluates_at_chance() {
    let ds = dataset(&[]);
    let test = ds.test();
    let st = ModelState::new(ModelConfig::default(), 0, 12.0);
    let (t2v, v2t) = evaluate(&st, test).unwrap();
    assert_eq!((t2v.direction, v2t.direction), (Direction::T2V, Direction::V2T));
    // a query hits when any clip of its label ranks first; with 8 labels
    // spread evenly that is one in 8 by chance
    let labels = 8.0;
    let p = 1.0 / labels;
    let sd = 100.0 * (p * (1.0 - p) / test.len() as f64).sqrt();
    for r in [t2v, v2t] {
        assert!((r.r1 - 100.0 * p).abs() <= 3.0 * sd, "{r}");
        assert!(r.r1 <= r.r5 && r.r5 <= r.r10);
    }
    assert_eq!(evaluate(&st, test).unwrap(), (t2v, v2t));
}

#[test]
fn gallery_of_one_recalls_everything() {
    let ds = dataset(&[]);
    let st = ModelState::new(ModelConfig::default(), 0, 12.0);
    let (t2v, v2t) = evaluate(&st, &ds.test()[..1]).unwrap();
    for r in [t2v, v2t] {
        assert_eq!((r.r1, r.r5, r.r10), (100.0, 100.0, 100.0));
    }
}

#[test]
fn evaluation_rejects_mismatched_data() {
    let ds = dataset(&[("data.patch_dim", "10")]);
    let st = ModelState::new(ModelConfig::default(), 0, 12.0);
    assert!(matches!(evaluate(&st, ds.test()), Err(TrainError::DataMismatch(_))));
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let ds = dataset(&[]);
    let mut st = ModelState::new(ModelConfig::default(), 0, 12.0);
    train(&mut st, &ds.train()[..32], &TrainConfig { epochs: 1, ..short_train() }, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mvck");
    save_checkpoint(&st, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, st);
    assert_eq!(checkpoint_bytes(&back), std::fs::read(&path).unwrap());
    assert_eq!(evaluate(&back, ds.test()).unwrap(), evaluate(&st, ds.test()).unwrap());
}

#[test]
fn checkpoint_is_small_and_guarded() {
    let st = ModelState::new(ModelConfig::default(), 0, 12.0);
    let bytes = checkpoint_bytes(&st);
    let ratio = bytes.len() as f64 / full_state_bytes(&st) as f64;
    assert!(ratio <= 0.10, "{ratio}");
    assert!(bytes.len() >= 8 * st.params.tunable_scalar_count());

    let mut tampered = bytes.clone();
    tampered[6] ^= 1; // first byte of the config hash
    assert!(matches!(checkpoint_from_bytes(&tampered), Err(TrainError::ConfigHash { .. })));
    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 6] ^= 1; // inside the last payload
    assert!(matches!(checkpoint_from_bytes(&flipped), Err(TrainError::CheckpointChecksum { .. })));
    assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() / 2]), Err(TrainError::CheckpointTruncated { .. })));
}

/// Closed-form parameter count of the default toy model.
fn toy_closed_form() -> (usize, usize) {
    let (dv, dt, l, np, pd, v, t, e, f) = (48, 32, 2, 16, 12, 64, 8, 32, 4);
    let dp = 8;
    // two norms, qkv with query and value biases, output, two-layer MLP
    let block = |d: usize, h: usize| 4 * d + (3 * d * d + 2 * d) + (d * d + d) + (d * h + h) + (h * d + d);
    let vision = pd * dv + dv + (np + 1) * dv + 2 * dv + l * block(dv, 4 * dv) + 2 * dv + dv * e;
    let text = v * dt + t * dt + l * block(dt, 4 * dt) + 2 * dt + dt * e;
    let trm = block(dp, 2 * dp);
    let cal = 2 * dp * (dp / 4) + dp / 4 + (dp / 4) * dp + dp;
    // block 0 carries dense down weights, block 1 the 4×2 shared factorization
    let video = dv * dp + (dv / 4) * (dp / 2) + 2 * (dp * dv + trm + dp + f * dp + cal);
    let text_ad = dt * dp + (dt / 4) * (dp / 2) + 2 * (dp * dt + trm);
    let tunable = video + text_ad + 4 * 2 + 1;
    (vision + text + tunable, tunable)
}

#[test]
fn toy_count_matches_closed_form() {
    let r = count_params(&ModelConfig::default());
    let (total, tunable) = toy_closed_form();
    assert_eq!((r.total, r.tunable), (total, tunable));
    let st = ModelState::new(ModelConfig::default(), 0, 1.0);
    let mask = build_freeze_mask(&st);
    assert_eq!(mask.iter().map(|p| st.params.get(p).unwrap().len()).sum::<usize>(), r.tunable);
    assert_eq!(r.by_group.values().sum::<usize>(), r.total);

    let mut none = ModelConfig::default();
    none.adapter.kind = AdapterKind::None;
    assert_eq!(count_params(&none).tunable, 1);
}
