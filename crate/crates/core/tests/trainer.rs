use std::time::Instant;

use approx::assert_relative_eq;
use ndarray::IxDyn;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resound_core::autograd::Array;
use resound_core::nn::{Group, ParamStore};
use resound_core::synth::{self, SynthConfig};
use resound_core::trainer::*;
use resound_core::Error;

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.train.seed = seed;
    cfg.train.segment_seconds = 0.3;
    cfg.train.batch_size = 2;
    cfg
}

fn toy_dataset(seed: u64, n: usize) -> PairDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc = SynthConfig::default();
    let pairs = (0..n)
        .map(|_| {
            let u = synth::utterance(&mut rng, &sc, 4800);
            let noisy: Vec<f64> = u.audio.samples.iter().enumerate().map(|(i, s)| s + 0.05 * ((i * 7919) % 97) as f64 / 97.0).collect();
            let d = resound_core::audio::AudioBuffer::new(noisy, u.audio.sample_rate).unwrap();
            (u.audio, d)
        })
        .collect();
    PairDataset::new(pairs).unwrap()
}

#[test]
fn lr_schedule_endpoints_at_full_scale() {
    let t = ExperimentConfig::paper().train;
    assert_relative_eq!(lr_at_step(0, &t), 1e-6, max_relative = 1e-12);
    assert_relative_eq!(lr_at_step(t.warmup_steps, &t), 1e-4, max_relative = 1e-12);
    assert_relative_eq!(lr_at_step(t.warmup_steps / 2, &t), 5.05e-5, max_relative = 1e-12);
    assert_relative_eq!(lr_at_step(t.decay_start, &t), 1e-4, max_relative = 1e-12);
    assert_relative_eq!(lr_at_step(t.decay_end, &t), 1e-6, max_relative = 1e-12);
    let mid = (t.decay_start + t.decay_end) / 2;
    assert_relative_eq!(lr_at_step(mid, &t), 5.05e-5, max_relative = 1e-9);
    assert_relative_eq!(lr_at_step(t.total_steps + 10, &t), 1e-6, max_relative = 1e-12);
}

proptest! {
    #[test]
    fn lr_stays_within_bounds(step in 0usize..2_000_000) {
        let t = ExperimentConfig::paper().train;
        let lr = lr_at_step(step, &t);
        prop_assert!(lr >= t.lr_min * (1.0 - 1e-12) && lr <= t.lr_peak * (1.0 + 1e-12));
    }

    #[test]
    fn lr_is_monotone_in_each_phase(a in 0usize..1_500_000, d in 1usize..1000) {
        let t = ExperimentConfig::paper().train;
        let b = a + d;
        let (la, lb) = (lr_at_step(a, &t), lr_at_step(b, &t));
        if b <= t.warmup_steps {
            prop_assert!(lb > la);
        } else if a >= t.decay_start {
            prop_assert!(lb <= la + 1e-18);
        }
    }
}

#[test]
fn ema_of_constant_weights_follows_closed_form() {
    let mut store = ParamStore::new();
    let id = store.add("w", Group::Score, &[3], || Array::from_elem(IxDyn(&[3]), 1.0));
    let mut ema = EmaState::new(&store, &[id], 0.999);
    ema.shadow.insert(id, Array::zeros(IxDyn(&[3])));
    for k in 1..=500u32 {
        ema.update(&store).unwrap();
        let expect = 1.0 - 0.999f64.powi(k as i32);
        for v in ema.shadow[&id].iter() {
            assert!((v - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn ema_rejects_shape_drift() {
    let mut store = ParamStore::new();
    let id = store.add("w", Group::Score, &[3], || Array::zeros(IxDyn(&[3])));
    let mut ema = EmaState::new(&store, &[id], 0.9);
    ema.shadow.insert(id, Array::zeros(IxDyn(&[4])));
    assert!(matches!(ema.update(&store), Err(Error::Shape(_))));
}

#[test]
fn presets_parse_and_roundtrip() {
    for cfg in [ExperimentConfig::desk(), ExperimentConfig::paper()] {
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
    assert!(ExperimentConfig::preset("nope").is_err());
    let mut bad = ExperimentConfig::desk();
    bad.train.decay_start = bad.train.total_steps + 1;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn batches_have_requested_shape_and_padding() {
    let data = toy_dataset(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = data.sample_batch(4, 6000, &mut rng);
    assert_eq!(b.clean.shape(), &[4, 6000]);
    assert_eq!(b.degraded.shape(), &[4, 6000]);
    assert!(b.clean.iter().skip(4800).take(1200).all(|v| *v == 0.0));
}

#[test]
fn optimizers_own_disjoint_parameter_sets() {
    let data = toy_dataset(2, 2);
    let mut t = Trainer::new(small_config(3)).unwrap();
    let rec = t.run(&data, 2, None, None).unwrap();
    assert!(rec.iter().all(|r| !r.skipped_generator && !r.skipped_discriminator));
    let g = t.g_opt.param_ids();
    let d = t.d_opt.param_ids();
    assert!(!g.is_empty() && !d.is_empty());
    assert_eq!(g, t.store.ids_in(&Group::GENERATOR).into_iter().filter(|id| g.contains(id)).collect::<Vec<_>>());
    assert!(g.iter().all(|id| Group::GENERATOR.contains(&t.store.param(*id).group)));
    assert!(d.iter().all(|id| t.disc_store.param(*id).group == Group::Discriminator));
    // the adversarial path never touches the mixture heads
    assert!(g.iter().all(|id| t.store.param(*id).group != Group::Mdn));
}

#[test]
fn mdn_mode_trains_heads_without_discriminators() {
    let data = toy_dataset(4, 2);
    let mut cfg = small_config(5);
    cfg.train.loss_mode = LossMode::Mdn;
    let mut t = Trainer::new(cfg).unwrap();
    let rec = t.run(&data, 2, None, None).unwrap();
    assert!(rec[0].get("mdn_mel").is_some() && rec[0].get("d_loss").is_none());
    assert_eq!(t.d_opt.steps_taken(), 0);
    assert!(t.g_opt.param_ids().iter().any(|id| t.store.param(*id).group == Group::Mdn));
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = toy_dataset(6, 2);
    let run = |seed| {
        let mut t = Trainer::new(small_config(seed)).unwrap();
        t.run(&data, 2, None, None).unwrap()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

#[test]
fn resumed_training_is_bit_identical() {
    let data = toy_dataset(7, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut a = Trainer::new(small_config(11)).unwrap();
    a.run(&data, 3, None, None).unwrap();
    let path = a.save(dir.path()).unwrap();
    assert!(path.ends_with("3.ckpt"));
    let tail_a = a.run(&data, 10, None, None).unwrap();
    let mut b = Trainer::load(&path, Some(&small_config(11))).unwrap();
    let tail_b = b.run(&data, 10, None, None).unwrap();
    assert_eq!(tail_a, tail_b);
    for (id, p) in a.store.iter() {
        assert_eq!(p.value, *b.store.value(id));
    }
    assert_eq!(a.ema, b.ema);
}

#[test]
fn checkpoint_refuses_mismatched_architecture_with_diff() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(small_config(12)).unwrap();
    let path = t.save(dir.path()).unwrap();
    let mut other = small_config(12);
    other.architecture.base_channels = 16;
    match Trainer::load(&path, Some(&other)) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("base_channels: 8 -> 16"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched checkpoint accepted"),
    }
}

#[test]
fn inference_load_selects_ema_weights() {
    let data = toy_dataset(13, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(small_config(14)).unwrap();
    t.run(&data, 2, None, None).unwrap();
    let path = t.save(dir.path()).unwrap();
    let (_, raw, m) = load_for_inference(&path, false).unwrap();
    let (_, ema, _) = load_for_inference(&path, true).unwrap();
    assert_eq!(m.step, 2);
    let id = t.store.ids_in(&[Group::Score])[0];
    assert_eq!(raw.value(id), t.store.value(id));
    assert_eq!(ema.value(id), t.ema_store().unwrap().value(id));
    assert_ne!(raw.value(id), ema.value(id));
}

#[test]
fn log_lines_are_tab_separated() {
    let data = toy_dataset(15, 2);
    let mut cfg = small_config(16);
    cfg.train.log_every = 1;
    let mut t = Trainer::new(cfg).unwrap();
    let mut buf = Vec::new();
    t.run(&data, 1, Some(&mut buf), None).unwrap();
    let text = String::from_utf8(buf).unwrap();
    for name in ["lr", "score", "d_loss", "g_adv", "g_fm", "g_mel", "generator_total"] {
        assert!(text.lines().any(|l| l.split('\t').collect::<Vec<_>>() == ["0", name, l.split('\t').nth(2).unwrap()]), "{name}");
    }
}

#[test]
fn desk_step_cost() {
    let data = toy_dataset(17, 4);
    let mut cfg = ExperimentConfig::desk();
    cfg.train.segment_seconds = 0.6;
    let mut t = Trainer::new(cfg).unwrap();
    t.run(&data, 1, None, None).unwrap();
    let start = Instant::now();
    t.run(&data, 3, None, None).unwrap();
    println!("desk train step: {:.3} s", start.elapsed().as_secs_f64() / 3.0);
}
