use approx::assert_abs_diff_eq;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resound_core::adversarial::{DiscriminatorBank, DiscriminatorConfig, LogMel};
use resound_core::audio::SpectralConfig;
use resound_core::autograd::{gradcheck, Tensor};
use resound_core::diffusion::NoiseSchedule;
use resound_core::lora::*;
use resound_core::networks::{ArchitectureConfig, Model};
use resound_core::nn::{AdamW, Binder, Builder, Group, LoraTarget, ParamStore};
use resound_core::synth::{self, SynthConfig};
use resound_core::Error;

fn log_softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn random_log_probs(frames: usize, classes: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    log_softmax_rows(&Array2::from_shape_fn((frames, classes), |_| rng.gen_range(-2.0..2.0)))
}

/// Sums path probabilities over every label path of the given length.
fn brute_force_prob(lp: &Array2<f64>, target: &[usize]) -> f64 {
    let (frames, classes) = lp.dim();
    let mut total = 0.0;
    for code in 0..classes.pow(frames as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..frames)
            .map(|_| {
                let v = c % classes;
                c /= classes;
                v
            })
            .collect();
        if collapse(&path, 0) == target {
            total += path.iter().enumerate().map(|(t, &k)| lp[[t, k]]).sum::<f64>().exp();
        }
    }
    total
}

fn all_targets(labels: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for t in &frontier {
            for l in 1..=labels {
                let mut n: Vec<usize> = t.clone();
                n.push(l);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn ctc_equals_exhaustive_path_enumeration() {
    let mut checked = 0;
    for classes in 2..=4 {
        for frames in 1..=5 {
            let lp = random_log_probs(frames, classes, (classes * 10 + frames) as u64);
            for target in all_targets(classes - 1, 3) {
                let p = brute_force_prob(&lp, &target);
                match ctc_nll(lp.view(), &target, 0) {
                    Ok(nll) => {
                        assert!(p > 0.0);
                        assert_abs_diff_eq!(nll, -p.ln(), epsilon = 1e-8);
                        checked += 1;
                    }
                    Err(Error::InvalidInput(_)) => assert_eq!(p, 0.0, "{target:?} over {frames} frames"),
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
    assert!(checked >= 150);
}

#[test]
fn ctc_two_frame_uniform_example() {
    let lp = Array2::from_elem((2, 2), 0.5f64.ln());
    let nll = ctc_nll(lp.view(), &[1], 0).unwrap();
    assert_abs_diff_eq!(nll, -(0.75f64).ln(), epsilon = 1e-12);
}

#[test]
fn ctc_gradient_matches_differences() {
    for (target, seed) in [(vec![1, 2], 1u64), (vec![2, 2, 1], 2), (vec![], 3)] {
        let lp = random_log_probs(6, 3, seed).into_dyn();
        let res = gradcheck::check(|t| ctc_loss(&t[0], &target, 0).unwrap(), &[lp], 1e-6);
        for r in res {
            assert!(r.relative_error() < 1e-4, "{target:?}: {}", r.relative_error());
        }
    }
}

#[test]
fn ctc_rejects_bad_labels() {
    let lp = random_log_probs(3, 3, 0);
    assert!(ctc_nll(lp.view(), &[0], 0).is_err());
    assert!(ctc_nll(lp.view(), &[3], 0).is_err());
    assert!(ctc_nll(lp.view(), &[1, 1, 1], 0).is_err());
}

#[test]
fn greedy_decode_collapses() {
    assert_eq!(collapse(&[0, 1, 1, 0, 1, 2, 2, 0], 0), vec![1, 1, 2]);
    let mut lp = Array2::from_elem((4, 3), -5.0);
    for (t, k) in [1, 1, 0, 2].iter().enumerate() {
        lp[[t, *k]] = -0.1;
    }
    assert_eq!(greedy_decode(lp.view(), 0), vec![1, 2]);
}

#[test]
fn adapter_census_on_single_layers() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut big, mut thin) = {
        let mut b = Builder::new(&mut store, &mut rng, Group::Score, "toy");
        (b.linear("big", 96, 48), b.linear("thin", 256, 8))
    };
    let cfg = LoraConfig::default();
    assert_eq!(attach_adapter(&mut big, &mut store, &mut rng, &cfg).unwrap(), Some(2304));
    assert_eq!(attach_adapter(&mut thin, &mut store, &mut rng, &cfg).unwrap(), None);
    assert!(thin.lora().is_none());
    assert_eq!(store.count(&[Group::Lora]), 2304);
    assert!(matches!(attach_adapter(&mut big, &mut store, &mut rng, &cfg), Err(Error::Lora(_))));
    let zero = LoraConfig { rank: 0, ..cfg };
    assert!(matches!(attach_adapter(&mut thin, &mut store, &mut rng, &zero), Err(Error::Config(_))));
    assert_abs_diff_eq!(cfg.scaling(), 1.0 / 16.0);
}

fn desk_model(seed: u64) -> (Model, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Model::build(&ArchitectureConfig::desk(), &NoiseSchedule::default(), &mut store, &mut rng).unwrap();
    (m, store)
}

fn signal(b: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[b, t], (0..b * t).map(|_| rng.gen_range(-0.3..0.3)).collect())
}

fn outputs(m: &Model, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
    let bind = Binder::frozen(store);
    let y = signal(1, 480, 1);
    let c = m.condition(&bind, &y).unwrap();
    let d = m.denoise(&bind, &signal(1, 480, 2), &c.features, &[0.07]).unwrap();
    (c.head.to_vec(), d.to_vec())
}

#[test]
fn injection_is_an_exact_identity_and_counts_match() {
    let (mut m, mut store) = desk_model(1);
    let before = outputs(&m, &store);
    let base_count = store.total_count();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let report = inject_lora(&mut m, &mut store, &mut rng, &LoraConfig::default()).unwrap();
    assert_eq!(outputs(&m, &store), before);
    let closed: usize = report.adapted.iter().map(|(_, (o, i))| 16 * (o + i)).sum();
    assert_eq!(report.trainable, closed);
    assert_eq!(store.count(&[Group::Lora]), closed);
    assert_eq!(store.total_count(), base_count + closed);
    assert!(report.adapted.iter().all(|(_, (o, i))| *o.min(i) >= 16));
    assert!(!report.adapted.is_empty());
    let mut seen = 0;
    m.visit_lora_targets(&mut |t| {
        let (o, i) = t.dims();
        assert_eq!(t.lora().is_some(), o.min(i) >= 16, "{}", t.target_name());
        seen += 1;
    });
    assert_eq!(seen, report.adapted.len() + report.skipped.len());
}

fn randomize_adapters(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids_in(&[Group::Lora]) {
        store.value_mut(id).mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    }
}

#[test]
fn merge_matches_adapted_forward() {
    let (mut m, mut store) = desk_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    inject_lora(&mut m, &mut store, &mut rng, &LoraConfig::default()).unwrap();
    randomize_adapters(&mut store, 5);
    let adapted = outputs(&m, &store);
    let n = merge_lora(&mut m, &mut store).unwrap();
    assert!(n > 0);
    let merged = outputs(&m, &store);
    for (a, b) in adapted.0.iter().chain(&adapted.1).zip(merged.0.iter().chain(&merged.1)) {
        assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3), "{a} vs {b}");
    }
    assert!(matches!(merge_lora(&mut m, &mut store), Err(Error::Lora(_))));
}

#[test]
fn merging_zero_adapters_changes_nothing() {
    let (mut m, mut store) = desk_model(6);
    let before = outputs(&m, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    inject_lora(&mut m, &mut store, &mut rng, &LoraConfig::default()).unwrap();
    merge_lora(&mut m, &mut store).unwrap();
    let after = outputs(&m, &store);
    for (a, b) in before.0.iter().chain(&before.1).zip(after.0.iter().chain(&after.1)) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn merge_on_a_single_toy_layer() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut layer = Builder::new(&mut store, &mut rng, Group::Score, "toy").linear("l", 20, 24);
    attach_adapter(&mut layer, &mut store, &mut rng, &LoraConfig::default()).unwrap();
    randomize_adapters(&mut store, 1);
    let x = signal(3, 20, 2);
    let a = layer.forward(&Binder::frozen(&store), &x).to_vec();
    layer.merge(&mut store).unwrap();
    let b = layer.forward(&Binder::frozen(&store), &x).to_vec();
    for (p, q) in a.iter().zip(&b) {
        assert_abs_diff_eq!(p, q, epsilon = 1e-10);
    }
    assert!(layer.merge(&mut store).is_err());
}

fn predictor() -> PhonemePredictor {
    PhonemePredictor::new(&PredictorConfig::default(), 0).unwrap()
}

#[test]
fn predictor_rows_are_log_distributions() {
    let p = predictor();
    let lp = p.log_probs(&signal(2, 800, 3));
    assert_eq!(lp.shape(), &[2, 11, synth::NUM_CLASSES]);
    for row in lp.to_vec().chunks(synth::NUM_CLASSES) {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(lse, 0.0, epsilon = 1e-5);
    }
    assert_abs_diff_eq!(p.frame_rate(), 100.0);
}

#[test]
fn predictor_training_reduces_ctc_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = SynthConfig::default();
    let data: Vec<_> = (0..16).map(|_| synth::utterance(&mut rng, &cfg, 4000)).collect();
    assert!(data.iter().all(|u| !u.labels.is_empty()));
    let mut p = predictor();
    let hist = p.train(&data, 40, 4, 3e-3, &mut rng).unwrap();
    let head: f64 = hist[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = hist[hist.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}

#[test]
fn ctc_phoneme_loss_behaviour() {
    let p = predictor();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = SynthConfig::default();
    let rows: Vec<f64> = (0..2).flat_map(|_| synth::utterance(&mut rng, &cfg, 800).audio.samples).collect();
    let clean = Tensor::from_vec(&[2, 800], rows);
    assert!(p.decode(&clean).iter().all(|t| !t.is_empty()));
    let own = ctc_phoneme_loss(&clean, &clean, &p).unwrap();
    assert!(own.item().is_finite() && own.item() >= 0.0);
    let padded = clean.pad(1, 0, 800);
    let l = ctc_phoneme_loss(&padded, &padded, &p).unwrap();
    assert!(l.item().is_finite());
    let x = Tensor::leaf(signal(2, 800, 5).value().clone());
    let g = ctc_phoneme_loss(&x, &clean, &p).unwrap().backward();
    assert!(g.get(&x).unwrap().iter().all(|v| v.is_finite()));
    assert!(ctc_phoneme_loss(&signal(1, 800, 1), &clean, &p).is_err());
}

#[test]
fn spectrogram_loss_is_zero_on_identity_and_positive_otherwise() {
    let res = [(64, 16, 64), (128, 32, 96)];
    let a = signal(2, 512, 1);
    let b = signal(2, 512, 2);
    assert_eq!(multi_resolution_spectrogram_loss(&a, &a, &res).unwrap().item(), 0.0);
    assert!(multi_resolution_spectrogram_loss(&a, &b, &res).unwrap().item() > 0.0);
    let r = a.value().slice_axis(ndarray::Axis(0), (0..1).into()).to_owned();
    let short = [(32, 8, 32)];
    let checks = gradcheck::check(
        |t| multi_resolution_spectrogram_loss(&Tensor::constant(r.slice_axis(ndarray::Axis(1), (0..64).into()).to_owned()), &t[0], &short).unwrap(),
        &[b.value().slice_axis(ndarray::Axis(0), (0..1).into()).slice_axis(ndarray::Axis(1), (0..64).into()).to_owned()],
        1e-6,
    );
    for c in checks {
        assert!(c.relative_error() < 1e-4, "{}", c.relative_error());
    }
}

struct Rig {
    model: Model,
    store: ParamStore,
    bank: DiscriminatorBank,
    bank_store: ParamStore,
    mel: LogMel,
    predictor: PhonemePredictor,
}

fn rig() -> Rig {
    let (model, store) = desk_model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bank_store = ParamStore::new();
    let bank = DiscriminatorBank::new(
        &mut Builder::new(&mut bank_store, &mut rng, Group::Discriminator, "disc"),
        &DiscriminatorConfig::desk(),
    )
    .unwrap();
    let mel = LogMel::new(&SpectralConfig::with_sizes(512, 128), 8000).unwrap();
    Rig {
        model,
        store,
        bank,
        bank_store,
        mel,
        predictor: predictor(),
    }
}

fn small_finetune() -> FinetuneConfig {
    FinetuneConfig {
        sampler_steps: 3,
        resolutions: vec![(256, 64, 256), (512, 128, 512)],
        lr: 1e-3,
        ..FinetuneConfig::default()
    }
}

#[test]
fn finetune_updates_only_adapters() {
    let mut r = rig();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    inject_lora(&mut r.model, &mut r.store, &mut rng, &LoraConfig::default()).unwrap();
    let before = r.store.clone();
    let clean = signal(2, 960, 1);
    let degraded = clean.add(&signal(2, 960, 2).scale(0.3));
    let ctx = FinetuneContext {
        model: &r.model,
        bank: &r.bank,
        bank_store: &r.bank_store,
        mel: &r.mel,
        predictor: &r.predictor,
    };
    let mut opt = AdamW::new(0.9, 0.99, 0.0);
    let l = finetune_step(&ctx, &mut r.store, &degraded, &clean, &small_finetune(), &mut opt, &mut rng).unwrap();
    assert!(!l.skipped && l.total.is_finite() && l.grad_norm > 0.0);
    let mut lora_changed = false;
    for (id, p) in before.iter() {
        let same = p.value == *r.store.value(id);
        if p.group == Group::Lora {
            lora_changed |= !same;
        } else {
            assert!(same, "{} changed", p.name);
        }
    }
    assert!(lora_changed);
    assert!(opt.param_ids().iter().all(|id| before.param(*id).group == Group::Lora));
}

#[test]
fn zero_ctc_weight_reproduces_base_losses() {
    let mut r = rig();
    let clean = signal(1, 960, 3);
    let degraded = clean.add(&signal(1, 960, 4).scale(0.3));
    let cfg = FinetuneConfig {
        lambda_ctc: 0.0,
        lr: 0.0,
        ..small_finetune()
    };
    // base model, no adapters: gradients are empty but the losses are evaluated
    let base = {
        let ctx = FinetuneContext {
            model: &r.model,
            bank: &r.bank,
            bank_store: &r.bank_store,
            mel: &r.mel,
            predictor: &r.predictor,
        };
        let mut opt = AdamW::new(0.9, 0.99, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        finetune_step(&ctx, &mut r.store.clone(), &degraded, &clean, &cfg, &mut opt, &mut rng).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    inject_lora(&mut r.model, &mut r.store, &mut rng, &LoraConfig::default()).unwrap();
    let ctx = FinetuneContext {
        model: &r.model,
        bank: &r.bank,
        bank_store: &r.bank_store,
        mel: &r.mel,
        predictor: &r.predictor,
    };
    let mut opt = AdamW::new(0.9, 0.99, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let adapted = finetune_step(&ctx, &mut r.store, &degraded, &clean, &cfg, &mut opt, &mut rng).unwrap();
    assert_eq!(adapted.head, base.head);
    assert_eq!(adapted.spectrogram, base.spectrogram);
    assert_eq!(adapted.total, base.head + base.spectrogram);
}
