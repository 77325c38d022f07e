use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resound_core::autograd::Tensor;
use resound_core::diffusion::{precondition_coeffs, NoiseSchedule};
use resound_core::networks::*;
use resound_core::nn::{Binder, Group, ParamStore};
use resound_core::Error;

fn tiny() -> ArchitectureConfig {
    ArchitectureConfig {
        base_channels: 2,
        embedding_pairs: 4,
        mel_bins: 8,
        ..ArchitectureConfig::desk()
    }
}

fn build(cfg: &ArchitectureConfig, seed: u64) -> (Model, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Model::build(cfg, &NoiseSchedule::default(), &mut store, &mut rng).unwrap();
    (m, store)
}

fn noise(b: usize, t: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[b, t], (0..b * t).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn tone(len: usize, cycles_per_sample: f64) -> Vec<f64> {
    (0..len).map(|n| (2.0 * PI * cycles_per_sample * n as f64 + 0.3).sin()).collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Least-squares amplitude of a sinusoid of known frequency.
fn fit_amplitude(x: &[f64], cycles_per_sample: f64) -> f64 {
    let (mut ss, mut sc, mut cc, mut xs, mut xc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (n, &v) in x.iter().enumerate() {
        let (s, c) = (2.0 * PI * cycles_per_sample * n as f64).sin_cos();
        ss += s * s;
        sc += s * c;
        cc += c * c;
        xs += v * s;
        xc += v * c;
    }
    let det = ss * cc - sc * sc;
    let a = (xs * cc - xc * sc) / det;
    let b = (xc * ss - xs * sc) / det;
    (a * a + b * b).sqrt()
}

#[test]
fn embedding_has_norm_sqrt_m_and_unit_dc_pair() {
    for &sigma in &[5e-4, 0.01, 0.2, 1.0, 5.0] {
        let e = fourier_embed(sigma, 0.37, 1.9, 32).unwrap();
        assert_eq!(e.len(), 64);
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 32f64.sqrt(), epsilon = 1e-12);
        assert_eq!(e[0], 1.0);
        assert_eq!(e[32], 0.0);
    }
}

#[test]
fn embedding_at_unit_frequency_is_all_ones_and_zeros() {
    let e = fourier_embed(std::f64::consts::E, 1.0, 0.0, 16).unwrap();
    for m in 0..16 {
        assert_abs_diff_eq!(e[m], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e[16 + m], 0.0, epsilon = 1e-12);
    }
}

#[test]
fn embedding_rejects_non_positive_sigma() {
    assert!(matches!(fourier_embed(0.0, 1.0, 0.0, 4), Err(Error::Domain(_))));
    assert!(matches!(fourier_embed(-1.0, 1.0, 0.0, 4), Err(Error::Domain(_))));
}

#[test]
fn embedding_layer_matches_scalar_formula() {
    let (m, store) = build(&tiny(), 3);
    let bind = Binder::frozen(&store);
    let sigmas = [5e-4, 0.05, 5.0];
    let out = m.score.embedding.forward(&bind, &sigmas);
    let alpha = store.value(m.score.embedding.alpha)[[0]];
    let beta = store.value(m.score.embedding.beta_emb)[[0]];
    // initialisation spans one period over the schedule
    assert_abs_diff_eq!(alpha * 5e-4f64.ln() + beta, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(alpha * 5f64.ln() + beta, 1.0, epsilon = 1e-12);
    let v = out.to_vec();
    for (i, &s) in sigmas.iter().enumerate() {
        let e = fourier_embed(s, alpha, beta, 4).unwrap();
        for (j, ej) in e.iter().enumerate() {
            assert_abs_diff_eq!(v[i * 8 + j], *ej, epsilon = 1e-12);
        }
    }
}

#[test]
fn film_identity_constant_and_elementwise() {
    let x = noise(2, 3 * 5, 1, 1.0).reshape(&[2, 3, 5]);
    let ones = Tensor::from_vec(&[2, 3, 1], vec![1.0; 6]);
    let zeros = Tensor::zeros(&[2, 3, 1]);
    assert_eq!(film(&x, &ones, &zeros).to_vec(), x.to_vec());

    let shift = noise(2, 3, 2, 1.0).reshape(&[2, 3, 1]);
    let out = film(&x, &zeros, &shift).to_vec();
    let sh = shift.to_vec();
    for (i, v) in out.iter().enumerate() {
        assert_eq!(*v, sh[i / 5]);
    }

    let scale = noise(2, 3, 3, 2.0).reshape(&[2, 3, 1]);
    let out = film(&x, &scale, &shift).to_vec();
    let (xs, sc) = (x.to_vec(), scale.to_vec());
    for i in 0..30 {
        assert_abs_diff_eq!(out[i], sc[i / 5] * xs[i] + sh[i / 5], epsilon = 1e-15);
    }
}

#[test]
fn antialias_preserves_dc() {
    for &f in &[2, 3, 5, 8] {
        let k = kernel_for(f);
        let sum: f64 = k.taps.iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
        let x = Tensor::from_vec(&[1, 2, 960], vec![0.7; 1920]);
        let down = antialiased_down(&x, f, &k).to_vec();
        let half = k.taps.len() / 2 / f + 1;
        let rows = 960 / f;
        for r in 0..2 {
            for &v in &down[r * rows + half..(r + 1) * rows - half] {
                assert_abs_diff_eq!(v, 0.7, epsilon = 1e-6);
            }
        }
    }
}

#[test]
fn antialias_down_rejects_tones_above_new_nyquist() {
    for &f in &[2, 3, 5, 8] {
        let k = kernel_for(f);
        let margin = k.taps.len();
        // 0.8 of the old Nyquist and just past the new one
        for &rel in &[0.8, 1.05 / f as f64] {
            let x = tone(8 * margin, 0.5 * rel);
            let y = antialiased_down(&Tensor::from_vec(&[1, x.len()], x.clone()), f, &k).to_vec();
            let inner = &y[margin / f + 1..y.len() - margin / f - 1];
            let db = 10.0 * (energy(inner) / energy(&x)).log10();
            assert!(db <= -55.0, "factor {f} tone {rel}: {db:.1} dB");
        }
    }
}

#[test]
fn antialias_down_up_keeps_in_band_tones() {
    for &f in &[2, 3, 5, 8] {
        let k = kernel_for(f);
        let margin = 2 * k.taps.len();
        for &rel in &[0.2, 0.5, 0.8] {
            let fr = 0.5 * rel / f as f64;
            let x = tone(12 * margin, fr);
            let xt = Tensor::from_vec(&[1, x.len()], x.clone());
            let y = antialiased_up(&antialiased_down(&xt, f, &k), f, &k).to_vec();
            let a = fit_amplitude(&y[margin..y.len() - margin], fr);
            let db = 20.0 * a.log10();
            assert!(db.abs() <= 1.0, "factor {f} tone {rel}: {db:.3} dB");
        }
    }
}

#[test]
fn bottleneck_rate_example() {
    let cfg = ArchitectureConfig {
        sample_rate: 24000,
        ..tiny()
    };
    let (m, store) = build(&cfg, 0);
    let bind = Binder::frozen(&store);
    let y = noise(1, 48000, 1, 0.1);
    let out = m.condition(&bind, &y).unwrap();
    assert_eq!(out.features.bottleneck.shape(), &[1, cfg.channels(4), 200]);
    let lens: Vec<usize> = out.features.stages.iter().map(|s| s.shape()[2]).collect();
    assert_eq!(lens, vec![48000 / 240, 48000 / 120, 48000 / 40, 48000 / 8]);
    let chans: Vec<usize> = out.features.stages.iter().map(|s| s.shape()[1]).collect();
    assert_eq!(chans, vec![cfg.channels(4), cfg.channels(3), cfg.channels(2), cfg.channels(1)]);
    assert_eq!(out.head.shape(), &[1, 48000]);
}

#[test]
fn doubling_input_doubles_feature_lengths() {
    let (m, store) = build(&tiny(), 0);
    let bind = Binder::frozen(&store);
    let a = m.condition(&bind, &noise(1, 960, 1, 0.1)).unwrap();
    let b = m.condition(&bind, &noise(1, 1920, 1, 0.1)).unwrap();
    assert_eq!(2 * a.features.bottleneck.shape()[2], b.features.bottleneck.shape()[2]);
    for (x, y) in a.features.stages.iter().zip(&b.features.stages) {
        assert_eq!(2 * x.shape()[2], y.shape()[2]);
    }
    assert_eq!(2 * a.head.shape()[1], b.head.shape()[1]);
}

#[test]
fn zero_input_gives_finite_outputs() {
    let (m, store) = build(&ArchitectureConfig::desk(), 0);
    let bind = Binder::frozen(&store);
    let y = Tensor::zeros(&[2, 480]);
    let c = m.condition(&bind, &y).unwrap();
    assert!(c.head.to_vec().iter().all(|v| v.is_finite()));
    assert!(c.features.bottleneck.to_vec().iter().all(|v| v.is_finite()));
    let d = m.denoise(&bind, &y, &c.features, &[5e-4, 5.0]).unwrap();
    assert!(d.to_vec().iter().all(|v| v.is_finite()));
}

#[test]
fn rejects_lengths_off_the_hop_grid() {
    let (m, store) = build(&tiny(), 0);
    let bind = Binder::frozen(&store);
    assert!(matches!(m.condition(&bind, &Tensor::zeros(&[1, 500])), Err(Error::InvalidInput(_))));
    let c = m.condition(&bind, &Tensor::zeros(&[1, 480])).unwrap();
    assert!(m.denoise(&bind, &Tensor::zeros(&[1, 480]), &c.features, &[0.1, 0.2]).is_err());
    assert!(matches!(
        m.denoise(&bind, &Tensor::zeros(&[1, 480]), &c.features, &[0.0]),
        Err(Error::Domain(_))
    ));
}

#[test]
fn zero_raw_output_reduces_to_skip_scaling() {
    let (m, mut store) = build(&tiny(), 4);
    // silence the final projection
    store.value_mut(m.score.out.g).fill(0.0);
    store.value_mut(m.score.out.b).fill(0.0);
    let bind = Binder::frozen(&store);
    let x = noise(2, 480, 5, 1.0);
    let c = m.condition(&bind, &noise(2, 480, 6, 0.1)).unwrap();
    let sig = [0.03, 2.0];
    let d = m.denoise(&bind, &x, &c.features, &sig).unwrap().to_vec();
    let xs = x.to_vec();
    for (i, v) in d.iter().enumerate() {
        let cs = precondition_coeffs(sig[i / 480], 0.2).c_skip;
        assert_eq!(*v, cs * xs[i] + 0.0);
    }
    let raw = Tensor::zeros(&[2, 480]);
    let w = precondition_output(&x, &raw, &sig, 0.2).to_vec();
    for (i, v) in w.iter().enumerate() {
        assert_eq!(*v, precondition_coeffs(sig[i / 480], 0.2).c_skip * xs[i]);
    }
}

#[test]
fn score_is_residual_over_variance() {
    let (m, store) = build(&tiny(), 1);
    let bind = Binder::frozen(&store);
    let x = noise(1, 240, 2, 0.5);
    let c = m.condition(&bind, &noise(1, 240, 3, 0.1)).unwrap();
    let d = m.denoise(&bind, &x, &c.features, &[0.3]).unwrap().to_vec();
    let s = m.score(&bind, &x, &c.features, &[0.3]).unwrap().to_vec();
    let xs = x.to_vec();
    for i in 0..240 {
        assert_abs_diff_eq!(s[i], (d[i] - xs[i]) / 0.09, epsilon = 1e-12);
    }
}

#[test]
fn input_gradient_is_finite_at_schedule_ends() {
    let (m, store) = build(&tiny(), 2);
    let sched = NoiseSchedule::default();
    for &sigma in &[sched.sigma_min, sched.sigma_max] {
        let bind = Binder::new(&store, &Group::GENERATOR);
        let x = Tensor::leaf(noise(1, 480, 7, 1.0).value().clone());
        let c = m.condition(&bind, &noise(1, 480, 8, 0.1)).unwrap();
        let out = m.score(&bind, &x, &c.features, &[sigma]).unwrap().mean();
        let g = out.backward();
        let gx = g.get(&x).unwrap();
        assert!(gx.iter().all(|v| v.is_finite()));
        assert!(gx.iter().any(|v| *v != 0.0));
        let grads = bind.gradients(&g);
        assert!(grads.iter().all(|(_, a)| a.iter().all(|v| v.is_finite())));
    }
}

#[test]
fn weight_norm_direction_scale_is_invisible() {
    let (m, store) = build(&tiny(), 9);
    let mut scaled = store.clone();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".v"))
        .map(|(id, _)| id)
        .collect();
    assert!(ids.len() > 30);
    for id in ids {
        scaled.value_mut(id).mapv_inplace(|v| 2.0 * v);
    }
    let x = noise(2, 480, 1, 1.0);
    let y = noise(2, 480, 2, 0.1);
    let run = |s: &ParamStore| {
        let bind = Binder::frozen(s);
        let c = m.condition(&bind, &y).unwrap();
        let d = m.denoise(&bind, &x, &c.features, &[0.01, 1.0]).unwrap();
        (c.head.to_vec(), d.to_vec())
    };
    assert_eq!(run(&store), run(&scaled));
}

#[test]
fn forward_is_deterministic() {
    let (m1, s1) = build(&tiny(), 11);
    let (m2, s2) = build(&tiny(), 11);
    let x = noise(1, 720, 1, 1.0);
    let run = |m: &Model, s: &ParamStore| {
        let bind = Binder::frozen(s);
        let c = m.condition(&bind, &x).unwrap();
        m.denoise(&bind, &x, &c.features, &[0.5]).unwrap().to_vec()
    };
    let a = run(&m1, &s1);
    assert_eq!(a, run(&m1, &s1));
    assert_eq!(a, run(&m2, &s2));
    let (m3, s3) = build(&tiny(), 12);
    assert_ne!(a, run(&m3, &s3));
}

#[test]
fn encoder_is_covariant_to_hop_shifts() {
    let (m, store) = build(&tiny(), 5);
    let bind = Binder::frozen(&store);
    let hop = 240;
    let len = 10 * hop;
    let base = noise(1, len + hop, 3, 0.3).to_vec();
    let a = Tensor::from_vec(&[1, 1, len], base[hop..].to_vec());
    let b = Tensor::from_vec(&[1, 1, len], base[..len].to_vec());
    let ea = m.conditioning.encode(&bind, &a);
    let eb = m.conditioning.encode(&bind, &b);
    let mut rate = 1;
    for (s, f) in m.config.encoder_factors().iter().enumerate() {
        rate *= f;
        let shift = hop / rate;
        let (c, n) = (ea[s].shape()[1], ea[s].shape()[2]);
        let (va, vb) = (ea[s].to_vec(), eb[s].to_vec());
        // boundary frames see zero padding
        let guard = 3;
        for ch in 0..c {
            for i in guard..n - shift - guard {
                assert!((va[ch * n + i] - vb[ch * n + i + shift]).abs() < 1e-10, "stage {s} frame {i} of {n}");
            }
        }
    }
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k + 2 * cout
}

fn res(c: usize, k: usize) -> usize {
    c + conv(c, c, k)
}

fn linear(i: usize, o: usize) -> usize {
    o * i + 2 * o
}

fn gru(h: usize) -> usize {
    6 * h * h + 6 * h
}

#[test]
fn census_matches_layer_arithmetic() {
    let cfg = ArchitectureConfig::desk();
    let ch: Vec<usize> = (0..5).map(|l| cfg.channels(l)).collect();
    assert_eq!(ch, vec![8, 16, 32, 64, 128]);
    let (k, rk, e) = (3, 5, 2 * cfg.embedding_pairs);
    let enc = [8, 5, 3, 2];
    let dec = [2, 3, 5, 8];
    let mut cond = conv(1, ch[0], k) + ch[0] + conv(ch[0], 1, k) + 2 * gru(ch[4]);
    for s in 0..4 {
        cond += 2 * res(ch[s], k) + ch[s] + conv(ch[s], ch[s + 1], 2 * enc[s]);
    }
    for s in 0..3 {
        cond += conv(ch[s + 1], ch[4], 1);
    }
    for j in 0..4 {
        let c = ch[4 - j];
        cond += 2 * res(c, k) + c + (c * ch[3 - j] * 2 * dec[j] + 2 * ch[3 - j]);
    }
    let mut score = 2 + conv(1, ch[0], k) + ch[0] + conv(ch[0], 1, k);
    for s in 0..4 {
        score += 2 * res(ch[s], k) + linear(e, 2 * ch[s]) + conv(ch[s], ch[s + 1], rk);
    }
    score += conv(ch[4], ch[4], 1) + gru(ch[4]) + linear(e, 2 * ch[4]);
    for j in 0..4 {
        let c = ch[4 - j];
        score += conv(c, c, 1) + 2 * res(c, k) + linear(e, 2 * c) + conv(c, ch[3 - j], rk);
    }
    let mdn = conv(ch[4], 3 * (1 + 2 * cfg.mel_bins), 1) + conv(ch[0], 2, 1);
    let census = Model::census(&cfg).unwrap();
    assert_eq!(census, ParameterCensus { conditioning: cond, score, mdn });
    let (_, store) = build(&cfg, 0);
    assert_eq!(store.total_count(), cond + score + mdn);
    assert_eq!(census, Model::census(&cfg).unwrap());
}

#[test]
fn full_size_census_is_reported() {
    let c = Model::census(&ArchitectureConfig::paper()).unwrap();
    println!("full-size parameters: {} (+{} auxiliary)", c.inference(), c.mdn);
    assert!(c.inference() > 1_000_000);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny();
    cfg.rate_factors = vec![2, 3, 5];
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg = tiny();
    cfg.kernel_size = 4;
    assert!(cfg.validate().is_err());
    cfg = tiny();
    cfg.base_channels = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn mdn_heads_have_expected_shapes() {
    let cfg = tiny();
    let (m, store) = build(&cfg, 0);
    let bind = Binder::frozen(&store);
    let c = m.condition(&bind, &noise(2, 720, 1, 0.1)).unwrap();
    let mix = m.mdn.mel_mixture(&bind, &c.features.bottleneck);
    assert_eq!(mix.logits.shape(), &[2, 3, 3]);
    assert_eq!(mix.means.shape(), &[2, 3, 8, 3]);
    assert_eq!(mix.logvars.shape(), &[2, 3, 8, 3]);
    let (mu, lv) = m.mdn.wave_gaussian(&bind, &c.decoder_out);
    assert_eq!(mu.shape(), &[2, 720]);
    assert_eq!(lv.shape(), &[2, 720]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_length_equals_input_length(frames in 1usize..5, batch in 1usize..3, seed in 0u64..1000) {
        let (m, store) = build(&tiny(), seed);
        let bind = Binder::frozen(&store);
        let t = frames * 240;
        let y = noise(batch, t, seed, 0.2);
        let c = m.condition(&bind, &y).unwrap();
        prop_assert_eq!(c.head.shape(), &[batch, t][..]);
        let d = m.denoise(&bind, &y, &c.features, &vec![0.1; batch]).unwrap();
        prop_assert_eq!(d.shape(), &[batch, t][..]);
    }

    #[test]
    fn embedding_norm_is_constant(sigma in 1e-5f64..100.0, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, pairs in 1usize..64) {
        let e = fourier_embed(sigma, alpha, beta, pairs).unwrap();
        let n = e.iter().map(|v| v * v).sum::<f64>();
        prop_assert!((n - pairs as f64).abs() < 1e-9);
    }
}

