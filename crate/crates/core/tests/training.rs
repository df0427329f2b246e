use bsdn_core::autodiff::Tape;
use bsdn_core::evaluation::eval_dataset;
use bsdn_core::model::LearnedNoise;
use bsdn_core::noise::corrupt;
use bsdn_core::training::loss::lp_loss;
use bsdn_core::training::{ema_update, lr_schedule};
use bsdn_core::{
    synth, Checkpoint, Image, Knownness, Method, NetworkConfig, NoiseKind, NoiseSpec, ParamRange,
    Tensor, TrainConfig, UNet,
};

fn small(method: Method, steps: usize) -> TrainConfig {
    TrainConfig {
        method,
        steps,
        crop: 32,
        enc_width: 8,
        dec_width: 16,
        lr: 1e-3,
        val_every: 0,
        log_every: 1,
        ..TrainConfig::default()
    }
}

fn named(images: Vec<Image>) -> Vec<(String, Image)> {
    images.into_iter().enumerate().map(|(i, m)| (format!("img{i}"), m)).collect()
}

#[test]
fn smoke_run_reduces_loss() {
    let data = synth::toy_dataset(8, 3, 64, 64, 1).unwrap();
    let mut losses = Vec::new();
    let out = bsdn_core::train(&small(Method::Ours, 200), &data, &[], &mut |r| losses.push(r.loss)).unwrap();
    assert_eq!(out.steps, 200);
    assert_eq!(losses.len(), 200);
    let first: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let last: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let data = synth::toy_dataset(4, 3, 48, 48, 2).unwrap();
    let val = synth::toy_dataset(2, 3, 32, 32, 3).unwrap();
    for method in [Method::Ours, Method::MaskRandom, Method::N2n] {
        let cfg = TrainConfig {
            val_every: 5,
            ..small(method, 12)
        };
        let a = bsdn_core::train(&cfg, &data, &val, &mut |_| {}).unwrap();
        let b = bsdn_core::train(&cfg, &data, &val, &mut |_| {}).unwrap();
        let bytes = a.checkpoint.to_bytes().unwrap();
        assert_eq!(bytes, b.checkpoint.to_bytes().unwrap(), "{method} is not deterministic");
        assert_eq!(a.log, b.log);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bsdn");
        a.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
        assert_eq!(loaded.last, a.checkpoint.last);
    }
}

#[test]
fn masked_methods_record_masking_config() {
    let data = synth::toy_dataset(2, 3, 40, 40, 4).unwrap();
    let out = bsdn_core::train(&small(Method::MaskRandom, 2), &data, &[], &mut |_| {}).unwrap();
    let ck = out.checkpoint;
    assert_eq!(ck.meta("train.mask_count"), Some("64"));
    assert_eq!(ck.meta("train.mask_strategy"), Some("random"));
    assert_eq!(ck.meta("train.mask_stratified"), Some("true"));
}

#[test]
fn learned_noise_representation_follows_regime() {
    let data = synth::toy_dataset(2, 3, 40, 40, 5).unwrap();
    let spec = |range, knownness| NoiseSpec {
        kind: NoiseKind::Gaussian,
        range,
        knownness,
    };
    let cases = [
        (Method::Ours, spec(ParamRange::Fixed(25.0), Knownness::Unknown), "scalar"),
        (
            Method::Ours,
            spec(ParamRange::Uniform { low: 5.0, high: 50.0 }, Knownness::Unknown),
            "network",
        ),
        (Method::OursMu, spec(ParamRange::Fixed(25.0), Knownness::Unknown), "none"),
        (Method::Ours, spec(ParamRange::Fixed(25.0), Knownness::Known), "none"),
    ];
    for (method, noise, want) in cases {
        let cfg = TrainConfig {
            noise,
            ..small(method, 2)
        };
        let out = bsdn_core::train(&cfg, &data, &[], &mut |_| {}).unwrap();
        let got = match &out.checkpoint.last.learned {
            LearnedNoise::None => "none",
            LearnedNoise::Scalar(_) => "scalar",
            LearnedNoise::Network(aux) => {
                assert_eq!(aux.config().out_channels, 1);
                assert!(!aux.config().blind_spot);
                "network"
            }
        };
        assert_eq!(got, want, "{method} {noise:?}");
    }
}

#[test]
fn n2c_approaches_identity_without_noise() {
    let data = synth::toy_dataset(16, 3, 64, 64, 6).unwrap();
    let test = named(synth::toy_dataset(4, 3, 32, 32, 7).unwrap());
    let cfg = TrainConfig {
        noise: NoiseSpec::fixed(NoiseKind::Gaussian, 1e-3, Knownness::Known).unwrap(),
        log_every: 100,
        ..small(Method::N2c, 1500)
    };
    let out = bsdn_core::train(&cfg, &data, &[], &mut |_| {}).unwrap();
    let rep = eval_dataset(&[("n2c".into(), &out.checkpoint.last)], &test, &cfg.noise, 1, 0).unwrap();
    let agg = rep.aggregate("n2c").unwrap();
    assert!(agg.psnr > 30.0, "identity PSNR {}", agg.psnr);
}

/// Mean parameter gradient of the L2 loss over a batch.
fn l2_gradient(net: &UNet<f32>, input: &Tensor<f32>, target: &Tensor<f32>) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x = tape.leaf(input.clone());
    let out = net.forward(&mut tape, &bound, x).unwrap();
    let (l, g) = lp_loss(tape.value(out), target, 2.0, None).unwrap();
    let loss = tape.scalar(l as f32, vec![out], vec![g]).unwrap();
    tape.backward(loss).unwrap();
    net.gradients(&mut tape, &bound)
        .iter()
        .flat_map(|t| t.data().iter().map(|v| *v as f64).collect::<Vec<_>>())
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn noisy_targets_give_clean_gradients_in_expectation() {
    let net = UNet::<f32>::new(NetworkConfig::with_widths(false, 2, 8, 12, 3, 3), 3).unwrap();
    let clean = synth::toy_dataset(100, 3, 16, 16, 8).unwrap();
    let mut sum_noisy = Vec::new();
    let mut sum_clean = Vec::new();
    for (i, img) in clean.iter().enumerate() {
        let i = i as u64;
        let input = corrupt(img, NoiseKind::Gaussian, 25.0, 2 * i).unwrap();
        let second = corrupt(img, NoiseKind::Gaussian, 25.0, 2 * i + 1).unwrap();
        let x = Image::batch_to_tensor(&[input]).unwrap();
        let g_noisy = l2_gradient(&net, &x, &Image::batch_to_tensor(&[second]).unwrap());
        let g_clean = l2_gradient(&net, &x, &Image::batch_to_tensor(std::slice::from_ref(img)).unwrap());
        if sum_noisy.is_empty() {
            sum_noisy = vec![0.0; g_noisy.len()];
            sum_clean = vec![0.0; g_clean.len()];
        }
        for k in 0..g_noisy.len() {
            sum_noisy[k] += g_noisy[k];
            sum_clean[k] += g_clean[k];
        }
    }
    let r = pearson(&sum_noisy, &sum_clean);
    assert!(r > 0.9, "gradient correlation {r}");
}

#[test]
fn ema_and_schedule_reference_points() {
    let mut s = vec![Tensor::full(&[1], 1.0f32)];
    let w = vec![Tensor::full(&[1], 0.0f32)];
    for _ in 0..1000 {
        ema_update(&mut s, &w, 0.999);
    }
    assert!((s[0].data()[0] as f64 - (-1.0f64).exp()).abs() < 1e-3);
    ema_update(&mut s, &w, 0.0);
    assert_eq!(s[0].data()[0], 0.0);
    assert_eq!(lr_schedule(0, 1000, 3e-4, 0.3), 3e-4);
    assert_eq!(lr_schedule(1000, 1000, 3e-4, 0.3), 0.0);
    assert!((lr_schedule(850, 1000, 3e-4, 0.3) - 1.5e-4).abs() < 1e-15);
}
