mod common;

use bodylift::body_model::{toy_model, ToyModelConfig};
use bodylift::mixer::{
    backward, forward, init_params, load_checkpoint, predict, save_checkpoint, Checkpoint,
    MixerConfig, Readout,
};
use bodylift::sampling::{generate_dataset, SamplerConfig};
use common::oracles::{
    mixer_gradient_error, perturbed, random_points as random_input, tiny_mixer as tiny,
};
use common::*;
use nalgebra::Vector3;
use proptest::prelude::*;

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    let worst = mixer_gradient_error(60, 21);
    eprintln!("mixer worst relative gradient error {worst:e}");
    assert!(worst < 1e-5);
}

#[test]
fn input_gradient_through_identity_layers_is_head_row() {
    let cfg = tiny(true, true, Readout::MeanPool);
    let mut p = init_params(&cfg, 5).unwrap();
    let lay = p.layout.clone();
    // zeroed MLP weights make every layer the identity on the residual stream
    for l in &lay.layers {
        for slot in [l.token1_w, l.token2_w, l.channel1_w, l.channel2_w] {
            p.slice_mut(slot).fill(0.0);
        }
    }
    // embedding copies xyz into the first three channels
    p.slice_mut(lay.embed_w).fill(0.0);
    for a in 0..3 {
        p.view_mut(lay.embed_w)[(a, a)] = 1.0;
    }
    let x: Vec<Vector3<f64>> = (0..4)
        .map(|i| Vector3::new(i as f64, 1.0 - i as f64, 0.5))
        .collect();
    let (out, cache) = forward(&p, &x).unwrap();
    let (t_w, _) = lay.heads[1];
    for k in 0..3 {
        let mut up = out.zeros_like();
        up.t[k] = 1.0;
        let (_, dx) = backward(&p, &cache, &up).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                let expected = p.view(t_w)[(a, k)] / 4.0;
                assert!((dx[(s, a)] - expected).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn token_mixing_permutation_locality() {
    let mut rng = rng(22);
    for _ in 0..10 {
        let cfg = tiny(true, true, Readout::MeanPool);
        let mut p = perturbed(&cfg, &mut rng);
        let lay = p.layout.clone();
        for l in &lay.layers {
            p.slice_mut(l.channel1_w).fill(0.0);
            p.slice_mut(l.channel2_w).fill(0.0);
            p.slice_mut(l.channel2_b).fill(0.0);
        }
        let x = random_input(4, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let xp: Vec<Vector3<f64>> = perm.iter().map(|&i| x[i]).collect();
        let mut q = p.clone();
        for l in &lay.layers {
            // token 1 acts on columns, token 2 emits rows
            for h in 0..cfg.token_hidden {
                for (new, &old) in perm.iter().enumerate() {
                    q.view_mut(l.token1_w)[(h, new)] = p.view(l.token1_w)[(h, old)];
                    q.view_mut(l.token2_w)[(new, h)] = p.view(l.token2_w)[(old, h)];
                }
            }
            for (new, &old) in perm.iter().enumerate() {
                q.slice_mut(l.token2_b)[new] = p.slice(l.token2_b)[old];
            }
        }
        let a = predict(&p, &x).unwrap().to_flat();
        let b = predict(&q, &xp).unwrap().to_flat();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn init_weight_std_matches_fan_in() {
    let cfg = MixerConfig {
        tokens: 256,
        channels: 256,
        layers: 1,
        token_hidden: 300,
        channel_hidden: 300,
        ..MixerConfig::default()
    };
    let p = init_params(&cfg, 17).unwrap();
    let l = &p.layout.layers[0];
    for (slot, fan_in) in [
        (l.token1_w, cfg.tokens),
        (l.channel1_w, cfg.channels),
        (l.token2_w, 300),
        (l.channel2_w, 300),
    ] {
        let w = p.slice(slot);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
        let target = 1.0 / (fan_in as f64).sqrt();
        assert!((std / target - 1.0).abs() < 0.05, "std {std} vs {target}");
    }
    assert!(p.slice(l.token1_b).iter().all(|b| *b == 0.0));
    assert!(p.slice(l.ln1_gain).iter().all(|g| *g == 1.0));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = MixerConfig::default();
    let p = init_params(&cfg, 1).unwrap();
    let mut r = rng(23);
    let x = random_input(75, &mut r);
    let a = predict(&p, &x).unwrap();
    let b = predict(&p.clone(), &x.clone()).unwrap();
    assert_eq!(
        a.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn activations_stay_bounded_on_training_data() {
    let model = toy_model(&ToyModelConfig::default()).unwrap();
    let ds = generate_dataset(&model, &SamplerConfig::default(), 200).unwrap();
    let p = init_params(&MixerConfig::for_model(&model), 0).unwrap();
    let peak = ds
        .examples
        .iter()
        .map(|ex| forward(&p, &ex.input.points).unwrap().1.max_activation)
        .fold(0.0, f64::max);
    assert!(peak < 1e6, "peak activation {peak}");
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lifter.ckpt");
    let ckpt = Checkpoint {
        params: init_params(&tiny(true, true, Readout::Flatten), 4).unwrap(),
        seed: 4,
        step: 77,
    };
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn outputs_are_finite(xs in proptest::collection::vec(-5.0f64..5.0, 12), seed in 0u64..1000) {
        let cfg = tiny(true, true, Readout::MeanPool);
        let p = init_params(&cfg, seed).unwrap();
        let pts: Vec<Vector3<f64>> = xs.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        prop_assert!(predict(&p, &pts).unwrap().is_finite());
    }
}
