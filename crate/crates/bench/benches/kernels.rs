use criterion::{criterion_group, criterion_main, Criterion};
use eradiff_core::diffusion::oracle_rollout;
use eradiff_core::model::{build_denoiser, sra_attention, Conditioning, DenoiserConfig, ExtendedMask};
use eradiff_core::numerics::AdamState;
use eradiff_core::rng::{normal_tensor, rng_from};
use eradiff_core::scenegen::{held_out_scene, SceneConfig};
use eradiff_core::schedule::ScheduleConfig;
use eradiff_core::train::{cro_step, training_scenes, TrainConfig};
use eradiff_core::{Tape, Tensor};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut rng = rng_from(0);
    let x = normal_tensor::<f32>(&mut rng, &[16, 16, 32, 32]);
    let w = normal_tensor::<f32>(&mut rng, &[16, 16, 3, 3]);
    c.bench_function("conv2d 16x16x32x32 fwd+bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            let l = tape.mean(y);
            tape.backward(l).unwrap();
            black_box(tape.grad(wv).unwrap().data()[0])
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut rng = rng_from(1);
    let q = normal_tensor::<f64>(&mut rng, &[64, 32]);
    let k = normal_tensor::<f64>(&mut rng, &[64, 32]);
    let v = normal_tensor::<f64>(&mut rng, &[64, 32]);
    let mask = ExtendedMask::from_tokens((0..64).map(|i| i % 5 == 0).collect()).unwrap();
    c.bench_function("sra attention 64 tokens", |b| {
        b.iter(|| black_box(sra_attention(&q, &k, &v, Some(&mask)).unwrap()))
    });
}

fn model(c: &mut Criterion) {
    let cfg = DenoiserConfig::default();
    let m = build_denoiser::<f32>(&cfg, 0).unwrap();
    let pair = held_out_scene(0, &SceneConfig::default()).unwrap();
    let x = normal_tensor::<f32>(&mut rng_from(2), &[1, 3, 32, 32]);
    let cond = Conditioning {
        masks: vec![pair.mask.clone()],
        masked_image: Tensor::zeros(&[1, 3, 32, 32]),
    };
    c.bench_function("denoiser forward 1x32x32", |b| b.iter(|| black_box(m.predict_eps(&x, &cond, &[100]).unwrap())));

    let schedule = ScheduleConfig::default().build().unwrap();
    let tcfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let pairs = training_scenes(0, 0, 4, &SceneConfig::default()).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("cro step batch 4", |b| {
        let mut model = m.clone();
        let mut opt = AdamState::for_params(tcfg.adam, model.params());
        let mut rng = rng_from(3);
        b.iter(|| black_box(cro_step(&mut model, &pairs, &schedule, &tcfg, &mut opt, &mut rng).unwrap().loss))
    });
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let schedule = ScheduleConfig::default().build().unwrap();
    let pair = held_out_scene(1, &SceneConfig::default()).unwrap();
    let eps = normal_tensor::<f64>(&mut rng_from(4), pair.x0_ori.shape());
    c.bench_function("oracle rollout T=200", |b| b.iter(|| black_box(oracle_rollout(&pair, &eps, &schedule).unwrap())));
}

criterion_group!(benches, conv, attention, model, oracle);
criterion_main!(benches);
