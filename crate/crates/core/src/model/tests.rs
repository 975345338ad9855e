use super::*;
use crate::numerics::{finite_difference_gradient, relative_error, AdamState};
use crate::rng::{normal_tensor, rng_from};
use crate::scenegen::{masked_image, random_mask, scene_for_index, MaskKind, MaskSpec, SceneConfig};

pub(crate) fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        image_channels: 3,
        image_size: 8,
        base_channels: 2,
        depth: 1,
        attention_resolution: 4,
        time_embed_dim: 4,
        sra: true,
    }
}

fn hole(size: usize) -> Mask {
    let mut m = Mask::empty(size, size);
    for y in 1..4 {
        for x in 2..6 {
            m.set(y, x, true);
        }
    }
    m
}

fn batch(cfg: &DenoiserConfig, n: usize, seed: u64, mask: &Mask) -> (Tensor<f64>, Conditioning<f64>) {
    let s = cfg.image_size;
    let mut rng = rng_from(seed);
    let x = normal_tensor::<f64>(&mut rng, &[n, 3, s, s]);
    let img = normal_tensor::<f64>(&mut rng, &[3, s, s]);
    let masked = masked_image(&img, mask);
    let cond = Conditioning {
        masks: vec![mask.clone(); n],
        masked_image: Tensor::stack(&vec![masked; n]).unwrap(),
    };
    (x, cond)
}

#[test]
fn build_is_seed_deterministic() {
    let cfg = DenoiserConfig::default();
    let a = build_denoiser::<f32>(&cfg, 4).unwrap();
    let b = build_denoiser::<f32>(&cfg, 4).unwrap();
    let c = build_denoiser::<f32>(&cfg, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn default_model_is_small() {
    let m = build_denoiser::<f32>(&DenoiserConfig::default(), 0).unwrap();
    assert!(m.parameter_count() < 500_000, "{}", m.parameter_count());
    assert_eq!(m.param_infos().len(), m.params().len());
}

#[test]
fn invalid_configs_rejected() {
    let zero = DenoiserConfig {
        depth: 0,
        ..DenoiserConfig::default()
    };
    assert!(build_denoiser::<f32>(&zero, 0).is_err());
    let unreachable = DenoiserConfig {
        attention_resolution: 4,
        ..DenoiserConfig::default()
    };
    let err = build_denoiser::<f32>(&unreachable, 0).unwrap_err().to_string();
    assert!(err.contains("not reachable"), "{err}");
    let too_deep = DenoiserConfig {
        depth: 7,
        ..DenoiserConfig::default()
    };
    assert!(build_denoiser::<f32>(&too_deep, 0).is_err());
}

#[test]
fn conditioning_layout() {
    let mut rng = rng_from(1);
    let x = normal_tensor::<f64>(&mut rng, &[2, 3, 4, 4]);
    let img = normal_tensor::<f64>(&mut rng, &[2, 3, 4, 4]);
    let masks = vec![Mask::empty(4, 4), Mask::empty(4, 4)];
    let c = condition_input(&x, &masks, &img).unwrap();
    assert_eq!(c.shape(), &[2, 7, 4, 4]);
    // Empty mask: the masked image is the image itself.
    let single = masked_image(&img.unstack().unwrap()[0], &masks[0]);
    assert_eq!(single, img.unstack().unwrap()[0]);
    assert_eq!(&c.data()[4 * 16..7 * 16], &img.data()[..3 * 16]);
    assert_eq!(&c.data()[7 * 16..10 * 16], &x.data()[3 * 16..6 * 16]);
    assert!(c.data()[3 * 16..4 * 16].iter().all(|&v| v == 0.0));
    assert!(condition_input(&x, &masks[..1], &img).is_err());
}

#[test]
fn training_conditioning_is_pair_invariant() {
    for i in 0..20 {
        let p = scene_for_index(21, i, &SceneConfig::default()).unwrap();
        assert_eq!(masked_image(&p.x0_ori, &p.mask), masked_image(&p.x0_obj, &p.mask));
    }
}

#[test]
fn output_matches_latent_shape() {
    for (cfg, n) in [(tiny_config(), 3), (DenoiserConfig::default(), 1)] {
        let m = build_denoiser::<f64>(&cfg, 2).unwrap();
        let (x, cond) = batch(&cfg, n, 3, &hole(cfg.image_size));
        let out = m.predict_eps(&x, &cond, &vec![7; n]).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.is_finite());
    }
}

#[test]
fn prediction_is_deterministic() {
    let cfg = tiny_config();
    let m = build_denoiser::<f32>(&cfg, 2).unwrap();
    let (x, cond) = batch(&cfg, 2, 4, &hole(8));
    let (x, cond) = (
        x.cast::<f32>(),
        Conditioning {
            masks: cond.masks,
            masked_image: cond.masked_image.cast(),
        },
    );
    let a = m.predict_eps(&x, &cond, &[3, 9]).unwrap();
    let b = m.predict_eps(&x, &cond, &[3, 9]).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn sra_toggle_is_inert_without_holes() {
    let cfg = DenoiserConfig::default();
    let mut m = build_denoiser::<f64>(&cfg, 5).unwrap();
    let (x, cond) = batch(&cfg, 1, 6, &Mask::empty(32, 32));
    let on = m.predict_eps(&x, &cond, &[40]).unwrap();
    m.set_sra(false);
    let off = m.predict_eps(&x, &cond, &[40]).unwrap();
    assert_eq!(on, off);
}

#[test]
fn sra_changes_hole_outputs() {
    let cfg = tiny_config();
    let mut m = build_denoiser::<f64>(&cfg, 5).unwrap();
    let (x, cond) = batch(&cfg, 1, 6, &hole(8));
    let on = m.predict_eps(&x, &cond, &[40]).unwrap();
    m.set_sra(false);
    let off = m.predict_eps(&x, &cond, &[40]).unwrap();
    assert!(on.max_abs_diff(&off).unwrap() > 0.0);
}

#[test]
fn full_mask_rejected() {
    let cfg = tiny_config();
    let m = build_denoiser::<f64>(&cfg, 5).unwrap();
    let (x, cond) = batch(&cfg, 1, 6, &Mask::full(8, 8));
    assert!(matches!(m.predict_eps(&x, &cond, &[4]), Err(Error::Degenerate(_))));
    let (x, cond) = batch(&cfg, 1, 6, &hole(8));
    assert!(m.predict_eps(&x, &cond, &[0]).is_err());
}

#[test]
fn single_image_wrapper_matches_batch() {
    let cfg = tiny_config();
    let m = build_denoiser::<f64>(&cfg, 8).unwrap();
    let (x, cond) = batch(&cfg, 1, 9, &hole(8));
    let single = predict_eps(
        &m,
        &x.unstack().unwrap()[0],
        &cond.masks[0],
        &cond.masked_image.unstack().unwrap()[0],
        12,
    )
    .unwrap();
    let batched = m.predict_eps(&x, &cond, &[12]).unwrap();
    assert_eq!(single.data(), batched.data());
}

#[test]
fn mean_prediction_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    for seed in 0..3 {
        let model = build_denoiser::<f64>(&cfg, seed).unwrap();
        let (x, cond) = batch(&cfg, 2, 100 + seed, &hole(8));
        let steps = [5, 60];
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let out = model.forward(&mut tape, &vars, xv, &cond, &steps).unwrap();
        let loss = tape.mean(out);
        tape.backward(loss).unwrap();
        for (i, var) in vars.iter().enumerate() {
            let analytic = tape.grad(*var).unwrap().clone();
            let fd = finite_difference_gradient(
                |p| {
                    let mut m = model.clone();
                    m.params_mut()[i] = p.clone();
                    Ok(m.predict_eps(&x, &cond, &steps)?.mean())
                },
                &model.params()[i],
                1e-5,
            )
            .unwrap();
            let err = relative_error(analytic.data(), fd.data(), 1e-6);
            assert!(err < 1e-4, "seed {seed} {}: {err:.3e}", model.param_infos()[i].name);
        }
    }
}

#[test]
fn random_mask_families_work_at_model_entry() {
    let cfg = DenoiserConfig::default();
    let m = build_denoiser::<f32>(&cfg, 1).unwrap();
    for (i, kind) in MaskKind::ALL.iter().enumerate() {
        let spec = MaskSpec::random(*kind, i as u64, 32, Default::default()).unwrap();
        let mask = random_mask(&spec, 32, 32).unwrap();
        let cond = Conditioning {
            masks: vec![mask],
            masked_image: Tensor::zeros(&[1, 3, 32, 32]),
        };
        let out = m.predict_eps(&Tensor::zeros(&[1, 3, 32, 32]), &cond, &[100]).unwrap();
        assert!(out.is_finite());
    }
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let cfg = tiny_config();
    let model = build_denoiser::<f32>(&cfg, 3).unwrap();
    let mut adam = AdamState::for_params(Default::default(), model.params());
    adam.step = 7;
    adam.m[0] = Tensor::full(adam.m[0].shape(), 0.25);
    let ck = Checkpoint::new(&model, 3, "abc".into(), serde_json::json!({"k": 1}), Some(adam));
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(bytes, ck.to_bytes().unwrap());
    let back = Checkpoint::from_bytes(&bytes, Some(&cfg)).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.model().unwrap(), model);
    assert_eq!(back.header.step, 7);

    let mut wrong_version = bytes.clone();
    wrong_version[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&wrong_version, None), Err(Error::Checkpoint(_))));
    let other = DenoiserConfig { sra: false, ..cfg };
    assert!(Checkpoint::from_bytes(&bytes, Some(&other)).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], None).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint", None).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/model.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path, Some(&cfg)).unwrap(), ck);
    assert!(load_checkpoint(&dir.path().join("missing"), None).is_err());
}
