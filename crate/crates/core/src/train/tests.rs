use super::*;
use crate::model::{forward_cached, init_model, ModelConfig, VitModel};
use crate::tensor::randn;

/// 17-token full-precision config used by the gradient checks.
fn fd_config() -> ModelConfig {
    ModelConfig {
        image: (16, 16, 1),
        patch: 4,
        dim: 32,
        depth: 2,
        heads: 4,
        mlp_ratio: 4.0,
        head_type: crate::model::HeadType::Cls,
        quantized: false,
    }
}

fn tiny_quantized() -> ModelConfig {
    ModelConfig {
        image: (8, 8, 1),
        patch: 4,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        head_type: crate::model::HeadType::Cls,
        quantized: true,
    }
}

fn set_param(model: &mut VitModel<f64>, name: &str, idx: usize, delta: f64) {
    for (n, t) in model.dense_params_mut() {
        if n == name {
            t.data_mut()[idx] += delta;
            return;
        }
    }
    panic!("parameter {name} not found");
}

/// Scalar loss combining both output heads: token MSE against a fixed
/// target plus a linear functional of the descriptor.
fn fd_loss(model: &VitModel<f64>, image: &DenseTensor<f64>, target: &DenseTensor<f64>, probe: &[f64]) -> f64 {
    let mut counter = OpsCounter::new();
    let cache = forward_cached(model, image, 0.0, &mut counter).unwrap();
    let mse = distill_loss(&cache.tokens, target).unwrap();
    let lin: f64 = cache
        .descriptor
        .values()
        .iter()
        .zip(probe)
        .map(|(d, p)| d * p)
        .sum();
    mse + lin
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = fd_config();
    let mut prng = Prng::new(60);
    let model: VitModel<f64> = init_model(&cfg, &mut prng).unwrap();
    let image: DenseTensor<f64> = randn(&mut prng, &[16, 16, 1]).unwrap();
    let target: DenseTensor<f64> = randn(&mut prng, &[17, 32]).unwrap();
    let probe: Vec<f64> = (0..32).map(|_| prng.normal()).collect();

    // Analytic gradients via backward().
    let mut counter = OpsCounter::new();
    let cache = forward_cached(&model, &image, 0.0, &mut counter).unwrap();
    let d_tokens = distill_loss_grad(&cache.tokens, &target).unwrap();
    let d_desc = DenseTensor::new(vec![32], probe.clone()).unwrap();
    let mut grads = Gradients::new();
    backward(
        &model,
        &cache,
        &OutputGrad { tokens: Some(d_tokens), descriptor: Some(d_desc) },
        &mut grads,
    )
    .unwrap();

    // Spot-check entries of every parameter class; h per the f64 contract.
    let h = 1e-4;
    let classes = [
        "norm.weight",
        "norm.bias",
        "blocks.0.norm1.weight",
        "blocks.1.qkv.weight",
        "blocks.0.attn_out.weight",
        "blocks.1.attn_out.bias",
        "blocks.0.mlp_up.weight",
        "blocks.1.mlp_down.weight",
        "patch_embed.weight",
        "patch_embed.bias",
        "cls_token",
        "pos_embed",
    ];
    let mut checked = 0usize;
    for name in classes {
        let g = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
        let numel = g.numel();
        for probe_idx in 0..4 {
            let idx = (probe_idx * 2654435761usize) % numel;
            let mut plus = model.clone();
            set_param(&mut plus, name, idx, h);
            let mut minus = model.clone();
            set_param(&mut minus, name, idx, -h);
            let fd = (fd_loss(&plus, &image, &target, &probe)
                - fd_loss(&minus, &image, &target, &probe))
                / (2.0 * h);
            let an = g.data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel <= 1e-3, "{name}[{idx}]: fd {fd} vs analytic {an} (rel {rel})");
            checked += 1;
        }
    }
    assert!(checked >= 40);
}

#[test]
fn ste_passes_effective_weight_gradient_to_latent() {
    let cfg = tiny_quantized();
    let mut prng = Prng::new(61);
    let latent_model: VitModel<f64> = init_model(&cfg, &mut prng).unwrap();
    let mut packed_model = latent_model.clone();
    packed_model.quantize_in_place().unwrap();

    let image: DenseTensor<f64> = randn(&mut prng, &[8, 8, 1]).unwrap();
    let target: DenseTensor<f64> = randn(&mut prng, &[5, 8]).unwrap();

    let grads_for = |m: &VitModel<f64>| {
        let mut counter = OpsCounter::new();
        let cache = forward_cached(m, &image, 0.5, &mut counter).unwrap();
        let d_tokens = distill_loss_grad(&cache.tokens, &target).unwrap();
        let mut grads = Gradients::new();
        backward(
            m,
            &cache,
            &OutputGrad { tokens: Some(d_tokens), descriptor: None },
            &mut grads,
        )
        .unwrap();
        grads
    };

    // The latent model re-quantizes to exactly the packed form, so the
    // forwards agree; STE means the latent's gradient IS the effective
    // weight's gradient, hence the two runs must match bit for bit.
    let g_latent = grads_for(&latent_model);
    let g_packed = grads_for(&packed_model);
    assert_eq!(g_latent.len(), g_packed.len());
    for (name, g) in g_latent.iter() {
        let other = g_packed.get(name).unwrap();
        assert_eq!(g.data(), other.data(), "{name}");
    }
}

#[test]
fn adam_zero_gradient_is_exact_noop() {
    let cfg = tiny_quantized();
    let mut model: VitModel<f32> = init_model(&cfg, &mut Prng::new(62)).unwrap();
    let before = model.clone();

    let mut grads = Gradients::new();
    for (name, t) in model.dense_params() {
        grads
            .accumulate(&name, DenseTensor::zeros(t.shape().to_vec()).unwrap())
            .unwrap();
    }
    let mut adam = Adam::new(1e-3, AdamParams::default());
    let trainable = FreezeMask::all(&model);
    adam.step(&mut model, &grads, &trainable).unwrap();
    assert_eq!(model, before);
}

#[test]
fn distill_identical_twin_keeps_zero_loss() {
    let cfg = fd_config();
    let mut prng = Prng::new(63);
    let teacher: VitModel<f64> = init_model(&cfg, &mut prng).unwrap();
    let mut student = teacher.clone();
    let images: Vec<DenseTensor<f64>> = (0..3)
        .map(|_| randn(&mut prng, &[16, 16, 1]).unwrap())
        .collect();
    let cfg = TrainConfig { batch_size: 2, ..TrainConfig::distill_default(5, 9) };
    let records = train_distill(&mut student, &teacher, &images, &cfg).unwrap();
    assert!(records.iter().all(|r| r.loss == 0.0), "{records:?}");
    assert_eq!(student, teacher);
}

#[test]
fn distill_is_deterministic_per_seed() {
    let scfg = tiny_quantized();
    let tcfg = ModelConfig { quantized: false, ..scfg.clone() };
    let mut prng = Prng::new(64);
    let teacher: VitModel<f32> = init_model(&tcfg, &mut prng).unwrap();
    let student0: VitModel<f32> = init_model(&scfg, &mut prng).unwrap();
    let images: Vec<DenseTensor<f32>> = (0..4)
        .map(|_| randn(&mut prng, &[8, 8, 1]).unwrap())
        .collect();
    let cfg = TrainConfig { batch_size: 2, ..TrainConfig::distill_default(6, 77) };

    let mut s1 = student0.clone();
    let r1 = train_distill(&mut s1, &teacher, &images, &cfg).unwrap();
    let mut s2 = student0.clone();
    let r2 = train_distill(&mut s2, &teacher, &images, &cfg).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(s1, s2);
}

#[test]
fn distill_reduces_loss_on_a_small_run() {
    let scfg = fd_config();
    let scfg = ModelConfig { quantized: true, ..scfg };
    let tcfg = ModelConfig { quantized: false, ..scfg.clone() };
    let mut prng = Prng::new(65);
    let teacher: VitModel<f32> = init_model(&tcfg, &mut prng).unwrap();
    let mut student: VitModel<f32> = init_model(&scfg, &mut prng).unwrap();
    let images: Vec<DenseTensor<f32>> = (0..8)
        .map(|_| randn(&mut prng, &[16, 16, 1]).unwrap())
        .collect();
    let cfg = TrainConfig { batch_size: 2, ..TrainConfig::distill_default(60, 5) };
    let records = train_distill(&mut student, &teacher, &images, &cfg).unwrap();
    let first: f64 = records[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    let last: f64 = records[50..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(
        last < 0.9 * first,
        "no learning progress: first {first}, last {last}"
    );
}

#[test]
fn finetune_only_updates_trainable_tensors() {
    let cfg = ModelConfig {
        image: (16, 16, 1),
        patch: 4,
        dim: 16,
        depth: 3,
        heads: 2,
        mlp_ratio: 2.0,
        head_type: crate::model::HeadType::Cls,
        quantized: true,
    };
    let mut prng = Prng::new(66);
    let mut model: VitModel<f32> = init_model(&cfg, &mut prng).unwrap();
    model.quantize_in_place().unwrap();
    model.ensure_latents().unwrap();

    let places: Vec<Vec<DenseTensor<f32>>> = (0..3)
        .map(|_| {
            (0..2)
                .map(|_| randn(&mut prng, &[16, 16, 1]).unwrap())
                .collect()
        })
        .collect();

    let freeze = FreezeMask::head_and_last_two(&model);
    let snapshot: Vec<(String, DenseTensor<f32>)> = model
        .dense_params()
        .into_iter()
        .filter(|(n, _)| !freeze.contains(n))
        .map(|(n, t)| (n, t.clone()))
        .collect();

    let fcfg = FinetuneConfig::new(
        TrainConfig { batch_size: 4, ..TrainConfig::distill_default(5, 3) },
        0.0,
    );
    train_finetune(&mut model, &places, &fcfg, &freeze).unwrap();

    let after: std::collections::BTreeMap<String, DenseTensor<f32>> =
        model.dense_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (name, before) in snapshot {
        let now = &after[&name];
        assert_eq!(before.data(), now.data(), "{name} changed despite freeze");
    }
}

#[test]
fn finetune_loss_decreases() {
    let cfg = ModelConfig {
        image: (16, 16, 1),
        patch: 4,
        dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        head_type: crate::model::HeadType::Cls,
        quantized: true,
    };
    let mut prng = Prng::new(67);
    let mut model: VitModel<f32> = init_model(&cfg, &mut prng).unwrap();
    let places: Vec<Vec<DenseTensor<f32>>> = (0..4)
        .map(|_| {
            // Two mildly perturbed views per place.
            let base: DenseTensor<f32> = randn(&mut prng, &[16, 16, 1]).unwrap();
            let noise: DenseTensor<f32> = randn(&mut prng, &[16, 16, 1]).unwrap();
            vec![base.clone(), base.add(&noise.scale(0.05)).unwrap()]
        })
        .collect();
    let freeze = FreezeMask::all(&model);
    let fcfg = FinetuneConfig::new(
        TrainConfig { batch_size: 4, ..TrainConfig::distill_default(30, 8) },
        0.0,
    );
    let records = train_finetune(&mut model, &places, &fcfg, &freeze).unwrap();
    let first = records[0].loss;
    let last = records.last().unwrap().loss;
    assert!(last < first, "loss went {first} -> {last}");
}

#[test]
fn finetune_rejects_empty_trainable_set() {
    let cfg = tiny_quantized();
    let mut model: VitModel<f32> = init_model(&cfg, &mut Prng::new(68)).unwrap();
    let places: Vec<Vec<DenseTensor<f32>>> = (0..2)
        .map(|_| {
            (0..2)
                .map(|i| {
                    randn(&mut Prng::new(100 + i), &[8, 8, 1]).unwrap()
                })
                .collect()
        })
        .collect();
    let freeze = FreezeMask::from_names(Vec::<String>::new());
    let fcfg = FinetuneConfig::new(
        TrainConfig { batch_size: 4, ..TrainConfig::distill_default(2, 1) },
        0.0,
    );
    assert!(matches!(
        train_finetune(&mut model, &places, &fcfg, &freeze),
        Err(Error::Usage(_))
    ));
}

#[test]
fn default_freeze_mask_is_head_plus_last_two_blocks() {
    let cfg = ModelConfig::desk_default(true);
    let model: VitModel<f32> = init_model(&cfg, &mut Prng::new(69)).unwrap();
    let freeze = FreezeMask::head_and_last_two(&model);
    let mut expected: BTreeSet<String> =
        ["norm.weight".to_string(), "norm.bias".to_string()].into();
    for i in [2usize, 3] {
        for part in [
            "norm1.weight",
            "norm1.bias",
            "qkv.weight",
            "qkv.bias",
            "attn_out.weight",
            "attn_out.bias",
            "norm2.weight",
            "norm2.bias",
            "mlp_up.weight",
            "mlp_up.bias",
            "mlp_down.weight",
            "mlp_down.bias",
        ] {
            expected.insert(format!("blocks.{i}.{part}"));
        }
    }
    assert_eq!(freeze.trainable(), &expected);
}

#[test]
fn misaligned_teacher_is_rejected() {
    let scfg = tiny_quantized();
    let mut tcfg = ModelConfig { quantized: false, ..scfg.clone() };
    tcfg.dim = 16;
    tcfg.heads = 2;
    let mut student: VitModel<f32> = init_model(&scfg, &mut Prng::new(70)).unwrap();
    let teacher: VitModel<f32> = init_model(&tcfg, &mut Prng::new(70)).unwrap();
    let images = vec![randn(&mut Prng::new(71), &[8, 8, 1]).unwrap()];
    let cfg = TrainConfig::distill_default(2, 0);
    assert!(train_distill(&mut student, &teacher, &images, &cfg).is_err());
}
