//! Central finite differences against the analytic backward pass on tiny
//! models, for every parameter of every variant.

use ibcaps_core::model::{ArchConfig, LossWeights, ModelKind, ModelVariantFlags, TrainOptions};
use ibcaps_core::nn::Parameters;
use ibcaps_core::{ModelF64, TensorF64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;

fn flat(model: &ModelF64) -> (Vec<f64>, Vec<f64>) {
    let mut values = Vec::new();
    let mut grads = Vec::new();
    model.visit(&mut |p| {
        values.extend_from_slice(p.value.data());
        grads.extend_from_slice(p.grad.data());
    });
    (values, grads)
}

fn set(model: &mut ModelF64, index: usize, v: f64) {
    let mut offset = 0;
    model.visit_mut(&mut |p| {
        let n = p.value.len();
        if index >= offset && index < offset + n {
            p.value.data_mut()[index - offset] = v;
        }
        offset += n;
    });
}

fn batch(arch: &ArchConfig, n: usize, seed: u64) -> (TensorF64, TensorF64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = arch.image_side;
    let images: Vec<f64> = (0..n * arch.pixels()).map(|_| rng.gen()).collect();
    let mut labels = vec![0.0; n * arch.num_classes];
    for b in 0..n {
        labels[b * arch.num_classes + b % arch.num_classes] = 1.0;
    }
    (
        TensorF64::from_vec(&[n, arch.in_channels, side, side], images).unwrap(),
        TensorF64::from_vec(&[n, arch.num_classes], labels).unwrap(),
    )
}

fn check(kind: ModelKind, variant: ModelVariantFlags, seed: u64) {
    let arch = ArchConfig::tiny();
    let mut model =
        ModelF64::new(kind, &arch, variant, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    // Heavier auxiliary weights so their gradient paths are not drowned out.
    let opts = TrainOptions {
        weights: LossWeights {
            recon_weight: 0.5,
            kl_weight: 0.2,
        },
        ..TrainOptions::default()
    };
    let (x, y) = batch(&arch, 3, seed + 100);
    let eps_seed = seed + 7;
    model.zero_grad();
    model
        .train_step(&x, &y, &opts, &mut ChaCha8Rng::seed_from_u64(eps_seed))
        .unwrap();
    let (values, grads) = flat(&model);
    let loss_at = |m: &ModelF64| {
        m.loss(&x, &y, &opts, &mut ChaCha8Rng::seed_from_u64(eps_seed))
            .unwrap()
            .total
    };
    let mut worst = 0.0f64;
    for (i, (&v, &g)) in values.iter().zip(&grads).enumerate() {
        set(&mut model, i, v + H);
        let up = loss_at(&model);
        set(&mut model, i, v - H);
        let down = loss_at(&model);
        set(&mut model, i, v);
        let numeric = (up - down) / (2.0 * H);
        let scale = g.abs().max(numeric.abs());
        let err = (g - numeric).abs();
        // Gradients within round-off of zero are compared absolutely.
        if scale > 1e-6 {
            worst = worst.max(err / scale);
            assert!(
                err <= REL_TOL * scale,
                "{kind} {}: param {i} analytic {g:e} numeric {numeric:e}",
                variant.name()
            );
        } else {
            assert!(
                err < 1e-8,
                "{kind} {}: param {i} analytic {g:e} numeric {numeric:e}",
                variant.name()
            );
        }
    }
    assert!(worst <= REL_TOL);
}

#[test]
fn capsnet_gradients_match_finite_differences() {
    check(ModelKind::CapsNet, ModelVariantFlags::FULL, 1);
    check(ModelKind::CapsNet, ModelVariantFlags::FULL, 2);
}

#[test]
fn ibcapsnet_gradients_match_finite_differences_for_every_variant() {
    for (i, (_, flags)) in ModelVariantFlags::ABLATION.iter().enumerate() {
        check(ModelKind::IbCapsNet, *flags, 10 + i as u64);
    }
}

#[test]
fn mean_mode_eval_is_deterministic() {
    let arch = ArchConfig::tiny();
    let model = ModelF64::new(
        ModelKind::IbCapsNet,
        &arch,
        ModelVariantFlags::FULL,
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    let (x, _) = batch(&arch, 4, 9);
    let a = model.infer(&x).unwrap();
    let b = model.infer(&x).unwrap();
    assert_eq!(a.activities.values, b.activities.values);
    assert_eq!(a.recon, b.recon);
}
