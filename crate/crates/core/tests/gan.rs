mod common;

use common::rel_err;
use dualrefine::camera::CameraPose;
use dualrefine::gan::{gan_losses, r1_penalty, Critic, DiscConfig, DiscTrainer, Discriminator, LinearProbe};
use dualrefine::image::Image;
use dualrefine::rng::Stream;
use proptest::prelude::*;

fn small_disc(resolution: usize, seed: u64) -> Discriminator {
    Discriminator::new(
        DiscConfig {
            resolution,
            base_channels: 4,
            n_blocks: 2,
            pose_conditioning: true,
            r1_gamma: 1.0,
            r1_interval: 4,
        },
        seed,
    )
    .unwrap()
}

fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = Stream::new(seed, 9);
    Image::from_vec(size, size, 3, (0..size * size * 3).map(|_| rng.uniform()).collect()).unwrap()
}

fn pose() -> CameraPose {
    CameraPose::new(1.1, 0.3, 3.2, 0.7)
}

#[test]
fn input_gradient_matches_central_differences_at_16px() {
    let disc = small_disc(16, 3);
    let img = random_image(16, 1);
    let (_, grad) = disc.logit_input_grad(&img, &pose()).unwrap();
    let h = 1e-4;
    let fd: Vec<f64> = (0..img.data.len())
        .map(|i| {
            let mut plus = img.clone();
            plus.data[i] += h;
            let mut minus = img.clone();
            minus.data[i] -= h;
            (disc.forward(&plus, &pose()).unwrap() - disc.forward(&minus, &pose()).unwrap()) / (2.0 * h)
        })
        .collect();
    let err = rel_err(&grad.data, &fd);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn forward_is_deterministic_and_checks_resolution() {
    let disc = small_disc(16, 2);
    let img = random_image(16, 4);
    assert_eq!(
        disc.forward(&img, &pose()).unwrap(),
        disc.forward(&img, &pose()).unwrap()
    );
    assert!(disc.forward(&random_image(8, 1), &pose()).is_err());
    assert_eq!(small_disc(16, 2), disc);
}

#[test]
fn zero_logits_give_log_two_losses() {
    let l = gan_losses(&[0.0; 3], &[0.0; 5]).unwrap();
    assert!((l.d_loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    assert!((l.g_loss - std::f64::consts::LN_2).abs() < 1e-9);
    assert!(gan_losses(&[], &[0.0]).is_err());
    assert!(gan_losses(&[f64::NAN], &[0.0]).is_err());
}

#[test]
fn linear_probe_r1_has_closed_form() {
    let (h, w) = (8usize, 6usize);
    let batch: Vec<(Image, CameraPose)> = (0..3)
        .map(|s| {
            let mut rng = Stream::new(s, 2);
            (
                Image::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.uniform()).collect()).unwrap(),
                pose(),
            )
        })
        .collect();
    for (a, gamma) in [(0.3, 1.0), (-2.0, 10.0), (1e-3, 0.5)] {
        let r1 = r1_penalty(&LinearProbe { a }, &batch, gamma).unwrap();
        let expected = 0.5 * gamma * a * a * (3 * h * w) as f64;
        assert!(((r1 - expected) / expected).abs() < 1e-6, "{r1} vs {expected}");
    }
    assert_eq!(r1_penalty(&LinearProbe { a: 3.0 }, &batch, 0.0).unwrap(), 0.0);
    assert!(r1_penalty(&LinearProbe { a: 1.0 }, &[], 1.0).is_err());
}

#[test]
fn r1_is_linear_in_gamma_for_a_network() {
    let disc = small_disc(16, 5);
    let batch: Vec<(Image, CameraPose)> = (0..2).map(|s| (random_image(16, s), pose())).collect();
    let base = r1_penalty(&disc, &batch, 1.0).unwrap();
    assert!(base > 0.0);
    let scaled = r1_penalty(&disc, &batch, 3.5).unwrap();
    assert!((scaled - 3.5 * base).abs() <= 1e-12 * scaled);
}

#[test]
fn discriminator_learns_to_separate_two_colors() {
    let disc = small_disc(16, 7);
    let mut trainer = DiscTrainer::new(disc, 5e-3);
    let real: Vec<(Image, CameraPose)> = (0..4).map(|_| (Image::filled(16, 16, 3, 0.8), pose())).collect();
    let fake: Vec<(Image, CameraPose)> = (0..4).map(|_| (Image::filled(16, 16, 3, 0.2), pose())).collect();
    for _ in 0..100 {
        trainer.step(&real, &fake).unwrap();
    }
    assert_eq!(trainer.evaluate(&real, &fake).unwrap(), 1.0);
    assert_eq!(trainer.steps, 100);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn label_swap_exchanges_terms(
        real in proptest::collection::vec(-8.0f64..8.0, 1..6),
        fake in proptest::collection::vec(-8.0f64..8.0, 1..6),
    ) {
        let a = gan_losses(&real, &fake).unwrap();
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let b = gan_losses(&neg(&fake), &neg(&real)).unwrap();
        prop_assert!((a.d_loss - b.d_loss).abs() < 1e-12);
        prop_assert!(a.d_loss >= 0.0 && a.g_loss >= 0.0);
    }

    #[test]
    fn r1_scales_quadratically_with_input_gradient(a in 0.01f64..3.0, k in 0.1f64..5.0, gamma in 0.0f64..10.0) {
        let batch = vec![(Image::filled(4, 4, 3, 0.5), pose())];
        let r = r1_penalty(&LinearProbe { a }, &batch, gamma).unwrap();
        let rk = r1_penalty(&LinearProbe { a: k * a }, &batch, gamma).unwrap();
        prop_assert!((rk - k * k * r).abs() <= 1e-9 * rk.max(1e-12));
    }
}
