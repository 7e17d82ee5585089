use super::*;
use crate::sim::ImageTensor;

fn small_arch() -> Arch {
    Arch::perception(8, 8, 3, 8, 1.5)
}

fn zero_biases<T: Real>(w: &mut ModelWeights<T>) {
    for t in &mut w.tensors {
        if t.name.ends_with(".bias") {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

fn random_image(arch: &Arch, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, 99, 0);
    (0..arch.image_len()).map(|_| r.random_range(0.0..1.0)).collect()
}

#[test]
fn zero_image_gives_zero_latent() {
    let arch = Arch::perception(64, 64, 3, 8, 1.5);
    let w = ModelWeights::<f32>::init(&arch, 3);
    let latent = w.encode(&ImageTensor::zeros(64, 64, 3)).unwrap();
    assert!(latent.iter().all(|v| *v == 0.0));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let arch = Arch::perception(64, 64, 3, 8, 1.5);
    let w = ModelWeights::<f32>::init(&arch, 5);
    let w2 = ModelWeights::<f32>::init(&arch, 5);
    assert_eq!(w, w2);
    let img = ImageTensor::from_data(64, 64, 3, random_image(&arch, 1).iter().map(|v| *v as f32).collect()).unwrap();
    let a = w.encode(&img).unwrap();
    let b = w2.encode(&img).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn zero_latent_decodes_to_black() {
    let arch = Arch::perception(64, 64, 3, 8, 1.5);
    let w = ModelWeights::<f32>::init(&arch, 3);
    let img = w.decode(&[0.0; LATENT]).unwrap();
    assert!(img.data.iter().all(|v| *v == 0.0));
}

#[test]
fn reconstruction_matches_input_shape() {
    for (h, wd, c) in [(64, 64, 3), (8, 8, 3), (32, 48, 1), (20, 12, 3), (5, 7, 1)] {
        let arch = Arch::perception(h, wd, c, 8, 1.5);
        let w = ModelWeights::<f32>::init(&arch, 1);
        let img = w.decode(&[0.3; LATENT]).unwrap();
        assert_eq!(img.shape(), (h, wd, c));
        assert_eq!(arch.enc_sizes()[0], (h, wd));
    }
    assert_eq!(Arch::perception(64, 64, 3, 8, 1.5).enc_sizes()[ENCODER_LAYERS], (4, 4));
}

#[test]
fn head_is_bounded_and_zero_at_zero() {
    let arch = small_arch();
    let mut w = ModelWeights::<f32>::init(&arch, 2);
    zero_biases(&mut w);
    assert!(w.head(&[0.0; LATENT]).unwrap().as_slice().iter().all(|v| *v == 0.0));
    let mut r = rng::stream(4, 99, 1);
    for _ in 0..200 {
        let latent: Vec<f32> = (0..LATENT).map(|_| r.random_range(-50.0..50.0)).collect();
        assert!(w.head(&latent).unwrap().as_slice().iter().all(|v| v.abs() <= 1.5));
    }
    // Saturation: a huge output bias drives tanh to ±1.
    let out = w.tensors.len() - 1;
    w.tensors[out].data[0] = 100.0;
    w.tensors[out].data[1] = -100.0;
    let f = w.head(&[0.0; LATENT]).unwrap();
    assert_eq!((f.as_slice()[0], f.as_slice()[1]), (1.5, -1.5));
}

#[test]
fn e2e_forward_contract() {
    let arch = Arch::end_to_end(8, 8, 3, 7, 1.5);
    let mut w = ModelWeights::<f32>::init(&arch, 8);
    zero_biases(&mut w);
    let zero = ImageTensor::zeros(8, 8, 3);
    assert!(w.e2e_forward(&zero, &DVector::zeros(7)).unwrap().iter().all(|v| *v == 0.0));
    let w = ModelWeights::<f32>::init(&arch, 8);
    let img = ImageTensor::from_data(8, 8, 3, random_image(&arch, 2).iter().map(|v| *v as f32).collect()).unwrap();
    let q = DVector::from_vec(vec![0.1, -0.4, 0.2, -2.0, 0.3, 1.8, 0.7]);
    let a = w.e2e_forward(&img, &q).unwrap();
    assert!(a.iter().all(|v| v.abs() <= 1.5));
    let mut qp = q.clone();
    qp.swap_rows(0, 3);
    assert_ne!(a, w.e2e_forward(&img, &qp).unwrap());
    assert!(matches!(w.e2e_forward(&img, &DVector::zeros(6)), Err(Error::ShapeMismatch(_))));
}

#[test]
fn wrong_image_size_is_rejected() {
    let w = ModelWeights::<f32>::init(&small_arch(), 1);
    assert!(matches!(w.encode(&ImageTensor::zeros(8, 9, 3)), Err(Error::ShapeMismatch(_))));
    assert!(matches!(w.decode(&[0.0; 3]), Err(Error::ShapeMismatch(_))));
}

#[test]
fn backward_without_recorded_branch_fails() {
    let arch = small_arch();
    let w = ModelWeights::<f64>::init(&arch, 1);
    let g = w.forward(&random_image(&arch, 3), None, true, false).unwrap();
    let mut grads = w.zeros_like();
    let d = vec![1.0; arch.image_len()];
    assert!(matches!(w.backward(&g, None, Some(&d), &mut grads), Err(Error::GraphNotRecorded("decoder"))));
}

/// `L = <a, head(ε(x))> + <b, δ(ε(x))>`; central differences on every
/// tensor, skipping perturbations that flip a ReLU.
fn check_gradients(arch: &Arch, q: Option<Vec<f64>>) {
    let w = ModelWeights::<f64>::init(arch, 11);
    let mut w = w;
    // Biases of random sign and magnitude in [0.2, 0.5] keep every unit
    // clearly on or off, away from the ReLU kinks.
    let mut r = rng::stream(12, 99, 0);
    for t in &mut w.tensors {
        if t.name.ends_with(".bias") {
            for v in &mut t.data {
                let m: f64 = r.random_range(0.2..0.5);
                *v = if r.random_bool(0.5) { m } else { -m };
            }
        }
    }
    let x = random_image(arch, 4);
    let a: Vec<f64> = (0..arch.outputs()).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..arch.image_len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = |w: &ModelWeights<f64>| -> (f64, u64) {
        let g = w.forward(&x, q.as_deref(), true, true).unwrap();
        let h = &g.head.as_ref().unwrap().output;
        let d = g.decoder.as_ref().unwrap().raw_output();
        let l = h.iter().zip(&a).map(|(u, v)| u * v).sum::<f64>() + d.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>();
        (l, g.activation_signature())
    };
    let g = w.forward(&x, q.as_deref(), true, true).unwrap();
    let mut grads = w.zeros_like();
    w.backward(&g, Some(&a), Some(&b), &mut grads).unwrap();
    let eps = 1e-3;
    let mut checked = 0;
    for ti in 0..w.tensors.len() {
        let n = w.tensors[ti].data.len();
        let mut done = 0;
        for _ in 0..20 {
            if done == 3 {
                break;
            }
            let i = r.random_range(0..n);
            let mut wp = w.clone();
            wp.tensors[ti].data[i] += eps;
            let mut wm = w.clone();
            wm.tensors[ti].data[i] -= eps;
            let ((lp, sp), (lm, sm)) = (loss(&wp), loss(&wm));
            if sp != sm || sp != g.activation_signature() {
                continue;
            }
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.tensors[ti].data[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-3, "{}[{i}]: fd {fd} analytic {an}", w.tensors[ti].name);
            done += 1;
            checked += 1;
        }
        assert!(done > 0, "no kink-free sample for {}", w.tensors[ti].name);
    }
    assert!(checked >= w.tensors.len());
}

#[test]
fn gradients_match_finite_differences_perception() {
    check_gradients(&small_arch(), None);
}

#[test]
fn gradients_match_finite_differences_end_to_end() {
    check_gradients(&Arch::end_to_end(8, 8, 3, 7, 1.5), Some(vec![0.1, -0.4, 0.2, -2.0, 0.3, 1.8, 0.7]));
}

#[test]
fn adam_zero_gradient_keeps_weights() {
    let mut w = ModelWeights::<f64>::init(&small_arch(), 1);
    let before = w.clone();
    let mut opt = Adam::new(&w, AdamConfig::default());
    let zero = w.zeros_like();
    opt.step(&mut w, &zero);
    assert_eq!(w, before);
}

#[test]
fn adam_first_step_and_fixed_point() {
    let mut w = ModelWeights::<f64>::init(&small_arch(), 1);
    let mut g = w.zeros_like();
    g.tensors[0].data[0] = 0.37;
    g.tensors[0].data[1] = -2.5;
    let cfg = AdamConfig::with_lr(1e-3);
    let mut opt = Adam::new(&w, cfg);
    let (a0, b0) = (w.tensors[0].data[0], w.tensors[0].data[1]);
    opt.step(&mut w, &g);
    assert!((w.tensors[0].data[0] - (a0 - 1e-3)).abs() < 1e-9);
    assert!((w.tensors[0].data[1] - (b0 + 1e-3)).abs() < 1e-9);
    let mut prev = w.tensors[0].data[0];
    let mut last = 0.0;
    for _ in 0..2000 {
        opt.step(&mut w, &g);
        last = prev - w.tensors[0].data[0];
        prev = w.tensors[0].data[0];
    }
    assert!((last - 1e-3).abs() < 1e-8);
}

#[test]
fn augment_contract() {
    let img = ImageTensor::filled(16, 16, 3, 0.5);
    assert_eq!(augment(&img, &AugmentConfig::NONE, 3), img);
    let shift = AugmentConfig {
        brightness: [0.1, 0.1],
        ..AugmentConfig::NONE
    };
    assert!(augment(&img, &shift, 3).data.iter().all(|v| (*v - 0.6).abs() < 1e-6));
    let noisy = AugmentConfig {
        noise_std: 0.05,
        ..AugmentConfig::NONE
    };
    let big = ImageTensor::filled(100, 100, 1, 0.5);
    let out = augment(&big, &noisy, 9);
    let n = out.data.len() as f64;
    let mean = out.data.iter().map(|v| *v as f64 - 0.5).sum::<f64>() / n;
    let var = out.data.iter().map(|v| (*v as f64 - 0.5 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var.sqrt() - 0.05).abs() < 0.005);
    assert_eq!(augment(&big, &noisy, 9), out);
    assert_ne!(augment(&big, &noisy, 10), out);
}

#[test]
fn weights_round_trip_and_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.nfvw");
    let arch = Arch::perception(64, 64, 3, 8, 1.5);
    let w = ModelWeights::<f32>::init(&arch, 9);
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path, Some(&arch)).unwrap();
    for (a, b) in w.tensors.iter().zip(&back.tensors) {
        assert_eq!(
            a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    let other = Arch::perception(32, 32, 3, 8, 1.5);
    assert!(matches!(load_weights(&path, Some(&other)), Err(Error::FingerprintMismatch { .. })));
    let e2e = Arch::end_to_end(64, 64, 3, 7, 1.5);
    assert_ne!(e2e.fingerprint(), arch.fingerprint());
    assert_eq!(Arch::parse(&e2e.describe()).unwrap(), e2e);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_weights(&path, None), Err(Error::Format(_))));
}

