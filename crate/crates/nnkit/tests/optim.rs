use nnkit::{adam_update, Adam, AdamConfig, Checkpoint, ParamKind, ParamSet, Tensor};

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut ps = ParamSet::<f32>::new();
    let id = ps.add("w", ParamKind::Weight, Tensor::full([4], 0.3));
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..5 {
        adam.step(&mut ps).unwrap();
    }
    assert!(ps.value(id).data().iter().all(|&v| v == 0.3));
}

#[test]
fn constant_gradient_moves_against_its_sign() {
    let mut ps = ParamSet::<f64>::new();
    let id = ps.add("w", ParamKind::Weight, Tensor::new([2], vec![0.0, 0.0]).unwrap());
    ps.get_mut(id).grad.data_mut().copy_from_slice(&[0.5, -3.0]);
    let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() });
    for _ in 0..50 {
        adam.step(&mut ps).unwrap();
    }
    let v = ps.value(id).data();
    assert!(v[0] < 0.0 && v[1] > 0.0);
}

#[test]
fn three_scalar_steps_follow_the_reference_recurrence() {
    let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let grads = [0.5f64, -0.2, 0.1];
    // hand-rolled recurrence
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut expected = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        expected.push(x);
    }
    let (mut val, mut mm, mut vv) = ([1.0f64], [0.0f64], [0.0f64]);
    for (i, g) in grads.iter().enumerate() {
        adam_update(&mut val, &[*g], &mut mm, &mut vv, &cfg, i as u64 + 1);
        assert!((val[0] - expected[i]).abs() < 1e-14);
    }
    // first step of Adam is lr * sign(g)
    assert!((expected[0] - 0.9).abs() < 1e-6);
}

#[test]
fn adam_is_deterministic_and_rejects_non_finite_gradients() {
    let run = || {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", ParamKind::Weight, Tensor::full([3], 1.0));
        let mut adam = Adam::new(AdamConfig::default());
        for k in 0..10 {
            ps.get_mut(id).grad.data_mut().copy_from_slice(&[k as f32, -0.5, 0.25]);
            adam.step(&mut ps).unwrap();
        }
        ps.value(id).clone()
    };
    assert_eq!(run(), run());

    let mut ps = ParamSet::<f32>::new();
    let id = ps.add("w", ParamKind::Weight, Tensor::full([2], 1.0));
    ps.get_mut(id).grad.data_mut()[1] = f32::NAN;
    let mut adam = Adam::new(AdamConfig::default());
    assert!(adam.step(&mut ps).is_err());
    assert!(ps.value(id).data().iter().all(|&v| v == 1.0));
}

#[test]
fn checkpoint_roundtrip_and_bad_magic() {
    let mut ps = ParamSet::<f32>::new();
    ps.add("a.weight", ParamKind::Weight, Tensor::from_fn([2, 3], |i| i as f32 * 0.5));
    ps.add("a.bias", ParamKind::Bias, Tensor::full([3], -1.25));
    let ck = Checkpoint::from_params("{\"k\":1}".into(), &ps);
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(&buf[..]).unwrap();
    assert_eq!(back, ck);

    let mut fresh = ParamSet::<f32>::new();
    fresh.add("a.weight", ParamKind::Weight, Tensor::zeros([2, 3]));
    fresh.add("a.bias", ParamKind::Bias, Tensor::zeros([3]));
    back.load_into(&mut fresh).unwrap();
    assert_eq!(fresh.value(fresh.find("a.bias").unwrap()).data(), &[-1.25; 3]);

    buf[0] = b'X';
    assert!(Checkpoint::read_from(&buf[..]).is_err());
}
