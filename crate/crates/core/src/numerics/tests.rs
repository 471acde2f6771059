use std::f64::consts::PI;
use std::rc::Rc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn linear_identity_and_hand_sum() {
    let mut t = Tape::new();
    let x = t.constant(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
    let w = t.constant(&Tensor::identity(2)).unwrap();
    let b = t.constant(&Tensor::zeros(&[2])).unwrap();
    let y = t.linear(x, w, b).unwrap();
    assert_eq!(t.value(y), &[1.0, 0.0]);

    let x = t.constant(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
    let w = t.constant(&Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap()).unwrap();
    let b = t.constant(&Tensor::vector(vec![3.0])).unwrap();
    let y = t.linear(x, w, b).unwrap();
    assert_eq!(t.value(y), &[6.0]);
}

#[test]
fn linear_shape_mismatch_is_an_error() {
    let mut t = Tape::new();
    let x = t.constant(&Tensor::zeros(&[2, 3])).unwrap();
    let w = t.constant(&Tensor::zeros(&[4, 2])).unwrap();
    let b = t.constant(&Tensor::zeros(&[2])).unwrap();
    assert!(matches!(t.linear(x, w, b), Err(Error::Shape { .. })));
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut r = rng(3);
    let point = vec![
        Tensor::normal(&[3, 4], 1.0, &mut r),
        Tensor::normal(&[4, 2], 1.0, &mut r),
        Tensor::normal(&[2], 1.0, &mut r),
    ];
    let err = grad_check(
        |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            let s = t.sin(y, 1.0)?;
            t.sum(s)
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-5, "rel err {err}");
}

#[test]
fn sine_values_and_gradient() {
    let mut t = Tape::new();
    let x = t.constant(&Tensor::vector(vec![0.0, PI / 60.0])).unwrap();
    let y = t.sin(x, 30.0).unwrap();
    assert_eq!(t.value(y)[0], 0.0);
    assert!((t.value(y)[1] - 1.0).abs() < 1e-15);

    for seed in 0..10 {
        let point = vec![Tensor::uniform(&[2, 3], 1.0, &mut rng(seed))];
        let err = grad_check(
            |t, v| {
                let y = t.sin(v[0], 30.0)?;
                t.sum(y)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "seed {seed}: rel err {err}");
    }
}

#[test]
fn film_values_and_gradient() {
    let mut r = rng(5);
    let h = Tensor::normal(&[4, 3], 1.0, &mut r);
    let mut t = Tape::new();
    let hv = t.constant(&h).unwrap();
    let one = t.constant(&Tensor::filled(&[3], 1.0)).unwrap();
    let zero = t.constant(&Tensor::zeros(&[3])).unwrap();
    let y = t.film(hv, one, zero).unwrap();
    assert_eq!(t.value(y), h.data());

    let h1 = t.constant(&Tensor::from_rows(&[vec![2.0]]).unwrap()).unwrap();
    let g1 = t.constant(&Tensor::vector(vec![3.0])).unwrap();
    let b1 = t.constant(&Tensor::vector(vec![1.0])).unwrap();
    let y = t.film(h1, g1, b1).unwrap();
    assert_eq!(t.value(y), &[7.0]);

    // two modulation groups over four rows
    let point = vec![
        Tensor::normal(&[4, 3], 1.0, &mut r),
        Tensor::normal(&[2, 3], 1.0, &mut r),
        Tensor::normal(&[2, 3], 1.0, &mut r),
    ];
    let err = grad_check(
        |t, v| {
            let y = t.film(v[0], v[1], v[2])?;
            let y = t.square(y)?;
            t.sum(y)
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-5, "rel err {err}");
}

#[test]
fn film_rejects_mismatched_features() {
    let mut t = Tape::new();
    let h = t.constant(&Tensor::zeros(&[2, 3])).unwrap();
    let g = t.constant(&Tensor::zeros(&[1, 2])).unwrap();
    assert!(t.film(h, g, g).is_err());
}

/// Every differentiable op, checked on ten random points.
#[test]
fn every_op_passes_grad_check() {
    type Build = fn(&mut Tape, &[Var]) -> crate::Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("add_row_bias", vec![vec![3, 2], vec![2]], |t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            let y = t.square(y)?;
            t.sum(y)
        }),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(a, s)?;
            t.sum(m)
        }),
        ("scale_add_scalar", vec![vec![2, 2]], |t, v| {
            let a = t.scale(v[0], -1.7)?;
            let a = t.add_scalar(a, 0.3)?;
            let a = t.square(a)?;
            t.sum(a)
        }),
        ("transpose_matmul", vec![vec![3, 2], vec![3, 4]], |t, v| {
            let at = t.transpose(v[0])?;
            let y = t.matmul(at, v[1])?;
            let y = t.sin(y, 1.0)?;
            t.sum(y)
        }),
        ("mul_col", vec![vec![3, 2], vec![3, 1]], |t, v| {
            let y = t.mul_col(v[0], v[1])?;
            let y = t.sin(y, 1.0)?;
            t.sum(y)
        }),
        ("relu", vec![vec![3, 3]], |t, v| {
            let y = t.relu(v[0])?;
            let y = t.square(y)?;
            t.sum(y)
        }),
        ("leaky_relu", vec![vec![3, 3]], |t, v| {
            let y = t.leaky_relu(v[0], 0.2)?;
            let y = t.square(y)?;
            t.sum(y)
        }),
        ("sigmoid", vec![vec![2, 3]], |t, v| {
            let y = t.sigmoid(v[0])?;
            let y = t.square(y)?;
            t.sum(y)
        }),
        ("softplus", vec![vec![2, 3]], |t, v| {
            let y = t.softplus(v[0])?;
            let y = t.square(y)?;
            t.sum(y)
        }),
        ("exp", vec![vec![2, 3]], |t, v| {
            let y = t.exp(v[0])?;
            t.mean(y)
        }),
        ("abs", vec![vec![2, 3]], |t, v| {
            let y = t.abs(v[0])?;
            let y = t.square(y)?;
            t.sum(y)
        }),
        ("row_sum_group_rows", vec![vec![4, 3]], |t, v| {
            let r = t.row_sum(v[0])?;
            let g = t.group_rows_sum(r, 2)?;
            let g = t.square(g)?;
            t.sum(g)
        }),
        ("excl_cumsum", vec![vec![2, 4]], |t, v| {
            let c = t.excl_cumsum(v[0])?;
            let c = t.sin(c, 1.0)?;
            t.sum(c)
        }),
        ("reshape_concat_slice", vec![vec![2, 3], vec![2, 1]], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            let r = t.reshape(c, 4, 2)?;
            let s = t.slice_cols(r, 1, 1)?;
            let s = t.square(s)?;
            t.sum(s)
        }),
        ("gather_scatter", vec![vec![2, 3]], |t, v| {
            let idx: Rc<[usize]> = vec![5, 0, PAD, 2, 2, 1].into();
            let g = t.gather(v[0], idx.clone(), 3, 2)?;
            let g = t.sin(g, 1.0)?;
            let s = t.scatter_add(g, idx, 2, 3)?;
            let s = t.square(s)?;
            t.sum(s)
        }),
        ("sum_canonical", vec![vec![2, 2], vec![2, 2], vec![2, 2]], |t, v| {
            let s = t.sum_canonical(v)?;
            let s = t.square(s)?;
            t.sum(s)
        }),
        ("comp_color", vec![vec![3, 1], vec![3, 1], vec![3, 3], vec![3, 3], vec![3, 1]], |t, v| {
            let s0 = t.softplus(v[0])?;
            let s1 = t.softplus(v[1])?;
            let tr = t.sigmoid(v[4])?;
            let c = t.comp_color(&[s0, s1], &[v[2], v[3]], tr, 1e-8, [0.0; 3])?;
            let c = t.sin(c, 1.0)?;
            t.sum(c)
        }),
    ];
    for (name, shapes, build) in cases {
        for seed in 0..10 {
            let mut r = rng(seed * 31 + 7);
            let point: Vec<Tensor> = shapes.iter().map(|s| Tensor::normal(s, 1.0, &mut r)).collect();
            let err = grad_check(build, &point, 1e-6).unwrap();
            assert!(err <= 1e-5, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn grad_check_trivial_functions() {
    let sq = grad_check(
        |t, v| {
            let y = t.square(v[0])?;
            t.sum(y)
        },
        &[Tensor::vector(vec![3.0])],
        1e-5,
    )
    .unwrap();
    assert!(sq < 1e-9);

    let constant = grad_check(
        |t, v| {
            let z = t.scale(v[0], 0.0)?;
            let s = t.sum(z)?;
            t.add_scalar(s, 4.0)
        },
        &[Tensor::vector(vec![1.0, 2.0])],
        1e-5,
    )
    .unwrap();
    assert_eq!(constant, 0.0);
}

#[test]
fn fan_out_accumulates_exactly() {
    let x0 = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let mut t = Tape::new();
    let x = t.param(&x0).unwrap();
    let f = t.sin(x, 2.0).unwrap();
    let y = t.add(f, f).unwrap();
    let y = t.sum(y).unwrap();
    let g = t.backward(y).unwrap();

    let mut t1 = Tape::new();
    let x1 = t1.param(&x0).unwrap();
    let f1 = t1.sin(x1, 2.0).unwrap();
    let y1 = t1.sum(f1).unwrap();
    let g1 = t1.backward(y1).unwrap();
    for (a, b) in g.wrt(x).unwrap().iter().zip(g1.wrt(x1).unwrap()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn non_finite_outputs_abort() {
    let mut t = Tape::new();
    let x = t.constant(&Tensor::vector(vec![1000.0])).unwrap();
    assert!(matches!(t.exp(x), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let a = t.param(&Tensor::vector(vec![1.0, 2.0])).unwrap();
    let c = t.constant(&Tensor::vector(vec![3.0, 4.0])).unwrap();
    let y = t.mul(a, c).unwrap();
    let y = t.sum(y).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(a).unwrap(), &[3.0, 4.0]);
    assert!(g.wrt(c).is_none());
}

#[test]
fn comp_color_fallback_below_eps() {
    let mut t = Tape::new();
    let s = t.constant(&Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap()).unwrap();
    let c = t.constant(&Tensor::from_rows(&[vec![0.2, 0.4, 0.6], vec![0.2, 0.4, 0.6]]).unwrap()).unwrap();
    let tr = t.constant(&Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap()).unwrap();
    let out = t.comp_color(&[s], &[c], tr, 1e-8, [0.9, 0.9, 0.9]).unwrap();
    assert_eq!(t.value(out), &[0.9, 0.9, 0.9, 0.2, 0.4, 0.6]);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut params = vec![Tensor::vector(vec![1.0, -2.0]), Tensor::zeros(&[2, 2])];
    let before = params.clone();
    let mut adam = Adam::new(AdamConfig::with_lr(0.1), &params);
    for _ in 0..3 {
        adam.step(&mut params, &[Some(vec![0.0; 2]), Some(vec![0.0; 4])]).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn adam_single_step_hand_computed() {
    // m = 0.1, v = 0.001; bias-corrected m̂ = 1, v̂ = 1, so Δ = lr / (1 + eps).
    let mut params = vec![Tensor::vector(vec![0.5])];
    let mut adam = Adam::new(AdamConfig::with_lr(0.1), &params);
    adam.step(&mut params, &[Some(vec![1.0])]).unwrap();
    let expected = 0.5 - 0.1 / (1.0 + 1e-8);
    assert!((params[0].data()[0] - expected).abs() < 1e-15);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut params = vec![Tensor::vector(vec![0.5])];
    let mut adam = Adam::new(AdamConfig::default(), &params);
    assert!(adam.step(&mut params, &[Some(vec![f64::NAN])]).is_err());
    assert_eq!(params[0].data()[0], 0.5);
}

#[test]
fn adam_runs_are_bit_identical() {
    let run = || {
        let mut r = rng(11);
        let mut params = vec![Tensor::normal(&[3, 3], 1.0, &mut r)];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for _ in 0..20 {
            let g = Tensor::normal(&[3, 3], 1.0, &mut r).into_data();
            adam.step(&mut params, &[Some(g)]).unwrap();
        }
        params
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_byte_stable_round_trip() {
    let mut r = rng(2);
    let mut ck = Checkpoint::default();
    ck.meta.insert("arch".into(), "test".into());
    ck.push("w", Tensor::normal(&[3, 4], 1.0, &mut r));
    ck.push("b", Tensor::normal(&[4], 1.0, &mut r));
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn checkpoint_rejects_corruption() {
    let mut ck = Checkpoint::default();
    ck.push("w", Tensor::vector(vec![1.0, 2.0]));
    let bytes = ck.to_bytes();
    let p = std::path::Path::new("mem");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad, p).is_err());
}

proptest! {
    #[test]
    fn checkpoint_round_trip_any_values(values in proptest::collection::vec(-1e300f64..1e300, 1..40)) {
        let mut ck = Checkpoint::default();
        ck.push("v", Tensor::vector(values));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn excl_cumsum_matches_prefix(values in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
        let mut t = Tape::new();
        let n = values.len();
        let x = t.constant(&Tensor::new(vec![1, n], values.clone()).unwrap()).unwrap();
        let c = t.excl_cumsum(x).unwrap();
        let mut acc = 0.0;
        for (k, v) in values.iter().enumerate() {
            prop_assert_eq!(t.value(c)[k], acc);
            acc += v;
        }
    }
}
