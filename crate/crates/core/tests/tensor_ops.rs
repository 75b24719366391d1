use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselnet::tensor::gradcheck::grad_check;
use vesselnet::tensor::kernels::{
    avg_pool3d_forward, concat_channels_forward, conv3d_forward, conv3d_forward_lowered,
    upsample3d_forward,
};
use vesselnet::tensor::{Scalar, Shape, Tape, Tensor, UpsampleMode, Var};

fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0)))
}

/// Six nested loops over output voxel and kernel tap, straight from the
/// definition of zero-padded cross-correlation.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [n, _, d, h, w] = x.shape().0;
    let [co, ci, kd, kh, kw] = k.shape().0;
    let (pd, ph, pw) = (kd as i64 / 2, kh as i64 / 2, kw as i64 / 2);
    Tensor::from_fn(Shape::new(n, co, d, h, w), |[bn, o, z, y, xx]| {
        let mut acc = b.data()[o];
        for c in 0..ci {
            for dz in 0..kd {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iz = z as i64 + dz as i64 - pd;
                        let iy = y as i64 + dy as i64 - ph;
                        let ix = xx as i64 + dx as i64 - pw;
                        if iz < 0 || iy < 0 || ix < 0 {
                            continue;
                        }
                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                        if iz >= d || iy >= h || ix >= w {
                            continue;
                        }
                        acc += k.get([o, c, dz, dy, dx]) * x.get([bn, c, iz, iy, ix]);
                    }
                }
            }
        }
        acc
    })
}

/// Largest absolute deviation relative to the largest reference magnitude.
fn max_rel(got: &Tensor<f64>, expected: &Tensor<f64>) -> f64 {
    let scale = expected.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    got.max_abs_diff(expected) / scale.max(1e-300)
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f32> = random(&mut rng, Shape::volume(4, 5, 6));
    let k = Tensor::ones(Shape::new(1, 1, 1, 1, 1));
    let b = Tensor::zeros(Shape::new(1, 1, 1, 1, 1));
    assert_eq!(conv3d_forward(&x, &k, &b).unwrap(), x);
}

#[test]
fn conv_counts_interior_taps() {
    let x = Tensor::<f32>::ones(Shape::volume(5, 5, 5));
    let k = Tensor::ones(Shape::new(1, 1, 3, 3, 3));
    let b = Tensor::zeros(Shape::new(1, 1, 1, 1, 1));
    let y = conv3d_forward(&x, &k, &b).unwrap();
    assert_eq!(y.get([0, 0, 2, 2, 2]), 27.0);
    // Corner sees a 2x2x2 window under zero padding.
    assert_eq!(y.get([0, 0, 0, 0, 0]), 8.0);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x64: Tensor<f64> = random(&mut rng, Shape::new(1, 2, 5, 5, 5));
    let k64: Tensor<f64> = random(&mut rng, Shape::new(3, 2, 3, 3, 3));
    let b64: Tensor<f64> = random(&mut rng, Shape::new(1, 3, 1, 1, 1));
    let expected = conv_oracle(&x64, &k64, &b64);

    let got32 = conv3d_forward(&x64.cast::<f32>(), &k64.cast(), &b64.cast()).unwrap();
    assert!(max_rel(&got32.cast(), &expected) <= 1e-5);
    let got64 = conv3d_forward(&x64, &k64, &b64).unwrap();
    assert!(max_rel(&got64, &expected) <= 1e-12);
}

#[test]
fn lowered_path_agrees_with_loop_nest() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (shape, kernel) in [
        (Shape::new(2, 3, 4, 6, 5), Shape::new(4, 3, 3, 3, 3)),
        (Shape::new(1, 2, 3, 3, 7), Shape::new(2, 2, 1, 3, 5)),
        (Shape::new(1, 4, 2, 2, 2), Shape::new(3, 4, 1, 1, 1)),
    ] {
        let x: Tensor<f32> = random(&mut rng, shape);
        let k: Tensor<f32> = random(&mut rng, kernel);
        let b: Tensor<f32> = random(&mut rng, Shape::new(1, kernel.n(), 1, 1, 1));
        let oracle = conv_oracle(&x.cast(), &k.cast(), &b.cast());
        let direct = conv3d_forward(&x, &k, &b).unwrap();
        let lowered = conv3d_forward_lowered(&x, &k, &b).unwrap();
        assert!(max_rel(&direct.cast(), &oracle) <= 1e-5);
        assert!(max_rel(&lowered.cast(), &oracle) <= 1e-5);
    }
}

#[test]
fn conv_shape_errors_name_both_shapes() {
    let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4, 4));
    let k = Tensor::zeros(Shape::new(1, 3, 3, 3, 3));
    let b = Tensor::zeros(Shape::new(1, 1, 1, 1, 1));
    let msg = conv3d_forward(&x, &k, &b).unwrap_err().to_string();
    assert!(msg.contains("1x3x3x3x3") && msg.contains("1x2x4x4x4"), "{msg}");

    let even = Tensor::zeros(Shape::new(1, 2, 2, 3, 3));
    assert!(conv3d_forward(&x, &even, &b).is_err());
}

#[test]
fn conv_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Tensor<f64> = random(&mut rng, Shape::new(1, 2, 4, 5, 3));
    let y: Tensor<f64> = random(&mut rng, Shape::new(1, 2, 4, 5, 3));
    let k: Tensor<f64> = random(&mut rng, Shape::new(2, 2, 3, 3, 3));
    let b = Tensor::zeros(Shape::new(1, 2, 1, 1, 1));
    let (alpha, beta) = (0.7, -1.3);
    let mut combo = x.map(|v| alpha * v);
    combo.add_assign(&y.map(|v| beta * v));
    let lhs = conv3d_forward(&combo, &k, &b).unwrap();
    let mut rhs = conv3d_forward(&x, &k, &b).unwrap().map(|v| alpha * v);
    rhs.add_assign(&conv3d_forward(&y, &k, &b).unwrap().map(|v| beta * v));
    let scale = rhs.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(lhs.max_abs_diff(&rhs) <= 1e-5 * scale);
}

#[test]
fn pool_examples() {
    let c = Tensor::<f32>::full(Shape::volume(4, 6, 2), 0.37);
    let pooled = avg_pool3d_forward(&c).unwrap();
    assert_eq!(pooled.shape(), Shape::volume(2, 3, 1));
    assert!(pooled.data().iter().all(|&v| v == 0.37));

    let block = Tensor::<f32>::new(Shape::volume(2, 2, 2), (1..=8).map(|v| v as f32).collect())
        .unwrap();
    assert_eq!(avg_pool3d_forward(&block).unwrap().data(), &[4.5]);
}

#[test]
fn pool_matches_blockwise_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Tensor<f32> = random(&mut rng, Shape::new(2, 3, 4, 6, 8));
    let got = avg_pool3d_forward(&x).unwrap();
    let expected = Tensor::from_fn(Shape::new(2, 3, 2, 3, 4), |[n, c, z, y, w]| {
        let v = |dz, dy, dx| x.get([n, c, 2 * z + dz, 2 * y + dy, 2 * w + dx]);
        let pairs = [
            v(0, 0, 0) + v(0, 0, 1),
            v(0, 1, 0) + v(0, 1, 1),
            v(1, 0, 0) + v(1, 0, 1),
            v(1, 1, 0) + v(1, 1, 1),
        ];
        ((pairs[0] + pairs[1]) + (pairs[2] + pairs[3])) / 8.0
    });
    assert_eq!(got, expected);
}

#[test]
fn pool_preserves_global_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let x: Tensor<f64> = random(&mut rng, Shape::new(1, 2, 6, 4, 8));
        let p = avg_pool3d_forward(&x).unwrap();
        let mean = |t: &Tensor<f64>| t.sum() / t.len() as f64;
        assert!((mean(&x) - mean(&p)).abs() <= 1e-6);
    }
}

#[test]
fn nearest_upsample_then_pool_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = Tensor::<f32>::scalar(3.25);
    let up = upsample3d_forward(&v, UpsampleMode::Nearest);
    assert_eq!(up, Tensor::full(Shape::volume(2, 2, 2), 3.25));
    for _ in 0..10 {
        let x: Tensor<f32> = random(&mut rng, Shape::new(1, 2, 3, 4, 5));
        let round = avg_pool3d_forward(&upsample3d_forward(&x, UpsampleMode::Nearest)).unwrap();
        assert_eq!(round, x);
    }
}

#[test]
fn trilinear_preserves_linear_ramp() {
    let (a, b, c, off) = (0.5, -0.25, 1.5, 2.0);
    let x = Tensor::<f64>::from_fn(Shape::volume(4, 5, 6), |[_, _, z, y, w]| {
        a * z as f64 + b * y as f64 + c * w as f64 + off
    });
    let up = upsample3d_forward(&x, UpsampleMode::Trilinear);
    assert_eq!(up.shape(), Shape::volume(8, 10, 12));
    // Output index o sits at input coordinate (o + 0.5) / 2 - 0.5.
    let coord = |o: usize| (o as f64 + 0.5) / 2.0 - 0.5;
    for z in 1..7 {
        for y in 1..9 {
            for w in 1..11 {
                let expected = a * coord(z) + b * coord(y) + c * coord(w) + off;
                assert!((up.get([0, 0, z, y, w]) - expected).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn concat_layout_and_errors() {
    let a = Tensor::<f32>::from_fn(Shape::new(1, 2, 2, 2, 2), |i| i[1] as f32);
    let b = Tensor::<f32>::from_fn(Shape::new(1, 3, 2, 2, 2), |i| 10.0 + i[1] as f32);
    let cat = concat_channels_forward(&a, &b).unwrap();
    assert_eq!(cat.shape().c(), 5);
    assert_eq!(cat.channel(0, 1), a.channel(0, 1));
    assert_eq!(cat.channel(0, 4), b.channel(0, 2));

    let off = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2, 4));
    assert!(concat_channels_forward(&a, &off).is_err());
    // A zero-channel operand cannot exist: tensors need every extent >= 1.
    assert!(Tensor::<f32>::new(Shape::new(1, 0, 2, 2, 2), vec![]).is_err());
}

#[test]
fn concat_backward_routes_ones() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::zeros(Shape::new(1, 2, 2, 2, 2)));
    let b = tape.param(Tensor::zeros(Shape::new(1, 3, 2, 2, 2)));
    let cat = tape.concat_channels(a, b).unwrap();
    let loss = tape.sum(cat).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(a), Tensor::ones(Shape::new(1, 2, 2, 2, 2)));
    assert_eq!(g.wrt(b), Tensor::ones(Shape::new(1, 3, 2, 2, 2)));
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(0.0));
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[0.25]);
    let h = 1e-4;
    let numeric = (1.0 / (1.0 + (-h as f64).exp()) - 1.0 / (1.0 + (h as f64).exp())) / (2.0 * h);
    assert!((numeric - 0.25).abs() <= 1e-6);
}

#[test]
fn sum_sigmoid_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs: Vec<Tensor<f64>> = vec![
        random(&mut rng, Shape::new(1, 2, 4, 3, 5)),
        random(&mut rng, Shape::new(2, 2, 3, 3, 3)),
        random(&mut rng, Shape::new(1, 2, 1, 1, 1)),
    ];
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let c = t.conv3d(v[0], v[1], v[2])?;
        let s = t.sigmoid(c)?;
        t.sum(s)
    };
    let err64 = grad_check(f, &inputs, 1e-4).unwrap();
    assert!(err64 <= 1e-6, "{err64}");

    // Same graph in 32-bit against 64-bit central differences.
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let c = tape.conv3d(vars[0], vars[1], vars[2]).unwrap();
    let s = tape.sigmoid(c).unwrap();
    let loss = tape.sum(s).unwrap();
    let g32 = tape.backward(loss).unwrap();
    let numeric = vesselnet::tensor::gradcheck::numeric_gradients(&f, &inputs, 1e-4).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g32.wrt(v).cast()).collect();
    let err32 = vesselnet::tensor::gradcheck::max_relative_error(&analytic, &numeric);
    assert!(err32 <= 1e-3, "{err32}");
}

#[test]
fn kernels_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Tensor<f32> = random(&mut rng, Shape::new(1, 3, 6, 6, 6));
    let k: Tensor<f32> = random(&mut rng, Shape::new(4, 3, 3, 3, 3));
    let b: Tensor<f32> = random(&mut rng, Shape::new(1, 4, 1, 1, 1));
    let first = conv3d_forward(&x, &k, &b).unwrap();
    for _ in 0..5 {
        let again = conv3d_forward(&x, &k, &b).unwrap();
        let same = first
            .data()
            .iter()
            .zip(again.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }
}
