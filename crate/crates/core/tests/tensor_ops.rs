//! Kernel and autodiff checks against direct reference computations.

use fad_core::tensor::kernels::PoolKind;
use fad_core::tensor::{ParamKind, ParamStore, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Direct nested-loop convolution with "same"-style padding.
fn reference_conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h();
    let pad = (dilation * (k - 1) / 2) as isize;
    let out_len = |n: usize| (n + 2 * pad as usize - dilation * (k - 1) - 1) / stride + 1;
    let ys = Shape::new(xs.n(), ws.n(), out_len(xs.h()), out_len(xs.w()));
    let cpg = xs.c() / groups;
    let opg = ws.n() / groups;
    let mut out = Tensor::zeros(ys);
    for n in 0..ys.n() {
        for o in 0..ys.c() {
            let g = o / opg;
            for oy in 0..ys.h() {
                for ox in 0..ys.w() {
                    let mut acc = bias.map_or(0.0f64, |b| b.data()[o] as f64);
                    for cl in 0..cpg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dilation) as isize - pad;
                                let ix = (ox * stride + kx * dilation) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= xs.h() as isize || ix >= xs.w() as isize {
                                    continue;
                                }
                                acc += x.at(n, g * cpg + cl, iy as usize, ix as usize) as f64
                                    * w.at(o, cl, ky, kx) as f64;
                            }
                        }
                    }
                    let idx = ((n * ys.c() + o) * ys.h() + oy) * ys.w() + ox;
                    out.data_mut()[idx] = acc as f32;
                }
            }
        }
    }
    out
}

fn conv_on_tape(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Result<Tensor, fad_core::error::TensorError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, bv, stride, dilation, groups)?;
    Ok(tape.value(y).clone())
}

#[test]
fn conv_all_ones_center_is_nine() {
    let x = Tensor::full(Shape::new(1, 1, 5, 5), 1.0);
    let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
    let y = conv_on_tape(&x, &w, None, 1, 1, 1).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 1, 5, 5));
    assert_eq!(y.at(0, 0, 2, 2), 9.0);
}

#[test]
fn dilated_delta_kernel_is_identity() {
    let mut x = Tensor::zeros(Shape::new(1, 1, 7, 7));
    x.data_mut()[3 * 7 + 3] = 1.0;
    let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
    w.data_mut()[4] = 1.0;
    let y = conv_on_tape(&x, &w, None, 1, 3, 1).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn depthwise_dilated_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(Shape::new(2, 4, 8, 8), &mut rng);
    let w = random_tensor(Shape::new(4, 1, 3, 3), &mut rng);
    let y = conv_on_tape(&x, &w, None, 1, 2, 4).unwrap();
    let r = reference_conv(&x, &w, None, 1, 2, 4);
    assert!(y.max_abs_diff(&r).unwrap() < 1e-5);
}

#[test]
fn conv_matches_reference_on_random_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..60 {
        let groups = [1usize, 2, 4][rng.random_range(0..3)];
        let cin = groups * rng.random_range(1..4);
        let cout = groups * rng.random_range(1..4);
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let dilation = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let h = rng.random_range(1..10);
        let wdt = rng.random_range(1..10);
        let x = random_tensor(Shape::new(rng.random_range(1..3), cin, h, wdt), &mut rng);
        let w = random_tensor(Shape::new(cout, cin / groups, k, k), &mut rng);
        let b = random_tensor(Shape::vector(cout), &mut rng);
        let y = conv_on_tape(&x, &w, Some(&b), stride, dilation, groups).unwrap();
        let r = reference_conv(&x, &w, Some(&b), stride, dilation, groups);
        let diff = y.max_abs_diff(&r).unwrap();
        assert!(diff < 1e-5, "trial {trial}: diff {diff}");
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
    let w = Tensor::zeros(Shape::new(2, 3, 3, 3));
    assert!(conv_on_tape(&x, &w, None, 1, 1, 2).is_err(), "groups must divide channels");
    let w5 = Tensor::zeros(Shape::new(2, 3, 5, 5));
    assert!(conv_on_tape(&x, &w5, None, 1, 1, 1).is_err(), "5x5 kernels are out of range");
    let wrong_in = Tensor::zeros(Shape::new(2, 2, 3, 3));
    assert!(conv_on_tape(&x, &wrong_in, None, 1, 1, 1).is_err());
    assert!(conv_on_tape(&x, &w, None, 1, 4, 1).is_err(), "dilation above 3");
}

fn gn(x: &Tensor, groups: usize, gamma: f32, beta: f32) -> Result<Tensor, fad_core::error::TensorError> {
    let c = x.shape().c();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full(Shape::vector(c), gamma));
    let b = tape.constant(Tensor::full(Shape::vector(c), beta));
    let y = tape.group_norm(xv, groups, g, b, 1e-5)?;
    Ok(tape.value(y).clone())
}

#[test]
fn group_norm_constant_input_is_zero() {
    let x = Tensor::full(Shape::new(1, 4, 3, 3), 2.5);
    let y = gn(&x, 2, 1.0, 0.0).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn group_norm_zero_gamma_returns_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(Shape::new(2, 4, 3, 3), &mut rng);
    let y = gn(&x, 2, 0.0, 5.0).unwrap();
    assert!(y.data().iter().all(|v| *v == 5.0));
}

#[test]
fn group_norm_normalises_each_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(Shape::new(2, 8, 4, 4), |_| rng.random_range(-3.0f32..5.0));
    let y = gn(&x, 4, 1.0, 0.0).unwrap();
    let span = 2 * 16;
    for chunk in y.data().chunks(span) {
        let mean = chunk.iter().map(|v| *v as f64).sum::<f64>() / span as f64;
        let var = chunk.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / span as f64;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn group_norm_rejects_too_many_groups() {
    let x = Tensor::zeros(Shape::new(1, 4, 2, 2));
    assert!(gn(&x, 8, 1.0, 0.0).is_err());
    assert!(gn(&x, 3, 1.0, 0.0).is_err());
}

#[test]
fn sum_gradient_is_ones() {
    let mut store = ParamStore::new();
    store
        .insert_const("w", Shape::new(1, 2, 2, 2), 0.3, ParamKind::Weight)
        .unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let loss = tape.sum(w);
    tape.backward(loss, &mut store).unwrap();
    assert!(store.get("w").unwrap().grad().unwrap().iter().all(|g| *g == 1.0));
}

#[test]
fn dead_relu_passes_no_gradient() {
    let mut store = ParamStore::new();
    store
        .insert_const("w", Shape::new(1, 3, 1, 1), -0.5, ParamKind::Weight)
        .unwrap();
    store
        .insert_const("unused", Shape::scalar(), 1.0, ParamKind::Weight)
        .unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let r = tape.relu(w);
    let loss = tape.sum(r);
    tape.backward(loss, &mut store).unwrap();
    assert!(store.get("w").unwrap().grad().unwrap().iter().all(|g| *g == 0.0));
    assert_eq!(store.get("unused").unwrap().grad().unwrap(), &[0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut store = ParamStore::new();
    store
        .insert_const("w", Shape::vector(3), 1.0, ParamKind::Weight)
        .unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    assert!(tape.backward(w, &mut store).is_err());
}

#[test]
fn nan_gradient_names_offending_node() {
    let mut store = ParamStore::new();
    store
        .insert_const("w", Shape::vector(2), 1.0, ParamKind::Weight)
        .unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let loss = tape
        .fused_scalar("poisoned", 0.0, vec![w], vec![vec![f32::NAN, 0.0]])
        .unwrap();
    let err = tape.backward(loss, &mut store).unwrap_err().to_string();
    assert!(err.contains("leaf"), "{err}");
}

// ---------------------------------------------------------------------------
// Finite-difference checks on every differentiable op.

type Build = dyn Fn(&mut Tape, &ParamStore) -> Var;

/// `sum(r * f(params))` for a fixed random projection `r`.
fn projected_loss(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = tape.value(y);
    let r: Vec<f32> = (0..v.shape().numel()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let value: f64 = v.data().iter().zip(&r).map(|(a, b)| *a as f64 * *b as f64).sum();
    tape.fused_scalar("projection", value, vec![y], vec![r]).unwrap()
}

fn eval(store: &ParamStore, build: &Build) -> f64 {
    let mut tape = Tape::new();
    let y = build(&mut tape, store);
    let l = projected_loss(&mut tape, y, 99);
    tape.value(l).data()[0] as f64
}

fn check_gradients(mut store: ParamStore, build: &Build, label: &str) {
    let mut tape = Tape::new();
    let y = build(&mut tape, &store);
    let l = projected_loss(&mut tape, y, 99);
    tape.backward(l, &mut store).unwrap();
    let eps = 1e-3f32;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name).unwrap().shape().numel();
        for i in 0..n {
            let analytic = store.get(&name).unwrap().grad().unwrap()[i] as f64;
            let orig = store.get(&name).unwrap().data()[i];
            store.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(&store, build);
            store.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(&store, build);
            store.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps as f64);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(0.05);
            assert!(
                rel < 2e-2,
                "{label}: {name}[{i}] analytic {analytic} numeric {numeric} rel {rel}"
            );
        }
    }
}

fn random_store(entries: &[(&str, Shape)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in entries {
        store
            .insert(*name, random_tensor(*shape, &mut rng), ParamKind::Weight)
            .unwrap();
    }
    store
}

#[test]
fn conv_gradients_match_finite_differences() {
    for (stride, dilation, groups) in [(1, 1, 1), (1, 2, 2), (2, 1, 1), (1, 3, 4)] {
        let store = random_store(
            &[
                ("x", Shape::new(2, 4, 6, 6)),
                ("w", Shape::new(4, 4 / groups, 3, 3)),
                ("b", Shape::vector(4)),
            ],
            (stride * 10 + dilation * 3 + groups) as u64,
        );
        let build = move |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, "x").unwrap();
            let w = t.param(s, "w").unwrap();
            let b = t.param(s, "b").unwrap();
            t.conv2d(x, w, Some(b), stride, dilation, groups).unwrap()
        };
        check_gradients(store, &build, &format!("conv s{stride} d{dilation} g{groups}"));
    }
}

#[test]
fn group_norm_gradients_match_finite_differences() {
    let store = random_store(
        &[
            ("x", Shape::new(2, 4, 3, 3)),
            ("gamma", Shape::vector(4)),
            ("beta", Shape::vector(4)),
        ],
        21,
    );
    let build = |t: &mut Tape, s: &ParamStore| {
        let x = t.param(s, "x").unwrap();
        let g = t.param(s, "gamma").unwrap();
        let b = t.param(s, "beta").unwrap();
        t.group_norm(x, 2, g, b, 1e-5).unwrap()
    };
    check_gradients(store, &build, "group_norm");
}

#[test]
fn softmax_mix_concat_gradients_match_finite_differences() {
    let store = random_store(
        &[
            ("a", Shape::new(2, 2, 3, 3)),
            ("b", Shape::new(2, 2, 3, 3)),
            ("c", Shape::new(2, 3, 3, 3)),
            ("alpha", Shape::vector(2)),
        ],
        22,
    );
    let build = |t: &mut Tape, s: &ParamStore| {
        let a = t.param(s, "a").unwrap();
        let b = t.param(s, "b").unwrap();
        let c = t.param(s, "c").unwrap();
        let alpha = t.param(s, "alpha").unwrap();
        let w = t.softmax(alpha).unwrap();
        let m = t.mix(&[a, b], w).unwrap();
        let r = t.relu(m);
        let sum = t.add(r, b).unwrap();
        t.concat(&[sum, c]).unwrap()
    };
    check_gradients(store, &build, "softmax/mix/relu/add/concat");
}

#[test]
fn pooling_gradients_match_finite_differences() {
    for kind in [PoolKind::Max, PoolKind::Avg] {
        for stride in [1, 2] {
            let store = random_store(&[("x", Shape::new(1, 2, 5, 5))], 23 + stride as u64);
            let build = move |t: &mut Tape, s: &ParamStore| {
                let x = t.param(s, "x").unwrap();
                let p = t.pool3x3(x, stride, kind).unwrap();
                let q = t.subsample(x, stride).unwrap();
                let gp = t.global_avg_pool(p);
                let gq = t.global_avg_pool(q);
                t.concat(&[gp, gq]).unwrap()
            };
            check_gradients(store, &build, &format!("{kind:?} pool stride {stride}"));
        }
    }
}

#[test]
fn repeated_parameter_accumulates_gradient() {
    let mut store = ParamStore::new();
    store
        .insert_const("w", Shape::vector(2), 1.0, ParamKind::Weight)
        .unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, "w").unwrap();
    let b = tape.param(&store, "w").unwrap();
    assert_eq!(a, b);
    let s = tape.add(a, b).unwrap();
    let loss = tape.sum(s);
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get("w").unwrap().grad().unwrap(), &[2.0, 2.0]);
}
