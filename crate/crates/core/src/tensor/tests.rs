use super::*;
use crate::gradcheck::{central_difference, rel_error};
use crate::Rng;

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn rand_param(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(rng.normals(n).into_iter().map(|v| v * scale).collect(), shape).unwrap()
}

/// Weighted-sum loss of `f(inputs)`; compares every input coordinate's
/// backward gradient with central differences and returns the worst
/// relative error.
fn worst_grad_error(inputs: &[Tensor], rng: &mut Rng, f: &dyn Fn(&[Tensor]) -> Tensor) -> f64 {
    let out = f(inputs);
    let w = Tensor::new(rng.normals(out.numel()), out.shape()).unwrap();
    for x in inputs {
        x.zero_grad();
    }
    out.mul(&w).unwrap().sum().backward().unwrap();
    let eval = || {
        let _g = no_grad();
        f(inputs).mul(&w).unwrap().sum().item()
    };
    let mut worst: f64 = 0.0;
    for x in inputs {
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        for i in 0..x.numel() {
            let fd = central_difference(x, i, 1e-5, eval);
            worst = worst.max(rel_error(analytic[i], fd));
        }
    }
    worst
}

fn sweep(name: &str, make: impl Fn(&mut Rng) -> Vec<Tensor>, f: &dyn Fn(&[Tensor]) -> Tensor) {
    let mut rng = Rng::new(0xfd);
    for trial in 0..100 {
        let inputs = make(&mut rng);
        let err = worst_grad_error(&inputs, &mut rng, f);
        assert!(err <= 1e-4, "{name}: trial {trial} rel err {err:e}");
    }
}

#[test]
fn matmul_examples() {
    let a = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let b = t(&[3.0, 4.0, 5.0, 6.0], &[2, 2]);
    assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    let c = t(&[1.0, 2.0], &[1, 2]).matmul(&t(&[3.0, 4.0], &[2, 1])).unwrap();
    assert_eq!(c.shape(), &[1, 1]);
    assert_eq!(c.to_vec(), vec![11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[4, 2])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = Rng::new(3);
    let a = rand_param(&mut rng, &[4, 5], 1.0);
    let b = Tensor::new(rng.normals(15), &[5, 3]).unwrap();
    a.matmul(&b).unwrap().sum().backward().unwrap();
    let g = a.grad().unwrap();
    for i in 0..20 {
        let fd = central_difference(&a, i, 1e-5, || a.matmul(&b).unwrap().sum().item());
        assert!(rel_error(g[i], fd) <= 1e-6, "{i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn softmax_examples() {
    let s = t(&[0.0, 0.0, 0.0], &[3]).softmax(0).unwrap().to_vec();
    for v in s {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = t(&[1000.0, 0.0], &[2]).softmax(0).unwrap().to_vec();
    assert!(s.iter().all(|v| v.is_finite()));
    assert!((s[0] - 1.0).abs() < 1e-15 && s[1] < 1e-300);
    // e^k / (e + e^2 + e^3), evaluated with a different association order.
    let e = std::f64::consts::E;
    let z = e * (1.0 + e * (1.0 + e));
    let expect = [e / z, e * e / z, e * e * e / z];
    let s = t(&[1.0, 2.0, 3.0], &[3]).softmax(0).unwrap().to_vec();
    for (a, b) in s.iter().zip(expect) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn softmax_axis_out_of_range_is_error() {
    assert!(Tensor::zeros(&[2, 2]).softmax(2).is_err());
}

#[test]
fn layernorm_examples() {
    let c = t(&[5.0; 4], &[1, 4]).layernorm(None, None, 1e-5).unwrap();
    assert!(c.to_vec().iter().all(|v| *v == 0.0));
    let one = t(&[1.0, -1.0], &[1, 2]).layernorm(None, None, 1e-300).unwrap().to_vec();
    assert!((one[0] - 1.0).abs() < 1e-12 && (one[1] + 1.0).abs() < 1e-12);

    let mut rng = Rng::new(5);
    let x = Tensor::new(rng.normals(24).iter().map(|v| v * 3.0 + 1.0).collect(), &[3, 8]).unwrap();
    let gain = Tensor::new(vec![1.0; 8], &[8]).unwrap();
    let bias = Tensor::new(vec![0.0; 8], &[8]).unwrap();
    let y = x.layernorm(Some(&gain), Some(&bias), 1e-5).unwrap().to_vec();
    for row in y.chunks(8) {
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-12, "{mean}");
    }
}

#[test]
fn gelu_tanh_form_tracks_erf_form() {
    // erf via Abramowitz-Stegun 7.1.26 (|err| < 1.5e-7), independent of the
    // tanh approximation being checked.
    fn erf(x: f64) -> f64 {
        let s = x.signum();
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592)
                * t
                * (-x * x).exp();
        s * y
    }
    for i in -600..=600 {
        let x = i as f64 / 100.0;
        let exact = 0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2));
        let approx = t(&[x], &[1]).gelu().item();
        assert!((exact - approx).abs() <= 1e-3, "x={x}: {exact} vs {approx}");
    }
}

#[test]
fn attention_examples() {
    let q = t(&[0.3, -0.2], &[1, 2]);
    let k = t(&[1.0, 2.0], &[1, 2]);
    let v = t(&[4.0, 5.0], &[1, 2]);
    let out = Tensor::attention(&q, &k, &v, &AttentionMask::full(1), 1).unwrap();
    assert_eq!(out.to_vec(), vec![4.0, 5.0]);

    // Equal logits: mean of allowed value rows.
    let q = t(&[0.0; 6], &[3, 2]);
    let k = t(&[0.0; 6], &[3, 2]);
    let v = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
    let out = Tensor::attention(&q, &k, &v, &AttentionMask::causal(3), 1).unwrap().to_vec();
    assert_eq!(&out[0..2], &[1.0, 2.0]);
    assert!((out[2] - 2.0).abs() < 1e-15 && (out[3] - 3.0).abs() < 1e-15);
    assert!((out[4] - 3.0).abs() < 1e-15 && (out[5] - 4.0).abs() < 1e-15);
}

#[test]
fn attention_causal_position_zero_sees_only_itself() {
    let mut rng = Rng::new(9);
    let q = Tensor::new(rng.normals(6), &[3, 2]).unwrap();
    let k = Tensor::new(rng.normals(6), &[3, 2]).unwrap();
    let v = Tensor::new(rng.normals(6), &[3, 2]).unwrap();
    let out = Tensor::attention(&q, &k, &v, &AttentionMask::causal(3), 1).unwrap().to_vec();
    assert_eq!(&out[..2], &v.to_vec()[..2]);
}

#[test]
fn attention_fully_masked_row_is_zero() {
    let mask = AttentionMask::from_fn(2, 2, |i, _| i == 1);
    let v = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let q = Tensor::param(vec![0.1, 0.2, 0.3, 0.4], &[2, 2]).unwrap();
    let out = Tensor::attention(&q, &v, &v, &mask, 2).unwrap();
    assert_eq!(&out.to_vec()[..2], &[0.0, 0.0]);
    out.sum().backward().unwrap();
    assert!(q.grad().unwrap().iter().all(|g| g.is_finite()));
}

#[test]
fn prefix_causal_mask_layout() {
    let m = AttentionMask::prefix_causal(4, 2);
    let rows: Vec<Vec<bool>> = (0..4).map(|i| (0..4).map(|j| m.allowed(i, j)).collect()).collect();
    assert_eq!(rows[0], vec![true, true, false, false]);
    assert_eq!(rows[1], vec![true, true, false, false]);
    assert_eq!(rows[2], vec![true, true, true, false]);
    assert_eq!(rows[3], vec![true, true, true, true]);
}

#[test]
fn backward_examples() {
    let x = Tensor::param(vec![0.5; 6], &[2, 3]).unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);

    let y = Tensor::param(vec![1.0, -2.0, 3.5], &[3]).unwrap();
    y.mul(&y).unwrap().sum().backward().unwrap();
    assert_eq!(y.grad().unwrap(), vec![2.0, -4.0, 7.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(x.scale(2.0).backward(), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let x = Tensor::param(vec![1.0], &[1]).unwrap();
    x.scale(3.0).sum().backward().unwrap();
    x.scale(3.0).sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0]);
    x.zero_grad();
    x.scale(3.0).sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0]);
}

#[test]
fn no_grad_records_nothing() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let y = {
        let _g = no_grad();
        x.mul(&x).unwrap()
    };
    assert!(!y.requires_grad());
    assert!(y.is_leaf());
}

#[test]
fn quantizer_values_and_identity_gradient() {
    let x = Tensor::param(vec![0.26, 10.0, 0.0, -0.3, -7.0, 0.125], &[6]).unwrap();
    let q = x.quantize_ste(0.25, 4).unwrap();
    assert_eq!(q.to_vec(), vec![0.25, 1.0, 0.0, -0.25, -1.0, 0.25]);
    q.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn f32_mode_rounds_outputs() {
    set_precision(Precision::F32);
    let y = t(&[0.1], &[1]).scale(3.0).item();
    set_precision(Precision::F64);
    assert_eq!(y, (0.1f64 as f32 as f64 * 3.0) as f32 as f64);
}

#[test]
fn ops_stay_finite_on_large_inputs() {
    let mut rng = Rng::new(11);
    let x = Tensor::new(rng.normals(12).iter().map(|v| v * 1e3).collect(), &[3, 4]).unwrap();
    let w = Tensor::new(rng.normals(16).iter().map(|v| v * 1e3).collect(), &[4, 4]).unwrap();
    let ln = x.layernorm(None, None, 1e-5).unwrap();
    let outs = [
        x.softmax(1).unwrap(),
        ln.clone(),
        x.gelu(),
        x.matmul(&w).unwrap(),
        Tensor::attention(&x, &x, &x, &AttentionMask::full(3), 2).unwrap(),
    ];
    for o in outs {
        assert!(o.to_vec().iter().all(|v| v.is_finite()));
    }
}

// ---- per-op finite-difference sweeps, 100 random points each ----

#[test]
fn fd_elementwise() {
    sweep(
        "add",
        |r| vec![rand_param(r, &[2, 3], 1.0), rand_param(r, &[2, 3], 1.0)],
        &|x| x[0].add(&x[1]).unwrap(),
    );
    sweep(
        "sub",
        |r| vec![rand_param(r, &[3], 1.0), rand_param(r, &[3], 1.0)],
        &|x| x[0].sub(&x[1]).unwrap(),
    );
    sweep(
        "mul",
        |r| vec![rand_param(r, &[2, 2], 1.0), rand_param(r, &[2, 2], 1.0)],
        &|x| x[0].mul(&x[1]).unwrap(),
    );
    sweep("scale", |r| vec![rand_param(r, &[4], 1.0)], &|x| x[0].scale(-1.7).add_scalar(0.3));
    sweep("gelu", |r| vec![rand_param(r, &[2, 4], 2.0)], &|x| x[0].gelu());
}

#[test]
fn fd_matmul() {
    sweep(
        "matmul2d",
        |r| vec![rand_param(r, &[3, 4], 1.0), rand_param(r, &[4, 2], 1.0)],
        &|x| x[0].matmul(&x[1]).unwrap(),
    );
    sweep(
        "matmul batched",
        |r| vec![rand_param(r, &[2, 2, 3], 1.0), rand_param(r, &[2, 3, 2], 1.0)],
        &|x| x[0].matmul(&x[1]).unwrap(),
    );
    sweep(
        "matmul broadcast rhs",
        |r| vec![rand_param(r, &[2, 2, 3], 1.0), rand_param(r, &[3, 2], 1.0)],
        &|x| x[0].matmul(&x[1]).unwrap(),
    );
}

#[test]
fn fd_shape_ops() {
    sweep("transpose", |r| vec![rand_param(r, &[2, 3], 1.0)], &|x| x[0].transpose().unwrap());
    sweep(
        "reshape",
        |r| vec![rand_param(r, &[2, 3], 1.0)],
        &|x| x[0].reshape(&[3, 2]).unwrap().transpose().unwrap(),
    );
    sweep("expand_rows", |r| vec![rand_param(r, &[3], 1.0)], &|x| x[0].expand_rows(4).unwrap());
    sweep(
        "concat_rows",
        |r| vec![rand_param(r, &[1, 3], 1.0), rand_param(r, &[2, 3], 1.0)],
        &|x| Tensor::concat_rows(&[x[0].clone(), x[1].clone()]).unwrap(),
    );
    sweep("slice_rows", |r| vec![rand_param(r, &[4, 2], 1.0)], &|x| x[0].slice_rows(1, 2).unwrap());
    sweep("slice_cols", |r| vec![rand_param(r, &[2, 5], 1.0)], &|x| x[0].slice_cols(1, 3).unwrap());
    sweep("sum", |r| vec![rand_param(r, &[2, 2], 1.0)], &|x| x[0].sum());
    sweep("mean", |r| vec![rand_param(r, &[3, 2], 1.0)], &|x| x[0].mean());
}

#[test]
fn fd_softmax_and_layernorm() {
    sweep("softmax axis1", |r| vec![rand_param(r, &[2, 4], 2.0)], &|x| x[0].softmax(1).unwrap());
    sweep("softmax axis0", |r| vec![rand_param(r, &[3, 2], 2.0)], &|x| x[0].softmax(0).unwrap());
    sweep(
        "layernorm affine",
        |r| {
            vec![
                rand_param(r, &[2, 5], 2.0),
                rand_param(r, &[5], 1.0),
                rand_param(r, &[5], 1.0),
            ]
        },
        &|x| x[0].layernorm(Some(&x[1]), Some(&x[2]), 1e-5).unwrap(),
    );
    sweep(
        "layernorm plain",
        |r| vec![rand_param(r, &[3, 4], 1.0)],
        &|x| x[0].layernorm(None, None, 1e-5).unwrap(),
    );
}

#[test]
fn fd_embedding() {
    sweep(
        "embedding",
        |r| vec![rand_param(r, &[5, 3], 1.0)],
        &|x| Tensor::embedding(&x[0], &[4, 0, 4, 2]).unwrap(),
    );
}

#[test]
fn fd_attention() {
    for (name, mask, heads) in [
        ("attention full", AttentionMask::full(4), 2),
        ("attention causal", AttentionMask::causal(4), 1),
        ("attention prefix", AttentionMask::prefix_causal(4, 2), 2),
    ] {
        sweep(
            name,
            |r| {
                vec![
                    rand_param(r, &[4, 4], 1.0),
                    rand_param(r, &[4, 4], 1.0),
                    rand_param(r, &[4, 4], 1.0),
                ]
            },
            &|x| Tensor::attention(&x[0], &x[1], &x[2], &mask, heads).unwrap(),
        );
    }
}

#[test]
fn fd_composite_chain() {
    // embedding -> attention -> layernorm -> matmul -> mean
    sweep(
        "composite",
        |r| {
            vec![
                rand_param(r, &[6, 4], 1.0),
                rand_param(r, &[4, 3], 1.0),
                rand_param(r, &[4], 1.0),
                rand_param(r, &[4], 0.5),
            ]
        },
        &|x| {
            let e = Tensor::embedding(&x[0], &[1, 5, 2]).unwrap();
            let a = Tensor::attention(&e, &e, &e, &AttentionMask::causal(3), 2).unwrap();
            let n = a.layernorm(Some(&x[2]), Some(&x[3]), 1e-5).unwrap();
            n.matmul(&x[1]).unwrap().gelu().mean()
        },
    );
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng::new(77);
        let x = Tensor::new(rng.normals(32), &[4, 8]).unwrap();
        let w = Tensor::new(rng.normals(64), &[8, 8]).unwrap();
        let h = x.matmul(&w).unwrap().gelu().layernorm(None, None, 1e-5).unwrap();
        Tensor::attention(&h, &h, &h, &AttentionMask::causal(4), 2)
            .unwrap()
            .to_vec()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
