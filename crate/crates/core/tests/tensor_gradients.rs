mod common;

use common::{gradient_check, random_tensor, FD_TOL};
use proptest::prelude::*;
use svg_core::tensor::{Graph, Tensor, Unary};

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = random_tensor(&[3, 4], 1);
    let b = random_tensor(&[4, 5], 2);
    let err = gradient_check(&[a, b], &|g, v| {
        let p = g.matmul(v[0], v[1]).unwrap();
        g.sum(p)
    });
    assert!(err < FD_TOL, "max relative error {err}");
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let x = random_tensor(&[2, 1, 4, 4], 3);
    let k = random_tensor(&[3, 1, 2, 2], 4);
    let w = random_tensor(&[2, 3, 3, 3], 5);
    // weighted sum so the upstream gradient is not uniform
    let err = gradient_check(&[x, k, w], &|g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 0).unwrap();
        let p = g.mul(y, v[2]).unwrap();
        g.sum(p)
    });
    assert!(err < FD_TOL, "max relative error {err}");
}

#[test]
fn strided_padded_conv_with_bias_gradient() {
    let x = random_tensor(&[2, 2, 6, 6], 6);
    let k = random_tensor(&[3, 2, 4, 4], 7);
    let b = random_tensor(&[3], 8);
    let err = gradient_check(&[x, k, b], &|g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        let y = g.square(y);
        g.sum(y)
    });
    assert!(err < FD_TOL, "max relative error {err}");
}

#[test]
fn wide_conv_gradient_matches_finite_differences() {
    // enough filters to take the im2col + gemm path
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = random_tensor(&[2, 3, 6, 6], 30 + stride as u64);
        let k = random_tensor(&[6, 3, 4, 4], 31);
        let b = random_tensor(&[6], 32);
        let err = gradient_check(&[x, k, b], &|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            let y = g.square(y);
            g.sum(y)
        });
        assert!(err < FD_TOL, "stride {stride} pad {pad}: max relative error {err}");
    }
}

#[test]
fn conv_paths_agree() {
    // splitting the filter bank below and above the direct-path threshold
    // must reproduce the full convolution
    let x = random_tensor(&[3, 2, 7, 7], 33);
    let k = random_tensor(&[8, 2, 3, 3], 34);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let full = g.conv2d(xv, kv, None, stride, pad).unwrap();
        for f in 0..8 {
            let kf = g.slice(kv, 0, f, 1).unwrap();
            let one = g.conv2d(xv, kf, None, stride, pad).unwrap();
            let part = g.slice(full, 1, f, 1).unwrap();
            for (a, b) in g.value(one).data().iter().zip(g.value(part).data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn upsample_gradient_matches_finite_differences() {
    let x = random_tensor(&[2, 2, 3, 3], 9);
    let w = random_tensor(&[2, 2, 6, 6], 10);
    let err = gradient_check(&[x, w], &|g, v| {
        let y = g.upsample2x(v[0]).unwrap();
        let p = g.mul(y, v[1]).unwrap();
        g.sum(p)
    });
    assert!(err < FD_TOL, "max relative error {err}");
}

#[test]
fn composite_conv_tanh_linear_gradient() {
    let x = random_tensor(&[2, 1, 5, 5], 11);
    let k = random_tensor(&[2, 1, 3, 3], 12);
    let w = random_tensor(&[4, 18], 13);
    let b = random_tensor(&[4], 14);
    let err = gradient_check(&[x, k, w, b], &|g, v| {
        let c = g.conv2d(v[0], v[1], None, 1, 0).unwrap();
        let c = g.tanh(c);
        let flat = g.reshape(c, &[2, 18]).unwrap();
        let y = g.linear(flat, v[2], Some(v[3])).unwrap();
        g.sum(y)
    });
    assert!(err < FD_TOL, "max relative error {err}");
}

#[test]
fn every_unary_kind_gradient() {
    for (i, kind) in [
        Unary::Tanh,
        Unary::Sigmoid,
        Unary::LeakyRelu,
        Unary::Exp,
        Unary::Log,
        Unary::Square,
    ]
    .into_iter()
    .enumerate()
    {
        let mut x = random_tensor(&[3, 4], 20 + i as u64);
        if kind == Unary::Log {
            x = x.map(|v| v.abs() + 0.5);
        }
        let w = random_tensor(&[3, 4], 40 + i as u64);
        let err = gradient_check(&[x, w], &|g, v| {
            let y = g.unary(kind, v[0]);
            let p = g.mul(y, v[1]).unwrap();
            g.sum(p)
        });
        assert!(err < FD_TOL, "{kind:?}: max relative error {err}");
    }
}

#[test]
fn concat_slice_broadcast_gradient() {
    let a = random_tensor(&[2, 3, 2], 50);
    let b = random_tensor(&[2, 1, 2], 51);
    let bias = random_tensor(&[4, 2], 52);
    let w = random_tensor(&[2, 2, 2], 53);
    let err = gradient_check(&[a, b, bias, w], &|g, v| {
        let c = g.concat(&[v[0], v[1]], 1).unwrap();
        let c = g.add(c, v[2]).unwrap();
        let s = g.slice(c, 1, 1, 2).unwrap();
        let s = g.mul(s, v[3]).unwrap();
        let s = g.sub(s, v[3]).unwrap();
        let s = g.scale(s, 1.7);
        let s = g.add_scalar(s, 0.3);
        let s = g.square(s);
        g.sum(s)
    });
    assert!(err < FD_TOL, "max relative error {err}");
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[3, 2, 8, 8], 60));
        let k = g.constant(random_tensor(&[4, 2, 4, 4], 61));
        let y = g.conv2d(x, k, None, 2, 1).unwrap();
        let y = g.upsample2x(y).unwrap();
        let y = g.sigmoid(y);
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn upsample_sum_is_four_times_input(data in proptest::collection::vec(-10.0f64..10.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3, 2, 2], data).unwrap());
        let y = g.upsample2x(x).unwrap();
        let (sx, sy) = (g.value(x).sum(), g.value(y).sum());
        prop_assert!((sy - 4.0 * sx).abs() <= 1e-9 * (1.0 + sx.abs()));
    }
}
