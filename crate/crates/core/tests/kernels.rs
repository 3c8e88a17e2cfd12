mod common;

use common::{fd_error, naive_conv, project, rng, uniform};
use padnet::kernels::{conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward};
use padnet::{ConvSpec, Shape4, Tensor4};
use proptest::prelude::*;

#[derive(Clone, Debug)]
struct ConvCase {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..3, 1usize..3, 2usize..8, 2usize..8, any::<u64>())
        .prop_filter_map("kernel must fit", |(n, cin, cout, k, stride, padding, dilation, h, w, seed)| {
            let spec = ConvSpec::new(stride, padding, dilation);
            spec.conv_out(h, k)?;
            spec.conv_out(w, k)?;
            Some(ConvCase {
                n,
                cin,
                cout,
                h,
                w,
                k,
                spec,
                seed,
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// `<conv(x), y> = <x, conv_transpose(y)>` with the same weight.
    #[test]
    fn conv_and_transpose_are_adjoint(c in conv_case()) {
        let mut r = rng(c.seed);
        let x = uniform(Shape4::new(c.n, c.cin, c.h, c.w), &mut r);
        let w = uniform(Shape4::new(c.cout, c.cin, c.k, c.k), &mut r);
        let y_shape = conv2d(&x, &w, None, c.spec).unwrap().shape();
        let y = uniform(y_shape, &mut r);
        let lhs = conv2d(&x, &w, None, c.spec).unwrap().dot(&y);
        // The transpose may come out smaller than `x` when the stride skips
        // trailing rows; the backward input gradient keeps `x`'s shape.
        let (gx, _, _) = conv2d_backward(&x, &w, &y, c.spec);
        prop_assert!((lhs - x.dot(&gx)).abs() < 1e-9 * (1.0 + lhs.abs()));
        let t = conv_transpose2d(&y, &w, None, c.spec).unwrap();
        if t.shape() == x.shape() {
            prop_assert!((lhs - x.dot(&t)).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
        let (gy, _, _) = conv_transpose2d_backward(&y, &w, &x, c.spec);
        if t.shape() == x.shape() {
            prop_assert!(gy.max_abs_diff(&conv2d(&x, &w, None, c.spec).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn conv_matches_naive_loops(c in conv_case()) {
        let mut r = rng(c.seed);
        let x = uniform(Shape4::new(c.n, c.cin, c.h, c.w), &mut r);
        let w = uniform(Shape4::new(c.cout, c.cin, c.k, c.k), &mut r);
        let fast = conv2d(&x, &w, None, c.spec).unwrap();
        prop_assert!(fast.max_abs_diff(&naive_conv(&x, &w, c.spec)) < 1e-12);
    }
}

#[test]
fn transpose_of_stride_two_doubles_resolution() {
    let spec = ConvSpec::new(2, 1, 1);
    let x = Tensor4::full(Shape4::new(1, 2, 4, 4), 1.0);
    let w = Tensor4::full(Shape4::new(2, 3, 4, 4), 0.5);
    let y = conv_transpose2d(&x, &w, Some(&[0.0, 1.0, 2.0]), spec).unwrap();
    assert_eq!(y.shape(), Shape4::new(1, 3, 8, 8));
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn input(shape: Shape4, seed: u64) -> Tensor4 {
    uniform(shape, &mut rng(seed))
}

#[test]
fn conv_ops_match_finite_differences() {
    let spec = ConvSpec::new(2, 1, 2);
    let w = input(Shape4::new(3, 2, 3, 3), 1);
    let x = input(Shape4::new(2, 2, 7, 6), 2);
    let err = fd_error(&x, STEP, |t, v| {
        let wv = t.constant(w.clone());
        let y = t.conv2d(v, wv, None, spec)?;
        project(t, y, 3)
    });
    assert!(err < TOL, "conv input {err}");
    let err = fd_error(&w, STEP, |t, v| {
        let xv = t.constant(x.clone());
        let y = t.conv2d(xv, v, None, spec)?;
        project(t, y, 3)
    });
    assert!(err < TOL, "conv weight {err}");
    let b = input(Shape4::new(1, 3, 1, 1), 4);
    let err = fd_error(&b, STEP, |t, v| {
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let y = t.conv2d(xv, wv, Some(v), spec)?;
        project(t, y, 3)
    });
    assert!(err < TOL, "conv bias {err}");

    let spec = ConvSpec::new(2, 1, 1);
    let wt = input(Shape4::new(2, 3, 4, 4), 5);
    let xt = input(Shape4::new(1, 2, 3, 3), 6);
    let err = fd_error(&xt, STEP, |t, v| {
        let wv = t.constant(wt.clone());
        let y = t.conv_transpose2d(v, wv, None, spec)?;
        project(t, y, 7)
    });
    assert!(err < TOL, "deconv input {err}");
    let err = fd_error(&wt, STEP, |t, v| {
        let xv = t.constant(xt.clone());
        let y = t.conv_transpose2d(xv, v, None, spec)?;
        project(t, y, 7)
    });
    assert!(err < TOL, "deconv weight {err}");
}

#[test]
fn pointwise_and_structural_ops_match_finite_differences() {
    let x = input(Shape4::new(2, 3, 4, 5), 10);
    let cases: Vec<(&str, Box<dyn Fn(&mut padnet::Tape, padnet::Var) -> padnet::Result<padnet::Var>>)> = vec![
        ("sigmoid", Box::new(|t, v| {
            let y = t.sigmoid(v);
            project(t, y, 11)
        })),
        ("silu", Box::new(|t, v| {
            let y = t.silu(v);
            project(t, y, 12)
        })),
        ("resize up", Box::new(|t, v| {
            let y = t.bilinear_resize(v, 7, 9)?;
            project(t, y, 13)
        })),
        ("resize down", Box::new(|t, v| {
            let y = t.bilinear_resize(v, 2, 3)?;
            project(t, y, 14)
        })),
        ("concat", Box::new(|t, v| {
            let other = t.constant(input(Shape4::new(2, 2, 4, 5), 15));
            let y = t.concat_channels(&[other, v, v])?;
            project(t, y, 16)
        })),
        ("add", Box::new(|t, v| {
            let other = t.constant(input(Shape4::new(2, 3, 4, 5), 17));
            let y = t.add(&[v, other, v])?;
            project(t, y, 18)
        })),
        ("mul", Box::new(|t, v| {
            let s = t.sigmoid(v);
            let y = t.mul(s, v)?;
            project(t, y, 19)
        })),
        ("weighted sum", Box::new(|t, v| {
            let a = project(t, v, 20)?;
            let sq = t.mul(v, v)?;
            let b = t.sum_all(sq);
            t.weighted_sum(&[(a, 0.3), (b, -1.7)])
        })),
    ];
    for (name, f) in cases {
        let err = fd_error(&x, STEP, f);
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn loss_ops_match_finite_differences() {
    let shape = Shape4::new(2, 1, 3, 4);
    let mut r = rng(30);
    let target = uniform(shape, &mut r);
    let mut mask = Tensor4::full(shape, 1.0);
    mask.data_mut()[3] = 0.0;
    mask.data_mut()[10] = 0.0;
    let x = input(shape, 31);
    assert!(fd_error(&x, STEP, |t, v| t.masked_squared_error(v, &target, &mask)) < TOL);

    let contour = target.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    assert!(fd_error(&x, STEP, |t, v| t.sigmoid_cross_entropy(v, &contour, &mask, 3.5)) < TOL);

    let n3 = input(Shape4::new(2, 3, 3, 4), 32);
    let tn = input(Shape4::new(2, 3, 3, 4), 33);
    assert!(fd_error(&n3, STEP, |t, v| t.normal_error(v, &tn, &mask)) < TOL);

    let logits = input(Shape4::new(2, 4, 3, 4), 34);
    let labels = common::random_labels(24, 4, Some(5), &mut r);
    assert!(fd_error(&logits, STEP, |t, v| t.softmax_cross_entropy(v, &labels, 255)) < TOL);
}
