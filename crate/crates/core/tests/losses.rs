mod common;

use common::losses::{case, value_and_grad, SHAPE};
use common::{rng, row, uniform};
use padnet::data::IGNORE_LABEL;
use padnet::loss::{loss_contour, loss_parsing, LossKind};
use padnet::{Shape4, Tape, Tensor4};

#[test]
fn zero_at_perfect_prediction() {
    for kind in LossKind::ALL {
        for seed in 0..10 {
            let c = case(kind, seed);
            let (v, _) = value_and_grad(&c, &c.perfect);
            assert!((0.0..1e-12).contains(&v), "{}: {v:e}", kind.name());
        }
    }
}

#[test]
fn masked_pixels_get_zero_gradient() {
    for kind in LossKind::ALL {
        for seed in 0..10 {
            let c = case(kind, seed);
            let pred = uniform(SHAPE.with_channels(c.channels), &mut rng(100 + seed));
            let (v, g) = value_and_grad(&c, &pred);
            assert!(v > 0.0 && v.is_finite());
            let plane = SHAPE.h * SHAPE.w;
            for &i in &c.masked {
                let (n, p) = (i / plane, i % plane);
                for ch in 0..c.channels {
                    assert_eq!(g.plane(n, ch)[p], 0.0, "{} pixel {i}", kind.name());
                }
            }
            // Changing a masked prediction leaves the value untouched.
            let mut moved = pred.clone();
            let i = c.masked[0];
            moved.plane_mut(i / plane, 0)[i % plane] += 100.0;
            assert_eq!(value_and_grad(&c, &moved).0, v, "{}", kind.name());
        }
    }
}

#[test]
fn extreme_predictions_stay_finite() {
    for kind in LossKind::ALL {
        let c = case(kind, 3);
        let shape = SHAPE.with_channels(c.channels);
        let sign = uniform(shape, &mut rng(4)).map(f64::signum);
        for scale in [1e4, 1e8, 1e-12] {
            let (v, g) = value_and_grad(&c, &sign.map(|s| s * scale));
            assert!(v.is_finite() && g.all_finite(), "{} at scale {scale:e}", kind.name());
        }
        let (v, g) = value_and_grad(&c, &Tensor4::zeros(shape));
        assert!(v.is_finite() && g.all_finite(), "{} at zero", kind.name());
    }
}

#[test]
fn uniform_softmax_costs_ln_2() {
    let mut tape = Tape::new();
    let z = tape.param(Tensor4::zeros(Shape4::new(1, 2, 1, 1)));
    let l = loss_parsing(&mut tape, z, &common::labels(1, 1, vec![0]), IGNORE_LABEL).unwrap();
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-6);

    let mut tape = Tape::new();
    let z = tape.param(Tensor4::from_vec(Shape4::new(1, 2, 1, 1), vec![40.0, -40.0]).unwrap());
    let l = loss_parsing(&mut tape, z, &common::labels(1, 1, vec![0]), IGNORE_LABEL).unwrap();
    assert!(tape.value(l).item() < 1e-15);
}

#[test]
fn contour_hand_values() {
    let eval = |logits: &[f64], target: &[f64], pw: f64| {
        let mut tape = Tape::new();
        let x = tape.param(row(logits));
        let l = loss_contour(&mut tape, x, &row(target), &row(&vec![1.0; logits.len()]), pw).unwrap();
        tape.value(l).item()
    };
    assert!((eval(&[0.0, 0.0], &[1.0, 0.0], 1.0) - std::f64::consts::LN_2).abs() < 1e-6);
    assert!((eval(&[1.0], &[1.0], 1.0) - 0.313262).abs() < 1e-6);
    assert!(eval(&[40.0, -40.0], &[1.0, 0.0], 1.0) < 1e-15);
}
