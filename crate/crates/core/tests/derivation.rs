use padnet::data::{contours_from_semantics, generate_scene, normals_from_depth};
use padnet::{LabelMap, SceneConfig, Shape4, Tensor4};

fn depth(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor4 {
    let mut t = Tensor4::zeros(Shape4::new(1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            t.set(0, 0, y, x, f(y, x));
        }
    }
    t
}

fn normal_at(n: &Tensor4, y: usize, x: usize) -> [f64; 3] {
    [n.at(0, 0, y, x), n.at(0, 1, y, x), n.at(0, 2, y, x)]
}

#[test]
fn constant_depth_faces_the_camera() {
    let d = depth(5, 6, |_, _| 2.5);
    let (n, mask) = normals_from_depth(&d, &Tensor4::full(d.shape(), 1.0));
    assert_eq!(mask.sum(), 30.0);
    for y in 0..5 {
        for x in 0..6 {
            assert_eq!(normal_at(&n, y, x), [0.0, 0.0, 1.0]);
        }
    }
}

#[test]
fn unit_ramp_tilts_forty_five_degrees() {
    let d = depth(4, 7, |_, x| x as f64);
    let (n, _) = normals_from_depth(&d, &Tensor4::full(d.shape(), 1.0));
    for y in 0..4 {
        for x in 0..7 {
            let v = normal_at(&n, y, x);
            for (a, b) in v.iter().zip([-0.707107, 0.0, 0.707107]) {
                assert!((a - b).abs() < 1e-6, "({y},{x}): {v:?}");
            }
        }
    }
}

#[test]
fn normals_are_unit_length_on_scenes() {
    let s = generate_scene(3, &SceneConfig::default()).unwrap();
    let plane = s.height() * s.width();
    for i in 0..plane {
        let len: f64 = (0..3).map(|c| s.normal.plane(0, c)[i].powi(2)).sum();
        if s.normal_mask.data()[i] != 0.0 {
            assert!((len - 1.0).abs() < 1e-12);
        } else {
            assert_eq!(len, 0.0);
        }
    }
}

#[test]
fn vertical_split_marks_two_columns() {
    for (w, c) in [(8, 4), (5, 1), (6, 5)] {
        let mut labels = LabelMap::new(4, w, 0);
        for y in 0..4 {
            for x in c..w {
                labels.set(0, y, x, 2);
            }
        }
        let contour = contours_from_semantics(&labels);
        for y in 0..4 {
            for x in 0..w {
                let expected = if x + 1 == c || x == c { 1.0 } else { 0.0 };
                assert_eq!(contour.at(0, 0, y, x), expected, "w {w}, split {c}, ({y},{x})");
            }
        }
    }
}

#[test]
fn uniform_labels_have_no_contours() {
    let contour = contours_from_semantics(&LabelMap::new(5, 5, 3));
    assert_eq!(contour.sum(), 0.0);
}
