mod common;

use common::{max_rel_error, random, rng};
use hyperfed_core::film::SiteLayout;
use hyperfed_core::hypernet::*;
use hyperfed_core::{presets, Error};
use hyperfed_tensor::Tensor;

fn bounds() -> GeometryBounds {
    GeometryBounds::new(
        [384.0, 315.0, 1.20, 2.20, 400.0, 300.0, 5e4],
        [512.0, 368.0, 1.40, 3.00, 595.0, 491.0, 1e6],
    )
    .unwrap()
}

#[test]
fn endpoints_map_to_zero_and_one() {
    let b = bounds();
    assert_eq!(encode_geometry(&b.min, &b).unwrap().values(), &[0.0; 7]);
    assert_eq!(encode_geometry(&b.max, &b).unwrap().values(), &[1.0; 7]);
}

#[test]
fn interior_pixel_length_and_log_intensity() {
    let b = bounds();
    let raw = [512.0, 368.0, 1.33, 2.57, 595.0, 491.0, 5e4];
    let g = encode_geometry(&raw, &b).unwrap();
    assert!((g.values()[2] - 0.65).abs() < 1e-12);
    assert_eq!(g.values()[6], 0.0);
    // Log-domain views: (ln 448 − ln 384) / (ln 512 − ln 384).
    let mut mid = raw;
    mid[0] = 448.0;
    let expect = (448f64 / 384.0).ln() / (512f64 / 384.0).ln();
    assert!((encode_geometry(&mid, &b).unwrap().values()[0] - expect).abs() < 1e-12);
    mid[6] = (5e4f64 * 1e6).sqrt();
    assert!((encode_geometry(&mid, &b).unwrap().values()[6] - 0.5).abs() < 1e-12);
}

#[test]
fn values_outside_bounds_are_rejected() {
    let b = bounds();
    let mut raw = b.min;
    raw[2] = 1.19;
    assert!(matches!(encode_geometry(&raw, &b), Err(Error::Range(_))));
    raw[2] = 1.2;
    raw[6] = 2e6;
    assert!(matches!(encode_geometry(&raw, &b), Err(Error::Range(_))));
    assert!(GeometryBounds::new(b.max, b.min).is_err());
}

#[test]
fn preset_table_encodes_injectively_into_the_unit_cube() {
    for grid in [64, presets::REFERENCE_GRID] {
        let all = presets::all_desk_scaled(grid).unwrap();
        let b = GeometryBounds::from_geometries(&all).unwrap();
        let encoded: Vec<_> = all.iter().map(|g| *encode_geometry(&g.raw_vector(), &b).unwrap().values()).collect();
        for (i, a) in encoded.iter().enumerate() {
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            for c in &encoded[i + 1..] {
                assert_ne!(a, c);
            }
        }
    }
}

#[test]
fn zero_second_layer_is_identity_modulation() {
    let layout = SiteLayout(vec![4, 4, 1]);
    let xi = HyperParams::<f64>::init(64, &layout, &mut rng(1)).unwrap();
    assert_eq!(xi.output_width(), layout.film_width());
    let b = bounds();
    let g = encode_geometry(&[448.0, 330.0, 1.3, 2.5, 500.0, 400.0, 1e5], &b).unwrap();
    let film = hyper_forward(&g, &xi, &layout).unwrap();
    film.check(&layout).unwrap();
    for (gamma, beta) in &film.sites {
        assert!(gamma.data().iter().all(|&v| v == 1.0));
        assert!(beta.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn output_is_deterministic_and_shape_independent_of_g() {
    let layout = SiteLayout(vec![3, 2]);
    let mut r = rng(2);
    let mut xi = HyperParams::<f64>::init(16, &layout, &mut r).unwrap();
    xi.w2 = random(xi.w2.shape(), &mut r, 0.5);
    let b = bounds();
    let g1 = encode_geometry(&b.min, &b).unwrap();
    let g2 = encode_geometry(&[448.0, 330.0, 1.3, 2.5, 500.0, 400.0, 1e5], &b).unwrap();
    let f1 = hyper_forward(&g1, &xi, &layout).unwrap();
    assert_eq!(f1, hyper_forward(&g1, &xi, &layout).unwrap());
    let f2 = hyper_forward(&g2, &xi, &layout).unwrap();
    assert_ne!(f1, f2);
    for (a, c) in f1.sites.iter().zip(&f2.sites) {
        assert_eq!(a.0.shape(), c.0.shape());
        assert_eq!(a.1.shape(), c.1.shape());
    }
}

#[test]
fn gradient_of_film_sum_matches_finite_differences() {
    let layout = SiteLayout(vec![3, 2]);
    let mut r = rng(3);
    let b = bounds();
    let g = encode_geometry(&[448.0, 330.0, 1.3, 2.5, 500.0, 400.0, 1e5], &b).unwrap();
    let hidden = 6;
    let inputs = vec![
        random(&[hidden, GEOMETRY_DIM], &mut r, 1.0),
        Tensor::from_fn(&[hidden], |i| 0.3 + 0.1 * i as f64),
        random(&[layout.film_width(), hidden], &mut r, 1.0),
        random(&[layout.film_width()], &mut r, 1.0),
    ];
    let build = |tape: &mut hyperfed_tensor::Tape<f64>, v: &[hyperfed_tensor::Var]| {
        let vars = HyperVars {
            w1: v[0],
            b1: v[1],
            w2: v[2],
            b2: v[3],
        };
        let film = hyper_forward_tape(tape, &vars, &g, &layout)?;
        let mut acc = None;
        for (gamma, beta) in film.0 {
            let s = tape.sum(gamma)?;
            let t = tape.sum(beta)?;
            let st = tape.add(s, t)?;
            acc = Some(match acc {
                None => st,
                Some(a) => tape.add(a, st)?,
            });
        }
        Ok(acc.unwrap())
    };
    let err = max_rel_error(&build, &inputs);
    assert!(err < 1e-4, "relative error {err}");
}
