use hyperfed_core::physics::{
    apply_low_dose, back_project, fbp_reconstruct, forward_project, sparse_view_subsample,
    FanBeamGeometry, FilterKind, Projector, Sinogram,
};
use hyperfed_core::presets;
use hyperfed_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn geometry(n: usize, views: usize, bins: usize) -> FanBeamGeometry {
    // 1 mm pixels, magnification 2, detector wide enough for the whole grid.
    FanBeamGeometry {
        n_views: views,
        n_bins: bins,
        pixel_length_mm: 1.0,
        bin_length_mm: 2.0 * 1.5 * n as f64 / bins as f64,
        source_to_center_mm: 2.0 * n as f64,
        detector_to_center_mm: 2.0 * n as f64,
        incident_intensity: 1e5,
        image_size: n,
    }
}

fn random_image(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[n, n], |_| rng.random_range(-1.0..1.0))
}

fn random_sino(g: &FanBeamGeometry, rng: &mut ChaCha8Rng) -> Sinogram<f64> {
    Sinogram::new(
        Tensor::from_fn(&[g.n_views, g.n_bins], |_| rng.random_range(-1.0..1.0)),
        g.clone(),
    )
    .unwrap()
}

/// Area-fraction rasterization of a centered disk by 16x16 supersampling.
fn disk(n: usize, pixel: f64, radius: f64, mu: f64) -> Tensor<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let ss = 16;
    Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let mut hits = 0;
        for a in 0..ss {
            for b in 0..ss {
                let x = (j as f64 - c - 0.5 + (b as f64 + 0.5) / ss as f64) * pixel;
                let y = (c - i as f64 + 0.5 - (a as f64 + 0.5) / ss as f64) * pixel;
                if x * x + y * y <= radius * radius {
                    hits += 1;
                }
            }
        }
        mu * hits as f64 / (ss * ss) as f64
    })
}

fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn zero_image_and_zero_sinogram_map_to_zero() {
    let g = geometry(16, 24, 31);
    let s = forward_project(&Tensor::<f64>::zeros(&[16, 16]), &g).unwrap();
    assert!(s.data().data().iter().all(|&v| v == 0.0));
    let z = Sinogram::new(Tensor::<f64>::zeros(&[24, 31]), g.clone()).unwrap();
    assert!(back_project(&z, &g).unwrap().data().iter().all(|&v| v == 0.0));
    let f = fbp_reconstruct(&z, &g, FilterKind::RamLak).unwrap();
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn image_size_mismatch_is_a_dimension_error() {
    let g = geometry(16, 24, 31);
    assert!(forward_project(&Tensor::<f64>::zeros(&[8, 8]), &g).is_err());
    let other = geometry(16, 12, 31);
    let s = Sinogram::new(Tensor::<f64>::zeros(&[24, 31]), g).unwrap();
    assert!(back_project(&s, &other).is_err());
}

#[test]
fn central_ray_through_uniform_disk_matches_chord_length() {
    let (n, r, mu) = (128, 40.0, 0.7);
    let g = geometry(n, 8, 257);
    let s = forward_project(&disk(n, 1.0, r, mu), &g).unwrap();
    let central = s.data().data()[128];
    let expected = 2.0 * r * mu;
    assert!(
        ((central - expected) / expected).abs() < 0.01,
        "central ray {central} vs {expected}"
    );
}

#[test]
fn dense_matrix_reproduces_projector_and_backprojector() {
    let n = 8;
    let g = geometry(n, 12, 17);
    let rows = g.n_views * g.n_bins;
    let mut dense = vec![0.0; rows * n * n];
    for col in 0..n * n {
        let unit = Tensor::from_fn(&[n, n], |i| if i == col { 1.0 } else { 0.0 });
        let s = forward_project(&unit, &g).unwrap();
        for (r, v) in s.data().data().iter().enumerate() {
            dense[r * n * n + col] = *v;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_image(n, &mut rng);
    let ax = forward_project(&x, &g).unwrap();
    let dense_ax: Vec<f64> = (0..rows)
        .map(|r| (0..n * n).map(|c| dense[r * n * n + c] * x.data()[c]).sum())
        .collect();
    let err: f64 = ax.data().data().iter().zip(&dense_ax).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err / ax.data().norm() < 1e-10);

    let y = random_sino(&g, &mut rng);
    let aty = back_project(&y, &g).unwrap();
    let dense_aty: Vec<f64> = (0..n * n)
        .map(|c| (0..rows).map(|r| dense[r * n * n + c] * y.data().data()[r]).sum())
        .collect();
    let err: f64 = aty.data().iter().zip(&dense_aty).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err / aty.norm() < 1e-10);
}

#[test]
fn backprojector_is_the_adjoint() {
    let g = geometry(16, 30, 41);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_image(16, &mut rng);
    let y = random_sino(&g, &mut rng);
    let lhs = inner(forward_project(&x, &g).unwrap().data(), y.data());
    let rhs = inner(&x, &back_project(&y, &g).unwrap());
    assert!(((lhs - rhs) / lhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn adjoint_holds_on_every_desk_scaled_preset() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for g in presets::all_desk_scaled(64).unwrap() {
        let x = random_image(64, &mut rng);
        let y = random_sino(&g, &mut rng);
        let ax = forward_project(&x, &g).unwrap();
        let lhs = inner(ax.data(), y.data());
        let rhs = inner(&x, &back_project(&y, &g).unwrap());
        let rel = (lhs - rhs).abs() / (ax.data().norm() * y.data().norm());
        assert!(rel < 1e-8, "{g:?}: {rel}");
    }
}

#[test]
fn projector_is_linear_and_preserves_non_negativity() {
    let g = geometry(16, 20, 33);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (x1, x2) = (random_image(16, &mut rng), random_image(16, &mut rng));
    let (a, b) = (0.7, -1.3);
    let mut combo = x1.clone();
    combo.scale(a);
    combo.axpy(b, &x2).unwrap();
    let lhs = forward_project(&combo, &g).unwrap();
    let mut rhs = forward_project(&x1, &g).unwrap().data().clone();
    rhs.scale(a);
    rhs.axpy(b, forward_project(&x2, &g).unwrap().data()).unwrap();
    let mut diff = lhs.data().clone();
    diff.axpy(-1.0, &rhs).unwrap();
    assert!(diff.norm() / rhs.norm() < 1e-10);

    let pos = x1.map(f64::abs);
    assert!(forward_project(&pos, &g).unwrap().data().data().iter().all(|&v| v >= 0.0));
}

fn masked_rmse(img: &Tensor<f64>, truth: &Tensor<f64>, n: usize, radius_px: f64) -> f64 {
    let c = (n as f64 - 1.0) / 2.0;
    let (mut acc, mut cnt) = (0.0, 0);
    for i in 0..n {
        for j in 0..n {
            let (dx, dy) = (j as f64 - c, i as f64 - c);
            if (dx * dx + dy * dy).sqrt() <= radius_px {
                acc += (img.data()[i * n + j] - truth.data()[i * n + j]).powi(2);
                cnt += 1;
            }
        }
    }
    (acc / cnt as f64).sqrt()
}

#[test]
fn fbp_of_uniform_disk_is_accurate_inside_the_disk() {
    let (n, r, mu) = (128, 40.0, 0.02);
    let g = geometry(n, 360, 384);
    let truth = disk(n, 1.0, r, mu);
    let s = forward_project(&truth, &g).unwrap();
    for kind in [FilterKind::RamLak, FilterKind::Hann] {
        let rec = fbp_reconstruct(&s, &g, kind).unwrap();
        let rmse = masked_rmse(&rec, &truth, n, 0.9 * r);
        assert!(rmse < 0.03 * mu, "{kind:?}: rmse {rmse}");
    }
}

#[test]
fn sparse_view_fbp_has_more_error_than_dense_view() {
    let n = 128;
    let truth = hyperfed_core::phantom::shepp_logan(n).unwrap();
    let rmse_for = |views| {
        let g = geometry(n, views, 384);
        let s = forward_project(&truth, &g).unwrap();
        let rec = fbp_reconstruct(&s, &g, FilterKind::RamLak).unwrap();
        masked_rmse(&rec, &truth, n, n as f64 / 2.0)
    };
    let (sparse, dense, mid) = (rmse_for(88), rmse_for(1024), rmse_for(108));
    assert!(sparse > dense, "88 views {sparse} vs 1024 views {dense}");
    assert!(dense < mid, "1024 views {dense} vs 108 views {mid}");
}

#[test]
fn low_dose_examples() {
    let g = geometry(8, 6, 9);
    let zero = Sinogram::new(Tensor::<f64>::zeros(&[6, 9]), g.clone()).unwrap();
    let hi = apply_low_dose(&zero, 1e12, 3).unwrap();
    assert!(hi.data().data().iter().all(|v| v.abs() < 1e-4));

    let ones = Sinogram::new(Tensor::<f64>::full(&[6, 9], 1.0), g.clone()).unwrap();
    assert_eq!(apply_low_dose(&ones, 1e4, 9).unwrap(), apply_low_dose(&ones, 1e4, 9).unwrap());
    assert_ne!(apply_low_dose(&ones, 1e4, 9).unwrap(), apply_low_dose(&ones, 1e4, 10).unwrap());
    assert!(apply_low_dose(&ones, 0.0, 1).is_err());
    assert!(apply_low_dose(&ones, -5.0, 1).is_err());

    // Extreme attenuation: counts clamp to one photon instead of log(0).
    let opaque = Sinogram::new(Tensor::<f64>::full(&[6, 9], 1e3), g).unwrap();
    let out = apply_low_dose(&opaque, 100.0, 1).unwrap();
    assert!(out.data().data().iter().all(|&v| (v - 100f64.ln()).abs() < 1e-12));
}

#[test]
fn low_dose_transmission_mean_matches_monte_carlo_moment() {
    let g = FanBeamGeometry {
        n_views: 1000,
        n_bins: 100,
        ..geometry(8, 1, 1)
    };
    let s = Sinogram::new(Tensor::<f64>::full(&[1000, 100], 1.0), g).unwrap();
    let out = apply_low_dose(&s, 1e5, 21).unwrap();
    let mean: f64 = out.data().data().iter().map(|p| (-p).exp()).sum::<f64>() / 1e5;
    assert!(((mean - (-1f64).exp()) / (-1f64).exp()).abs() < 0.01);
}

#[test]
fn sparse_view_subsampling() {
    let g = geometry(16, 1024, 33);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_image(16, &mut rng).map(f64::abs);
    let full = forward_project(&x, &g).unwrap();
    assert_eq!(sparse_view_subsample(&full, 1024).unwrap(), full);

    let sub = sparse_view_subsample(&full, 128).unwrap();
    assert_eq!(sub.geometry().n_views, 128);
    for v in 0..128 {
        assert_eq!(
            &sub.data().data()[v * 33..(v + 1) * 33],
            &full.data().data()[v * 8 * 33..(v * 8 + 1) * 33]
        );
    }
    let direct = forward_project(&x, sub.geometry()).unwrap();
    let mut diff = direct.data().clone();
    diff.axpy(-1.0, sub.data()).unwrap();
    assert!(diff.norm() / sub.data().norm() < 1e-12);

    assert!(sparse_view_subsample(&full, 2048).is_err());
    assert!(sparse_view_subsample(&full, 100).is_err());
}

#[test]
fn power_iteration_bounds_the_rayleigh_quotient() {
    let g = geometry(16, 24, 31);
    let p = Projector::new(&g).unwrap();
    let lam = p.norm_sq_estimate(20);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..5 {
        let x = random_image(16, &mut rng);
        let ax = p.project(&x).unwrap();
        let q = inner(&ax, &ax) / inner(&x, &x);
        assert!(q <= lam * 1.0001);
    }
}
