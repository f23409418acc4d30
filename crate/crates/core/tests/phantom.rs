use hyperfed_core::phantom::{shepp_logan, SHEPP_LOGAN};

/// (intensity, a, b, x0, y0, phi_deg) for the modified Shepp-Logan head.
const TABLE: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

/// Independent rasterizer: rotates the pixel into the ellipse frame with an
/// explicit rotation matrix and tests the quadratic form.
fn rasterize_oracle(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            let x = (2.0 * col as f64 + 1.0 - n as f64) / n as f64;
            let y = (n as f64 - 1.0 - 2.0 * row as f64) / n as f64;
            let mut v = 0.0;
            for e in TABLE {
                let phi = e[5] * std::f64::consts::PI / 180.0;
                let r = [[phi.cos(), phi.sin()], [-phi.sin(), phi.cos()]];
                let (dx, dy) = (x - e[3], y - e[4]);
                let u = r[0][0] * dx + r[0][1] * dy;
                let w = r[1][0] * dx + r[1][1] * dy;
                if u * u / (e[1] * e[1]) + w * w / (e[2] * e[2]) <= 1.0 {
                    v += e[0];
                }
            }
            out[row * n + col] = v.clamp(0.0, 1.0);
        }
    }
    out
}

#[test]
fn matches_independent_rasterizer() {
    let p = shepp_logan(64).unwrap();
    let oracle = rasterize_oracle(64);
    let (s1, s2): (f64, f64) = (p.data().iter().sum(), oracle.iter().sum());
    assert!((s1 - s2).abs() < 1e-9, "{s1} vs {s2}");
    for (a, b) in p.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn mirror_symmetric_away_from_off_axis_ellipses() {
    let n = 128;
    let p = shepp_logan(n).unwrap();
    // Ellipses 3/4 and 8/10 are not mirror images of each other; skip any
    // pixel that either they or their mirrors touch.
    let off_axis = [2usize, 3, 7, 9];
    let mut sq = 0.0;
    let mut count = 0;
    for i in 0..n {
        for j in 0..n {
            let x = (j as f64 - (n as f64 - 1.0) / 2.0) / (n as f64 / 2.0);
            let y = ((n as f64 - 1.0) / 2.0 - i as f64) / (n as f64 / 2.0);
            let touched = off_axis
                .iter()
                .any(|&k| SHEPP_LOGAN[k].contains(x, y) || SHEPP_LOGAN[k].contains(-x, y));
            if touched {
                continue;
            }
            let d = p.data()[i * n + j] - p.data()[i * n + (n - 1 - j)];
            sq += d * d;
            count += 1;
        }
    }
    assert!(count > n * n / 2);
    assert!((sq / count as f64).sqrt() < 1e-12);
}
