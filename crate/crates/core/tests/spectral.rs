use gridfield_core::{Kernel, TorusGrid};
use std::f64::consts::PI;

/// `J1(x) = (1/π) ∫_0^π cos(τ - x sin τ) dτ` by composite Simpson.
fn bessel_j1(x: f64) -> f64 {
    let m = 4000;
    let h = PI / m as f64;
    let f = |t: f64| (t - x * t.sin()).cos();
    let mut acc = f(0.0) + f(PI);
    for i in 1..m {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    acc * h / 3.0 / PI
}

#[test]
fn quadrature_oracle_agrees_with_libm() {
    for x in [0.1, 1.0, 3.8317, 6.0, 10.0] {
        assert!((bessel_j1(x) - libm::j1(x)).abs() < 1e-12, "x = {x}");
    }
}

#[test]
fn ball_indicator_transform_matches_the_closed_form() {
    let n = 256;
    let grid = TorusGrid::new(n).unwrap();
    let r = 0.2;
    let dx = grid.dx();
    let mut offsets = vec![0.0; grid.cells()];
    for ox in 0..n {
        let x = if ox > n / 2 { ox as f64 - n as f64 } else { ox as f64 } * dx;
        for oy in 0..n {
            let y = if oy > n / 2 { oy as f64 - n as f64 } else { oy as f64 } * dx;
            if x.hypot(y) <= r {
                offsets[grid.index(ox, oy)] = 1.0;
            }
        }
    }
    let kernel = Kernel::from_offsets(grid, offsets).unwrap();
    let table = kernel.spectral_table(5).unwrap();
    let scale = PI * r * r;
    let mut worst = 0.0f64;
    for (k1, k2, w) in table.iter() {
        let k = 2.0 * PI * ((k1 * k1 + k2 * k2) as f64).sqrt();
        if k > 2.0 * PI * 5.0 {
            continue;
        }
        let exact = if k == 0.0 { scale } else { 2.0 * PI * r * bessel_j1(r * k) / k };
        worst = worst.max((w - exact).abs() / scale);
    }
    // Relative to the zero mode, which is the transform's magnitude scale.
    assert!(worst < 2.0 * dx, "worst relative error {worst:.3e}");
}

#[test]
fn constant_kernel_has_no_nonzero_modes() {
    let grid = TorusGrid::new(16).unwrap();
    let kernel = Kernel::from_offsets(grid, vec![2.5; grid.cells()]).unwrap();
    for (k1, k2, w) in kernel.spectral_table(7).unwrap().iter() {
        if (k1, k2) == (0, 0) {
            assert!((w - 2.5).abs() < 1e-12);
        } else {
            assert!(w.abs() < 1e-12, "({k1}, {k2}): {w}");
        }
    }
}
