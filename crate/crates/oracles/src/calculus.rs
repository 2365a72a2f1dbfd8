//! Finite-difference derivatives.

/// Central-difference gradient of `f` at `x` with step `h` per coordinate.
pub fn gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + h;
            let fp = f(&p);
            p[k] = orig - h;
            let fm = f(&p);
            p[k] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian (`rows = outputs`) of `f: R^n → R^m`.
pub fn jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let m = f(x).len();
    let mut cols = Vec::with_capacity(x.len());
    let mut p = x.to_vec();
    for k in 0..x.len() {
        let orig = p[k];
        p[k] = orig + h;
        let fp = f(&p);
        p[k] = orig - h;
        let fm = f(&p);
        p[k] = orig;
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
    }
    (0..m).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

/// Determinant by cofactor expansion.
pub fn determinant(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    match n {
        0 => 1.0,
        1 => a[0][0],
        2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
        _ => (0..n)
            .map(|j| {
                let minor: Vec<Vec<f64>> = a[1..].iter().map(|row| row.iter().enumerate().filter(|&(c, _)| c != j).map(|(_, &v)| v).collect()).collect();
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * a[0][j] * determinant(&minor)
            })
            .sum(),
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
