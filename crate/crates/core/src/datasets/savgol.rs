use crate::error::{DsdpError, Result};

/// Solves `m·x = rhs` for a small dense system by Gaussian elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (rhs[r] - s) / m[r][r];
    }
    Some(x)
}

/// Weights `w` such that `Σ_j w_j y_j` is the least-squares polynomial of
/// degree `order` through `y_0..y_{window-1}` evaluated at position `at`.
fn weights(window: usize, order: usize, at: usize) -> Vec<f64> {
    let centre = (window / 2) as f64;
    let x = |j: usize| j as f64 - centre;
    let n = order + 1;
    let mut ata = vec![vec![0.0; n]; n];
    for j in 0..window {
        for r in 0..n {
            for c in 0..n {
                ata[r][c] += x(j).powi((r + c) as i32);
            }
        }
    }
    // Solve (AᵀA) u = e(at), then w_j = Σ_k u_k x_j^k.
    let e: Vec<f64> = (0..n).map(|k| x(at).powi(k as i32)).collect();
    let u = solve(ata, e).expect("Vandermonde normal matrix is non-singular for order < window");
    (0..window)
        .map(|j| (0..n).map(|k| u[k] * x(j).powi(k as i32)).sum())
        .collect()
}

/// Savitzky-Golay smoothing. Interior points use the centred window; the
/// first and last `window/2` points are evaluated from the polynomial fitted
/// to the first and last full window.
pub fn savgol(series: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window == 0 {
        return Err(DsdpError::Precondition(format!(
            "savgol window must be odd, got {window}"
        )));
    }
    if order >= window {
        return Err(DsdpError::Precondition(format!(
            "savgol polyorder {order} must be below window {window}"
        )));
    }
    let n = series.len();
    if n < window {
        return Err(DsdpError::Precondition(format!(
            "series of length {n} shorter than savgol window {window}"
        )));
    }
    let half = window / 2;
    let dot = |w: &[f64], start: usize| -> f64 {
        w.iter()
            .zip(&series[start..start + window])
            .map(|(a, b)| a * b)
            .sum()
    };
    let centre = weights(window, order, half);
    let mut out = vec![0.0; n];
    for i in half..n - half {
        out[i] = dot(&centre, i - half);
    }
    for i in 0..half {
        out[i] = dot(&weights(window, order, i), 0);
        let j = window - 1 - i;
        out[n - 1 - i] = dot(&weights(window, order, j), n - window);
    }
    Ok(out)
}
