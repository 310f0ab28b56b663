//! Distance from a point to the convex hull of a small point set, computed as
//! the minimum-norm point of the translated set via Wolfe's active-set method.
//!
//! The instances this crate produces are tiny (at most one point per protocol
//! participant, low dimension), so the affine subproblems are solved directly
//! by Gaussian elimination and the whole computation runs to roughly machine
//! precision. All tie-breaks pick the lowest index, keeping the result
//! bit-deterministic.

use super::Point;

const MAX_MAJOR_CYCLES: usize = 512;
const WEIGHT_FLOOR: f64 = 1e-14;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `min ||B w||` subject to `sum w = 1` with free-signed weights over
/// the columns selected by `corral`, by eliminating the KKT system
/// `[[0, 1^T], [1, G]] [lambda; w] = [1; 0]` where `G` is the Gram matrix.
/// Returns `None` when the system is numerically singular (degenerate corral).
fn affine_minimizer(b: &[Vec<f64>], corral: &[usize]) -> Option<Vec<f64>> {
    let k = corral.len();
    let n = k + 1;
    let mut mat = vec![vec![0.0f64; n + 1]; n];
    mat[0][0] = 0.0;
    for i in 0..k {
        mat[0][i + 1] = 1.0;
        mat[i + 1][0] = 1.0;
    }
    for i in 0..k {
        for j in 0..k {
            mat[i + 1][j + 1] = dot(&b[corral[i]], &b[corral[j]]);
        }
    }
    mat[0][n] = 1.0;

    // Gaussian elimination with partial pivoting.
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if mat[row][col].abs() > mat[pivot][col].abs() {
                pivot = row;
            }
        }
        if mat[pivot][col].abs() < 1e-300 {
            return None;
        }
        mat.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = mat[row][col] / mat[col][col];
            if factor == 0.0 {
                continue;
            }
            // Indexed on purpose: the update reads row `col` while writing
            // row `row` of the same matrix.
            #[allow(clippy::needless_range_loop)]
            for c in col..=n {
                mat[row][c] -= factor * mat[col][c];
            }
        }
    }
    let mut solution = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = mat[row][n];
        for c in (row + 1)..n {
            acc -= mat[row][c] * solution[c];
        }
        solution[row] = acc / mat[row][row];
    }
    // Drop the multiplier, keep the weights.
    Some(solution[1..].to_vec())
}

/// Distance from `target` to `conv(points)`. All points must share the
/// target's dimension (checked by the caller).
pub(crate) fn distance_to_hull(target: &Point, points: &[&Point]) -> f64 {
    let dim = target.dim();
    let b: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            p.coords()
                .iter()
                .zip(target.coords())
                .map(|(c, t)| c - t)
                .collect()
        })
        .collect();

    let max_norm2 = b.iter().map(|v| dot(v, v)).fold(0.0f64, f64::max);
    if max_norm2 == 0.0 {
        return 0.0;
    }
    let slack = max_norm2 * 1e-13;

    // Start from the single closest translated point, lowest index on ties.
    let mut start = 0;
    let mut start_norm = dot(&b[0], &b[0]);
    for (i, v) in b.iter().enumerate().skip(1) {
        let n2 = dot(v, v);
        if n2 < start_norm {
            start_norm = n2;
            start = i;
        }
    }

    let mut corral: Vec<usize> = vec![start];
    let mut weights: Vec<f64> = vec![1.0];
    let mut x = b[start].clone();

    for _ in 0..MAX_MAJOR_CYCLES {
        let xx = dot(&x, &x);
        if xx == 0.0 {
            return 0.0;
        }
        let mut best = 0;
        let mut best_ip = dot(&x, &b[0]);
        for (i, v) in b.iter().enumerate().skip(1) {
            let ip = dot(&x, v);
            if ip < best_ip {
                best_ip = ip;
                best = i;
            }
        }
        // Optimality: no vertex improves on x past numerical noise.
        if best_ip >= xx - slack {
            break;
        }
        if corral.contains(&best) {
            break;
        }
        corral.push(best);
        weights.push(0.0);

        // Minor cycles: project onto the affine hull of the corral and walk
        // back toward feasibility until the affine minimizer is a proper
        // convex combination.
        loop {
            let alpha = match affine_minimizer(&b, &corral) {
                Some(a) => a,
                None => {
                    // Degenerate corral (e.g. duplicated points); drop the
                    // vertex we just added and accept the current x.
                    corral.pop();
                    weights.pop();
                    return dot(&x, &x).sqrt();
                }
            };
            if alpha.iter().all(|&a| a > WEIGHT_FLOOR) {
                weights = alpha;
                break;
            }
            let mut theta = 1.0f64;
            let mut blocker = None;
            for (i, (&w, &a)) in weights.iter().zip(&alpha).enumerate() {
                if a <= WEIGHT_FLOOR {
                    let denom = w - a;
                    if denom > 0.0 {
                        let step = w / denom;
                        if step < theta {
                            theta = step;
                            blocker = Some(i);
                        }
                    }
                }
            }
            for (w, &a) in weights.iter_mut().zip(&alpha) {
                *w = (1.0 - theta) * *w + theta * a;
            }
            if let Some(i) = blocker {
                weights[i] = 0.0;
            }
            let mut kept_corral = Vec::with_capacity(corral.len());
            let mut kept_weights = Vec::with_capacity(weights.len());
            for (&idx, &w) in corral.iter().zip(&weights) {
                if w > WEIGHT_FLOOR {
                    kept_corral.push(idx);
                    kept_weights.push(w);
                }
            }
            if kept_corral.is_empty() {
                kept_corral.push(corral[0]);
                kept_weights.push(1.0);
            }
            corral = kept_corral;
            let total: f64 = kept_weights.iter().sum();
            weights = kept_weights.into_iter().map(|w| w / total).collect();
            if corral.len() == 1 {
                weights = vec![1.0];
                break;
            }
        }

        x = vec![0.0f64; dim];
        for (&idx, &w) in corral.iter().zip(&weights) {
            for (xc, bc) in x.iter_mut().zip(&b[idx]) {
                *xc += w * bc;
            }
        }
    }

    dot(&x, &x).sqrt()
}
