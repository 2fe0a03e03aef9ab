//! Rank correlation for trend checks.

use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n: usize,
}

/// Ranks starting at 1; ties share their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && x[idx[e + 1]] == x[idx[s]] {
            e += 1;
        }
        let avg = (s + e) as f64 / 2.0 + 1.0;
        for &t in &idx[s..=e] {
            r[t] = avg;
        }
        s = e + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Largest sample for which the p-value is computed by full permutation.
const EXACT_MAX: usize = 8;

/// Spearman's ρ; exact permutation p-value for `n ≤ 8`, Student-t
/// approximation above.
pub fn spearman(x: &[f64], y: &[f64]) -> Spearman {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 3 {
        return Spearman {
            rho: 0.0,
            p_value: 1.0,
            n,
        };
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let rho = pearson(&rx, &ry);
    let p_value = if n <= EXACT_MAX {
        let mut perm = ry.clone();
        let (mut hits, mut total) = (0u64, 0u64);
        permute(&mut perm, 0, &mut |p| {
            total += 1;
            if pearson(&rx, p).abs() >= rho.abs() - 1e-12 {
                hits += 1;
            }
        });
        hits as f64 / total as f64
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * ((n - 2) as f64 / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, (n - 2) as f64).expect("n > 2");
        2.0 * dist.cdf(-t.abs())
    };
    Spearman { rho, p_value, n }
}

fn permute(v: &mut [f64], k: usize, f: &mut impl FnMut(&[f64])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ties_share_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn perfect_monotone_five_points() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let s = spearman(&x, &[9.0, 7.0, 5.0, 2.0, 1.0]);
        assert_relative_eq!(s.rho, -1.0);
        // Two of 120 orderings are as extreme.
        assert_relative_eq!(s.p_value, 2.0 / 120.0, epsilon = 1e-12);
    }

    #[test]
    fn known_textbook_value() {
        // ρ = 1 − 6Σd²/(n(n²−1)) with d = (0, 1, −1, 0, 0, 0, 0, 0, 1, −1).
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let y = [1.0, 3.0, 2.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0, 9.0];
        let s = spearman(&x, &y);
        assert_relative_eq!(s.rho, 1.0 - 6.0 * 4.0 / (10.0 * 99.0), epsilon = 1e-12);
        assert!(s.p_value < 1e-4);
    }

    #[test]
    fn unrelated_data_is_not_significant() {
        let x: Vec<f64> = (0..40).map(f64::from).collect();
        let y: Vec<f64> = (0..40).map(|i| ((i * 17) % 40) as f64).collect();
        let s = spearman(&x, &y);
        assert!(s.p_value > 0.05, "{s:?}");
    }
}
