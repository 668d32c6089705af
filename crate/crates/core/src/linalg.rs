//! Banded LU factorization with partial pivoting.
//!
//! The crossbar ordering keeps every matrix entry within a few times the
//! column count of the diagonal, so a band solver handles arrays where a full
//! dense factorization would not fit.

/// Square matrix stored by rows, each row holding a window of columns.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    starts: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Singular {
    pub column: usize,
}

impl BandMatrix {
    /// `kl` and `ku` are the lower and upper bandwidths of the entries that
    /// will be added. Room for pivoting fill is reserved automatically.
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = (2 * kl + ku + 1).min(n.max(1));
        let starts: Vec<usize> = (0..n).map(|i| i.saturating_sub(kl).min(n.saturating_sub(width))).collect();
        Self { n, kl, ku, width, starts, rows: vec![vec![0.0; width]; n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j + self.kl >= i && j <= i + self.ku, "entry ({i}, {j}) outside band");
        let k = j - self.starts[i];
        self.rows[i][k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let s = self.starts[i];
        if j < s || j >= s + self.width {
            0.0
        } else {
            self.rows[i][j - s]
        }
    }

    /// Solves `A x = b` in place of `b`, consuming the matrix.
    pub fn solve(mut self, b: &mut [f64]) -> Result<(), Singular> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let scale = self.rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        // Pivots at roundoff level relative to the largest entry mean the
        // system has a floating part.
        let tiny = scale * 64.0 * f64::EPSILON;
        for k in 0..n {
            let last = (k + self.kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > tiny) {
                return Err(Singular { column: k });
            }
            if p != k {
                self.rows.swap(p, k);
                self.starts.swap(p, k);
                b.swap(p, k);
            }
            let pivot = self.get(k, k);
            let hi = (k + self.kl + self.ku).min(n - 1);
            for i in k + 1..=last {
                let f = self.get(i, k) / pivot;
                if f == 0.0 {
                    continue;
                }
                for j in k..=hi {
                    let u = self.get(k, j);
                    if u != 0.0 {
                        let si = self.starts[i];
                        self.rows[i][j - si] -= f * u;
                    }
                }
                b[i] -= f * b[k];
            }
        }
        for k in (0..n).rev() {
            let hi = (k + self.kl + self.ku).min(n - 1);
            let mut acc = b[k];
            for (j, bj) in b.iter().enumerate().take(hi + 1).skip(k + 1) {
                acc -= self.get(k, j) * bj;
            }
            b[k] = acc / self.get(k, k);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_tridiagonal() {
        let n = 5;
        let mut a = BandMatrix::zeros(n, 1, 1);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                a.add(i, i + 1, -1.0);
            }
        }
        let x_true = [1.0, -2.0, 3.0, 0.5, 4.0];
        let mut b: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = 2.0 * x_true[i];
                if i > 0 {
                    s -= x_true[i - 1];
                }
                if i + 1 < n {
                    s -= x_true[i + 1];
                }
                s
            })
            .collect();
        a.solve(&mut b).unwrap();
        for (x, t) in b.iter().zip(x_true) {
            assert!((x - t).abs() < 1e-12);
        }
    }

    #[test]
    fn pivots_past_zero_diagonal() {
        let mut a = BandMatrix::zeros(2, 1, 1);
        a.add(0, 1, 1.0);
        a.add(1, 0, 1.0);
        a.add(1, 1, 1.0);
        let mut b = vec![3.0, 5.0];
        a.solve(&mut b).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-15 && (b[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn singular_is_reported() {
        let mut a = BandMatrix::zeros(2, 1, 1);
        a.add(0, 0, 1.0);
        a.add(0, 1, 1.0);
        a.add(1, 0, 1.0);
        a.add(1, 1, 1.0);
        assert!(a.solve(&mut [1.0, 2.0]).is_err());
    }
}
