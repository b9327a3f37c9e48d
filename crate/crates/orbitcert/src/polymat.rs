//! Matrices with polynomial entries and the Lie derivative along a
//! polynomial vector field.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::poly::Polynomial;

/// Dense matrix of polynomials sharing a common variable set.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    nvars: usize,
    entries: Vec<Polynomial>,
    symmetric: bool,
}

impl PolyMatrix {
    pub fn zeros(rows: usize, cols: usize, nvars: usize) -> Self {
        PolyMatrix {
            rows,
            cols,
            nvars,
            entries: vec![Polynomial::zero(nvars); rows * cols],
            symmetric: rows == cols,
        }
    }

    pub fn identity(n: usize, nvars: usize) -> Self {
        let mut m = Self::zeros(n, n, nvars);
        for i in 0..n {
            m.set(i, i, Polynomial::constant(nvars, 1.0));
        }
        m
    }

    /// Builds from row-major entries; marks symmetric if square and
    /// entrywise symmetric.
    pub fn from_entries(rows: usize, cols: usize, entries: Vec<Polynomial>) -> Self {
        assert_eq!(entries.len(), rows * cols);
        let nvars = entries.first().map(Polynomial::nvars).unwrap_or(0);
        assert!(entries.iter().all(|p| p.nvars() == nvars));
        let mut m = PolyMatrix {
            rows,
            cols,
            nvars,
            entries,
            symmetric: false,
        };
        m.symmetric = m.check_symmetric();
        m
    }

    fn check_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if self.get(i, j) != self.get(j, i) {
                    return false;
                }
            }
        }
        true
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, i: usize, j: usize) -> &Polynomial {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: Polynomial) {
        assert_eq!(p.nvars(), self.nvars);
        self.entries[i * self.cols + j] = p;
        self.symmetric = self.check_symmetric();
    }

    /// Sets entry (i, j) and mirrors it to (j, i).
    pub fn set_sym(&mut self, i: usize, j: usize, p: Polynomial) {
        assert_eq!(self.rows, self.cols);
        assert_eq!(p.nvars(), self.nvars);
        self.entries[i * self.cols + j] = p.clone();
        self.entries[j * self.cols + i] = p;
        self.symmetric = self.check_symmetric();
    }

    pub fn transpose(&self) -> PolyMatrix {
        let mut out = PolyMatrix::zeros(self.cols, self.rows, self.nvars);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.entries[j * self.rows + i] = self.get(i, j).clone();
            }
        }
        out.symmetric = out.check_symmetric();
        out
    }

    pub fn add(&self, other: &PolyMatrix) -> PolyMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.add(b))
            .collect();
        PolyMatrix::from_entries(self.rows, self.cols, entries)
    }

    pub fn sub(&self, other: &PolyMatrix) -> PolyMatrix {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> PolyMatrix {
        let entries = self.entries.iter().map(|p| p.scale(c)).collect();
        PolyMatrix::from_entries(self.rows, self.cols, entries)
    }

    /// Scales every entry by the scalar polynomial `s`.
    pub fn scale_poly(&self, s: &Polynomial) -> PolyMatrix {
        let entries = self.entries.iter().map(|p| p.mul(s)).collect();
        PolyMatrix::from_entries(self.rows, self.cols, entries)
    }

    pub fn matmul(&self, other: &PolyMatrix) -> PolyMatrix {
        assert_eq!(self.cols, other.rows);
        let mut out = PolyMatrix::zeros(self.rows, other.cols, self.nvars);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = Polynomial::zero(self.nvars);
                for k in 0..self.cols {
                    acc = acc.add(&self.get(i, k).mul(other.get(k, j)));
                }
                out.entries[i * other.cols + j] = acc;
            }
        }
        out.symmetric = out.check_symmetric();
        out
    }

    /// Entrywise evaluation at a point.
    pub fn eval(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if x.len() != self.nvars {
            return Err(Error::Dimension {
                context: "matrix evaluation",
                expected: self.nvars,
                got: x.len(),
            });
        }
        Ok(self.eval_unchecked(x))
    }

    pub fn eval_unchecked(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval_unchecked(x))
    }

    /// Applies `f` entrywise.
    pub fn map(&self, f: impl Fn(&Polynomial) -> Polynomial) -> PolyMatrix {
        let entries = self.entries.iter().map(f).collect();
        PolyMatrix::from_entries(self.rows, self.cols, entries)
    }

    /// Re-embeds all entries into a new variable set (see
    /// [`Polynomial::embed`]).
    pub fn embed(&self, new_nvars: usize, map: &[usize]) -> PolyMatrix {
        self.map(|p| p.embed(new_nvars, map))
    }
}

/// Derivative of `w` along the flow of `x' = f(x)`: entrywise
/// `sum_i (dw/dx_i) f_i`. Requires a symmetric input; use
/// [`lie_derivative_general`] for frames and other non-symmetric matrices.
pub fn lie_derivative(w: &PolyMatrix, f: &[Polynomial]) -> Result<PolyMatrix> {
    if !w.is_symmetric() {
        return Err(Error::Invalid(
            "lie_derivative requires a symmetric polynomial matrix".into(),
        ));
    }
    lie_derivative_general(w, f)
}

/// The same directional derivative without the symmetry requirement.
pub fn lie_derivative_general(w: &PolyMatrix, f: &[Polynomial]) -> Result<PolyMatrix> {
    if w.nvars() != f.len() {
        return Err(Error::Dimension {
            context: "lie derivative (field length vs variables)",
            expected: w.nvars(),
            got: f.len(),
        });
    }
    if f.iter().any(|p| p.nvars() != w.nvars()) {
        return Err(Error::Dimension {
            context: "lie derivative (field component variables)",
            expected: w.nvars(),
            got: f.iter().map(Polynomial::nvars).find(|&n| n != w.nvars()).unwrap_or(0),
        });
    }
    let out = w.map(|p| {
        let mut acc = Polynomial::zero(w.nvars());
        for (i, fi) in f.iter().enumerate() {
            acc = acc.add(&p.diff(i).mul(fi));
        }
        acc
    });
    Ok(out)
}
