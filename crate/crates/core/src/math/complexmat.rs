//! Dense complex matrices and the complex kernels used outside the autodiff
//! path (channel synthesis, beam diagnostics, Gram matrices).

use num_complex::Complex64;

use crate::error::{CoreError, Result};

/// Row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(CoreError::shape(
                "complex_new",
                format!("{}x{}", rows, cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(ComplexMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn column_vector(data: Vec<Complex64>) -> Self {
        ComplexMatrix {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<Complex64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn matmul(&self, other: &ComplexMatrix) -> Result<ComplexMatrix> {
        if self.cols != other.rows {
            return Err(CoreError::shape(
                "complex_matmul",
                format!("(m,{})x({},n)", self.cols, self.cols),
                format!("(m,{})x({},n)", self.cols, other.rows),
            ));
        }
        let mut out = ComplexMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..other.cols {
                    let v = out.at(i, j) + a * other.at(k, j);
                    out.set(i, j, v);
                }
            }
        }
        Ok(out)
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> ComplexMatrix {
        let mut out = ComplexMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.at(i, j).conj());
            }
        }
        out
    }

    pub fn phases(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.arg()).collect()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.norm()).collect()
    }

    /// Scales each column to unit Euclidean norm.
    pub fn normalize_columns(&self) -> ComplexMatrix {
        let mut out = self.clone();
        for c in 0..self.cols {
            let norm = (0..self.rows)
                .map(|r| self.at(r, c).norm_sqr())
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                for r in 0..self.rows {
                    out.set(r, c, self.at(r, c) / norm);
                }
            }
        }
        out
    }
}

/// Inner product aᴴb of two equal-length complex vectors.
pub fn inner_product(a: &[Complex64], b: &[Complex64]) -> Result<Complex64> {
    if a.len() != b.len() {
        return Err(CoreError::shape(
            "inner_product",
            format!("{}", a.len()),
            format!("{}", b.len()),
        ));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x.conj() * y).sum())
}

pub fn norm_sqr(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn self_inner_product_of_one_j() {
        let a = vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)];
        let p = inner_product(&a, &a).unwrap();
        assert_eq!(p, Complex64::new(2.0, 0.0));
    }

    #[test]
    fn phases_of_two_and_minus_3j() {
        let m = ComplexMatrix::column_vector(vec![
            Complex64::new(2.0, 0.0),
            Complex64::new(0.0, -3.0),
        ]);
        let ph = m.phases();
        assert_eq!(ph[0], 0.0);
        assert!((ph[1] + FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn column_normalization_three_four() {
        let m = ComplexMatrix::column_vector(vec![
            Complex64::new(3.0, 0.0),
            Complex64::new(4.0, 0.0),
        ]);
        // norm is 5
        let n = m.normalize_columns();
        assert!((n.at(0, 0).re - 0.6).abs() < 1e-15);
        assert!((n.at(1, 0).re - 0.8).abs() < 1e-15);
    }

    #[test]
    fn inner_product_swap_conjugates() {
        let a = vec![Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.25)];
        let b = vec![Complex64::new(0.3, -1.0), Complex64::new(2.0, 2.0)];
        let ab = inner_product(&a, &b).unwrap();
        let ba = inner_product(&b, &a).unwrap();
        assert!((ab - ba.conj()).norm() < 1e-15);
        assert!((ab.norm() - ba.norm()).abs() < 1e-15);
    }

    #[test]
    fn hermitian_matmul_shapes() {
        let m = ComplexMatrix::new(
            2,
            1,
            vec![Complex64::new(1.0, 1.0), Complex64::new(0.0, -2.0)],
        )
        .unwrap();
        let g = m.hermitian().matmul(&m).unwrap();
        assert_eq!((g.rows, g.cols), (1, 1));
        assert!((g.at(0, 0).re - 6.0).abs() < 1e-15);
        assert!(g.at(0, 0).im.abs() < 1e-15);
    }
}
