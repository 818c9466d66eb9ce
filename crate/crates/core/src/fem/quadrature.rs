//! Tensor-product Gauss quadrature on the unit reference hexahedron.

use nalgebra::Point3;

/// Quadrature rule on the reference cube [0,1]^3.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<Point3<f64>>,
    pub weights: Vec<f64>,
    /// Largest polynomial degree (per variable) integrated exactly.
    pub exact_degree: usize,
}

/// Gauss-Legendre nodes/weights on [0,1].
fn gauss_1d(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Tabulated on [-1,1], shifted to [0,1].
    let (x, w): (Vec<f64>, Vec<f64>) = match n {
        1 => (vec![0.0], vec![2.0]),
        2 => {
            let a = 1.0 / 3.0f64.sqrt();
            (vec![-a, a], vec![1.0, 1.0])
        }
        3 => {
            let a = (3.0f64 / 5.0).sqrt();
            (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
        }
        4 => {
            let a = (3.0 / 7.0 - 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
            let b = (3.0 / 7.0 + 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
            let wa = (18.0 + 30.0f64.sqrt()) / 36.0;
            let wb = (18.0 - 30.0f64.sqrt()) / 36.0;
            (vec![-b, -a, a, b], vec![wb, wa, wa, wb])
        }
        _ => panic!("unsupported 1D Gauss order {n}"),
    };
    (
        x.iter().map(|t| 0.5 * (t + 1.0)).collect(),
        w.iter().map(|t| 0.5 * t).collect(),
    )
}

impl QuadratureRule {
    /// n x n x n Gauss rule; exact for polynomials of degree 2n-1 per
    /// variable.
    pub fn gauss_hex(n: usize) -> QuadratureRule {
        let (x, w) = gauss_1d(n);
        let mut points = Vec::with_capacity(n * n * n);
        let mut weights = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    points.push(Point3::new(x[i], x[j], x[k]));
                    weights.push(w[i] * w[j] * w[k]);
                }
            }
        }
        QuadratureRule {
            points,
            weights,
            exact_degree: 2 * n - 1,
        }
    }
}
