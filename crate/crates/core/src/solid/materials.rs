//! Hyperelastic constitutive laws (anisotropic exponential and
//! neo-Hookean, both with volumetric penalization) and the fiber-aligned
//! active stress. Stresses and consistent tangents are analytic; the
//! finite-difference agreement between the stress and the energy gradient
//! is enforced by tests.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Strain energy and first Piola-Kirchhoff stress contract. `frame` has
/// the fiber/sheet/normal directions as columns; isotropic laws ignore it.
pub trait MaterialLaw: Send + Sync {
    fn energy(&self, f: &Matrix3<f64>, frame: &Matrix3<f64>) -> Result<f64>;
    fn piola(&self, f: &Matrix3<f64>, frame: &Matrix3<f64>) -> Result<Matrix3<f64>> {
        Ok(self.piola_and_tangent(f, frame)?.0)
    }
    fn piola_and_tangent(
        &self,
        f: &Matrix3<f64>,
        frame: &Matrix3<f64>,
    ) -> Result<(Matrix3<f64>, MaterialTangent)>;
}

/// Precomputed state for the directional derivative dP[dF] at one
/// material point.
pub enum MaterialTangent {
    Anisotropic {
        f: Matrix3<f64>,
        frame: Matrix3<f64>,
        coeffs: Matrix3<f64>,
        /// R (A o E~) R^T
        t_e: Matrix3<f64>,
        /// c * exp(Q)
        ceq: f64,
        s_iso: Matrix3<f64>,
        f_inv_t: Matrix3<f64>,
        j: f64,
        g_j: f64,
        gp_j: f64,
    },
    Isotropic {
        f: Matrix3<f64>,
        f_inv_t: Matrix3<f64>,
        j: f64,
        j23: f64,
        i1: f64,
        mu: f64,
        gv: f64,
        gvp: f64,
    },
}

impl MaterialTangent {
    /// Directional derivative of the first Piola stress along `df`.
    pub fn apply(&self, df: &Matrix3<f64>) -> Matrix3<f64> {
        match self {
            MaterialTangent::Anisotropic {
                f,
                frame,
                coeffs,
                t_e,
                ceq,
                s_iso,
                f_inv_t,
                j,
                g_j,
                gp_j,
            } => {
                let de = 0.5 * (df.transpose() * f + f.transpose() * df);
                let (ceq, g_j, gp_j, j) = (*ceq, *g_j, *gp_j, *j);
                let t_de = frame * (coeffs.component_mul(&(frame.transpose() * de * frame)))
                    * frame.transpose();
                let dq = 2.0 * t_e.dot(&de);
                let ds = ceq * (dq * t_e + t_de);
                let theta = f_inv_t.dot(df);
                df * s_iso
                    + f * ds
                    + (gp_j * j * theta) * f_inv_t
                    - g_j * (f_inv_t * df.transpose() * f_inv_t)
            }
            MaterialTangent::Isotropic {
                f,
                f_inv_t,
                j,
                j23,
                i1,
                mu,
                gv,
                gvp,
            } => {
                let (j, j23, i1, mu, gv, gvp) = (*j, *j23, *i1, *mu, *gv, *gvp);
                let theta = f_inv_t.dot(df);
                let di1 = 2.0 * f.dot(df);
                let iso = mu
                    * (-2.0 / 3.0 * j23 * theta * (f - (i1 / 3.0) * f_inv_t)
                        + j23
                            * (df - (di1 / 3.0) * f_inv_t
                                + (i1 / 3.0) * (f_inv_t * df.transpose() * f_inv_t)));
                iso + (gvp * j * theta) * f_inv_t - gv * (f_inv_t * df.transpose() * f_inv_t)
            }
        }
    }
}

fn invert_checked(f: &Matrix3<f64>) -> Result<(Matrix3<f64>, f64)> {
    let j = f.determinant();
    if j <= 0.0 || !j.is_finite() {
        return Err(Error::InvertedElement { cell: usize::MAX, det: j });
    }
    Ok((f.try_inverse().unwrap().transpose(), j))
}

/// Exponential transversely structured law for ventricular tissue with a
/// (J - 1) ln J volumetric penalization. Coefficients are dimensionless
/// exponents per fiber-frame strain component pair; `c` and `kappa` in Pa.
#[derive(Debug, Clone)]
pub struct GuccioneLaw {
    pub c: f64,
    pub kappa: f64,
    pub a_ff: f64,
    pub a_ss: f64,
    pub a_nn: f64,
    pub a_fs: f64,
    pub a_fn: f64,
    pub a_sn: f64,
}

impl Default for GuccioneLaw {
    fn default() -> Self {
        GuccioneLaw {
            c: 880.0,
            kappa: 5.0e4,
            a_ff: 8.0,
            a_ss: 6.0,
            a_nn: 3.0,
            a_fs: 12.0,
            a_fn: 3.0,
            a_sn: 3.0,
        }
    }
}

impl GuccioneLaw {
    fn coeff_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.a_ff, self.a_fs, self.a_fn,
            self.a_fs, self.a_ss, self.a_sn,
            self.a_fn, self.a_sn, self.a_nn,
        )
    }

    fn exponent(&self, e_frame: &Matrix3<f64>) -> f64 {
        let a = self.coeff_matrix();
        let mut q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                q += a[(i, j)] * e_frame[(i, j)] * e_frame[(i, j)];
            }
        }
        q
    }
}

impl MaterialLaw for GuccioneLaw {
    fn energy(&self, f: &Matrix3<f64>, frame: &Matrix3<f64>) -> Result<f64> {
        let (_, j) = invert_checked(f)?;
        let e = 0.5 * (f.transpose() * f - Matrix3::identity());
        let q = self.exponent(&(frame.transpose() * e * frame));
        Ok(self.c / 2.0 * (q.exp() - 1.0) + self.kappa / 2.0 * (j - 1.0) * j.ln())
    }

    fn piola_and_tangent(
        &self,
        f: &Matrix3<f64>,
        frame: &Matrix3<f64>,
    ) -> Result<(Matrix3<f64>, MaterialTangent)> {
        let (f_inv_t, j) = invert_checked(f)?;
        let e = 0.5 * (f.transpose() * f - Matrix3::identity());
        let coeffs = self.coeff_matrix();
        let e_frame = frame.transpose() * e * frame;
        let q = self.exponent(&e_frame);
        let ceq = self.c * q.exp();
        let t_e = frame * coeffs.component_mul(&e_frame) * frame.transpose();
        let s_iso = ceq * t_e;
        let g_j = self.kappa / 2.0 * (j * j.ln() + j - 1.0);
        let gp_j = self.kappa / 2.0 * (j.ln() + 2.0);
        let p = f * s_iso + g_j * f_inv_t;
        Ok((
            p,
            MaterialTangent::Anisotropic {
                f: *f,
                frame: *frame,
                coeffs,
                t_e,
                ceq,
                s_iso,
                f_inv_t,
                j,
                g_j,
                gp_j,
            },
        ))
    }
}

/// Compressible neo-Hookean law with the quadratic-plus-logarithmic
/// volumetric term.
#[derive(Debug, Clone)]
pub struct NeoHookeanLaw {
    pub mu: f64,
    pub kappa: f64,
}

impl Default for NeoHookeanLaw {
    fn default() -> Self {
        NeoHookeanLaw {
            mu: 5.0e6,
            kappa: 5.0e6,
        }
    }
}

impl MaterialLaw for NeoHookeanLaw {
    fn energy(&self, f: &Matrix3<f64>, _frame: &Matrix3<f64>) -> Result<f64> {
        let (_, j) = invert_checked(f)?;
        let i1 = f.dot(f);
        Ok(self.mu / 2.0 * (j.powf(-2.0 / 3.0) * i1 - 3.0)
            + self.kappa / 4.0 * ((j - 1.0) * (j - 1.0) + j.ln() * j.ln()))
    }

    fn piola_and_tangent(
        &self,
        f: &Matrix3<f64>,
        _frame: &Matrix3<f64>,
    ) -> Result<(Matrix3<f64>, MaterialTangent)> {
        let (f_inv_t, j) = invert_checked(f)?;
        let i1 = f.dot(f);
        let j23 = j.powf(-2.0 / 3.0);
        // d/dJ of the volumetric part times dJ/dF = J F^-T.
        let gv = self.kappa / 2.0 * (j * (j - 1.0) + j.ln());
        let gvp = self.kappa / 2.0 * (2.0 * j - 1.0 + 1.0 / j);
        let p = self.mu * j23 * (f - (i1 / 3.0) * f_inv_t) + gv * f_inv_t;
        Ok((
            p,
            MaterialTangent::Isotropic {
                f: *f,
                f_inv_t,
                j,
                j23,
                i1,
                mu: self.mu,
                gv,
                gvp,
            },
        ))
    }
}

/// Fiber-aligned active first Piola stress: T_act (F f0 x f0) / sqrt(I4f).
pub fn active_stress(f: &Matrix3<f64>, f0: &Vector3<f64>, t_act: f64) -> Result<Matrix3<f64>> {
    let ff0 = f * f0;
    let i4f = ff0.dot(&ff0);
    if i4f <= 1e-12 {
        return Err(Error::DegenerateStretch { i4f });
    }
    Ok(t_act / i4f.sqrt() * ff0 * f0.transpose())
}

/// Directional derivative of the active stress along `df`.
pub fn active_stress_tangent(
    f: &Matrix3<f64>,
    f0: &Vector3<f64>,
    t_act: f64,
    df: &Matrix3<f64>,
) -> Matrix3<f64> {
    let ff0 = f * f0;
    let dff0 = df * f0;
    let i4f = ff0.dot(&ff0);
    let root = i4f.sqrt();
    t_act / root * dff0 * f0.transpose()
        - t_act * ff0.dot(&dff0) / (i4f * root) * ff0 * f0.transpose()
}
