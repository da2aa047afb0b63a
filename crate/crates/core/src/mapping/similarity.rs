use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Global 2D similarity `x -> s R(theta) x + t` in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub theta: f64,
    pub scale: f64,
    pub translation: [f64; 2],
}

/// Row-major 2x3 affine matrix `[a b tx; c d ty]`.
pub type Affine = [[f64; 3]; 2];

impl SimilarityParams {
    pub const IDENTITY: Self = Self {
        theta: 0.0,
        scale: 1.0,
        translation: [0.0, 0.0],
    };

    /// Activations applied to the rigid network's four logits.
    pub fn from_logits(o: [f64; 4]) -> Self {
        Self {
            theta: PI * o[0].tanh(),
            scale: o[1].exp(),
            translation: [o[2], o[3]],
        }
    }

    pub fn matrix(&self) -> Affine {
        let (s, c) = self.theta.sin_cos();
        let k = self.scale;
        [
            [k * c, -k * s, self.translation[0]],
            [k * s, k * c, self.translation[1]],
        ]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        apply_affine(&self.matrix(), p)
    }

    /// Closed-form inverse: scale `1/s`, rotation `-theta`, translation `-(1/s) R(-theta) t`.
    pub fn inverse(&self) -> Self {
        let inv_s = 1.0 / self.scale;
        let (s, c) = (-self.theta).sin_cos();
        let [tx, ty] = self.translation;
        Self {
            theta: -self.theta,
            scale: inv_s,
            translation: [-inv_s * (c * tx - s * ty), -inv_s * (s * tx + c * ty)],
        }
    }
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Inverse of a similarity as an affine matrix.
pub fn invert_rigid(p: &SimilarityParams) -> Affine {
    p.inverse().matrix()
}

pub fn apply_affine(m: &Affine, p: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
    ]
}

/// `a ∘ b` (apply `b` first).
pub fn compose_affine(a: &Affine, b: &Affine) -> Affine {
    let mut out = [[0.0; 3]; 2];
    for (r, row) in out.iter_mut().enumerate() {
        for (col, v) in row.iter_mut().enumerate() {
            *v = a[r][0] * b[0][col] + a[r][1] * b[1][col];
        }
        row[2] += a[r][2];
    }
    out
}

pub const IDENTITY_AFFINE: Affine = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
