//! Domain shifts for domain-incremental streams.

use std::fmt;
use std::str::FromStr;

use crate::error::{OclError, Result};
use crate::linalg::DenseMatrix;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transform {
    Noise,
    Occlusion,
    Blur,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Noise => "noise",
            Transform::Occlusion => "occlusion",
            Transform::Blur => "blur",
        }
    }

    /// Per-task strengths, one entry per task.
    pub fn schedule(self) -> Vec<f64> {
        match self {
            Transform::Noise => vec![0.0, 0.4, 0.8, 1.2, 1.6, 2.0, 2.4, 2.8, 3.2, 3.6],
            Transform::Occlusion => vec![0.0, 0.07, 0.13, 0.2, 0.27, 0.33, 0.4, 0.47, 0.53, 0.6],
            Transform::Blur => vec![0.0, 0.28, 0.56, 0.83, 1.11, 1.39, 1.67, 1.94, 2.22, 2.5],
        }
    }

    pub fn needs_geometry(self) -> bool {
        !matches!(self, Transform::Noise)
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transform {
    type Err = OclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Transform::Noise),
            "occlusion" => Ok(Transform::Occlusion),
            "blur" => Ok(Transform::Blur),
            other => Err(OclError::UnknownKind(other.to_string())),
        }
    }
}

pub fn domain_schedule(kind: &str) -> Result<Vec<f64>> {
    Ok(kind.parse::<Transform>()?.schedule())
}

/// Applies `kind` at `strength` to every row of `x`.
///
/// Occlusion and blur treat each row as a `width x width` single-channel
/// image stored row-major. Occlusion zeroes a square with side
/// `round(strength * width)` at a uniformly random position per image. Blur
/// runs a normalized box filter of width `1 + round(2 * strength)` along each
/// image row, clamping at the edges.
pub fn apply_nonstationarity(
    x: &DenseMatrix<f64>,
    kind: Transform,
    strength: f64,
    width: Option<usize>,
    rng: &mut Rng,
) -> Result<DenseMatrix<f64>> {
    if !(strength.is_finite() && strength >= 0.0) {
        return Err(OclError::InvalidConfig(format!(
            "strength {strength} must be finite and >= 0"
        )));
    }
    let w = if kind.needs_geometry() {
        let w = width.ok_or_else(|| OclError::GeometryUnknown(kind.name().into()))?;
        if w == 0 || w * w != x.cols() {
            return Err(OclError::GeometryUnknown(format!(
                "{w}x{w} images do not fit {} features",
                x.cols()
            )));
        }
        w
    } else {
        0
    };
    let mut out = x.clone();
    if strength == 0.0 {
        return Ok(out);
    }
    match kind {
        Transform::Noise => {
            for v in out.data_mut() {
                *v += strength * rng.normal();
            }
        }
        Transform::Occlusion => {
            let side = ((strength * w as f64).round() as usize).min(w);
            for r in 0..out.rows() {
                let top = rng.below(w - side + 1);
                let left = rng.below(w - side + 1);
                let img = out.row_mut(r);
                for i in top..top + side {
                    img[i * w + left..i * w + left + side].fill(0.0);
                }
            }
        }
        Transform::Blur => {
            let k = 1 + (2.0 * strength).round() as usize;
            let back = (k / 2) as isize;
            for r in 0..out.rows() {
                let src = x.row(r);
                let img = out.row_mut(r);
                for i in 0..w {
                    let line = &src[i * w..(i + 1) * w];
                    for j in 0..w {
                        let sum: f64 = (0..k as isize)
                            .map(|o| {
                                line[(j as isize + o - back).clamp(0, w as isize - 1) as usize]
                            })
                            .sum();
                        img[i * w + j] = sum / k as f64;
                    }
                }
            }
        }
    }
    Ok(out)
}
