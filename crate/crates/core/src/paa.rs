//! Patch average aggregation: an `s×s` box mean over the square patch grid.
//!
//! Windows that cross the border read the nearest in-grid patch (replicate
//! padding), so a constant field is a fixed point for every window size.

use crate::error::{domain_err, shape_err, Result};
use crate::linalg::{axpy, Matrix};

/// `side×side` grid view over an `L×d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub side: usize,
    pub dim: usize,
    pub data: Matrix,
}

impl PatchGrid {
    pub fn from_features(features: &Matrix) -> Result<Self> {
        let side = grid_side(features.rows())?;
        Ok(Self {
            side,
            dim: features.cols(),
            data: features.clone(),
        })
    }

    pub fn at(&self, h: usize, w: usize) -> &[f64] {
        self.data.row(h * self.side + w)
    }

    pub fn into_features(self) -> Matrix {
        self.data
    }
}

/// Integer square root of a patch count, or a shape error.
pub fn grid_side(patches: usize) -> Result<usize> {
    let side = (patches as f64).sqrt().round() as usize;
    if side * side != patches || side == 0 {
        return shape_err(format!("{patches} patches do not form a square grid"));
    }
    Ok(side)
}

fn check_scale(scale: usize) -> Result<()> {
    if scale == 0 || scale.is_multiple_of(2) {
        return domain_err(format!("window size {scale} must be a positive odd number"));
    }
    Ok(())
}

/// Replicate-padded window sources for output cell `(h, w)`.
fn window(side: usize, scale: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let half = (scale / 2) as isize;
    let clamp = move |v: isize| v.clamp(0, side as isize - 1) as usize;
    (-half..=half).flat_map(move |du| {
        (-half..=half).map(move |dv| clamp(h as isize + du) * side + clamp(w as isize + dv))
    })
}

/// Box mean over `scale×scale` windows centred on every patch.
pub fn paa_aggregate(features: &Matrix, scale: usize) -> Result<Matrix> {
    let side = grid_side(features.rows())?;
    check_scale(scale)?;
    if scale == 1 {
        return Ok(features.clone());
    }
    let inv = 1.0 / (scale * scale) as f64;
    let mut out = Matrix::zeros(features.rows(), features.cols());
    for h in 0..side {
        for w in 0..side {
            let dst = out.row_mut(h * side + w);
            for src in window(side, scale, h, w) {
                axpy(inv, features.row(src), dst);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`paa_aggregate`]: scatters each upstream row back over the
/// cells its window read from.
pub fn paa_grad(upstream: &Matrix, scale: usize) -> Result<Matrix> {
    let side = grid_side(upstream.rows())?;
    check_scale(scale)?;
    if scale == 1 {
        return Ok(upstream.clone());
    }
    let inv = 1.0 / (scale * scale) as f64;
    let mut out = Matrix::zeros(upstream.rows(), upstream.cols());
    for h in 0..side {
        for w in 0..side {
            let g = upstream.row(h * side + w);
            for src in window(side, scale, h, w) {
                axpy(inv, g, out.row_mut(src));
            }
        }
    }
    Ok(out)
}
