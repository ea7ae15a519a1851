//! Controllability primitives: rank-1 input patches and the three kinds of
//! output patch (bias, weight, elementwise scale).

use crate::error::{check_len, Error, Result};
use crate::numerics::{DenseMatrix, DenseVector, Precision};

/// `ΔW = (W (z_new − z)) zᵀ / ‖z‖²`, so that `(W + ΔW) z = W z_new`.
pub fn input_patch(
    w: &DenseMatrix,
    z: &DenseVector,
    z_new: &DenseVector,
    p: Precision,
) -> Result<DenseMatrix> {
    check_len("input patch", w.cols(), z.len())?;
    check_len("input patch target", z.len(), z_new.len())?;
    let nz = z.norm_sq(p);
    if nz == 0.0 {
        return Err(Error::ZeroInputVector);
    }
    let shift = w.matvec(&z_new.sub(z, p)?, p)?;
    let col = shift.map(|x| p.div(x, nz));
    Ok(DenseMatrix::outer(&col, z, 1.0, p))
}

/// `Δb = delta`.
pub fn output_bias_patch(delta: &DenseVector) -> DenseVector {
    delta.clone()
}

/// `ΔW = delta yᵀ / ‖y‖²`, so that `ΔW y = delta`.
pub fn output_weight_patch(delta: &DenseVector, y: &DenseVector, p: Precision) -> Result<DenseMatrix> {
    let ny = y.norm_sq(p);
    if ny == 0.0 {
        return Err(Error::ZeroPreOutputVector);
    }
    let col = delta.map(|x| p.div(x, ny));
    Ok(DenseMatrix::outer(&col, y, 1.0, p))
}

/// `Δm = delta ⊘ h`, with entries where `|h_i| ≤ tau` left at zero. Fails if
/// such an entry would need a change larger than `tau`.
pub fn output_scale_patch(
    delta: &DenseVector,
    h: &DenseVector,
    tau: f64,
    p: Precision,
) -> Result<DenseVector> {
    check_len("scale patch", delta.len(), h.len())?;
    let mut out = DenseVector::zeros(delta.len());
    for (i, (&d, &hi)) in delta.iter().zip(h.iter()).enumerate() {
        if hi.abs() > tau {
            out[i] = p.div(d, hi);
        } else if d.abs() > tau {
            return Err(Error::DegenerateActivation {
                index: i,
                activation: hi,
                delta: d,
            });
        }
    }
    Ok(out)
}
