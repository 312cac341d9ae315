//! Training losses, all recorded on a [`Tape`] so they can be
//! differentiated.

use thiserror::Error;

use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("label {label} in row {row} is out of range for {classes} classes")]
    Label { row: usize, label: usize, classes: usize },
    #[error("batch has {logits} logit rows but {labels} labels")]
    LabelCount { logits: usize, labels: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("contrastive batch is empty")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ObjectiveError> = std::result::Result<T, E>;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        }
        .into());
    }
    let (rows, classes) = (shape[0], shape[1]);
    if rows != labels.len() {
        return Err(ObjectiveError::LabelCount {
            logits: rows,
            labels: labels.len(),
        });
    }
    let mut onehot = vec![T::zero(); rows * classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(ObjectiveError::Label { row, label, classes });
        }
        onehot[row * classes + label] = T::one();
    }
    let mask = tape.constant(Tensor::new(vec![rows, classes], onehot)?);
    let lse = tape.log_sum_exp(logits, 1)?;
    let picked = tape.mul(logits, mask)?;
    let picked = tape.sum(picked, 1)?;
    let per_row = tape.sub(lse, picked)?;
    Ok(tape.mean_all(per_row))
}

/// InfoNCE over matched rows: row r of `keys` is the positive of row r of
/// `anchors`, every key row is in the denominator.
///
/// `-(1/M) Σ_i log( exp(a_i·k_i/τ) / Σ_j exp(a_i·k_j/τ) )`
pub fn point_info_nce<T: Scalar>(tape: &mut Tape<T>, anchors: Var, keys: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(ObjectiveError::Temperature(tau));
    }
    let (sa, sk) = (tape.shape(anchors).to_vec(), tape.shape(keys).to_vec());
    if sa.len() != 2 || sa != sk {
        return Err(TensorError::Shape {
            op: "point_info_nce",
            lhs: sa,
            rhs: sk,
        }
        .into());
    }
    if sa[0] == 0 {
        return Err(ObjectiveError::Empty);
    }
    let kt = tape.transpose(keys)?;
    let sim = tape.matmul(anchors, kt)?;
    let sim = tape.mul_scalar(sim, 1.0 / tau);
    let lse = tape.log_sum_exp(sim, 1)?;
    let pos = tape.mul(anchors, keys)?;
    let pos = tape.sum(pos, 1)?;
    let pos = tape.mul_scalar(pos, 1.0 / tau);
    let per_row = tape.sub(lse, pos)?;
    Ok(tape.mean_all(per_row))
}

/// Shape-level InfoNCE: the same loss with one embedding per shape; row b
/// of `view_b` is the positive of row b of `view_a`.
pub fn shape_info_nce<T: Scalar>(tape: &mut Tape<T>, view_a: Var, view_b: Var, tau: f64) -> Result<Var> {
    point_info_nce(tape, view_a, view_b, tau)
}

/// `(1/N) Σ (1 - |cos(pred_i, gt_i)|)`. Rows of `pred` with norm below
/// 1e-8 count as orthogonal.
pub fn normal_regul_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let (sp, sg) = (tape.shape(pred).to_vec(), tape.shape(gt).to_vec());
    if sp.len() != 2 || sp[1] != 3 || sp != sg {
        return Err(TensorError::Shape {
            op: "normal_regul_loss",
            lhs: sp,
            rhs: sg,
        }
        .into());
    }
    let unit = tape.normalize_rows(pred)?;
    let cos = tape.mul(unit, gt)?;
    let cos = tape.sum(cos, 1)?;
    let cos = tape.abs(cos);
    let mean = tape.mean_all(cos);
    let neg = tape.neg(mean);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `pretrain + λ · mean(regul)`; returns `pretrain` itself when there is
/// nothing to add.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, pretrain: Var, regul: &[Var], lambda: f64) -> Result<Var> {
    if regul.is_empty() || lambda == 0.0 {
        return Ok(pretrain);
    }
    let stacked = tape.concat(regul, 0)?;
    let mean = tape.mean_all(stacked);
    let weighted = tape.mul_scalar(mean, lambda);
    Ok(tape.add(pretrain, weighted)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var {
        tape.leaf(Tensor::from_f64(shape, v).unwrap(), true)
    }

    #[test]
    fn cross_entropy_anchors() {
        let mut t = Tape::new();
        let l = leaf(&mut t, &[1, 2], &[1.0, -1.0]);
        let loss = cross_entropy(&mut t, l, &[0]).unwrap();
        assert!((t.item(loss) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        let l = leaf(&mut t, &[1, 10], &[0.3; 10]);
        let loss = cross_entropy(&mut t, l, &[4]).unwrap();
        assert!((t.item(loss) - 10f64.ln()).abs() < 1e-12);
        let l = leaf(&mut t, &[1, 3], &[1e4, 0.0, 0.0]);
        let loss = cross_entropy(&mut t, l, &[0]).unwrap();
        assert!(t.item(loss) < 1e-6);
        assert!(matches!(
            cross_entropy(&mut t, l, &[3]),
            Err(ObjectiveError::Label { label: 3, classes: 3, .. })
        ));
    }

    #[test]
    fn info_nce_anchors() {
        let mut t = Tape::new();
        let same = [0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8];
        let a = leaf(&mut t, &[4, 2], &same);
        let k = leaf(&mut t, &[4, 2], &same);
        let loss = point_info_nce(&mut t, a, k, 0.1).unwrap();
        assert!((t.item(loss) - 4f64.ln()).abs() < 1e-12);

        let a = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let k = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let loss = point_info_nce(&mut t, a, k, 1.0).unwrap();
        assert!((t.item(loss) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);

        let a = leaf(&mut t, &[1, 2], &[1.0, 0.0]);
        let k = leaf(&mut t, &[1, 2], &[0.0, 1.0]);
        let loss = point_info_nce(&mut t, a, k, 0.1).unwrap();
        assert_eq!(t.item(loss), 0.0);
        assert!(matches!(point_info_nce(&mut t, a, k, 0.0), Err(ObjectiveError::Temperature(_))));
    }

    #[test]
    fn normal_regul_anchors() {
        let mut t = Tape::new();
        let gt = leaf(&mut t, &[2, 3], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        for (pred, want) in [
            ([0.0, 0.0, 2.0, 3.0, 0.0, 0.0], 0.0),
            ([0.0, 0.0, -1.0, -1.0, 0.0, 0.0], 0.0),
            ([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 1.0),
            ([0.0; 6], 1.0),
        ] {
            let p = leaf(&mut t, &[2, 3], &pred);
            let loss = normal_regul_loss(&mut t, p, gt).unwrap();
            assert!((t.item(loss) - want).abs() < 1e-12, "{pred:?}");
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut t = Tape::new();
        let base = leaf(&mut t, &[1], &[2.0]);
        let r0 = leaf(&mut t, &[1], &[0.4]);
        let r1 = leaf(&mut t, &[1], &[0.6]);
        let total = total_loss(&mut t, base, &[r0, r1], 1.0).unwrap();
        assert!((t.item(total) - 2.5).abs() < 1e-15);
        let total = total_loss(&mut t, base, &[r0, r1], 0.0).unwrap();
        assert_eq!(t.item(total), 2.0);
    }
}
