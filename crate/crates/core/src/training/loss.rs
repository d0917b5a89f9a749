//! Symmetric contrastive objective and its round average.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Symmetric InfoNCE over cosine logits scaled by `exp(−log τ)`. Row `i` of
/// `q` and `v` is a positive pair; every other row of the batch is a negative.
pub fn contrastive_loss(tape: &mut Tape, q: Var, v: Var, log_tau: Var) -> Result<Var> {
    if tape.shape(q) != tape.shape(v) {
        return Err(Error::invalid(format!(
            "query batch {:?} and image batch {:?} differ in shape",
            tape.shape(q),
            tape.shape(v)
        )));
    }
    if tape.shape(log_tau) != (1, 1) {
        return Err(Error::invalid("log temperature must be a scalar"));
    }
    let qn = tape.normalize_rows(q);
    let vn = tape.normalize_rows(v);
    let sims = tape.matmul_t(qn, vn)?;
    let neg = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg);
    let logits = tape.mul_scalar(sims, inv_tau)?;
    let t2i = tape.diag_nll(logits)?;
    let lt = tape.transpose(logits);
    let i2t = tape.diag_nll(lt)?;
    let both = tape.add(t2i, i2t)?;
    Ok(tape.scale(both, 0.5))
}

/// Value-only form with an explicit temperature.
pub fn contrastive_loss_value(q: &Matrix, v: &Matrix, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} is not positive")));
    }
    let mut tape = Tape::new();
    let q = tape.constant(q.clone());
    let v = tape.constant(v.clone());
    let lt = tape.constant(Matrix::filled(1, 1, tau.ln()));
    let l = contrastive_loss(&mut tape, q, v, lt)?;
    Ok(tape.value(l).get(0, 0))
}

pub fn round_averaged_loss(per_round: &[f64]) -> Result<f64> {
    if per_round.is_empty() {
        return Err(Error::invalid("no round losses to average"));
    }
    Ok(per_round.iter().sum::<f64>() / per_round.len() as f64)
}

/// Mean of scalar loss nodes.
pub fn round_average(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    if losses.is_empty() {
        return Err(Error::invalid("no round losses to average"));
    }
    let row = tape.concat_cols(losses)?;
    tape.mean(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_batch_is_zero() {
        let q = Matrix::row_vector(&[0.3, -2.0, 1.0]);
        let v = Matrix::row_vector(&[5.0, 1.0, 0.0]);
        assert!(contrastive_loss_value(&q, &v, 0.07).unwrap().abs() < 1e-12);
    }

    #[test]
    fn orthonormal_pair() {
        let e = Matrix::identity(2);
        let l = contrastive_loss_value(&e, &e, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_temperature_and_shapes() {
        let e = Matrix::identity(2);
        assert!(contrastive_loss_value(&e, &e, 0.0).is_err());
        assert!(contrastive_loss_value(&e, &e, -1.0).is_err());
        assert!(contrastive_loss_value(&e, &Matrix::identity(3), 1.0).is_err());
    }

    #[test]
    fn round_means() {
        assert_eq!(round_averaged_loss(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(round_averaged_loss(&[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(round_averaged_loss(&[0.625; 10]).unwrap(), 0.625);
        assert!(round_averaged_loss(&[]).is_err());
        let mut t = Tape::new();
        let a = t.constant(Matrix::filled(1, 1, 1.0));
        let b = t.constant(Matrix::filled(1, 1, 3.0));
        let m = round_average(&mut t, &[a, b]).unwrap();
        assert_eq!(t.value(m).get(0, 0), 2.0);
    }
}
