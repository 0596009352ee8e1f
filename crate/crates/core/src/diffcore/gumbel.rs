use rand::distr::Open01;
use rand::Rng;

use super::{DiffError, Tape, Tensor, Var};

/// Standard Gumbel noise `-ln(-ln u)`, `u ~ U(0, 1)`.
pub fn gumbel_noise(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `softmax((logits + noise) / temperature)` with `noise` held constant.
pub fn relaxed_softmax(tape: &mut Tape, logits: Var, noise: &Tensor, temperature: f64) -> Result<Var, DiffError> {
    if !(temperature > 0.0) {
        return Err(DiffError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let noise = tape.constant(noise.clone());
    let perturbed = tape.add(logits, noise)?;
    let scaled = tape.scale(perturbed, 1.0 / temperature)?;
    tape.softmax(scaled)
}

/// Gumbel-Softmax sample over the last axis of `logits`.
pub fn gumbel_softmax(tape: &mut Tape, logits: Var, temperature: f64, rng: &mut impl Rng) -> Result<Var, DiffError> {
    if !(temperature > 0.0) {
        return Err(DiffError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let noise = gumbel_noise(tape.shape(logits), rng);
    relaxed_softmax(tape, logits, &noise, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn output_is_a_distribution() {
        let mut rng = RngStream::new(1, "gumbel");
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(&[0.3, -1.0, 2.0, 0.0, 0.5]).unwrap());
        for _ in 0..50 {
            let y = gumbel_softmax(&mut tape, logits, 0.7, &mut rng).unwrap();
            let v = tape.value(y).data();
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn low_temperature_approaches_one_hot() {
        let mut rng = RngStream::new(2, "gumbel");
        let logits_v = [0.3, -1.0, 2.0, 0.0, 0.5];
        let noise = gumbel_noise(&[5], &mut rng);
        let winner = (0..5)
            .max_by(|&a, &b| {
                (logits_v[a] + noise.data()[a])
                    .partial_cmp(&(logits_v[b] + noise.data()[b]))
                    .unwrap()
            })
            .unwrap();
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(&logits_v).unwrap());
        let y = relaxed_softmax(&mut tape, logits, &noise, 1e-3).unwrap();
        assert!(tape.value(y).data()[winner] > 1.0 - 1e-9);
    }

    #[test]
    fn rejects_non_positive_temperature() {
        let mut rng = RngStream::new(0, "gumbel");
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(&[0.0, 1.0]).unwrap());
        assert!(gumbel_softmax(&mut tape, logits, 0.0, &mut rng).is_err());
        assert!(gumbel_softmax(&mut tape, logits, -1.0, &mut rng).is_err());
    }

    #[test]
    fn confident_logits_dominate_almost_always() {
        // Monte-Carlo over 10^4 noise draws.
        let mut rng = RngStream::new(11, "gumbel-mc");
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(&[10.0, -10.0, -10.0, -10.0, -10.0]).unwrap());
        let hits = (0..10_000)
            .filter(|_| {
                let y = gumbel_softmax(&mut tape, logits, 1.0, &mut rng).unwrap();
                tape.value(y).data()[0] > 0.99
            })
            .count();
        assert!(hits as f64 / 10_000.0 > 0.99, "hits = {hits}");
    }
}
