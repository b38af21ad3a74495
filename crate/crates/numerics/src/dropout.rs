use crate::error::{NumericsError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-unit multipliers applied by a dropout pass (0 or `1/(1-rate)`).
/// `None` means the pass was an identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(Option<Vec<f64>>);

impl DropoutMask {
    pub fn identity() -> Self {
        Self(None)
    }

    /// Routes a gradient back through the same mask.
    pub fn backward(&self, grad: &mut [f64]) {
        if let Some(mask) = &self.0 {
            for (g, m) in grad.iter_mut().zip(mask) {
                *g *= m;
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_none()
    }
}

/// Inverted dropout: in training mode each unit is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; in eval mode it is the identity.
pub fn apply_dropout(
    x: &Tensor,
    rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NumericsError::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), DropoutMask::identity()));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((
        Tensor::new(x.shape().to_vec(), data)?,
        DropoutMask(Some(mask)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_and_eval_mode_are_identity() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut rng = Rng::seeded(3);
        let (y, mask) = apply_dropout(&x, 0.0, &mut rng, true).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_identity());
        let (y, _) = apply_dropout(&x, 0.5, &mut rng, false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn mean_is_preserved_in_expectation() {
        let n = 100_000;
        let x = Tensor::vector((0..n).map(|i| 1.0 + (i % 7) as f64).collect());
        let mut rng = Rng::seeded(11);
        let (y, _) = apply_dropout(&x, 0.5, &mut rng, true).unwrap();
        let mean_x = x.data().iter().sum::<f64>() / n as f64;
        let mean_y = y.data().iter().sum::<f64>() / n as f64;
        assert!(((mean_y - mean_x) / mean_x).abs() < 0.02);
    }

    #[test]
    fn rate_out_of_range_is_config_error() {
        let x = Tensor::vector(vec![1.0]);
        let mut rng = Rng::seeded(0);
        assert!(matches!(
            apply_dropout(&x, 1.0, &mut rng, true),
            Err(NumericsError::Config(_))
        ));
        assert!(apply_dropout(&x, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn backward_uses_same_mask() {
        let x = Tensor::vector(vec![1.0; 64]);
        let mut rng = Rng::seeded(5);
        let (y, mask) = apply_dropout(&x, 0.5, &mut rng, true).unwrap();
        let mut g = vec![1.0; 64];
        mask.backward(&mut g);
        assert_eq!(g, y.data());
    }
}
