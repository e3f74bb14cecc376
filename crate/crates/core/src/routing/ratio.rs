use crate::error::{Error, Result};

/// Maps the continuous quality `q ∈ [1, Q_max]` to the fraction of positions
/// routed to the encoder's high-quality path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioSchedule {
    /// Base of the inverse-log transform (> 1).
    pub beta: f64,
    /// Largest quality level (>= 2).
    pub q_max: f64,
}

impl Default for RatioSchedule {
    fn default() -> Self {
        Self {
            beta: 5.0,
            q_max: 8.0,
        }
    }
}

impl RatioSchedule {
    pub fn new(beta: f64, q_max: f64) -> Result<Self> {
        if !(beta > 1.0) || !(q_max >= 2.0) {
            return Err(Error::config(format!(
                "ratio schedule needs beta > 1 and Q_max >= 2, got beta={beta}, Q_max={q_max}"
            )));
        }
        Ok(Self { beta, q_max })
    }

    /// `ρ_enc = (β^((q−1)/(Q_max−1)) − 1) / (β − 1)`.
    pub fn ratio_from_quality(&self, q: f64) -> Result<f64> {
        if !(1.0..=self.q_max).contains(&q) {
            return Err(Error::domain(format!("quality {q} outside [1, {}]", self.q_max)));
        }
        let t = (q - 1.0) / (self.q_max - 1.0);
        Ok((self.beta.powf(t) - 1.0) / (self.beta - 1.0))
    }
}

/// `ρ_dec = 1 − α`: the share of positions kept on the decoder's main path.
pub fn ratio_decoder(alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!("task orientation {alpha} outside [0, 1]")));
    }
    Ok(1.0 - alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = RatioSchedule::default();
        assert_eq!(s.ratio_from_quality(1.0).unwrap(), 0.0);
        assert_eq!(s.ratio_from_quality(8.0).unwrap(), 1.0);
        let mid = s.ratio_from_quality(4.5).unwrap();
        assert!((mid - (5f64.sqrt() - 1.0) / 4.0).abs() < 1e-15);
        assert!((mid - 0.309_017_0).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_quality_is_a_domain_error() {
        let s = RatioSchedule::default();
        assert!(matches!(s.ratio_from_quality(0.99), Err(Error::Domain(_))));
        assert!(matches!(s.ratio_from_quality(8.01), Err(Error::Domain(_))));
        assert!(matches!(s.ratio_from_quality(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn decoder_ratio() {
        assert_eq!(ratio_decoder(0.0).unwrap(), 1.0);
        assert_eq!(ratio_decoder(1.0).unwrap(), 0.0);
        assert!((ratio_decoder(3.0 / 7.0).unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!(ratio_decoder(1.5).is_err());
    }

    #[test]
    fn invalid_schedule_rejected() {
        assert!(RatioSchedule::new(1.0, 8.0).is_err());
        assert!(RatioSchedule::new(5.0, 1.0).is_err());
    }
}
