//! Speed unit conversions. Everything internal is SI; configs speak km/h.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnitError {
    #[error("speed must be a non-negative finite number, got {0} km/h")]
    NegativeSpeed(f64),
}

pub fn kph_to_mps(speed_kph: f64) -> Result<f64, UnitError> {
    if !(speed_kph >= 0.0) || !speed_kph.is_finite() {
        return Err(UnitError::NegativeSpeed(speed_kph));
    }
    Ok(speed_kph / 3.6)
}

pub fn mps_to_kph(speed_mps: f64) -> f64 {
    speed_mps * 3.6
}
