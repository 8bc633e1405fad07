//! Analytic cycle model over staged programs, and the sweeps built on it.

mod config;
mod sim;
mod sweep;

pub use config::{MachineConfig, OpCycles, DEFAULT_CONFIG_TEXT};
pub use sim::{simulate, TimingReport};
pub use sweep::{
    ideal_overlap_config, measure_overlap, memory_fraction_sweep, parse_ladder, pass_sweep, shape_for_size,
    simulate_passes, size_sweep, synthetic_overlap_kernel, write_csv, OverlapPoint, Rung, SweepAxis, SweepRow,
    CSV_HEADER, DEFAULT_LADDER, DEFAULT_PASS_SWEEP_SIZE, M_POINTS, SWEEP_SIZES,
};

use crate::driver::DriverError;

#[derive(Debug, thiserror::Error)]
pub enum PerfError {
    #[error("machine config: {0}")]
    Config(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("memory fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("sweep: {0}")]
    Sweep(String),
    #[error(transparent)]
    Pipeline(#[from] DriverError),
}

/// Speedup of perfectly overlapped transfer and compute when transfers take
/// fraction `m` of the serial time.
pub fn ideal_overlap_speedup(m: f64) -> Result<f64, PerfError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(PerfError::Fraction(m));
    }
    Ok(1.0 / m.max(1.0 - m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ideal_overlap_points() {
        assert_eq!(ideal_overlap_speedup(0.0).unwrap(), 1.0);
        assert_eq!(ideal_overlap_speedup(1.0).unwrap(), 1.0);
        assert_eq!(ideal_overlap_speedup(0.5).unwrap(), 2.0);
        assert!((ideal_overlap_speedup(0.25).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!(ideal_overlap_speedup(1.5).is_err());
        assert!(ideal_overlap_speedup(f64::NAN).is_err());
    }
}
