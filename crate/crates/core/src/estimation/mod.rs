//! Range, angle-of-arrival and Doppler extraction from CSI.
//!
//! Range and Doppler come from zero-padded periodograms along the subcarrier
//! and symbol axes; angles come from spatial MUSIC over the receive array.

mod music;
mod periodogram;

pub use music::{
    estimate_aoas, estimate_source_powers, music, AoaEstimate, MusicResult, SubspaceModel,
    UniformLinearArray, DEFAULT_GRID_STEP,
};
pub use periodogram::{
    estimate_dopplers, estimate_ranges, RangeEstimate, RangeEstimation, RangeMode, ZERO_PADDING,
};
