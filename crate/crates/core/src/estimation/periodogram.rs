use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::scene::SPEED_OF_LIGHT;
use crate::waveform::CsiTensor;

/// Periodogram oversampling factor.
pub const ZERO_PADDING: usize = 8;

/// How a measured path length maps to a reported range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RangeMode {
    /// Co-located transmitter and receiver: range is half the path length.
    Monostatic,
    /// Distinct endpoints: range is the full path length.
    Bistatic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeEstimate {
    /// meters
    pub range: f64,
    /// Peak height; a unit-gain path alone gives 1.
    pub peak_power: f64,
}

/// Result of [`estimate_ranges`]; may hold fewer peaks than requested.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeEstimation {
    /// Sorted by ascending range.
    pub estimates: Vec<RangeEstimate>,
    pub requested: usize,
}

impl RangeEstimation {
    pub fn shortfall(&self) -> usize {
        self.requested.saturating_sub(self.estimates.len())
    }
}

/// Noncoherent power spectrum of all lines along one tensor axis, zero-padded.
fn padded_spectrum<'a>(
    lines: impl Iterator<Item = Box<dyn Iterator<Item = Complex64> + 'a>>,
    len: usize,
    direction: FftDirection,
) -> Vec<f64> {
    let size = len * ZERO_PADDING;
    let fft = FftPlanner::new().plan_fft(size, direction);
    let mut buf = vec![Complex64::new(0.0, 0.0); size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; size];
    let mut count = 0usize;
    for line in lines {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for (b, v) in buf.iter_mut().zip(line) {
            *b = v;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p += b.norm_sqr();
        }
        count += 1;
    }
    let norm = (count.max(1) * len * len) as f64;
    power.iter_mut().for_each(|p| *p /= norm);
    power
}

/// Circular local maxima, strongest first, with a minimum spacing of `guard` bins.
///
/// Ties are broken by the lower index.
pub(crate) fn pick_peaks(power: &[f64], max_peaks: usize, guard: usize) -> Vec<usize> {
    let n = power.len();
    if n == 0 {
        return Vec::new();
    }
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            let prev = power[(i + n - 1) % n];
            let next = power[(i + 1) % n];
            power[i] > prev && power[i] >= next
        })
        .collect();
    candidates.sort_by(|&a, &b| power[b].total_cmp(&power[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = Vec::with_capacity(max_peaks);
    for c in candidates {
        if picked.len() == max_peaks {
            break;
        }
        let clear = picked.iter().all(|&p| {
            let d = c.abs_diff(p);
            d.min(n - d) >= guard
        });
        if clear {
            picked.push(c);
        }
    }
    picked
}

/// Vertex offset of the parabola through three equally spaced samples.
pub(crate) fn parabolic_offset(prev: f64, center: f64, next: f64) -> f64 {
    let denom = prev - 2.0 * center + next;
    if denom == 0.0 || !denom.is_finite() {
        return 0.0;
    }
    (0.5 * (prev - next) / denom).clamp(-0.5, 0.5)
}

fn refined_index(power: &[f64], i: usize) -> f64 {
    let n = power.len();
    let prev = power[(i + n - 1) % n];
    let next = power[(i + 1) % n];
    i as f64 + parabolic_offset(prev, power[i], next)
}

/// Estimate up to `num_targets` path ranges from the subcarrier-axis periodogram.
///
/// The inverse DFT of each `(antenna, symbol)` line is zero-padded by
/// [`ZERO_PADDING`] and the squared magnitudes are averaged. Peaks closer than
/// one native bin (`c / B` of path length) are merged. With `refine`, each
/// peak is moved to the vertex of a parabola through its neighbours.
pub fn estimate_ranges(
    csi: &CsiTensor,
    num_targets: usize,
    refine: bool,
    mode: RangeMode,
) -> Result<RangeEstimation> {
    let (nm, nn, nl) = csi.dims();
    if num_targets == 0 || 2 * num_targets >= nn {
        return Err(Error::Precondition(format!(
            "need 1 <= K < num_subcarriers/2, got K={num_targets} with {nn} subcarriers"
        )));
    }
    let lines = (0..nm).flat_map(move |m| {
        (0..nl).map(move |l| {
            Box::new((0..nn).map(move |n| csi.get(m, n, l))) as Box<dyn Iterator<Item = _>>
        })
    });
    let power = padded_spectrum(lines, nn, FftDirection::Inverse);
    let size = power.len();
    let bin_delay = 1.0 / (size as f64 * csi.radio.subcarrier_spacing());
    let half = match mode {
        RangeMode::Monostatic => 0.5,
        RangeMode::Bistatic => 1.0,
    };
    let mut estimates: Vec<RangeEstimate> = pick_peaks(&power, num_targets, ZERO_PADDING)
        .into_iter()
        .map(|i| {
            let mut q = if refine { refined_index(&power, i) } else { i as f64 };
            // Bins just below the wrap point are small negative delays.
            if q > (size - ZERO_PADDING) as f64 {
                q -= size as f64;
            }
            RangeEstimate {
                range: (q.max(0.0) * bin_delay * SPEED_OF_LIGHT) * half,
                peak_power: power[i],
            }
        })
        .collect();
    estimates.sort_by(|a, b| a.range.total_cmp(&b.range));
    Ok(RangeEstimation {
        estimates,
        requested: num_targets,
    })
}

/// Estimate `num_targets` Doppler shifts (Hz) from the symbol-axis periodogram.
///
/// Frequencies are reported in `[-1/(2T), 1/(2T))`; anything outside wraps
/// by multiples of `1/T`. Sorted ascending.
pub fn estimate_dopplers(csi: &CsiTensor, num_targets: usize) -> Result<Vec<f64>> {
    let (nm, nn, nl) = csi.dims();
    if num_targets == 0 || nl < 2 * num_targets {
        return Err(Error::Precondition(format!(
            "need num_symbols >= 2K, got K={num_targets} with {nl} symbols"
        )));
    }
    let lines = (0..nm).flat_map(move |m| {
        (0..nn).map(move |n| {
            Box::new((0..nl).map(move |l| csi.get(m, n, l))) as Box<dyn Iterator<Item = _>>
        })
    });
    let power = padded_spectrum(lines, nl, FftDirection::Forward);
    let size = power.len() as f64;
    let t = csi.radio.symbol_duration;
    let peaks = pick_peaks(&power, num_targets, ZERO_PADDING);
    if peaks.len() < num_targets {
        return Err(Error::Unresolvable {
            requested: num_targets,
            found: peaks.len(),
        });
    }
    let mut freqs: Vec<f64> = peaks
        .into_iter()
        .map(|i| {
            let f = refined_index(&power, i) / (size * t);
            (f + 0.5 / t).rem_euclid(1.0 / t) - 0.5 / t
        })
        .collect();
    freqs.sort_by(f64::total_cmp);
    Ok(freqs)
}
