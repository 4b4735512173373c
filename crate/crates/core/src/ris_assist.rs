//! Localization through a reconfigurable intelligent surface used as a passive anchor.
//!
//! Active targets transmit pilots that reach the BS only via the RIS. The RIS
//! cycles through a schedule of reflection patterns, one per slot, so the BS
//! collects a temporal vector that is a known linear mixture of the per-element
//! signals. Undoing the mixture recovers virtual array snapshots at the RIS, on
//! which MUSIC estimates each target's AOA. Ranges come from the total path
//! delay minus the known RIS–BS leg.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    estimate_ranges, estimate_source_powers, music, AoaEstimate, MusicResult, RangeMode, UniformLinearArray,
    DEFAULT_GRID_STEP,
};
use crate::rng::{derive_seed, rng_from};
use crate::scene::{aoa_from_axis, distance, Position, Ris, Scene, SPEED_OF_LIGHT};
use crate::waveform::{synthesize_paths, PathParams};

/// Largest schedule condition number accepted when rebuilding snapshots.
pub const MAX_CONDITION_NUMBER: f64 = 1e6;

/// Reflection coefficients indexed `[slot][element]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectionSchedule {
    coefficients: DMatrix<Complex64>,
}

impl ReflectionSchedule {
    /// Validate a passive schedule: unit-modulus entries, at least as many
    /// slots as elements, full column rank.
    pub fn new(coefficients: DMatrix<Complex64>) -> Result<Self> {
        let (t, n) = coefficients.shape();
        if n == 0 || t < n {
            return Err(Error::Precondition(format!("schedule needs slots >= elements >= 1, got {t}x{n}")));
        }
        if let Some(c) = coefficients.iter().find(|c| (c.norm() - 1.0).abs() > 1e-12) {
            return Err(Error::invariant("coefficients", format!("entry {c} is not unit modulus")));
        }
        let schedule = Self { coefficients };
        if !schedule.condition_number().is_finite() {
            return Err(Error::invariant("coefficients", "schedule is rank deficient"));
        }
        Ok(schedule)
    }

    /// One element switched on per slot. Not passive-realizable (the other
    /// elements must absorb), but useful to read element signals directly.
    pub fn on_off_selector(num_elements: usize) -> Self {
        Self {
            coefficients: DMatrix::identity(num_elements, num_elements),
        }
    }

    pub fn coefficients(&self) -> &DMatrix<Complex64> {
        &self.coefficients
    }

    pub fn num_slots(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn num_elements(&self) -> usize {
        self.coefficients.ncols()
    }

    /// Ratio of extreme singular values; infinite when rank deficient.
    pub fn condition_number(&self) -> f64 {
        let sv = self.coefficients.clone().svd(false, false).singular_values;
        let (lo, hi) = (sv.min(), sv.max());
        if lo <= hi * 1e-15 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

/// First `num_elements` columns of the `num_slots`-point DFT matrix.
pub fn make_schedule(num_elements: usize, num_slots: usize) -> Result<ReflectionSchedule> {
    if num_slots < num_elements {
        return Err(Error::Precondition(format!(
            "{num_slots} slots cannot resolve {num_elements} elements"
        )));
    }
    let t = num_slots as f64;
    let phi = DMatrix::from_fn(num_slots, num_elements, |slot, n| {
        Complex64::from_polar(1.0, -2.0 * PI * ((slot * n) % num_slots) as f64 / t)
    });
    ReflectionSchedule::new(phi)
}

/// Slots observed at the BS for one burst of snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct RisObservationBlock {
    /// `[slot][snapshot]`
    pub samples: DMatrix<Complex64>,
    pub schedule: ReflectionSchedule,
    /// Known RIS→BS channel per element.
    pub cascade_gains: DVector<Complex64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RisPolarFix {
    /// meters
    pub range_to_ris: f64,
    /// radians from broadside, positive toward the array axis
    pub aoa_at_ris: f64,
}

fn ris_array(ris: &Ris) -> UniformLinearArray {
    UniformLinearArray {
        num_elements: ris.num_elements,
        spacing: ris.element_spacing,
    }
}

/// Unit-magnitude RIS→BS channel with phase `2π·d_n/λ` from element `n`.
pub fn cascade_gains(scene: &Scene, ris_id: &str, bs_id: &str) -> Result<DVector<Complex64>> {
    let ris = scene.ris(ris_id)?;
    let bs = scene.base_station(bs_id)?;
    let lambda = scene.radio.wavelength();
    Ok(DVector::from_fn(ris.num_elements, |n, _| {
        let d = distance(ris.element_position(n, lambda), bs.position);
        Complex64::from_polar(1.0, 2.0 * PI * d / lambda)
    }))
}

/// Per-target AOA at the RIS and complex amplitude at the reference element.
fn sources(scene: &Scene, ris: &Ris, target_ids: &[&str]) -> Result<Vec<(f64, Complex64)>> {
    let lambda = scene.radio.wavelength();
    target_ids
        .iter()
        .map(|id| {
            let t = scene.target(id)?;
            scene.require_los(id, &ris.id)?;
            let theta = aoa_from_axis(ris.position, ris.orientation, t.position);
            let propagation = Complex64::from_polar(1.0, -2.0 * PI * distance(t.position, ris.position) / lambda);
            Ok((theta, t.gain(id, &ris.id) * propagation))
        })
        .collect()
}

/// Signals impinging on the RIS elements, `[element][snapshot]`:
/// `Σ_k α_k a(θ_k) s_k[b]` with unit-modulus random-phase pilots.
pub fn direct_snapshots(
    scene: &Scene,
    ris_id: &str,
    target_ids: &[&str],
    num_snapshots: usize,
    seed: u64,
) -> Result<DMatrix<Complex64>> {
    let ris = scene.ris(ris_id)?;
    let src = sources(scene, ris, target_ids)?;
    let array = ris_array(ris);
    let mut rng = rng_from(derive_seed(seed, 0));
    let pilots = DMatrix::from_fn(src.len(), num_snapshots, |_, _| {
        Complex64::from_polar(1.0, rng.random_range(-PI..PI))
    });
    let mut x = DMatrix::zeros(ris.num_elements, num_snapshots);
    for (k, (theta, alpha)) in src.iter().enumerate() {
        let a = array.steering(*theta) * *alpha;
        x += &a * pilots.row(k);
    }
    Ok(x)
}

/// Slot samples at the BS: `y = Φ · diag(c) · X + w` with `E|w|² = 10^(−snr/10)`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_ris_uplink(
    scene: &Scene,
    ris_id: &str,
    bs_id: &str,
    target_ids: &[&str],
    schedule: &ReflectionSchedule,
    num_snapshots: usize,
    snr_db: f64,
    seed: u64,
) -> Result<RisObservationBlock> {
    let ris = scene.ris(ris_id)?;
    scene.base_station(bs_id)?;
    scene.require_los(ris_id, bs_id)?;
    if schedule.num_elements() != ris.num_elements {
        return Err(Error::Precondition(format!(
            "schedule drives {} elements, RIS has {}",
            schedule.num_elements(),
            ris.num_elements
        )));
    }
    let x = direct_snapshots(scene, ris_id, target_ids, num_snapshots, seed)?;
    let c = cascade_gains(scene, ris_id, bs_id)?;
    let mut y = schedule.coefficients() * DMatrix::from_diagonal(&c) * x;
    if snr_db.is_finite() {
        let sigma = (10f64.powf(-snr_db / 10.0) / 2.0).sqrt();
        let mut rng = rng_from(derive_seed(seed, 1));
        for v in y.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *v += Complex64::new(re * sigma, im * sigma);
        }
    }
    Ok(RisObservationBlock {
        samples: y,
        schedule: schedule.clone(),
        cascade_gains: c,
    })
}

/// Virtual RIS snapshots `Z = diag(c)⁻¹ Φ⁺ y`.
pub fn build_temporal_snapshots(block: &RisObservationBlock) -> Result<DMatrix<Complex64>> {
    let phi = block.schedule.coefficients();
    if block.samples.nrows() != phi.nrows() || block.cascade_gains.len() != phi.ncols() {
        return Err(Error::Precondition("block dimensions do not match the schedule".into()));
    }
    if block.cascade_gains.iter().any(|c| c.norm() == 0.0) {
        return Err(Error::Precondition("cascade gains must be nonzero".into()));
    }
    let cond = block.schedule.condition_number();
    if cond > MAX_CONDITION_NUMBER {
        return Err(Error::IllConditioned(cond));
    }
    let pinv = phi
        .clone()
        .pseudo_inverse(0.0)
        .map_err(|e| Error::Precondition(e.to_owned()))?;
    let mut z = pinv * &block.samples;
    for (mut row, c) in z.row_iter_mut().zip(block.cascade_gains.iter()) {
        row /= *c;
    }
    Ok(z)
}

/// MUSIC over the RIS steering manifold.
pub fn estimate_aoa_at_ris(
    snapshots: &DMatrix<Complex64>,
    num_targets: usize,
    element_spacing: f64,
    grid_step: f64,
) -> Result<MusicResult> {
    let array = UniformLinearArray {
        num_elements: snapshots.nrows(),
        spacing: element_spacing,
    };
    music(snapshots, num_targets, array, grid_step)
}

/// Target-to-RIS range from the total `target → RIS → BS` delay.
pub fn estimate_range_to_ris(total_path_delay: f64, ris_position: Position, bs_position: Position) -> Result<f64> {
    const TOLERANCE: f64 = 1e-6;
    let range = SPEED_OF_LIGHT * total_path_delay - distance(ris_position, bs_position);
    if range < -TOLERANCE {
        return Err(Error::Inconsistent(format!(
            "path delay implies a negative range of {range:.6} m"
        )));
    }
    Ok(range.max(0.0))
}

/// RIS-frame polar coordinates to a global position.
pub fn localize_via_ris(fix: &RisPolarFix, ris: &Ris) -> Position {
    let (s, c) = fix.aoa_at_ris.sin_cos();
    ris.position + (ris.axis() * s + ris.broadside() * c) * fix.range_to_ris
}

/// Polar fix of `position` as seen from the RIS; inverse of [`localize_via_ris`]
/// in front of the surface.
pub fn polar_fix_of(ris: &Ris, position: Position) -> RisPolarFix {
    RisPolarFix {
        range_to_ris: distance(ris.position, position),
        aoa_at_ris: aoa_from_axis(ris.position, ris.orientation, position),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RisAssistConfig {
    pub num_snapshots: usize,
    /// dB; `inf` gives a noiseless block
    pub snr_db: f64,
    /// radians
    pub grid_step: f64,
    /// Reflection slots per snapshot; defaults to the element count.
    pub num_slots: Option<usize>,
    /// Noise power of the wideband delay pilot relative to a unit path.
    pub delay_noise_power: f64,
    pub seed: u64,
}

impl Default for RisAssistConfig {
    fn default() -> Self {
        Self {
            num_snapshots: 200,
            snr_db: 20.0,
            grid_step: DEFAULT_GRID_STEP,
            num_slots: None,
            delay_noise_power: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RisLocalization {
    pub position: Position,
    pub fix: RisPolarFix,
    /// Estimated source power used for pairing.
    pub power: f64,
}

#[derive(Clone, Debug)]
pub struct RisAssistOutput {
    /// Descending power order.
    pub targets: Vec<RisLocalization>,
    pub music: MusicResult,
}

/// End-to-end RIS pipeline for `target_ids`.
///
/// AOAs come from temporal MUSIC and ranges from the delay periodogram of a
/// wideband pilot. The two lists are paired strongest-to-strongest.
pub fn ris_assisted_localize(
    scene: &Scene,
    ris_id: &str,
    bs_id: &str,
    target_ids: &[&str],
    config: &RisAssistConfig,
) -> Result<RisAssistOutput> {
    let ris = scene.ris(ris_id)?;
    let bs = scene.base_station(bs_id)?;
    let k = target_ids.len();
    let schedule = make_schedule(ris.num_elements, config.num_slots.unwrap_or(ris.num_elements))?;
    let block = synthesize_ris_uplink(
        scene,
        ris_id,
        bs_id,
        target_ids,
        &schedule,
        config.num_snapshots,
        config.snr_db,
        config.seed,
    )?;
    let z = build_temporal_snapshots(&block)?;
    let spectrum = estimate_aoa_at_ris(&z, k, ris.element_spacing, config.grid_step)?;
    if spectrum.estimates.len() < k {
        return Err(Error::Unresolvable {
            requested: k,
            found: spectrum.estimates.len(),
        });
    }
    let angles: Vec<f64> = spectrum.estimates.iter().map(|e| e.angle).collect();
    let powers = estimate_source_powers(&spectrum.model, &angles);

    let ris_bs = distance(ris.position, bs.position);
    let paths: Vec<PathParams> = sources(scene, ris, target_ids)?
        .into_iter()
        .zip(target_ids)
        .map(|((_, alpha), id)| {
            let t = scene.target(id).expect("checked by sources");
            PathParams {
                delay: (distance(t.position, ris.position) + ris_bs) / SPEED_OF_LIGHT,
                aoa: 0.0,
                doppler: 0.0,
                complex_gain: alpha,
            }
        })
        .collect();
    let csi = synthesize_paths(&paths, 1, &scene.radio, config.delay_noise_power, derive_seed(config.seed, 2));
    let ranges = estimate_ranges(&csi, k, true, RangeMode::Bistatic)?;
    if ranges.shortfall() > 0 {
        return Err(Error::Unresolvable {
            requested: k,
            found: ranges.estimates.len(),
        });
    }

    let mut by_power: Vec<(f64, AoaEstimate)> = powers.into_iter().zip(spectrum.estimates.iter().copied()).collect();
    by_power.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.angle.total_cmp(&b.1.angle)));
    let mut range_order = ranges.estimates.clone();
    range_order.sort_by(|a, b| b.peak_power.total_cmp(&a.peak_power).then(a.range.total_cmp(&b.range)));

    let targets = by_power
        .into_iter()
        .zip(range_order)
        .map(|((power, aoa), r)| {
            let range_to_ris = estimate_range_to_ris(r.range / SPEED_OF_LIGHT, ris.position, bs.position)?;
            let fix = RisPolarFix {
                range_to_ris,
                aoa_at_ris: aoa.angle,
            };
            Ok(RisLocalization {
                position: localize_via_ris(&fix, ris),
                fix,
                power,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RisAssistOutput {
        targets,
        music: spectrum,
    })
}
