use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::config::{ExperimentConfig, NetworkedConfig, NoiseMode, UeSelectionConfig};
use super::output::{emit_csv, ResultRow};
use crate::assoc::{classify_ghosts, greedy_match, solve_association_pruned, DistanceProfile};
use crate::error::Result;
use crate::estimation::{estimate_ranges, RangeMode};
use crate::rng::rng_from;
use crate::scene::{distance, BaseStation, Position, RadioConfig, Scene, Target, UserEquipment, SPEED_OF_LIGHT};
use crate::trilateration::feasibility_threshold;
use crate::ue_assist::{ue_assisted_localize, TimingMode, UeAssistConfig};
use crate::waveform::synthesize_csi;

/// Per-trial generator; `seed ⊕ trial` keeps earlier trials fixed when the count grows.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    rng_from(seed ^ trial as u64)
}

pub(crate) fn all_pairs_visible(ids: &[String]) -> BTreeSet<(String, String)> {
    let mut set = BTreeSet::new();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            let pair = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
            set.insert(pair);
        }
    }
    set
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkedPoint {
    /// Hz
    pub bandwidth: f64,
    pub num_targets: usize,
    pub trials: usize,
    pub detection_error_probability: f64,
    pub ghost_rate: f64,
    /// seconds per trial, 0 unless runtimes are recorded
    pub mean_runtime: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct TrialOutcome {
    error: bool,
    ghost: bool,
    runtime: f64,
}

fn networked_radio(config: &NetworkedConfig, bandwidth: f64) -> RadioConfig {
    RadioConfig {
        carrier_frequency: config.carrier_frequency,
        bandwidth,
        num_subcarriers: config.num_subcarriers,
        num_symbols: config.num_symbols,
        // useful symbol plus a 1/4 cyclic prefix
        symbol_duration: 1.25 * config.num_subcarriers as f64 / bandwidth,
        noise_power: 10f64.powf(-config.snr_db / 10.0),
    }
}

fn station_positions(config: &NetworkedConfig) -> Vec<Position> {
    (0..config.num_bs)
        .map(|m| Position::unit(2.0 * PI * m as f64 / config.num_bs as f64 + PI / 2.0) * config.bs_ring_radius)
        .collect()
}

fn networked_trial(config: &NetworkedConfig, bandwidth: f64, k: usize, trial: usize) -> TrialOutcome {
    let start = Instant::now();
    let mut rng = trial_rng(config.seed, trial);
    let h = config.region_half_width;
    let truths: Vec<Position> = (0..k)
        .map(|_| Position::new(rng.random_range(-h..=h), rng.random_range(-h..=h)))
        .collect();
    let stations = station_positions(config);
    let resolution = SPEED_OF_LIGHT / (2.0 * bandwidth);
    let sigma = config.range_noise_fraction * resolution;
    let unit_noise: Vec<Vec<f64>> = (0..stations.len())
        .map(|_| (0..k).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let noise_seed: u64 = rng.random();

    let profiles: Option<Vec<DistanceProfile>> = match config.noise_mode {
        NoiseMode::Fast => Some(
            stations
                .iter()
                .zip(&unit_noise)
                .enumerate()
                .map(|(m, (s, z))| {
                    let mut ranges: Vec<f64> = truths
                        .iter()
                        .zip(z)
                        .map(|(t, z)| (distance(*s, *t) + sigma * z).max(0.0))
                        .collect();
                    ranges.shuffle(&mut rng);
                    DistanceProfile::new(format!("bs{m}"), ranges)
                })
                .collect(),
        ),
        NoiseMode::Csi => csi_profiles(config, bandwidth, &stations, &truths, noise_seed),
    };
    let Some(profiles) = profiles else {
        return TrialOutcome {
            error: true,
            ghost: false,
            runtime: start.elapsed().as_secs_f64(),
        };
    };
    let epsilon = feasibility_threshold(sigma, stations.len());
    let solutions = solve_association_pruned(&profiles, &stations, epsilon).unwrap_or_default();
    let error = match solutions.first() {
        Some(best) => {
            let matched = greedy_match(&best.positions, &truths, config.detection_radius);
            matched.iter().flatten().count() < k
        }
        None => true,
    };
    // a ghost is a feasible position away from every true target
    let ghost = classify_ghosts(&solutions, &truths, config.detection_radius)
        .ghosts
        .iter()
        .any(|g| truths.iter().all(|t| distance(*g, *t) > config.detection_radius));
    TrialOutcome {
        error,
        ghost,
        runtime: start.elapsed().as_secs_f64(),
    }
}

/// Ranges from synthesized monostatic CSI; `None` when some station resolves fewer peaks than targets.
fn csi_profiles(
    config: &NetworkedConfig,
    bandwidth: f64,
    stations: &[Position],
    truths: &[Position],
    noise_seed: u64,
) -> Option<Vec<DistanceProfile>> {
    let bs: Vec<BaseStation> = stations
        .iter()
        .enumerate()
        .map(|(m, p)| BaseStation {
            id: format!("bs{m}"),
            position: *p,
            num_antennas: config.num_antennas,
            array_orientation: 0.0,
        })
        .collect();
    let targets: Vec<Target> = truths
        .iter()
        .enumerate()
        .map(|(i, p)| Target::new(format!("t{i}"), *p))
        .collect();
    let ids: Vec<String> = bs.iter().map(|b| b.id.clone()).chain(targets.iter().map(|t| t.id.clone())).collect();
    let radio = networked_radio(config, bandwidth);
    let noise_power = radio.noise_power;
    let scene = Scene {
        base_stations: bs,
        user_equipments: vec![],
        rises: vec![],
        targets,
        los_visibility: all_pairs_visible(&ids),
        radio,
    };
    let target_ids: Vec<&str> = scene.targets.iter().map(|t| t.id.as_str()).collect();
    let mut profiles = Vec::with_capacity(stations.len());
    for (m, b) in scene.base_stations.iter().enumerate() {
        let csi = synthesize_csi(&scene, &b.id, &b.id, &target_ids, noise_power, noise_seed.wrapping_add(m as u64)).ok()?;
        let est = estimate_ranges(&csi, truths.len(), true, RangeMode::Monostatic).ok()?;
        if est.shortfall() > 0 {
            return None;
        }
        profiles.push(DistanceProfile::new(b.id.clone(), est.estimates.iter().map(|e| e.range).collect()));
    }
    Some(profiles)
}

/// Detection-error and ghost rates for every `(target count, bandwidth)` point.
pub fn run_networked(config: &NetworkedConfig) -> Result<Vec<NetworkedPoint>> {
    config.validate()?;
    let mut points = Vec::new();
    for &k in &config.target_counts {
        for &bandwidth in &config.bandwidths {
            let outcomes: Vec<TrialOutcome> = (0..config.trials)
                .into_par_iter()
                .map(|trial| networked_trial(config, bandwidth, k, trial))
                .collect();
            let n = outcomes.len() as f64;
            points.push(NetworkedPoint {
                bandwidth,
                num_targets: k,
                trials: config.trials,
                detection_error_probability: outcomes.iter().filter(|o| o.error).count() as f64 / n,
                ghost_rate: outcomes.iter().filter(|o| o.ghost).count() as f64 / n,
                mean_runtime: if config.record_runtime {
                    outcomes.iter().map(|o| o.runtime).sum::<f64>() / n
                } else {
                    0.0
                },
            });
        }
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UeSelectionPoint {
    pub num_erroneous: usize,
    pub trials: usize,
    /// with greedy UE selection
    pub selection_error_probability: f64,
    /// localizing with every UE
    pub all_ues_error_probability: f64,
    /// Fraction of trials in which every erroneous UE was removed.
    pub full_removal_rate: f64,
    pub mean_runtime: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct UeOutcome {
    selection_error: bool,
    all_error: bool,
    fully_removed: bool,
    runtime: f64,
}

/// Random scene: BS at the origin, one target, accurate UEs then erroneous UEs.
///
/// Returns the scene and the ids of the erroneous UEs.
pub fn ue_selection_scene(config: &UeSelectionConfig, num_erroneous: usize, trial: usize) -> (Scene, Vec<String>) {
    let mut rng = trial_rng(config.seed, trial);
    let bearing = rng.random_range(0.0..2.0 * PI);
    let target = Position::unit(bearing) * config.target_distance;
    let back = bearing + PI;
    let w = config.ue_sector_half_width_deg.to_radians();
    let (r2_lo, r2_hi) = (config.ue_inner_radius.powi(2), config.ue_outer_radius.powi(2));
    let mut ues = Vec::new();
    let mut erroneous = Vec::new();
    for i in 0..config.num_accurate + num_erroneous {
        let bad = i >= config.num_accurate;
        let angle = back + if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        let radius = if r2_hi > r2_lo { rng.random_range(r2_lo..r2_hi).sqrt() } else { config.ue_inner_radius };
        let position = target + Position::unit(angle) * radius;
        let offset = match config.timing {
            TimingMode::Synchronized => 0.0,
            _ => rng.random_range(0.0..=config.max_timing_offset),
        };
        let std = if bad { config.erroneous_std } else { config.accurate_std };
        let id = format!("ue{i:02}");
        let ue = UserEquipment::with_position_error(id.clone(), position, std, offset, &mut rng);
        if bad {
            erroneous.push(id);
        }
        ues.push(ue);
    }
    let bs = BaseStation {
        id: "bs".into(),
        position: Position::new(0.0, 0.0),
        num_antennas: 1,
        array_orientation: 0.0,
    };
    let t = Target::new("target", target);
    let ids: Vec<String> = std::iter::once(bs.id.clone())
        .chain(ues.iter().map(|u| u.id.clone()))
        .chain(std::iter::once(t.id.clone()))
        .collect();
    let scene = Scene {
        base_stations: vec![bs],
        user_equipments: ues,
        rises: vec![],
        targets: vec![t],
        los_visibility: all_pairs_visible(&ids),
        radio: RadioConfig {
            carrier_frequency: 28e9,
            bandwidth: 4e8,
            num_subcarriers: 512,
            num_symbols: 16,
            symbol_duration: 1.6e-6,
            noise_power: 0.1,
        },
    };
    (scene, erroneous)
}

fn ue_trial(config: &UeSelectionConfig, k: usize, trial: usize) -> UeOutcome {
    let start = Instant::now();
    let (scene, erroneous) = ue_selection_scene(config, k, trial);
    let truth = scene.targets[0].position;
    let base = UeAssistConfig {
        delay_noise_std: config.delay_noise_std,
        timing: config.timing,
        selection: true,
        stopping_threshold: None,
        min_anchors: 3,
        include_monostatic: config.include_monostatic,
        seed: config.seed ^ trial as u64,
    };
    let with = ue_assisted_localize(&scene, "bs", "target", &base);
    let without = ue_assisted_localize(&scene, "bs", "target", &UeAssistConfig { selection: false, ..base });
    let missed = |r: &Result<crate::ue_assist::UeAssistOutcome>| {
        r.as_ref()
            .map_or(true, |o| distance(o.result.position, truth) > config.detection_radius)
    };
    let fully_removed = with.as_ref().is_ok_and(|o| {
        erroneous.iter().all(|id| !o.anchors.retained_ue_ids.contains(id))
    });
    UeOutcome {
        selection_error: missed(&with),
        all_error: missed(&without),
        fully_removed,
        runtime: start.elapsed().as_secs_f64(),
    }
}

/// Selection versus all-UE localization for every erroneous-UE count.
pub fn run_ue_selection(config: &UeSelectionConfig) -> Result<Vec<UeSelectionPoint>> {
    config.validate()?;
    Ok(config
        .erroneous_counts
        .iter()
        .map(|&k| {
            let outcomes: Vec<UeOutcome> = (0..config.trials)
                .into_par_iter()
                .map(|trial| ue_trial(config, k, trial))
                .collect();
            let n = outcomes.len() as f64;
            let rate = |f: fn(&UeOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
            UeSelectionPoint {
                num_erroneous: k,
                trials: config.trials,
                selection_error_probability: rate(|o| o.selection_error),
                all_ues_error_probability: rate(|o| o.all_error),
                full_removal_rate: rate(|o| o.fully_removed),
                mean_runtime: if config.record_runtime {
                    outcomes.iter().map(|o| o.runtime).sum::<f64>() / n
                } else {
                    0.0
                },
            }
        })
        .collect())
}

fn format_hz(hz: f64) -> String {
    if hz.fract() == 0.0 && hz.abs() < 1e18 {
        format!("{}", hz as i64)
    } else {
        format!("{hz}")
    }
}

/// Run the configured sweep and return rows in sweep order.
pub fn run_montecarlo(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    match config {
        ExperimentConfig::Networked(c) => Ok(run_networked(c)?
            .into_iter()
            .map(|p| ResultRow {
                sweep: format!("bw={};k={}", format_hz(p.bandwidth), p.num_targets),
                detection_error_probability: p.detection_error_probability,
                ghost_rate: p.ghost_rate,
                mean_runtime: p.mean_runtime,
            })
            .collect()),
        ExperimentConfig::UeSelection(c) => Ok(run_ue_selection(c)?
            .into_iter()
            .flat_map(|p| {
                [
                    ResultRow {
                        sweep: format!("k={};selection", p.num_erroneous),
                        detection_error_probability: p.selection_error_probability,
                        ghost_rate: 0.0,
                        mean_runtime: p.mean_runtime,
                    },
                    ResultRow {
                        sweep: format!("k={};all_ues", p.num_erroneous),
                        detection_error_probability: p.all_ues_error_probability,
                        ghost_rate: 0.0,
                        mean_runtime: p.mean_runtime,
                    },
                ]
            })
            .collect()),
    }
}

/// [`run_montecarlo`] followed by [`emit_csv`].
pub fn run_montecarlo_to_csv(config: &ExperimentConfig, path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let rows = run_montecarlo(config)?;
    emit_csv(&rows, path)?;
    Ok(rows)
}
