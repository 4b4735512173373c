//! UE-assisted localization.
//!
//! A BS illuminates the target and UEs measure the bistatic echo delay. Each
//! delay carries the UE's clock offset, and each UE's position is only known
//! through its (possibly badly wrong) report. Offsets are removed by LOS
//! calibration or estimated jointly with the targets; UEs with bad reports are
//! dropped greedily by residue reduction.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, stream_id};
use crate::scene::{distance, Position, Scene, SPEED_OF_LIGHT};
use crate::solver::gauss_newton;
use crate::trilateration::{localize, AnchorObservation, LocalizationResult, SolverOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct BistaticMeasurement {
    pub bs_id: String,
    pub ue_id: String,
    pub target_id: String,
    /// seconds, including the UE's timing offset
    pub measured_delay: f64,
    /// global bearing of the echo at the UE, radians, when the UE has an array
    pub aoa_at_ue: Option<f64>,
}

fn gaussian(std: f64, seed: u64, labels: &[&str]) -> Result<f64> {
    if !(std.is_finite() && std >= 0.0) {
        return Err(Error::Precondition(format!("noise std must be finite and nonnegative, got {std}")));
    }
    if std == 0.0 {
        return Ok(0.0);
    }
    let mut rng = rng_from(derive_seed(seed, stream_id(labels)));
    Ok(Normal::new(0.0, std).expect("valid std").sample(&mut rng))
}

/// Delay of `bs -> target -> ue` plus the UE's timing offset and Gaussian noise.
pub fn measure_bistatic(
    scene: &Scene,
    bs_id: &str,
    ue_id: &str,
    target_id: &str,
    delay_noise_std: f64,
    seed: u64,
) -> Result<BistaticMeasurement> {
    let bs = scene.base_station(bs_id)?;
    let ue = scene.user_equipment(ue_id)?;
    let target = scene.target(target_id)?;
    scene.require_los(bs_id, target_id)?;
    scene.require_los(target_id, ue_id)?;
    let path = distance(bs.position, target.position) + distance(target.position, ue.true_position);
    let noise = gaussian(delay_noise_std, seed, &["bistatic", bs_id, ue_id, target_id])?;
    Ok(BistaticMeasurement {
        bs_id: bs_id.to_owned(),
        ue_id: ue_id.to_owned(),
        target_id: target_id.to_owned(),
        measured_delay: path / SPEED_OF_LIGHT + ue.timing_offset + noise,
        aoa_at_ue: None,
    })
}

/// Direct-path delay `bs -> ue` as seen by the UE's clock.
pub fn measure_los_delay(scene: &Scene, bs_id: &str, ue_id: &str, delay_noise_std: f64, seed: u64) -> Result<f64> {
    let bs = scene.base_station(bs_id)?;
    let ue = scene.user_equipment(ue_id)?;
    scene.require_los(bs_id, ue_id)?;
    let noise = gaussian(delay_noise_std, seed, &["los", bs_id, ue_id])?;
    Ok(distance(bs.position, ue.true_position) / SPEED_OF_LIGHT + ue.timing_offset + noise)
}

/// Round-trip echo delay at the BS itself; no clock offset is involved.
pub fn measure_monostatic(scene: &Scene, bs_id: &str, target_id: &str, delay_noise_std: f64, seed: u64) -> Result<f64> {
    let bs = scene.base_station(bs_id)?;
    let target = scene.target(target_id)?;
    scene.require_los(bs_id, target_id)?;
    let noise = gaussian(delay_noise_std, seed, &["monostatic", bs_id, target_id])?;
    Ok(2.0 * distance(bs.position, target.position) / SPEED_OF_LIGHT + noise)
}

/// Timing offset implied by a LOS delay and the UE's reported position.
pub fn calibrate_to_los(scene: &Scene, bs_id: &str, ue_id: &str, measured_los_delay: f64) -> Result<f64> {
    let bs = scene.base_station(bs_id)?;
    let ue = scene.user_equipment(ue_id)?;
    scene.require_los(bs_id, ue_id)?;
    Ok(measured_los_delay - distance(bs.position, ue.reported_position) / SPEED_OF_LIGHT)
}

/// Sum-range ellipse for a bistatic delay after removing the offset estimate.
pub fn bistatic_observation(bs: Position, ue_reported: Position, measured_delay: f64, timing_offset: f64) -> AnchorObservation {
    AnchorObservation::bistatic(bs, ue_reported, SPEED_OF_LIGHT * (measured_delay - timing_offset))
}

/// Joint estimation of target positions and per-UE timing offsets.
///
/// Unknowns are every target's position and every UE's offset. Offsets are
/// shared by all delays a UE reports, so a UE that sees several targets
/// contributes more equations than unknowns. Round-trip delays at the BS carry
/// no offset and may be supplied to anchor the ranges.
#[derive(Clone, Debug)]
pub struct JointMlProblem<'a> {
    pub bs_position: Position,
    pub ue_positions: &'a BTreeMap<String, Position>,
    pub measurements: &'a [BistaticMeasurement],
    pub monostatic_delays: &'a BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointMlSolution {
    pub targets: BTreeMap<String, Position>,
    /// seconds
    pub timing_offsets: BTreeMap<String, f64>,
    /// sum of squared range residuals, m²
    pub residue: f64,
    pub iterations: usize,
}

/// `(target, ue, ue position, c·delay)` rows, `(target, c·delay)` round trips,
/// target count, UE count.
type Indexed = (Vec<(usize, usize, Position, f64)>, Vec<(usize, f64)>, usize, usize);

impl JointMlProblem<'_> {
    /// Target ids and UE ids in parameter order.
    pub fn unknowns(&self) -> (Vec<String>, Vec<String>) {
        let mut targets: BTreeSet<&str> = self.measurements.iter().map(|m| m.target_id.as_str()).collect();
        targets.extend(self.monostatic_delays.keys().map(String::as_str));
        let ues: BTreeSet<&str> = self.measurements.iter().map(|m| m.ue_id.as_str()).collect();
        (
            targets.into_iter().map(str::to_owned).collect(),
            ues.into_iter().map(str::to_owned).collect(),
        )
    }

    fn index(&self) -> Result<Indexed> {
        let (targets, ues) = self.unknowns();
        let t_index: BTreeMap<&str, usize> = targets.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let u_index: BTreeMap<&str, usize> = ues.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let mut bistatic = Vec::with_capacity(self.measurements.len());
        for m in self.measurements {
            let pos = *self
                .ue_positions
                .get(&m.ue_id)
                .ok_or_else(|| Error::UnknownId(m.ue_id.clone()))?;
            bistatic.push((t_index[m.target_id.as_str()], u_index[m.ue_id.as_str()], pos, SPEED_OF_LIGHT * m.measured_delay));
        }
        let mono = self
            .monostatic_delays
            .iter()
            .map(|(t, d)| (t_index[t.as_str()], SPEED_OF_LIGHT * d))
            .collect();
        Ok((bistatic, mono, targets.len(), ues.len()))
    }

    /// Range residuals (m) at `params = [x₁, y₁, …, x_T, y_T, c·TO₁, …, c·TO_U]`.
    pub fn residuals_and_jacobian(&self, params: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (bistatic, mono, nt, nu) = self.index()?;
        if params.len() != 2 * nt + nu {
            return Err(Error::Precondition(format!("expected {} parameters, got {}", 2 * nt + nu, params.len())));
        }
        Ok(evaluate(self.bs_position, &bistatic, &mono, nt, &DVector::from_column_slice(params)))
    }
}

fn unit_from(a: Position, x: Position) -> (f64, [f64; 2]) {
    let d = x - a;
    let r = d.norm();
    if r == 0.0 {
        (0.0, [0.0, 0.0])
    } else {
        (r, [d.x / r, d.y / r])
    }
}

fn evaluate(
    bs: Position,
    bistatic: &[(usize, usize, Position, f64)],
    mono: &[(usize, f64)],
    nt: usize,
    p: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let rows = bistatic.len() + mono.len();
    let mut r = DVector::zeros(rows);
    let mut j = DMatrix::zeros(rows, p.len());
    let target = |t: usize| Position::new(p[2 * t], p[2 * t + 1]);
    for (i, &(t, u, ue, sum)) in bistatic.iter().enumerate() {
        let x = target(t);
        let (d1, g1) = unit_from(bs, x);
        let (d2, g2) = unit_from(ue, x);
        r[i] = d1 + d2 + p[2 * nt + u] - sum;
        j[(i, 2 * t)] = g1[0] + g2[0];
        j[(i, 2 * t + 1)] = g1[1] + g2[1];
        j[(i, 2 * nt + u)] = 1.0;
    }
    for (k, &(t, round_trip)) in mono.iter().enumerate() {
        let i = bistatic.len() + k;
        let (d, g) = unit_from(bs, target(t));
        r[i] = 2.0 * d - round_trip;
        j[(i, 2 * t)] = 2.0 * g[0];
        j[(i, 2 * t + 1)] = 2.0 * g[1];
    }
    (r, j)
}

/// Lower-residue fix, resolving a collinear layout to the better mirror.
fn best_fix(observations: &[AnchorObservation]) -> Option<LocalizationResult> {
    match localize(observations, &SolverOptions::default()) {
        Ok(r) => Some(r),
        Err(Error::CollinearAnchors { candidates }) => {
            let [a, b] = *candidates;
            Some(if b.residue < a.residue { b } else { a })
        }
        Err(_) => None,
    }
}

/// Maximum-likelihood fit of targets and offsets under i.i.d. Gaussian delay noise.
///
/// Starts from offset-free trilateration of every target, sets each offset to
/// the UE's mean misfit, then runs Gauss–Newton on all unknowns together.
pub fn joint_ml_localize(problem: &JointMlProblem<'_>) -> Result<JointMlSolution> {
    let (targets, ues) = problem.unknowns();
    let (bistatic, mono, nt, nu) = problem.index()?;
    let equations = bistatic.len() + mono.len();
    let unknowns = 2 * nt + nu;
    if nu < 3 || equations < unknowns {
        return Err(Error::Underdetermined { equations, unknowns });
    }
    let bs = problem.bs_position;
    let mut p = DVector::zeros(unknowns);
    for t in 0..nt {
        let mut obs: Vec<AnchorObservation> = bistatic
            .iter()
            .filter(|b| b.0 == t)
            .map(|&(_, _, ue, sum)| AnchorObservation::bistatic(bs, ue, sum))
            .collect();
        obs.extend(mono.iter().filter(|m| m.0 == t).map(|&(_, rt)| AnchorObservation::bistatic(bs, bs, rt)));
        let guess = (obs.len() >= 3)
            .then(|| best_fix(&obs))
            .flatten()
            .map(|f| f.position)
            .unwrap_or_else(|| {
                let ues: Vec<Position> = bistatic.iter().filter(|b| b.0 == t).map(|b| b.2).collect();
                let n = (ues.len() + 1) as f64;
                let s = ues.iter().fold(bs, |acc, u| acc + *u);
                s * (1.0 / n)
            });
        p[2 * t] = guess.x;
        p[2 * t + 1] = guess.y;
    }
    let (r0, _) = evaluate(bs, &bistatic, &mono, nt, &p);
    for u in 0..nu {
        let misfits: Vec<f64> = bistatic
            .iter()
            .enumerate()
            .filter(|(_, b)| b.1 == u)
            .map(|(i, _)| -r0[i])
            .collect();
        p[2 * nt + u] = misfits.iter().sum::<f64>() / misfits.len() as f64;
    }
    let out = gauss_newton(p, |x| evaluate(bs, &bistatic, &mono, nt, x), 200);
    let sv = out.jacobian.clone().svd(false, false).singular_values;
    if sv.min() <= 1e-9 * sv.max() {
        return Err(Error::Underdetermined { equations, unknowns });
    }
    if !out.converged {
        return Err(Error::Divergence {
            iterations: out.iterations,
        });
    }
    Ok(JointMlSolution {
        targets: targets
            .into_iter()
            .enumerate()
            .map(|(t, id)| (id, Position::new(out.x[2 * t], out.x[2 * t + 1])))
            .collect(),
        timing_offsets: ues
            .into_iter()
            .enumerate()
            .map(|(u, id)| (id, out.x[2 * nt + u] / SPEED_OF_LIGHT))
            .collect(),
        residue: out.cost,
        iterations: out.iterations,
    })
}

/// Observations contributed by one UE.
#[derive(Clone, Debug, PartialEq)]
pub struct UeCandidate {
    pub ue_id: String,
    pub observations: Vec<AnchorObservation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RemovalStep {
    pub ue_id: String,
    pub residue_before: f64,
    pub residue_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub retained_ue_ids: Vec<String>,
    pub removal_trace: Vec<RemovalStep>,
}

/// `max(9·(c·σ_τ)², 1e-9)` m²
pub fn default_stopping_threshold(delay_noise_std: f64) -> f64 {
    (9.0 * (SPEED_OF_LIGHT * delay_noise_std).powi(2)).max(1e-9)
}

fn fit_residue(candidates: &[&UeCandidate], fixed: &[AnchorObservation]) -> f64 {
    let obs: Vec<AnchorObservation> = candidates
        .iter()
        .flat_map(|c| c.observations.iter().copied())
        .chain(fixed.iter().copied())
        .collect();
    best_fix(&obs).map_or(f64::INFINITY, |f| f.residue)
}

/// Greedy removal of the UE whose exclusion reduces the residue most.
///
/// Each round compares the residue `R` of the current set with the residues
/// `Rᵢ` obtained without each UE; the UE with the smallest `Rᵢ` (then lowest
/// id) is dropped while `R − Rᵢ` exceeds `stopping_threshold`. `fixed`
/// observations always take part and are never removed. At most
/// `U − min_anchors` UEs are removed; `min_anchors` below 3 is raised to 3.
pub fn select_ues_outlier(
    candidates: &[UeCandidate],
    fixed: &[AnchorObservation],
    stopping_threshold: f64,
    min_anchors: usize,
) -> AnchorSet {
    let min_anchors = min_anchors.max(3);
    let mut retained: Vec<&UeCandidate> = candidates.iter().collect();
    let mut trace = Vec::new();
    while retained.len() > min_anchors {
        let before = fit_residue(&retained, fixed);
        let without: Vec<f64> = (0..retained.len())
            .into_par_iter()
            .map(|skip| {
                let subset: Vec<&UeCandidate> = retained
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != skip)
                    .map(|(_, c)| *c)
                    .collect();
                fit_residue(&subset, fixed)
            })
            .collect();
        let best = (0..retained.len())
            .min_by(|&a, &b| {
                without[a]
                    .total_cmp(&without[b])
                    .then_with(|| retained[a].ue_id.cmp(&retained[b].ue_id))
            })
            .expect("non-empty");
        if !(before - without[best] > stopping_threshold) {
            break;
        }
        trace.push(RemovalStep {
            ue_id: retained[best].ue_id.clone(),
            residue_before: before,
            residue_after: without[best],
        });
        retained.remove(best);
    }
    AnchorSet {
        retained_ue_ids: retained.iter().map(|c| c.ue_id.clone()).collect(),
        removal_trace: trace,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    /// offsets assumed zero
    Synchronized,
    /// offsets from a BS→UE direct-path delay and the reported UE position
    LosCalibration,
    /// offsets estimated jointly with every target the UEs see
    JointMl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UeAssistConfig {
    /// seconds
    pub delay_noise_std: f64,
    pub timing: TimingMode,
    pub selection: bool,
    /// m²; defaults to [`default_stopping_threshold`]
    pub stopping_threshold: Option<f64>,
    pub min_anchors: usize,
    /// Add the BS's own round-trip delay as a fixed anchor.
    pub include_monostatic: bool,
    pub seed: u64,
}

impl Default for UeAssistConfig {
    fn default() -> Self {
        Self {
            delay_noise_std: 0.1e-9,
            timing: TimingMode::LosCalibration,
            selection: true,
            stopping_threshold: None,
            min_anchors: 3,
            include_monostatic: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UeAssistOutcome {
    pub result: LocalizationResult,
    pub anchors: AnchorSet,
    /// seconds, per UE that took part
    pub timing_offsets: BTreeMap<String, f64>,
}

/// Measure, remove offsets, select UEs and localize one target.
pub fn ue_assisted_localize(
    scene: &Scene,
    bs_id: &str,
    target_id: &str,
    config: &UeAssistConfig,
) -> Result<UeAssistOutcome> {
    let bs = scene.base_station(bs_id)?;
    scene.target(target_id)?;
    scene.require_los(bs_id, target_id)?;
    let sees = |a: &str, b: &str| scene.los_visible(a, b).unwrap_or(false);
    let ues: Vec<_> = scene
        .user_equipments
        .iter()
        .filter(|u| sees(&u.id, target_id))
        .filter(|u| config.timing != TimingMode::LosCalibration || sees(&u.id, bs_id))
        .collect();
    let seed = config.seed;
    let std = config.delay_noise_std;

    let measurements = ues
        .iter()
        .map(|u| measure_bistatic(scene, bs_id, &u.id, target_id, std, seed))
        .collect::<Result<Vec<_>>>()?;
    let offsets: BTreeMap<String, f64> = match config.timing {
        TimingMode::Synchronized => ues.iter().map(|u| (u.id.clone(), 0.0)).collect(),
        TimingMode::LosCalibration => ues
            .iter()
            .map(|u| {
                let los = measure_los_delay(scene, bs_id, &u.id, std, seed)?;
                Ok((u.id.clone(), calibrate_to_los(scene, bs_id, &u.id, los)?))
            })
            .collect::<Result<_>>()?,
        TimingMode::JointMl => {
            let mut all = Vec::new();
            let mut mono = BTreeMap::new();
            for t in scene.targets.iter().filter(|t| sees(bs_id, &t.id)) {
                for u in &ues {
                    if sees(&u.id, &t.id) {
                        all.push(measure_bistatic(scene, bs_id, &u.id, &t.id, std, seed)?);
                    }
                }
                if config.include_monostatic {
                    mono.insert(t.id.clone(), measure_monostatic(scene, bs_id, &t.id, std, seed)?);
                }
            }
            let positions = ues.iter().map(|u| (u.id.clone(), u.reported_position)).collect();
            let problem = JointMlProblem {
                bs_position: bs.position,
                ue_positions: &positions,
                measurements: &all,
                monostatic_delays: &mono,
            };
            joint_ml_localize(&problem)?.timing_offsets
        }
    };

    let candidates: Vec<UeCandidate> = ues
        .iter()
        .zip(&measurements)
        .map(|(u, m)| UeCandidate {
            ue_id: u.id.clone(),
            observations: vec![bistatic_observation(bs.position, u.reported_position, m.measured_delay, offsets[&u.id])],
        })
        .collect();
    let mut fixed = Vec::new();
    if config.include_monostatic {
        let rt = measure_monostatic(scene, bs_id, target_id, std, seed)?;
        fixed.push(AnchorObservation::bistatic(bs.position, bs.position, SPEED_OF_LIGHT * rt));
    }
    let anchors = if config.selection {
        let threshold = config.stopping_threshold.unwrap_or_else(|| default_stopping_threshold(std));
        select_ues_outlier(&candidates, &fixed, threshold, config.min_anchors)
    } else {
        AnchorSet {
            retained_ue_ids: candidates.iter().map(|c| c.ue_id.clone()).collect(),
            removal_trace: Vec::new(),
        }
    };
    let obs: Vec<AnchorObservation> = candidates
        .iter()
        .filter(|c| anchors.retained_ue_ids.contains(&c.ue_id))
        .flat_map(|c| c.observations.iter().copied())
        .chain(fixed.iter().copied())
        .collect();
    if obs.len() < 3 {
        return Err(Error::Precondition(format!(
            "only {} anchors available for `{target_id}`, need 3",
            obs.len()
        )));
    }
    let result = best_fix(&obs).ok_or_else(|| Error::Precondition(format!("could not localize `{target_id}`")))?;
    Ok(UeAssistOutcome {
        result,
        anchors,
        timing_offsets: offsets,
    })
}
