use crate::assoc::{classify_ghosts, enumerate_hypotheses, solve_association, DistanceProfile};
use crate::error::{Error, Result};
use crate::ris_assist::{ris_assisted_localize, RisAssistConfig};
use crate::scene::{distance, Position, Scene};

use super::config::{NetworkedConfig, NoiseMode};
use super::montecarlo::run_networked;

const EXAMPLE1: &str = include_str!("../../scenes/example1.json");
const EXAMPLE2: &str = include_str!("../../scenes/example2.json");
const EXAMPLE4: &str = include_str!("../../scenes/example4.json");
const UE_SELECT: &str = include_str!("../../scenes/ue_select.json");

/// AOAs of the four RIS example targets, degrees.
pub const RIS_EXAMPLE_AOAS_DEG: [f64; 4] = [12.6728, 27.8523, 53.8847, 75.7906];

/// Scenes shipped with the library: `example1`, `example2`, `example4`, `ue_select`.
pub fn canned_scene(name: &str) -> Result<Scene> {
    let text = match name {
        "example1" => EXAMPLE1,
        "example2" => EXAMPLE2,
        "example4" => EXAMPLE4,
        "ue_select" => UE_SELECT,
        _ => return Err(Error::UnknownId(name.to_owned())),
    };
    Scene::from_json_str(text)
}

/// Exact monostatic distance profiles of every BS that sees every target.
pub fn monostatic_profiles(scene: &Scene) -> Result<(Vec<DistanceProfile>, Vec<Position>)> {
    let mut profiles = Vec::new();
    let mut positions = Vec::new();
    for bs in &scene.base_stations {
        let mut ranges = Vec::with_capacity(scene.targets.len());
        for t in &scene.targets {
            if !scene.los_visible(&bs.id, &t.id)? {
                return Err(Error::MissingLos(bs.id.clone(), t.id.clone()));
            }
            ranges.push(distance(bs.position, t.position));
        }
        profiles.push(DistanceProfile::new(bs.id.clone(), ranges));
        positions.push(bs.position);
    }
    Ok((profiles, positions))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleReport {
    pub example: u8,
    pub passed: bool,
    pub lines: Vec<String>,
}

fn fmt_pos(p: &Position) -> String {
    format!("({:.6}, {:.6})", p.x, p.y)
}

fn contains_pair(solution_positions: &[Position], expected: &[Position]) -> bool {
    solution_positions.len() == expected.len()
        && expected
            .iter()
            .all(|e| solution_positions.iter().any(|p| distance(*p, *e) <= 1e-6))
}

fn association_example(n: u8, scene: &Scene, expected: &[Vec<Position>]) -> Result<ExampleReport> {
    let (profiles, stations) = monostatic_profiles(scene)?;
    let k = scene.targets.len();
    let count = enumerate_hypotheses(stations.len(), k)?.count();
    let solutions = solve_association(&profiles, &stations, 1e-6)?;
    let truths: Vec<Position> = scene.targets.iter().map(|t| t.position).collect();
    let part = classify_ghosts(&solutions, &truths, 1.0);
    let mut lines = vec![format!("hypotheses enumerated: {count}"), format!("feasible solutions: {}", solutions.len())];
    for (i, s) in solutions.iter().enumerate() {
        let pos: Vec<String> = s.positions.iter().map(fmt_pos).collect();
        lines.push(format!("  solution {}: {} residue {:.3e} m^2", i + 1, pos.join(" "), s.total_residue));
    }
    if part.ghosts.is_empty() {
        lines.push("no ghost targets".into());
    } else {
        let g: Vec<String> = part.ghosts.iter().map(fmt_pos).collect();
        lines.push(format!("ghost targets: {}", g.join(" ")));
    }
    let passed = count == 4
        && solutions.len() == expected.len()
        && expected
            .iter()
            .all(|e| solutions.iter().any(|s| contains_pair(&s.positions, e)))
        && solutions.iter().all(|s| s.target_residues.iter().all(|r| *r <= 1e-6));
    Ok(ExampleReport { example: n, passed, lines })
}

fn bandwidth_example() -> Result<ExampleReport> {
    let config = NetworkedConfig {
        seed: 3,
        trials: 300,
        detection_radius: 1.0,
        record_runtime: false,
        bandwidths: vec![1e8, 2e8, 3e8, 4e8],
        target_counts: vec![3],
        num_bs: 5,
        bs_ring_radius: 80.0,
        region_half_width: 50.0,
        noise_mode: NoiseMode::Fast,
        snr_db: 10.0,
        num_antennas: 4,
        num_subcarriers: 1024,
        num_symbols: 4,
        carrier_frequency: 28e9,
        range_noise_fraction: 1.0 / 6.0,
    };
    let points = run_networked(&config)?;
    let mut lines = vec!["bandwidth_MHz  det_err_prob  ghost_rate".to_string()];
    for p in &points {
        lines.push(format!("{:>13.0}  {:>12.4}  {:>10.4}", p.bandwidth / 1e6, p.detection_error_probability, p.ghost_rate));
    }
    let monotone = points
        .windows(2)
        .all(|w| w[1].detection_error_probability <= w[0].detection_error_probability);
    let last = points.last().map_or(1.0, |p| p.detection_error_probability);
    lines.push(format!("non-increasing in bandwidth: {monotone}; at 400 MHz: {last:.4}"));
    Ok(ExampleReport {
        example: 3,
        passed: monotone && last < 0.05,
        lines,
    })
}

fn ris_example() -> Result<ExampleReport> {
    let scene = canned_scene("example4")?;
    let ids: Vec<&str> = scene.targets.iter().map(|t| t.id.as_str()).collect();
    let out = ris_assisted_localize(&scene, "ris1", "bs1", &ids, &RisAssistConfig::default())?;
    let mut angles: Vec<f64> = out.music.estimates.iter().map(|e| e.angle.to_degrees()).collect();
    angles.sort_by(f64::total_cmp);
    let mut lines = Vec::new();
    let mut passed = angles.len() == RIS_EXAMPLE_AOAS_DEG.len();
    for (est, reference) in angles.iter().zip(RIS_EXAMPLE_AOAS_DEG) {
        let ok = (est - reference).abs() <= 0.3;
        passed &= ok;
        lines.push(format!("AOA {est:8.4} deg (expected {reference:.4}, error {:.4})", est - reference));
    }
    for t in &out.targets {
        lines.push(format!(
            "target at {} range {:.3} m aoa {:.4} deg",
            fmt_pos(&t.position),
            t.fix.range_to_ris,
            t.fix.aoa_at_ris.to_degrees()
        ));
    }
    Ok(ExampleReport { example: 4, passed, lines })
}

/// Run one of the canned examples and check its expected outcome.
pub fn run_example(n: u8) -> Result<ExampleReport> {
    match n {
        1 => association_example(
            1,
            &canned_scene("example1")?,
            &[
                vec![Position::new(30.0, 30.0), Position::new(-30.0, -30.0)],
                vec![Position::new(30.0, -30.0), Position::new(-30.0, 30.0)],
            ],
        ),
        2 => association_example(
            2,
            &canned_scene("example2")?,
            &[vec![Position::new(30.0, 20.0), Position::new(-30.0, -30.0)]],
        ),
        3 => bandwidth_example(),
        4 => ris_example(),
        _ => Err(Error::Precondition(format!("unknown example {n}; choose 1 to 4"))),
    }
}
