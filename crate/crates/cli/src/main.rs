use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anchorsense::assoc::{classify_ghosts, solve_association, solve_association_pruned};
use anchorsense::harness::{monostatic_profiles, run_example, run_montecarlo_to_csv, ExperimentConfig};
use anchorsense::ris_assist::{ris_assisted_localize, RisAssistConfig};
use anchorsense::ue_assist::{ue_assisted_localize, UeAssistConfig};
use anchorsense::{distance, load_scene, Error, Position, Scene};
use clap::{Parser, Subcommand};

const SEED_VAR: &str = "ANCHORSENSE_SEED";

#[derive(Parser)]
#[command(name = "anchorsense", version, about = "Multi-anchor localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a canned example (1-4) and check its expected outcome.
    Example { n: u8 },
    /// Run a Monte-Carlo sweep described by a JSON config and write CSV rows.
    Montecarlo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Associate exact BS range profiles of a scene to targets.
    Associate {
        #[arg(long)]
        scene: PathBuf,
        /// Use the depth-first search with residue pruning.
        #[arg(long)]
        pruned: bool,
        /// Feasibility threshold on the per-target residue, m².
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
    },
    /// Repeat UE-assisted localization with outlier removal over noisy trials.
    UeSelect {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        trials: usize,
        /// Sensing BS; defaults to the first one in the scene.
        #[arg(long)]
        bs: Option<String>,
        /// Defaults to every target the BS sees.
        #[arg(long)]
        target: Option<String>,
    },
    /// RIS-assisted AOA and range estimation; dumps the MUSIC pseudospectrum.
    RisMusic {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        spectrum_out: PathBuf,
        #[arg(long)]
        ris: Option<String>,
        #[arg(long)]
        bs: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Expectation(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Invariant { .. }
            | Error::UnknownId(_)
            | Error::Csv(_) => Failure::Usage(e.to_string()),
            other => Failure::Expectation(other.to_string()),
        }
    }
}

fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_VAR} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn fmt_pos(p: Position) -> String {
    format!("({:.4}, {:.4})", p.x, p.y)
}

fn first_id<'a>(given: &'a Option<String>, ids: impl IntoIterator<Item = &'a String>, what: &str) -> Result<&'a str, Failure> {
    given
        .as_deref()
        .or_else(|| ids.into_iter().next().map(String::as_str))
        .ok_or_else(|| Failure::Usage(format!("scene has no {what}")))
}

fn example(n: u8) -> Result<(), Failure> {
    let report = run_example(n).map_err(|e| match e {
        Error::Precondition(m) => Failure::Usage(m),
        e => e.into(),
    })?;
    for line in &report.lines {
        println!("{line}");
    }
    if report.passed {
        println!("example {n}: PASS");
        Ok(())
    } else {
        Err(Failure::Expectation(format!("example {n}: FAIL")))
    }
}

fn montecarlo(config: &Path, out: &Path) -> Result<(), Failure> {
    let mut config = ExperimentConfig::load(config)?;
    if let Some(seed) = seed_override()? {
        config.set_seed(seed);
    }
    let rows = run_montecarlo_to_csv(&config, out)?;
    for r in &rows {
        println!(
            "{:<28} det_err_prob {:.4}  ghost_rate {:.4}",
            r.sweep, r.detection_error_probability, r.ghost_rate
        );
    }
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn associate(scene: &Scene, pruned: bool, epsilon: f64) -> Result<(), Failure> {
    let (profiles, stations) = monostatic_profiles(scene)?;
    let solutions = if pruned {
        solve_association_pruned(&profiles, &stations, epsilon)?
    } else {
        solve_association(&profiles, &stations, epsilon)?
    };
    let truths: Vec<Position> = scene.targets.iter().map(|t| t.position).collect();
    println!("feasible solutions: {}", solutions.len());
    for (i, s) in solutions.iter().enumerate() {
        let pos: Vec<String> = s.positions.iter().map(|p| fmt_pos(*p)).collect();
        println!("  {}: {} residue {:.3e} m^2 assignment {:?}", i + 1, pos.join(" "), s.total_residue, s.hypothesis.assignment);
    }
    let part = classify_ghosts(&solutions, &truths, 1.0);
    for (p, t) in &part.detections {
        println!("detected {} at {}", scene.targets[*t].id, fmt_pos(*p));
    }
    for g in &part.ghosts {
        println!("ghost at {}", fmt_pos(*g));
    }
    if solutions.is_empty() {
        return Err(Failure::Expectation("no hypothesis is feasible".into()));
    }
    Ok(())
}

fn ue_select(scene: &Scene, trials: usize, bs: &Option<String>, target: &Option<String>) -> Result<(), Failure> {
    if trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let bs = first_id(bs, scene.base_stations.iter().map(|b| &b.id), "base station")?;
    scene.base_station(bs)?;
    let targets: Vec<&str> = match target {
        Some(t) => vec![scene.target(t)?.id.as_str()],
        None => scene
            .targets
            .iter()
            .filter(|t| scene.los_visible(bs, &t.id).unwrap_or(false))
            .map(|t| t.id.as_str())
            .collect(),
    };
    // a UE counts as erroneous when its report is off by more than a meter
    let erroneous: Vec<&str> = scene
        .user_equipments
        .iter()
        .filter(|u| distance(u.true_position, u.reported_position) > 1.0)
        .map(|u| u.id.as_str())
        .collect();
    println!("erroneous UEs: {erroneous:?}");
    let base = seed_override()?.unwrap_or(0);
    for t in targets {
        let truth = scene.target(t)?.position;
        let (mut hits, mut hits_all, mut cleared, mut err_sum) = (0usize, 0usize, 0usize, 0.0);
        for trial in 0..trials {
            let seed = base ^ trial as u64;
            let selected = ue_assisted_localize(scene, bs, t, &UeAssistConfig { seed, ..Default::default() })?;
            let all = ue_assisted_localize(
                scene,
                bs,
                t,
                &UeAssistConfig {
                    seed,
                    selection: false,
                    ..Default::default()
                },
            )?;
            let e = distance(selected.result.position, truth);
            err_sum += e;
            hits += usize::from(e <= 1.0);
            hits_all += usize::from(distance(all.result.position, truth) <= 1.0);
            cleared += usize::from(
                erroneous
                    .iter()
                    .all(|id| !selected.anchors.retained_ue_ids.iter().any(|r| r == id)),
            );
            if trial == 0 {
                println!("{t}: retained {:?}", selected.anchors.retained_ue_ids);
                for step in &selected.anchors.removal_trace {
                    println!("  removed {} (residue {:.4e} m^2)", step.ue_id, step.residue_after);
                }
            }
        }
        let n = trials as f64;
        println!(
            "{t}: within 1 m {:.3} (all UEs {:.3}), erroneous fully removed {:.3}, mean error {:.4} m",
            hits as f64 / n,
            hits_all as f64 / n,
            cleared as f64 / n,
            err_sum / n
        );
    }
    Ok(())
}

fn ris_music(scene: &Scene, out: &Path, ris: &Option<String>, bs: &Option<String>) -> Result<(), Failure> {
    let ris = first_id(ris, scene.rises.iter().map(|r| &r.id), "RIS")?;
    let bs = first_id(bs, scene.base_stations.iter().map(|b| &b.id), "base station")?;
    let ids: Vec<&str> = scene
        .targets
        .iter()
        .filter(|t| scene.los_visible(ris, &t.id).unwrap_or(false))
        .map(|t| t.id.as_str())
        .collect();
    let config = RisAssistConfig {
        seed: seed_override()?.unwrap_or(0),
        ..Default::default()
    };
    let output = ris_assisted_localize(scene, ris, bs, &ids, &config)?;
    let mut angles: Vec<f64> = output.music.estimates.iter().map(|e| e.angle.to_degrees()).collect();
    angles.sort_by(f64::total_cmp);
    for a in &angles {
        println!("AOA {a:.4} deg");
    }
    for t in &output.targets {
        println!(
            "target at {} range {:.3} m aoa {:.4} deg",
            fmt_pos(t.position),
            t.fix.range_to_ris,
            t.fix.aoa_at_ris.to_degrees()
        );
    }
    let mut text = String::from("angle_deg,normalized_power\n");
    for (a, p) in output.music.grid.iter().zip(output.music.normalized_spectrum()) {
        writeln!(text, "{:.4},{p:e}", a.to_degrees()).expect("string write");
    }
    std::fs::write(out, text).map_err(|e| Failure::Usage(format!("failed to write {}: {e}", out.display())))?;
    println!("wrote spectrum to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Example { n } => example(n),
        Command::Montecarlo { config, out } => montecarlo(&config, &out),
        Command::Associate { scene, pruned, epsilon } => associate(&load_scene(scene)?, pruned, epsilon),
        Command::UeSelect { scene, trials, bs, target } => ue_select(&load_scene(scene)?, trials, &bs, &target),
        Command::RisMusic {
            scene,
            spectrum_out,
            ris,
            bs,
        } => ris_music(&load_scene(scene)?, &spectrum_out, &ris, &bs),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Expectation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
