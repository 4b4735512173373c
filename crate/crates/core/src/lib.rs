//! Simulation and estimation library for localization with a mix of anchors:
//! base stations (networked sensing with data association), user equipments
//! (timing offsets, erroneous reported positions) and reconfigurable
//! intelligent surfaces acting as passive anchors.

pub mod assoc;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod ris_assist;
pub mod rng;
pub mod scene;
mod solver;
pub mod trilateration;
pub mod ue_assist;
pub mod waveform;

pub use error::{Error, Result};
pub use scene::{distance, load_scene, save_scene, Position, Scene, SPEED_OF_LIGHT};
pub use trilateration::{residue_at, trilaterate, AnchorObservation, LocalizationResult};
