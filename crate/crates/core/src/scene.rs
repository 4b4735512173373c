//! Geometric and radio scene model.
//!
//! A [`Scene`] holds the anchors (base stations, user equipments, RISs), the
//! targets, the declared line-of-sight pairs and the radio configuration.
//! Scenes are immutable once validated and can be shared freely between
//! worker threads.
//!
//! On disk a scene is JSON; positions are `[x, y]` arrays in meters and all
//! angles are in degrees. Internally every angle is kept in radians.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Propagation speed used everywhere, m/s.
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// A point in the plane, meters.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(&self, other: &Position) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Unit vector at `angle` radians from the +x axis.
    pub fn unit(angle: f64) -> Self {
        Self::new(angle.cos(), angle.sin())
    }
}

impl From<[f64; 2]> for Position {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Position> for [f64; 2] {
    fn from(p: Position) -> Self {
        [p.x, p.y]
    }
}

impl std::ops::Sub for Position {
    type Output = Position;
    fn sub(self, rhs: Position) -> Position {
        Position::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Add for Position {
    type Output = Position;
    fn add(self, rhs: Position) -> Position {
        Position::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Mul<f64> for Position {
    type Output = Position;
    fn mul(self, k: f64) -> Position {
        Position::new(self.x * k, self.y * k)
    }
}

impl std::fmt::Display for Position {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:.4}, {:.4})", self.x, self.y)
    }
}

/// Euclidean distance between two points.
pub fn distance(a: Position, b: Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Angle of arrival at a linear array whose axis points along `axis_angle`.
///
/// Measured from broadside, positive toward the array axis. A linear array
/// cannot tell front from back, so the result is always within `[-π/2, π/2]`.
pub fn aoa_from_axis(array_position: Position, axis_angle: f64, source: Position) -> f64 {
    let d = source - array_position;
    let r = d.norm();
    if r == 0.0 {
        return 0.0;
    }
    (d.dot(&Position::unit(axis_angle)) / r).clamp(-1.0, 1.0).asin()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseStation {
    pub id: String,
    pub position: Position,
    pub num_antennas: usize,
    /// Direction of the array axis, radians.
    pub array_orientation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserEquipment {
    pub id: String,
    pub true_position: Position,
    /// GPS-style estimate; the only position estimators may use.
    pub reported_position: Position,
    pub position_error_std: f64,
    /// Clock offset relative to the serving BS, seconds.
    pub timing_offset: f64,
}

impl UserEquipment {
    /// Build a UE whose reported position carries isotropic Gaussian error.
    pub fn with_position_error<R: Rng + ?Sized>(
        id: impl Into<String>,
        true_position: Position,
        position_error_std: f64,
        timing_offset: f64,
        rng: &mut R,
    ) -> Self {
        let reported_position = if position_error_std > 0.0 {
            let n = Normal::new(0.0, position_error_std).expect("finite std");
            Position::new(
                true_position.x + n.sample(rng),
                true_position.y + n.sample(rng),
            )
        } else {
            true_position
        };
        Self {
            id: id.into(),
            true_position,
            reported_position,
            position_error_std,
            timing_offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ris {
    pub id: String,
    /// Position of the reference element (element 0).
    pub position: Position,
    pub num_elements: usize,
    /// Element spacing as a fraction of the carrier wavelength.
    pub element_spacing: f64,
    /// Direction of the array axis, radians. Broadside is the axis rotated by +90°.
    pub orientation: f64,
}

impl Ris {
    pub fn axis(&self) -> Position {
        Position::unit(self.orientation)
    }

    pub fn broadside(&self) -> Position {
        Position::unit(self.orientation + PI / 2.0)
    }

    pub fn element_position(&self, n: usize, wavelength: f64) -> Position {
        self.position + self.axis() * (n as f64 * self.element_spacing * wavelength)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub id: String,
    pub position: Position,
    /// m/s
    pub velocity: Position,
    /// Explicit complex gains keyed by unordered node pair.
    pub reflection_gains: BTreeMap<(String, String), Complex64>,
}

impl Target {
    pub fn new(id: impl Into<String>, position: Position) -> Self {
        Self {
            id: id.into(),
            position,
            velocity: Position::default(),
            reflection_gains: BTreeMap::new(),
        }
    }

    /// Complex amplitude of the path `tx -> target -> rx`.
    ///
    /// Falls back to unit magnitude with a phase drawn uniformly from a
    /// stream seeded by the (target, tx, rx) ids, so the gain is stable
    /// across runs without being stored.
    pub fn gain(&self, tx: &str, rx: &str) -> Complex64 {
        if let Some(g) = self.reflection_gains.get(&pair_key(tx, rx)) {
            return *g;
        }
        let (a, b) = pair_key(tx, rx);
        let mut h = Fnv64::default();
        h.write(self.id.as_bytes());
        h.write(&[0]);
        h.write(a.as_bytes());
        h.write(&[0]);
        h.write(b.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(h.0);
        Complex64::from_polar(1.0, rng.random_range(-PI..PI))
    }
}

#[derive(Clone, Copy)]
struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv64 {
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

pub(crate) fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_owned(), b.to_owned())
    } else {
        (b.to_owned(), a.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioConfig {
    /// Hz
    pub carrier_frequency: f64,
    /// Hz
    pub bandwidth: f64,
    pub num_subcarriers: usize,
    pub num_symbols: usize,
    /// seconds
    pub symbol_duration: f64,
    /// watts per sample
    pub noise_power: f64,
}

impl RadioConfig {
    pub fn speed_of_light(&self) -> f64 {
        SPEED_OF_LIGHT
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth / self.num_subcarriers as f64
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    /// Monostatic range resolution `c / 2B`.
    pub fn range_resolution(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invariant(field, format!("must be finite and > 0, got {v}")))
            }
        };
        positive("radio.carrier_frequency", self.carrier_frequency)?;
        positive("radio.bandwidth", self.bandwidth)?;
        positive("radio.symbol_duration", self.symbol_duration)?;
        if self.num_subcarriers == 0 {
            return Err(Error::invariant("radio.num_subcarriers", "must be >= 1"));
        }
        if self.num_symbols == 0 {
            return Err(Error::invariant("radio.num_symbols", "must be >= 1"));
        }
        if !(self.noise_power.is_finite() && self.noise_power >= 0.0) {
            return Err(Error::invariant("radio.noise_power", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Borrowed view of any node in a scene.
#[derive(Clone, Copy, Debug)]
pub enum Node<'a> {
    BaseStation(&'a BaseStation),
    UserEquipment(&'a UserEquipment),
    Ris(&'a Ris),
    Target(&'a Target),
}

impl Node<'_> {
    /// Physical position (the true one for UEs).
    pub fn position(&self) -> Position {
        match self {
            Node::BaseStation(b) => b.position,
            Node::UserEquipment(u) => u.true_position,
            Node::Ris(r) => r.position,
            Node::Target(t) => t.position,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub base_stations: Vec<BaseStation>,
    pub user_equipments: Vec<UserEquipment>,
    pub rises: Vec<Ris>,
    pub targets: Vec<Target>,
    /// Unordered pairs, stored with the lexicographically smaller id first.
    pub los_visibility: BTreeSet<(String, String)>,
    pub radio: RadioConfig,
}

impl Scene {
    pub fn node(&self, id: &str) -> Result<Node<'_>> {
        if let Some(b) = self.base_stations.iter().find(|b| b.id == id) {
            return Ok(Node::BaseStation(b));
        }
        if let Some(u) = self.user_equipments.iter().find(|u| u.id == id) {
            return Ok(Node::UserEquipment(u));
        }
        if let Some(r) = self.rises.iter().find(|r| r.id == id) {
            return Ok(Node::Ris(r));
        }
        if let Some(t) = self.targets.iter().find(|t| t.id == id) {
            return Ok(Node::Target(t));
        }
        Err(Error::UnknownId(id.to_owned()))
    }

    pub fn base_station(&self, id: &str) -> Result<&BaseStation> {
        match self.node(id)? {
            Node::BaseStation(b) => Ok(b),
            _ => Err(Error::Precondition(format!("`{id}` is not a base station"))),
        }
    }

    pub fn user_equipment(&self, id: &str) -> Result<&UserEquipment> {
        match self.node(id)? {
            Node::UserEquipment(u) => Ok(u),
            _ => Err(Error::Precondition(format!("`{id}` is not a user equipment"))),
        }
    }

    pub fn ris(&self, id: &str) -> Result<&Ris> {
        match self.node(id)? {
            Node::Ris(r) => Ok(r),
            _ => Err(Error::Precondition(format!("`{id}` is not a RIS"))),
        }
    }

    pub fn target(&self, id: &str) -> Result<&Target> {
        match self.node(id)? {
            Node::Target(t) => Ok(t),
            _ => Err(Error::Precondition(format!("`{id}` is not a target"))),
        }
    }

    /// Whether the pair `(a, b)` is declared line-of-sight.
    pub fn los_visible(&self, a: &str, b: &str) -> Result<bool> {
        self.node(a)?;
        self.node(b)?;
        if a == b {
            return Err(Error::Precondition(format!("self-pair `{a}` has no LOS relation")));
        }
        Ok(self.los_visibility.contains(&pair_key(a, b)))
    }

    pub(crate) fn require_los(&self, a: &str, b: &str) -> Result<()> {
        if self.los_visible(a, b)? {
            Ok(())
        } else {
            Err(Error::MissingLos(a.to_owned(), b.to_owned()))
        }
    }

    fn ids(&self) -> impl Iterator<Item = &str> {
        self.base_stations
            .iter()
            .map(|b| b.id.as_str())
            .chain(self.user_equipments.iter().map(|u| u.id.as_str()))
            .chain(self.rises.iter().map(|r| r.id.as_str()))
            .chain(self.targets.iter().map(|t| t.id.as_str()))
    }

    /// Check every scene invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        self.radio.validate()?;
        let mut seen = HashSet::new();
        for id in self.ids() {
            if id.is_empty() {
                return Err(Error::invariant("id", "ids must be non-empty"));
            }
            if !seen.insert(id) {
                return Err(Error::invariant("id", format!("duplicate id `{id}`")));
            }
        }
        let finite = |field: String, p: &Position| {
            if p.is_finite() {
                Ok(())
            } else {
                Err(Error::invariant(field, "coordinates must be finite"))
            }
        };
        for b in &self.base_stations {
            finite(format!("base_stations[{}].position", b.id), &b.position)?;
            if b.num_antennas == 0 {
                return Err(Error::invariant(
                    format!("base_stations[{}].num_antennas", b.id),
                    "must be >= 1",
                ));
            }
            if !b.array_orientation.is_finite() {
                return Err(Error::invariant(
                    format!("base_stations[{}].array_orientation", b.id),
                    "must be finite",
                ));
            }
        }
        for u in &self.user_equipments {
            finite(format!("user_equipments[{}].true_position", u.id), &u.true_position)?;
            finite(
                format!("user_equipments[{}].reported_position", u.id),
                &u.reported_position,
            )?;
            if !(u.position_error_std.is_finite() && u.position_error_std >= 0.0) {
                return Err(Error::invariant(
                    format!("user_equipments[{}].position_error_std", u.id),
                    "must be finite and >= 0",
                ));
            }
            if !u.timing_offset.is_finite() {
                return Err(Error::invariant(
                    format!("user_equipments[{}].timing_offset", u.id),
                    "must be finite",
                ));
            }
        }
        for r in &self.rises {
            finite(format!("rises[{}].position", r.id), &r.position)?;
            if r.num_elements < 2 {
                return Err(Error::invariant(
                    format!("rises[{}].num_elements", r.id),
                    "must be >= 2",
                ));
            }
            if !(r.element_spacing.is_finite() && r.element_spacing > 0.0) {
                return Err(Error::invariant(
                    format!("rises[{}].element_spacing", r.id),
                    "must be > 0",
                ));
            }
            if !r.orientation.is_finite() {
                return Err(Error::invariant(
                    format!("rises[{}].orientation", r.id),
                    "must be finite",
                ));
            }
        }
        for t in &self.targets {
            finite(format!("targets[{}].position", t.id), &t.position)?;
            finite(format!("targets[{}].velocity", t.id), &t.velocity)?;
            for ((a, b), g) in &t.reflection_gains {
                let field = format!("targets[{}].reflection_gains[{a},{b}]", t.id);
                if !seen.contains(a.as_str()) || !seen.contains(b.as_str()) {
                    return Err(Error::invariant(field, "references an unknown id"));
                }
                let m = g.norm();
                if !(m.is_finite() && m > 0.0) {
                    return Err(Error::invariant(field, "magnitude must be finite and > 0"));
                }
            }
        }
        for (a, b) in &self.los_visibility {
            for id in [a, b] {
                if !seen.contains(id.as_str()) {
                    return Err(Error::invariant(
                        "los_pairs",
                        format!("references unknown id `{id}`"),
                    ));
                }
            }
            if a == b {
                return Err(Error::invariant("los_pairs", format!("self-pair `{a}`")));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let scene = Scene::from(file);
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&SceneFile::from(self)).expect("scene serializes")
    }
}

/// Read and validate a scene file.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Scene::from_json_str(&text)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scene.to_json_string() + "\n")
        .map_err(|e| Error::io(path.display().to_string(), e))
}

// On-disk representation. Angles are degrees here.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    radio: RadioConfig,
    base_stations: Vec<BaseStationFile>,
    user_equipments: Vec<UserEquipmentFile>,
    rises: Vec<RisFile>,
    targets: Vec<TargetFile>,
    los_pairs: Vec<[String; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseStationFile {
    id: String,
    position: Position,
    num_antennas: usize,
    array_orientation: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserEquipmentFile {
    id: String,
    true_position: Position,
    reported_position: Position,
    position_error_std: f64,
    #[serde(default)]
    timing_offset: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RisFile {
    id: String,
    position: Position,
    num_elements: usize,
    element_spacing: f64,
    orientation: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetFile {
    id: String,
    position: Position,
    #[serde(default)]
    velocity: Position,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    reflection_gains: Vec<GainFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GainFile {
    tx: String,
    rx: String,
    gain: [f64; 2],
}

impl From<SceneFile> for Scene {
    fn from(f: SceneFile) -> Self {
        Scene {
            base_stations: f
                .base_stations
                .into_iter()
                .map(|b| BaseStation {
                    id: b.id,
                    position: b.position,
                    num_antennas: b.num_antennas,
                    array_orientation: b.array_orientation.to_radians(),
                })
                .collect(),
            user_equipments: f
                .user_equipments
                .into_iter()
                .map(|u| UserEquipment {
                    id: u.id,
                    true_position: u.true_position,
                    reported_position: u.reported_position,
                    position_error_std: u.position_error_std,
                    timing_offset: u.timing_offset,
                })
                .collect(),
            rises: f
                .rises
                .into_iter()
                .map(|r| Ris {
                    id: r.id,
                    position: r.position,
                    num_elements: r.num_elements,
                    element_spacing: r.element_spacing,
                    orientation: r.orientation.to_radians(),
                })
                .collect(),
            targets: f
                .targets
                .into_iter()
                .map(|t| Target {
                    id: t.id,
                    position: t.position,
                    velocity: t.velocity,
                    reflection_gains: t
                        .reflection_gains
                        .into_iter()
                        .map(|g| (pair_key(&g.tx, &g.rx), Complex64::new(g.gain[0], g.gain[1])))
                        .collect(),
                })
                .collect(),
            los_visibility: f.los_pairs.iter().map(|[a, b]| pair_key(a, b)).collect(),
            radio: f.radio,
        }
    }
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        SceneFile {
            radio: s.radio.clone(),
            base_stations: s
                .base_stations
                .iter()
                .map(|b| BaseStationFile {
                    id: b.id.clone(),
                    position: b.position,
                    num_antennas: b.num_antennas,
                    array_orientation: b.array_orientation.to_degrees(),
                })
                .collect(),
            user_equipments: s
                .user_equipments
                .iter()
                .map(|u| UserEquipmentFile {
                    id: u.id.clone(),
                    true_position: u.true_position,
                    reported_position: u.reported_position,
                    position_error_std: u.position_error_std,
                    timing_offset: u.timing_offset,
                })
                .collect(),
            rises: s
                .rises
                .iter()
                .map(|r| RisFile {
                    id: r.id.clone(),
                    position: r.position,
                    num_elements: r.num_elements,
                    element_spacing: r.element_spacing,
                    orientation: r.orientation.to_degrees(),
                })
                .collect(),
            targets: s
                .targets
                .iter()
                .map(|t| TargetFile {
                    id: t.id.clone(),
                    position: t.position,
                    velocity: t.velocity,
                    reflection_gains: t
                        .reflection_gains
                        .iter()
                        .map(|((a, b), g)| GainFile {
                            tx: a.clone(),
                            rx: b.clone(),
                            gain: [g.re, g.im],
                        })
                        .collect(),
                })
                .collect(),
            los_pairs: s
                .los_visibility
                .iter()
                .map(|(a, b)| [a.clone(), b.clone()])
                .collect(),
        }
    }
}
