//! Frequency-domain CSI synthesis for monostatic and bistatic echo paths.
//!
//! The channel is modeled after channel estimation, so every entry is
//!
//! ```text
//! H[m, n, l] = Σ_k g_k · e^{jπ m sinθ_k} · e^{-j2π n Δf τ_k} · e^{j2π f_D,k l T_sym} + w
//! ```
//!
//! with a half-wavelength receive array and i.i.d. circular Gaussian noise.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::{Complex32, Complex64};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::scene::{aoa_from_axis, distance, Node, Position, RadioConfig, Scene, SPEED_OF_LIGHT};

/// Complex channel observations indexed `[antenna][subcarrier][symbol]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiTensor {
    values: Vec<Complex64>,
    dims: (usize, usize, usize),
    pub radio: RadioConfig,
}

impl CsiTensor {
    pub fn zeros(num_antennas: usize, radio: &RadioConfig) -> Self {
        let dims = (num_antennas, radio.num_subcarriers, radio.num_symbols);
        Self {
            values: vec![Complex64::new(0.0, 0.0); dims.0 * dims.1 * dims.2],
            dims,
            radio: radio.clone(),
        }
    }

    pub fn from_values(
        values: Vec<Complex64>,
        dims: (usize, usize, usize),
        radio: &RadioConfig,
    ) -> Result<Self> {
        if values.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::invariant("csi.values", "length does not match dimensions"));
        }
        if dims.1 != radio.num_subcarriers || dims.2 != radio.num_symbols {
            return Err(Error::invariant("csi.dims", "does not match the radio configuration"));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invariant("csi.values", "entries must be finite"));
        }
        Ok(Self {
            values,
            dims,
            radio: radio.clone(),
        })
    }

    /// `(antennas, subcarriers, symbols)`
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    fn offset(&self, m: usize, n: usize, l: usize) -> usize {
        (m * self.dims.1 + n) * self.dims.2 + l
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize, l: usize) -> Complex64 {
        self.values[self.offset(m, n, l)]
    }

    #[inline]
    pub fn get_mut(&mut self, m: usize, n: usize, l: usize) -> &mut Complex64 {
        let o = self.offset(m, n, l);
        &mut self.values[o]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn scale(&mut self, factor: Complex64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// Write the debug dump: three little-endian `u32` dimensions followed by
    /// `(re, im)` little-endian `f32` pairs in `[m][n][l]` order.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for d in [self.dims.0, self.dims.1, self.dims.2] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &self.values {
            let c = Complex32::new(v.re as f32, v.im as f32);
            w.write_all(&c.re.to_le_bytes())?;
            w.write_all(&c.im.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a dump produced by [`CsiTensor::write_dump`].
    pub fn read_dump<R: Read>(mut r: R, radio: &RadioConfig) -> Result<Self> {
        let io = |e| Error::io("csi dump", e);
        let mut word = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut word).map_err(io)?;
            *d = u32::from_le_bytes(word) as usize;
        }
        let len = dims[0] * dims[1] * dims[2];
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut word).map_err(io)?;
            let re = f32::from_le_bytes(word);
            r.read_exact(&mut word).map_err(io)?;
            let im = f32::from_le_bytes(word);
            values.push(Complex64::new(f64::from(re), f64::from(im)));
        }
        Self::from_values(values, (dims[0], dims[1], dims[2]), radio)
    }
}

/// Range/angle/Doppler parameters of one echo path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathParams {
    /// seconds
    pub delay: f64,
    /// radians from the receive array broadside
    pub aoa: f64,
    /// Hz
    pub doppler: f64,
    pub complex_gain: Complex64,
}

fn anchor_frame(scene: &Scene, id: &str) -> Result<(Position, f64)> {
    match scene.node(id)? {
        Node::BaseStation(b) => Ok((b.position, b.array_orientation)),
        Node::UserEquipment(u) => Ok((u.true_position, 0.0)),
        Node::Ris(r) => Ok((r.position, r.orientation)),
        Node::Target(_) => Err(Error::Precondition(format!("`{id}` is a target, not an anchor"))),
    }
}

/// Geometry of the path `tx -> target -> rx`.
pub fn path_params_for(scene: &Scene, tx: &str, rx: &str, target: &str) -> Result<PathParams> {
    let (tx_pos, _) = anchor_frame(scene, tx)?;
    let (rx_pos, rx_axis) = anchor_frame(scene, rx)?;
    let t = scene.target(target)?;
    scene.require_los(tx, target)?;
    scene.require_los(target, rx)?;

    let path = distance(tx_pos, t.position) + distance(t.position, rx_pos);
    let toward = |p: Position| {
        let d = p - t.position;
        let r = d.norm();
        if r == 0.0 {
            Position::default()
        } else {
            d * (1.0 / r)
        }
    };
    // Closing speed along both legs; positive when the path shortens.
    let closing = t.velocity.dot(&toward(tx_pos)) + t.velocity.dot(&toward(rx_pos));
    Ok(PathParams {
        delay: path / SPEED_OF_LIGHT,
        aoa: aoa_from_axis(rx_pos, rx_axis, t.position),
        doppler: closing * scene.radio.carrier_frequency / SPEED_OF_LIGHT,
        complex_gain: t.gain(tx, rx),
    })
}

/// Superpose `paths` on a `num_antennas × subcarriers × symbols` grid and add noise.
pub fn synthesize_paths(
    paths: &[PathParams],
    num_antennas: usize,
    radio: &RadioConfig,
    noise_power: f64,
    seed: u64,
) -> CsiTensor {
    let mut csi = CsiTensor::zeros(num_antennas, radio);
    let (nm, nn, nl) = csi.dims;
    let df = radio.subcarrier_spacing();
    for p in paths {
        let spatial: Vec<Complex64> = (0..nm)
            .map(|m| Complex64::from_polar(1.0, PI * m as f64 * p.aoa.sin()))
            .collect();
        let spectral: Vec<Complex64> = (0..nn)
            .map(|n| Complex64::from_polar(1.0, -2.0 * PI * n as f64 * df * p.delay))
            .collect();
        let temporal: Vec<Complex64> = (0..nl)
            .map(|l| {
                Complex64::from_polar(1.0, 2.0 * PI * p.doppler * l as f64 * radio.symbol_duration)
            })
            .collect();
        for (m, a) in spatial.iter().enumerate() {
            for (n, f) in spectral.iter().enumerate() {
                let af = p.complex_gain * a * f;
                for (l, d) in temporal.iter().enumerate() {
                    *csi.get_mut(m, n, l) += af * d;
                }
            }
        }
    }
    let mut rng = rng_from(seed);
    let sigma = (noise_power / 2.0).sqrt();
    for v in &mut csi.values {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *v += Complex64::new(re * sigma, im * sigma);
    }
    csi
}

/// Synthesize the CSI observed at `rx` for echoes of `targets` illuminated by `tx`.
pub fn synthesize_csi(
    scene: &Scene,
    tx: &str,
    rx: &str,
    targets: &[&str],
    noise_power: f64,
    seed: u64,
) -> Result<CsiTensor> {
    let num_antennas = match scene.node(rx)? {
        Node::BaseStation(b) => b.num_antennas,
        Node::UserEquipment(_) => 1,
        _ => return Err(Error::Precondition(format!("`{rx}` cannot receive"))),
    };
    if !(noise_power.is_finite() && noise_power >= 0.0) {
        return Err(Error::Precondition("noise power must be finite and >= 0".into()));
    }
    let paths = targets
        .iter()
        .map(|t| path_params_for(scene, tx, rx, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(synthesize_paths(&paths, num_antennas, &scene.radio, noise_power, seed))
}
