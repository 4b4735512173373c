//! Weighted range-based position fixing.
//!
//! Minimizes `Σ_i w_i (ρ_i(x) − r_i)²` where `ρ_i` is either the distance to
//! anchor `i` or, for bistatic observations, the sum of distances to the
//! transmitter and the receiving anchor. The solver starts from a linearized
//! closed-form fix and refines it with damped Gauss–Newton.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::scene::{distance, Position};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorObservation {
    pub anchor_position: Position,
    /// meters; for bistatic observations the measured sum range
    pub range: f64,
    pub weight: f64,
    /// Illuminator of a bistatic path, if the path has distinct endpoints.
    pub transmitter: Option<Position>,
}

impl AnchorObservation {
    pub fn new(anchor_position: Position, range: f64) -> Self {
        Self {
            anchor_position,
            range,
            weight: 1.0,
            transmitter: None,
        }
    }

    /// Sum-range (ellipse) observation `‖x − tx‖ + ‖x − rx‖ = sum_range`.
    pub fn bistatic(transmitter: Position, receiver: Position, sum_range: f64) -> Self {
        Self {
            anchor_position: receiver,
            range: sum_range,
            weight: 1.0,
            transmitter: Some(transmitter),
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    /// Modelled range at `x`.
    pub fn predicted(&self, x: Position) -> f64 {
        distance(x, self.anchor_position) + self.transmitter.map_or(0.0, |t| distance(x, t))
    }

    fn gradient(&self, x: Position) -> [f64; 2] {
        let unit = |a: Position| {
            let d = x - a;
            let r = d.norm();
            if r == 0.0 {
                [0.0, 0.0]
            } else {
                [d.x / r, d.y / r]
            }
        };
        let mut g = unit(self.anchor_position);
        if let Some(t) = self.transmitter {
            let h = unit(t);
            g[0] += h[0];
            g[1] += h[1];
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizationResult {
    pub position: Position,
    /// Weighted sum of squared range residuals, m² when weights are unitless.
    pub residue: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// on the gradient norm divided by the total weight
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-10,
            max_iterations: 100,
            max_halvings: 20,
        }
    }
}

/// Result of a Gauss–Newton run together with the residue after every accepted step.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub result: LocalizationResult,
    pub residue_trace: Vec<f64>,
}

/// `Σ_i w_i (ρ_i(x) − r_i)²`
pub fn residue_at(position: Position, observations: &[AnchorObservation]) -> f64 {
    observations
        .iter()
        .map(|o| {
            let e = o.predicted(position) - o.range;
            o.weight * e * e
        })
        .sum()
}

/// Unweighted residuals `ρ_i(x) − r_i`.
pub fn residuals(position: Position, observations: &[AnchorObservation]) -> Vec<f64> {
    observations
        .iter()
        .map(|o| o.predicted(position) - o.range)
        .collect()
}

/// Rows `∂ρ_i/∂(x, y)` of the residual Jacobian.
pub fn jacobian(position: Position, observations: &[AnchorObservation]) -> Vec<[f64; 2]> {
    observations.iter().map(|o| o.gradient(position)).collect()
}

/// Feasibility threshold on a per-target minimized residue.
///
/// `(3σ)²·M` for range noise σ over `M` anchors, or `1e-6` m² when noise-free.
pub fn feasibility_threshold(range_std: f64, num_anchors: usize) -> f64 {
    if range_std > 0.0 {
        (3.0 * range_std).powi(2) * num_anchors as f64
    } else {
        1e-6
    }
}

fn gradient_of(position: Position, observations: &[AnchorObservation]) -> (Vector2<f64>, Matrix2<f64>) {
    let mut g = Vector2::zeros();
    let mut h = Matrix2::zeros();
    for o in observations {
        let e = o.predicted(position) - o.range;
        let [jx, jy] = o.gradient(position);
        let j = Vector2::new(jx, jy);
        g += j * (2.0 * o.weight * e);
        h += j * j.transpose() * o.weight;
    }
    (g, h)
}

/// Damped Gauss–Newton from `initial`.
///
/// Each step is halved until the residue strictly decreases. When no halving
/// helps the iterate is numerically stationary and the run stops.
pub fn refine_from(
    observations: &[AnchorObservation],
    initial: Position,
    options: &SolverOptions,
) -> Refinement {
    let mut x = initial;
    let mut f = residue_at(x, observations);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    // tolerances are taken per unit of total weight so that rescaling all
    // weights leaves the iteration path unchanged
    let total_weight: f64 = observations.iter().map(|o| o.weight).sum();
    while iterations < options.max_iterations {
        let (g, h) = gradient_of(x, observations);
        if g.norm() < options.gradient_tolerance * total_weight {
            converged = true;
            break;
        }
        let rhs = -g * 0.5;
        let trace_h = h.trace();
        let step = h
            .try_inverse()
            .filter(|_| h.determinant() > 1e-14 * trace_h * trace_h)
            .map(|inv| inv * rhs)
            .or_else(|| {
                let damped = h + Matrix2::identity() * (1e-9 * trace_h.max(1e-300));
                damped.try_inverse().map(|inv| inv * rhs)
            });
        let Some(step) = step else { break };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let cand = Position::new(x.x + scale * step[0], x.y + scale * step[1]);
            let fc = residue_at(cand, observations);
            if fc < f {
                accepted = Some((cand, fc));
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((cand, fc)) => {
                x = cand;
                f = fc;
                trace.push(fc);
            }
            None => {
                let misfit: f64 = observations
                    .iter()
                    .map(|o| o.weight * (o.predicted(x) - o.range).abs())
                    .sum();
                converged = g.norm() <= 1e-6 * misfit.max(total_weight);
                break;
            }
        }
    }
    if !converged && iterations >= options.max_iterations {
        converged = gradient_of(x, observations).0.norm() < options.gradient_tolerance * total_weight;
    }
    Refinement {
        result: LocalizationResult {
            position: x,
            residue: f,
            converged,
            iterations,
        },
        residue_trace: trace,
    }
}

fn validate(observations: &[AnchorObservation]) -> Result<()> {
    if observations.len() < 3 {
        return Err(Error::Precondition(format!(
            "trilateration needs at least 3 observations, got {}",
            observations.len()
        )));
    }
    for o in observations {
        if !(o.anchor_position.is_finite()
            && o.transmitter.is_none_or(|t| t.is_finite())
            && o.range.is_finite()
            && o.range >= 0.0
            && o.weight.is_finite()
            && o.weight >= 0.0)
        {
            return Err(Error::Precondition(format!("invalid observation {o:?}")));
        }
    }
    if observations.iter().filter(|o| o.weight > 0.0).count() < 2 {
        return Err(Error::Precondition("need at least two positively weighted observations".into()));
    }
    Ok(())
}

fn weighted_centroid(observations: &[AnchorObservation]) -> Position {
    let total: f64 = observations.iter().map(|o| o.weight).sum();
    let (sx, sy) = observations.iter().fold((0.0, 0.0), |(sx, sy), o| {
        (sx + o.weight * o.anchor_position.x, sy + o.weight * o.anchor_position.y)
    });
    Position::new(sx / total, sy / total)
}

/// Linearized closed-form fix for pure range observations.
///
/// Differences of squared-range equations against the heaviest anchor give a
/// linear system in `x`; coordinates are centred on the anchors first.
fn linear_range_fix(observations: &[AnchorObservation]) -> Option<Position> {
    let c = weighted_centroid(observations);
    let r = observations
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.weight.total_cmp(&b.1.weight).then(b.0.cmp(&a.0)))?
        .0;
    let ar = observations[r].anchor_position - c;
    let rr = observations[r].range;
    let mut a = Matrix2::zeros();
    let mut b = Vector2::zeros();
    for (i, o) in observations.iter().enumerate() {
        if i == r || o.weight == 0.0 {
            continue;
        }
        let ai = o.anchor_position - c;
        let row = Vector2::new(2.0 * (ai.x - ar.x), 2.0 * (ai.y - ar.y));
        let rhs = rr * rr - o.range * o.range + ai.dot(&ai) - ar.dot(&ar);
        a += row * row.transpose() * o.weight;
        b += row * (rhs * o.weight);
    }
    let x = a.lu().solve(&b)?;
    let p = Position::new(x[0] + c.x, x[1] + c.y);
    p.is_finite().then_some(p)
}

/// Closed-form fix for sum-range observations sharing one transmitter.
///
/// With `ρ = ‖x − tx‖` as an extra unknown every ellipse becomes linear:
/// `2 uᵢ·x − 2 sᵢ ρ = ‖uᵢ‖² − sᵢ²` in transmitter-centred coordinates.
fn linear_bistatic_fix(observations: &[AnchorObservation], tx: Position) -> Option<Position> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for o in observations {
        let u = o.anchor_position - tx;
        let s = o.range;
        let row = Vector3::new(2.0 * u.x, 2.0 * u.y, -2.0 * s);
        let rhs = u.dot(&u) - s * s;
        a += row * row.transpose() * o.weight;
        b += row * (rhs * o.weight);
    }
    let x = a.lu().solve(&b)?;
    let p = Position::new(x[0] + tx.x, x[1] + tx.y);
    p.is_finite().then_some(p)
}

/// Best closed-form starting point available for these observations.
pub fn linearized_fix(observations: &[AnchorObservation]) -> Position {
    let active: Vec<AnchorObservation> =
        observations.iter().copied().filter(|o| o.weight > 0.0).collect();
    let fix = match active.first().map(|o| o.transmitter) {
        Some(None) if active.iter().all(|o| o.transmitter.is_none()) => linear_range_fix(&active),
        Some(Some(tx)) if active.iter().all(|o| o.transmitter == Some(tx)) && active.len() >= 3 => {
            linear_bistatic_fix(&active, tx)
        }
        _ => None,
    };
    fix.unwrap_or_else(|| weighted_centroid(&active))
}

/// `(direction, smallest/largest singular value ratio)` of the centred anchor cloud.
fn anchor_spread(observations: &[AnchorObservation]) -> (Vector2<f64>, f64) {
    let c = weighted_centroid(observations);
    let mut s = Matrix2::zeros();
    for o in observations {
        let d = o.anchor_position - c;
        let v = Vector2::new(d.x, d.y);
        s += v * v.transpose();
    }
    let eig = s.symmetric_eigen();
    let (hi, lo) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let major = eig.eigenvectors.column(hi).into_owned();
    let l_hi = eig.eigenvalues[hi].max(0.0).sqrt();
    let l_lo = eig.eigenvalues[lo].max(0.0).sqrt();
    let ratio = if l_hi > 0.0 { l_lo / l_hi } else { 0.0 };
    (major, ratio)
}

fn collinear_candidates(
    observations: &[AnchorObservation],
    axis: Vector2<f64>,
    options: &SolverOptions,
) -> Result<[LocalizationResult; 2]> {
    let c = weighted_centroid(observations);
    let u = Position::new(axis[0], axis[1]);
    let n = Position::new(-axis[1], axis[0]);
    let t: Vec<f64> = observations.iter().map(|o| (o.anchor_position - c).dot(&u)).collect();
    let r = (0..observations.len())
        .max_by(|&a, &b| observations[a].weight.total_cmp(&observations[b].weight).then(b.cmp(&a)))
        .unwrap_or(0);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, o) in observations.iter().enumerate() {
        if i == r {
            continue;
        }
        let coef = -2.0 * (t[i] - t[r]);
        let rhs = o.range.powi(2) - observations[r].range.powi(2) - t[i] * t[i] + t[r] * t[r];
        num += o.weight * coef * rhs;
        den += o.weight * coef * coef;
    }
    if den == 0.0 {
        return Err(Error::Precondition("all anchors coincide".into()));
    }
    let along = num / den;
    let wsum: f64 = observations.iter().map(|o| o.weight).sum();
    let h2 = observations
        .iter()
        .zip(&t)
        .map(|(o, ti)| o.weight * (o.range.powi(2) - (along - ti).powi(2)))
        .sum::<f64>()
        / wsum;
    let h = h2.max(0.0).sqrt();
    let foot = c + u * along;
    Ok([
        refine_from(observations, foot + n * h, options).result,
        refine_from(observations, foot - n * h, options).result,
    ])
}

/// Weighted least-squares fix; `converged == false` instead of a divergence error.
pub fn localize(observations: &[AnchorObservation], options: &SolverOptions) -> Result<LocalizationResult> {
    validate(observations)?;
    let active: Vec<AnchorObservation> =
        observations.iter().copied().filter(|o| o.weight > 0.0).collect();
    if active.iter().all(|o| o.transmitter.is_none()) {
        let (axis, ratio) = anchor_spread(&active);
        if ratio < 1e-9 {
            let candidates = collinear_candidates(observations, axis, options)?;
            if distance(candidates[0].position, candidates[1].position) <= 1e-9 {
                return Ok(candidates[0]);
            }
            return Err(Error::CollinearAnchors {
                candidates: Box::new(candidates),
            });
        }
    }
    Ok(refine_from(observations, linearized_fix(observations), options).result)
}

/// Trilaterate with the default solver settings.
///
/// Collinear anchors yield [`Error::CollinearAnchors`] carrying both mirror
/// candidates; a run that exhausts its iterations yields [`Error::Divergence`].
pub fn trilaterate(observations: &[AnchorObservation]) -> Result<LocalizationResult> {
    let options = SolverOptions::default();
    let result = localize(observations, &options)?;
    if result.converged {
        Ok(result)
    } else {
        Err(Error::Divergence {
            iterations: result.iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bs() -> [Position; 3] {
        [
            Position::new(-35.0, 0.0),
            Position::new(50.0, 0.0),
            Position::new(0.0, -45.0),
        ]
    }

    fn obs(ranges: [f64; 3]) -> Vec<AnchorObservation> {
        bs().iter()
            .zip(ranges)
            .map(|(a, r)| AnchorObservation::new(*a, r))
            .collect()
    }

    #[test]
    fn example_one_true_and_ghost() {
        let r = trilaterate(&obs([5125f64.sqrt(), 1300f64.sqrt(), 6525f64.sqrt()])).unwrap();
        assert!(distance(r.position, Position::new(30.0, 30.0)) < 1e-9);
        assert!(r.residue <= 1e-12);
        let g = trilaterate(&obs([5125f64.sqrt(), 1300f64.sqrt(), 1125f64.sqrt()])).unwrap();
        assert!(distance(g.position, Position::new(30.0, -30.0)) < 1e-9);
        assert!(g.residue <= 1e-12);
    }

    /// Brute-force minimum of the residue over a grid, then a local polish
    /// of the grid minimum by shrinking pattern search.
    fn grid_min(observations: &[AnchorObservation]) -> f64 {
        let mut best = (f64::INFINITY, Position::default());
        let mut x = -100.0;
        while x <= 100.0 {
            let mut y = -100.0;
            while y <= 100.0 {
                let p = Position::new(x, y);
                let f = residue_at(p, observations);
                if f < best.0 {
                    best = (f, p);
                }
                y += 0.25;
            }
            x += 0.25;
        }
        best.0
    }

    #[test]
    fn example_two_wrong_association_infeasible() {
        let o = obs([4625f64.sqrt(), 800f64.sqrt(), 1125f64.sqrt()]);
        let r = trilaterate(&o).unwrap();
        let oracle = grid_min(&o);
        let eps = feasibility_threshold(0.0, 3);
        assert!(oracle > 1e3 * eps, "oracle minimum {oracle}");
        assert!(r.residue > 1e3 * eps);
        assert!(r.residue <= oracle + 1e-9);
    }

    #[test]
    fn residue_examples() {
        let truth = Position::new(30.0, 30.0);
        let o = obs([5125f64.sqrt(), 1300f64.sqrt(), 6525f64.sqrt()]);
        assert!(residue_at(truth, &o) < 1e-20);
        let mut off = o.clone();
        off[1].range += 0.5;
        assert!((residue_at(truth, &off) - 0.25).abs() < 1e-12);
        let doubled: Vec<_> = off.iter().map(|o| o.with_weight(2.0)).collect();
        assert!((residue_at(truth, &doubled) - 0.5).abs() < 1e-12);
        let a = trilaterate(&off).unwrap();
        let b = trilaterate(&doubled).unwrap();
        assert_eq!(a.position, b.position);
        assert_eq!(2.0 * a.residue, b.residue);
    }

    #[test]
    fn too_few_observations() {
        let o = obs([1.0, 2.0, 3.0]);
        assert!(matches!(trilaterate(&o[..2]), Err(Error::Precondition(_))));
    }

    #[test]
    fn collinear_anchors_return_mirror_pair() {
        let truth = Position::new(10.0, 25.0);
        let anchors = [Position::new(-20.0, 0.0), Position::new(5.0, 0.0), Position::new(40.0, 0.0)];
        let o: Vec<_> = anchors
            .iter()
            .map(|a| AnchorObservation::new(*a, distance(*a, truth)))
            .collect();
        match trilaterate(&o) {
            Err(Error::CollinearAnchors { candidates }) => {
                let mut ys: Vec<f64> = candidates.iter().map(|c| c.position.y).collect();
                ys.sort_by(f64::total_cmp);
                assert!((ys[0] + 25.0).abs() < 1e-6 && (ys[1] - 25.0).abs() < 1e-6);
                assert!(candidates.iter().all(|c| (c.position.x - 10.0).abs() < 1e-6));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bistatic_exact_recovery() {
        let tx = Position::new(0.0, 0.0);
        let truth = Position::new(42.0, 31.0);
        let rxs = [
            Position::new(60.0, 10.0),
            Position::new(20.0, 55.0),
            Position::new(70.0, 60.0),
            Position::new(35.0, 5.0),
        ];
        let o: Vec<_> = rxs
            .iter()
            .map(|r| AnchorObservation::bistatic(tx, *r, distance(tx, truth) + distance(*r, truth)))
            .collect();
        let r = trilaterate(&o).unwrap();
        assert!(distance(r.position, truth) < 1e-9);
    }

    fn non_collinear(a: Position, b: Position, c: Position) -> bool {
        let area = ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs();
        let scale = distance(a, b).max(distance(b, c)).max(distance(a, c));
        area > 0.05 * scale * scale && distance(a, b) > 1.0 && distance(b, c) > 1.0 && distance(a, c) > 1.0
    }

    fn pos() -> impl Strategy<Value = Position> {
        (-100.0f64..100.0, -100.0f64..100.0).prop_map(|(x, y)| Position::new(x, y))
    }

    proptest! {
        #[test]
        fn exact_ranges_recover_target(a in pos(), b in pos(), c in pos(), t in pos()) {
            prop_assume!(non_collinear(a, b, c));
            prop_assume!([a, b, c].iter().all(|p| distance(*p, t) > 0.5));
            let o: Vec<_> = [a, b, c].iter().map(|p| AnchorObservation::new(*p, distance(*p, t))).collect();
            let r = trilaterate(&o).unwrap();
            prop_assert!(distance(r.position, t) < 1e-9, "{} vs {}", r.position, t);
        }

        #[test]
        fn weight_scaling_leaves_argmin(a in pos(), b in pos(), c in pos(), t in pos(),
                                        noise in prop::array::uniform3(-2.0f64..2.0), k in 0i32..6) {
            prop_assume!(non_collinear(a, b, c));
            let o: Vec<_> = [a, b, c].iter().zip(noise)
                .map(|(p, e)| AnchorObservation::new(*p, (distance(*p, t) + e).max(0.0))).collect();
            let s = 2f64.powi(k - 2);
            let scaled: Vec<_> = o.iter().map(|x| x.with_weight(s)).collect();
            let (Ok(r1), Ok(r2)) = (trilaterate(&o), trilaterate(&scaled)) else { return Ok(()) };
            prop_assert_eq!(r1.position, r2.position);
            prop_assert!((r2.residue - s * r1.residue).abs() <= 1e-12 * (1.0 + r2.residue));
        }

        #[test]
        fn residue_monotone_along_accepted_steps(a in pos(), b in pos(), c in pos(), d in pos(), t in pos(),
                                                 noise in prop::array::uniform4(-3.0f64..3.0), start in pos()) {
            let o: Vec<_> = [a, b, c, d].iter().zip(noise)
                .map(|(p, e)| AnchorObservation::new(*p, (distance(*p, t) + e).max(0.0))).collect();
            let run = refine_from(&o, start, &SolverOptions::default());
            let mut prev = residue_at(start, &o);
            for f in run.residue_trace {
                prop_assert!(f <= prev);
                prev = f;
            }
        }

        #[test]
        fn jacobian_matches_central_differences(x in pos(), anchors in prop::array::uniform4(pos()),
                                               tx in pos(), bistatic in any::<bool>()) {
            let o: Vec<_> = anchors.iter().map(|a| {
                let base = AnchorObservation::new(*a, 10.0);
                if bistatic { AnchorObservation { transmitter: Some(tx), ..base } } else { base }
            }).collect();
            prop_assume!(o.iter().all(|ob| distance(x, ob.anchor_position) > 1.0
                && ob.transmitter.is_none_or(|t| distance(x, t) > 1.0)));
            let j = jacobian(x, &o);
            let h = 1e-5;
            for (i, row) in j.iter().enumerate() {
                for (axis, analytic) in row.iter().enumerate() {
                    let (dx, dy) = if axis == 0 { (h, 0.0) } else { (0.0, h) };
                    let plus = o[i].predicted(Position::new(x.x + dx, x.y + dy));
                    let minus = o[i].predicted(Position::new(x.x - dx, x.y - dy));
                    let fd = (plus - minus) / (2.0 * h);
                    prop_assert!((fd - analytic).abs() <= 1e-6 * analytic.abs().max(1.0));
                }
            }
        }
    }
}
