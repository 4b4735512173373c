//! Measurement-to-target association for networked sensing.
//!
//! Every base station reports an unlabeled set of ranges. A hypothesis picks,
//! per station, which measurement belongs to which target; it is feasible when
//! every target's ranges trilaterate to a point with residue at most `ε`.
//! Wrong but feasible hypotheses produce ghost targets.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{distance, Position};
use crate::trilateration::{localize, AnchorObservation, LocalizationResult, SolverOptions};

pub const DEFAULT_ENUMERATION_CAP: u128 = 10_000_000;

/// Two solved positions closer than this are the same point.
const SAME_POINT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceProfile {
    pub bs_id: String,
    pub ranges: Vec<f64>,
}

impl DistanceProfile {
    pub fn new(bs_id: impl Into<String>, ranges: Vec<f64>) -> Self {
        Self {
            bs_id: bs_id.into(),
            ranges,
        }
    }
}

/// `assignment[m][j]` is the target that produced measurement `j` at station `m`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AssociationHypothesis {
    pub assignment: Vec<Vec<usize>>,
}

impl AssociationHypothesis {
    /// Measurement index used for `target` at each station.
    pub fn measurements_of(&self, target: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .map(|perm| perm.iter().position(|&k| k == target).expect("bijection"))
            .collect()
    }

    fn from_inverse(inverse: &[Vec<usize>]) -> Self {
        let assignment = inverse
            .iter()
            .map(|inv| {
                let mut perm = vec![0; inv.len()];
                for (target, &j) in inv.iter().enumerate() {
                    perm[j] = target;
                }
                perm
            })
            .collect();
        Self { assignment }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssociationSolution {
    pub hypothesis: AssociationHypothesis,
    pub positions: Vec<Position>,
    pub target_residues: Vec<f64>,
    pub total_residue: f64,
}

/// Number of canonical hypotheses `(K!)^(M−1)`, saturating at `u128::MAX`.
pub fn hypothesis_count(num_bs: usize, num_targets: usize) -> u128 {
    let mut fact: u128 = 1;
    for i in 2..=num_targets as u128 {
        fact = fact.saturating_mul(i);
    }
    let mut count: u128 = 1;
    for _ in 1..num_bs {
        count = count.saturating_mul(fact);
    }
    count
}

/// Lazy lexicographic enumeration; the last station's permutation varies fastest.
#[derive(Clone, Debug)]
pub struct HypothesisIter {
    perms: Vec<Vec<usize>>,
    done: bool,
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

impl Iterator for HypothesisIter {
    type Item = AssociationHypothesis;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let current = AssociationHypothesis {
            assignment: self.perms.clone(),
        };
        let mut m = self.perms.len();
        loop {
            if m <= 1 {
                self.done = true;
                break;
            }
            m -= 1;
            if next_permutation(&mut self.perms[m]) {
                break;
            }
            self.perms[m].sort_unstable();
        }
        Some(current)
    }
}

pub fn enumerate_hypotheses(num_bs: usize, num_targets: usize) -> Result<HypothesisIter> {
    enumerate_hypotheses_capped(num_bs, num_targets, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_hypotheses_capped(num_bs: usize, num_targets: usize, cap: u128) -> Result<HypothesisIter> {
    if num_bs < 3 || num_targets < 1 {
        return Err(Error::Precondition(format!(
            "association needs at least 3 stations and 1 target, got {num_bs} and {num_targets}"
        )));
    }
    let count = hypothesis_count(num_bs, num_targets);
    if count > cap {
        return Err(Error::EnumerationCap { count, cap });
    }
    Ok(HypothesisIter {
        perms: vec![(0..num_targets).collect(); num_bs],
        done: false,
    })
}

fn validate(profiles: &[DistanceProfile], bs_positions: &[Position], epsilon: f64) -> Result<usize> {
    if profiles.len() != bs_positions.len() {
        return Err(Error::Precondition(format!(
            "{} profiles for {} station positions",
            profiles.len(),
            bs_positions.len()
        )));
    }
    if profiles.len() < 3 {
        return Err(Error::Precondition("association needs at least 3 stations".into()));
    }
    let k = profiles[0].ranges.len();
    if k == 0 {
        return Err(Error::Precondition("empty distance profile".into()));
    }
    for p in profiles {
        if p.ranges.len() != k {
            return Err(Error::Precondition(format!(
                "profile of `{}` has {} ranges, expected {k}",
                p.bs_id,
                p.ranges.len()
            )));
        }
        if p.ranges.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Precondition(format!("profile of `{}` has an invalid range", p.bs_id)));
        }
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Precondition("epsilon must be nonnegative".into()));
    }
    Ok(k)
}

/// Trilaterate one target; a collinear layout resolves to the lower-residue mirror.
fn localize_target(observations: &[AnchorObservation]) -> Option<LocalizationResult> {
    match localize(observations, &SolverOptions::default()) {
        Ok(r) => Some(r),
        Err(Error::CollinearAnchors { candidates }) => {
            let [a, b] = *candidates;
            Some(if b.residue < a.residue { b } else { a })
        }
        Err(_) => None,
    }
}

fn observations_for(
    profiles: &[DistanceProfile],
    bs_positions: &[Position],
    measurement_per_bs: impl Iterator<Item = usize>,
) -> Vec<AnchorObservation> {
    measurement_per_bs
        .enumerate()
        .map(|(m, j)| AnchorObservation::new(bs_positions[m], profiles[m].ranges[j]))
        .collect()
}

fn sort_solutions(solutions: &mut [AssociationSolution]) {
    solutions.sort_by(|a, b| {
        a.total_residue
            .total_cmp(&b.total_residue)
            .then_with(|| a.hypothesis.cmp(&b.hypothesis))
    });
}

/// Exhaustive search over all canonical hypotheses.
///
/// Feasible solutions come back sorted by total residue, ties by hypothesis order.
pub fn solve_association(
    profiles: &[DistanceProfile],
    bs_positions: &[Position],
    epsilon: f64,
) -> Result<Vec<AssociationSolution>> {
    let k = validate(profiles, bs_positions, epsilon)?;
    let hypotheses = enumerate_hypotheses(profiles.len(), k)?;
    let mut solutions: Vec<AssociationSolution> = hypotheses
        .par_bridge()
        .filter_map(|h| {
            let mut positions = Vec::with_capacity(k);
            let mut residues = Vec::with_capacity(k);
            for target in 0..k {
                let obs = observations_for(profiles, bs_positions, h.measurements_of(target).into_iter());
                let fix = localize_target(&obs)?;
                if fix.residue > epsilon {
                    return None;
                }
                positions.push(fix.position);
                residues.push(fix.residue);
            }
            Some(AssociationSolution {
                total_residue: residues.iter().sum(),
                hypothesis: h,
                positions,
                target_residues: residues,
            })
        })
        .collect();
    sort_solutions(&mut solutions);
    Ok(solutions)
}

struct Search<'a> {
    profiles: &'a [DistanceProfile],
    bs_positions: &'a [Position],
    epsilon: f64,
    k: usize,
    /// `inverse[m][target]` = measurement index
    inverse: Vec<Vec<usize>>,
    used: Vec<Vec<bool>>,
    fixes: Vec<LocalizationResult>,
    out: Vec<AssociationSolution>,
}

impl Search<'_> {
    fn target(&mut self, target: usize) {
        if target == self.k {
            let residues: Vec<f64> = self.fixes.iter().map(|f| f.residue).collect();
            self.out.push(AssociationSolution {
                hypothesis: AssociationHypothesis::from_inverse(&self.inverse),
                positions: self.fixes.iter().map(|f| f.position).collect(),
                total_residue: residues.iter().sum(),
                target_residues: residues,
            });
            return;
        }
        self.inverse[0][target] = target;
        self.station(target, 1);
    }

    fn station(&mut self, target: usize, m: usize) {
        let num_bs = self.bs_positions.len();
        for j in 0..self.k {
            if self.used[m][j] {
                continue;
            }
            self.inverse[m][target] = j;
            let mut fix = None;
            if m >= 2 {
                let obs = observations_for(
                    &self.profiles[..=m],
                    &self.bs_positions[..=m],
                    (0..=m).map(|s| self.inverse[s][target]),
                );
                fix = localize_target(&obs);
                if m + 1 == num_bs {
                    // the full solve decides feasibility exactly as the exhaustive search does
                    match fix {
                        Some(f) if f.residue <= self.epsilon => {}
                        _ => continue,
                    }
                } else if fix.is_some_and(|f| f.residue > self.epsilon) {
                    continue;
                }
            }
            self.used[m][j] = true;
            if m + 1 == num_bs {
                self.fixes.push(fix.expect("checked above"));
                self.target(target + 1);
                self.fixes.pop();
            } else {
                self.station(target, m + 1);
            }
            self.used[m][j] = false;
        }
    }
}

/// Branch-and-bound search that returns the same feasible set as [`solve_association`].
///
/// Targets are assigned one at a time. A partial assignment over the first
/// `m ≥ 3` stations whose trilateration residue already exceeds `ε` cannot
/// become feasible, since adding stations only adds nonnegative terms.
pub fn solve_association_pruned(
    profiles: &[DistanceProfile],
    bs_positions: &[Position],
    epsilon: f64,
) -> Result<Vec<AssociationSolution>> {
    let k = validate(profiles, bs_positions, epsilon)?;
    let num_bs = profiles.len();
    let mut search = Search {
        profiles,
        bs_positions,
        epsilon,
        k,
        inverse: vec![vec![0; k]; num_bs],
        used: vec![vec![false; k]; num_bs],
        fixes: Vec::with_capacity(k),
        out: Vec::new(),
    };
    search.target(0);
    let mut solutions = search.out;
    sort_solutions(&mut solutions);
    Ok(solutions)
}

/// Greedy nearest-first one-to-one matching.
///
/// Returns, for every estimate, the index of the truth it was matched to.
pub fn greedy_match(estimates: &[Position], truths: &[Position], radius: f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, e) in estimates.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            let d = distance(*e, *t);
            if d <= radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched = vec![None; estimates.len()];
    let mut taken = vec![false; truths.len()];
    for (_, i, j) in pairs {
        if matched[i].is_none() && !taken[j] {
            matched[i] = Some(j);
            taken[j] = true;
        }
    }
    matched
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GhostPartition {
    /// `(solved position, index of the matched true target)`
    pub detections: Vec<(Position, usize)>,
    pub ghosts: Vec<Position>,
}

/// Split the distinct positions of all feasible solutions into true detections and ghosts.
pub fn classify_ghosts(solutions: &[AssociationSolution], true_positions: &[Position], radius: f64) -> GhostPartition {
    let mut distinct: Vec<Position> = Vec::new();
    for p in solutions.iter().flat_map(|s| s.positions.iter()) {
        if distinct.iter().all(|q| distance(*p, *q) > SAME_POINT) {
            distinct.push(*p);
        }
    }
    let matched = greedy_match(&distinct, true_positions, radius);
    let mut out = GhostPartition::default();
    for (p, m) in distinct.into_iter().zip(matched) {
        match m {
            Some(j) => out.detections.push((p, j)),
            None => out.ghosts.push(p),
        }
    }
    out
}
