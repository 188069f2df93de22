//! Piecewise-constant densities, profiles and the two views of an allocation.
//!
//! An allocation can be described cell by cell (how much of each refinement
//! cell every agent holds, a [`ShareMatrix`]) or geometrically (which positioned
//! intervals every agent holds, an [`Allocation`]). Utilities only depend on the
//! first view; mechanisms that discard part of a piece need the second.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CakeError, Result};

/// Breakpoints closer than this are treated as the same point.
pub const MERGE_TOL: f64 = 1e-12;
/// Default tolerance for comparing values and utilities.
pub const CMP_TOL: f64 = 1e-9;

/// A closed interval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInterval")]
pub struct Interval {
    lo: f64,
    hi: f64,
}

#[derive(Deserialize)]
struct RawInterval {
    lo: f64,
    hi: f64,
}

impl TryFrom<RawInterval> for Interval {
    type Error = CakeError;

    fn try_from(raw: RawInterval) -> Result<Self> {
        Interval::new(raw.lo, raw.hi)
    }
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(CakeError::domain(format!("non-finite interval [{lo}, {hi}]")));
        }
        if lo >= hi {
            return Err(CakeError::domain(format!("degenerate interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    /// Like [`Interval::new`] but returns `None` for empty or inverted input.
    pub fn nonempty(lo: f64, hi: f64) -> Option<Self> {
        Interval::new(lo, hi).ok()
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Whether `other` lies inside `self`, allowing endpoints to stick out by
    /// at most [`MERGE_TOL`].
    pub fn contains(&self, other: &Interval) -> bool {
        other.lo >= self.lo - MERGE_TOL && other.hi <= self.hi + MERGE_TOL
    }

    pub fn overlap(&self, other: &Interval) -> f64 {
        (self.hi.min(other.hi) - self.lo.max(other.lo)).max(0.0)
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        Interval::nonempty(self.lo.max(other.lo), self.hi.min(other.hi))
    }
}

/// Sorts intervals and merges the ones that overlap or touch.
pub fn union_intervals(set: &[Interval]) -> Vec<Interval> {
    let mut sorted = set.to_vec();
    sorted.sort_by(|a, b| a.lo.total_cmp(&b.lo).then(a.hi.total_cmp(&b.hi)));
    let mut merged: Vec<Interval> = Vec::with_capacity(sorted.len());
    for iv in sorted {
        match merged.last_mut() {
            Some(last) if iv.lo <= last.hi + MERGE_TOL => last.hi = last.hi.max(iv.hi),
            _ => merged.push(iv),
        }
    }
    merged
}

/// One agent's value density: constant `values[t]` on `(breakpoints[t], breakpoints[t + 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDensity")]
pub struct PiecewiseDensity {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDensity {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl TryFrom<RawDensity> for PiecewiseDensity {
    type Error = CakeError;

    fn try_from(raw: RawDensity) -> Result<Self> {
        PiecewiseDensity::new(raw.breakpoints, raw.values)
    }
}

impl PiecewiseDensity {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let density = PiecewiseDensity::unchecked_total(breakpoints, values)?;
        if density.total() <= 0.0 {
            return Err(CakeError::domain("density has zero total value"));
        }
        Ok(density)
    }

    fn unchecked_total(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(CakeError::domain("a density needs at least two breakpoints"));
        }
        if values.len() + 1 != breakpoints.len() {
            return Err(CakeError::domain(format!(
                "{} breakpoints require {} values, got {}",
                breakpoints.len(),
                breakpoints.len() - 1,
                values.len()
            )));
        }
        if breakpoints.iter().any(|b| !b.is_finite()) {
            return Err(CakeError::domain("non-finite breakpoint"));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CakeError::domain("breakpoints must be strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CakeError::domain("density values must be finite and nonnegative"));
        }
        Ok(PiecewiseDensity { breakpoints, values })
    }

    pub fn uniform(cake: Interval, value: f64) -> Result<Self> {
        PiecewiseDensity::new(vec![cake.lo, cake.hi], vec![value])
    }

    /// Builds a density over `cake` that is `inside` on `piece` and `outside` elsewhere.
    pub fn indicator(cake: Interval, piece: Interval, inside: f64, outside: f64) -> Result<Self> {
        if !cake.contains(&piece) {
            return Err(CakeError::domain("indicator piece outside the cake"));
        }
        let mut breakpoints = vec![cake.lo];
        let mut values = Vec::new();
        if piece.lo > cake.lo + MERGE_TOL {
            breakpoints.push(piece.lo);
            values.push(outside);
        }
        values.push(inside);
        if piece.hi < cake.hi - MERGE_TOL {
            breakpoints.push(piece.hi);
            values.push(outside);
        }
        breakpoints.push(cake.hi);
        PiecewiseDensity::new(breakpoints, values)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn span(&self) -> Interval {
        Interval {
            lo: self.breakpoints[0],
            hi: *self.breakpoints.last().unwrap(),
        }
    }

    pub fn num_cells(&self) -> usize {
        self.values.len()
    }

    /// `(cell, value)` pairs in order.
    pub fn cells(&self) -> impl Iterator<Item = (Interval, f64)> + '_ {
        self.breakpoints
            .windows(2)
            .zip(&self.values)
            .map(|(w, v)| (Interval { lo: w[0], hi: w[1] }, *v))
    }

    /// Density at `x`; a breakpoint belongs to the cell on its right (the last
    /// breakpoint to the last cell).
    pub fn value_at(&self, x: f64) -> f64 {
        let idx = self.breakpoints.partition_point(|b| *b <= x);
        let cell = idx.saturating_sub(1).min(self.values.len() - 1);
        self.values[cell]
    }

    /// Integral over `[lo, hi]` clipped to the span.
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let mut total = 0.0;
        for (cell, v) in self.cells() {
            if cell.hi <= lo {
                continue;
            }
            if cell.lo >= hi {
                break;
            }
            let len = cell.hi.min(hi) - cell.lo.max(lo);
            if len > 0.0 {
                total += v * len;
            }
        }
        total
    }

    pub fn total(&self) -> f64 {
        self.cells().map(|(c, v)| c.len() * v).sum()
    }

    /// Merges adjacent cells carrying the same value.
    pub fn canonicalize(&self) -> Self {
        let mut breakpoints = vec![self.breakpoints[0]];
        let mut values: Vec<f64> = Vec::new();
        for (cell, v) in self.cells() {
            if values.last() == Some(&v) {
                *breakpoints.last_mut().unwrap() = cell.hi;
            } else {
                values.push(v);
                breakpoints.push(cell.hi);
            }
        }
        PiecewiseDensity { breakpoints, values }
    }

    pub fn is_canonical(&self) -> bool {
        self.values.windows(2).all(|w| w[0] != w[1])
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(CakeError::domain("scale factor must be positive"));
        }
        PiecewiseDensity::new(
            self.breakpoints.clone(),
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    fn mapped(&self, map: impl Fn(f64) -> f64) -> Result<Self> {
        PiecewiseDensity::new(self.breakpoints.iter().map(|b| map(*b)).collect(), self.values.clone())
    }
}

/// Lebesgue integral of `density` over the union of `set`.
pub fn value_of(density: &PiecewiseDensity, set: &[Interval]) -> Result<f64> {
    let span = density.span();
    if let Some(bad) = set.iter().find(|iv| !span.contains(iv)) {
        return Err(CakeError::domain(format!(
            "interval [{}, {}] lies outside the cake [{}, {}]",
            bad.lo, bad.hi, span.lo, span.hi
        )));
    }
    Ok(union_intervals(set)
        .iter()
        .map(|iv| density.integral(iv.lo, iv.hi))
        .sum())
}

/// Agents' densities over a common cake together with their common refinement.
///
/// Agent indices are 0-based. Cells inside a removed interval are forbidden:
/// no mechanism allocates them.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    cake: Interval,
    densities: Vec<PiecewiseDensity>,
    removed: Vec<Interval>,
    boundaries: Vec<f64>,
    values: Vec<Vec<f64>>,
    forbidden: Vec<bool>,
}

/// Builds the profile whose cells are the sorted union of all breakpoints.
pub fn common_refinement(densities: Vec<PiecewiseDensity>, cake: Interval) -> Result<Profile> {
    Profile::build(densities, cake, Vec::new())
}

impl Profile {
    pub fn new(densities: Vec<PiecewiseDensity>, cake: Interval) -> Result<Self> {
        common_refinement(densities, cake)
    }

    fn build(densities: Vec<PiecewiseDensity>, cake: Interval, removed: Vec<Interval>) -> Result<Self> {
        if densities.is_empty() {
            return Err(CakeError::domain("a profile needs at least one agent"));
        }
        for (i, d) in densities.iter().enumerate() {
            let span = d.span();
            if (span.lo - cake.lo).abs() > MERGE_TOL || (span.hi - cake.hi).abs() > MERGE_TOL {
                return Err(CakeError::domain(format!(
                    "agent {i} spans [{}, {}] but the cake is [{}, {}]",
                    span.lo, span.hi, cake.lo, cake.hi
                )));
            }
        }
        let mut points: Vec<f64> = densities
            .iter()
            .flat_map(|d| d.breakpoints.iter().copied())
            .chain(removed.iter().flat_map(|r| [r.lo, r.hi]))
            .filter(|p| *p > cake.lo + MERGE_TOL && *p < cake.hi - MERGE_TOL)
            .collect();
        points.sort_by(f64::total_cmp);
        let mut boundaries = vec![cake.lo];
        for p in points {
            if p - *boundaries.last().unwrap() > MERGE_TOL {
                boundaries.push(p);
            }
        }
        boundaries.push(cake.hi);

        let mids: Vec<f64> = boundaries.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let values = densities
            .iter()
            .map(|d| mids.iter().map(|m| d.value_at(*m)).collect())
            .collect();
        let forbidden = mids
            .iter()
            .map(|m| removed.iter().any(|r| r.lo < *m && *m < r.hi))
            .collect();
        Ok(Profile {
            cake,
            densities,
            removed,
            boundaries,
            values,
            forbidden,
        })
    }

    pub fn cake(&self) -> Interval {
        self.cake
    }

    pub fn n_agents(&self) -> usize {
        self.densities.len()
    }

    pub fn n_cells(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn densities(&self) -> &[PiecewiseDensity] {
        &self.densities
    }

    pub fn density(&self, agent: usize) -> &PiecewiseDensity {
        &self.densities[agent]
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn removed(&self) -> &[Interval] {
        &self.removed
    }

    pub fn cell(&self, t: usize) -> Interval {
        Interval {
            lo: self.boundaries[t],
            hi: self.boundaries[t + 1],
        }
    }

    pub fn cells(&self) -> Vec<Interval> {
        (0..self.n_cells()).map(|t| self.cell(t)).collect()
    }

    pub fn cell_len(&self, t: usize) -> f64 {
        self.boundaries[t + 1] - self.boundaries[t]
    }

    /// `f_i(X_t)`: agent `agent`'s density on cell `t`.
    pub fn value(&self, agent: usize, t: usize) -> f64 {
        self.values[agent][t]
    }

    pub fn is_forbidden(&self, t: usize) -> bool {
        self.forbidden[t]
    }

    /// Measure of the cake that may be allocated.
    pub fn available_measure(&self) -> f64 {
        (0..self.n_cells())
            .filter(|t| !self.forbidden[*t])
            .map(|t| self.cell_len(t))
            .sum()
    }

    /// The agent's value for everything that may be allocated.
    pub fn available_value(&self, agent: usize) -> f64 {
        (0..self.n_cells())
            .filter(|t| !self.forbidden[*t])
            .map(|t| self.cell_len(t) * self.values[agent][t])
            .sum()
    }

    /// The agent's density rewritten on the refinement cells.
    pub fn refined_density(&self, agent: usize) -> PiecewiseDensity {
        PiecewiseDensity {
            breakpoints: self.boundaries.clone(),
            values: self.values[agent].clone(),
        }
    }

    /// The same cake with agent `agent` reporting `density` instead.
    pub fn with_density(&self, agent: usize, density: PiecewiseDensity) -> Result<Profile> {
        if agent >= self.n_agents() {
            return Err(CakeError::domain(format!("no agent {agent}")));
        }
        let mut densities = self.densities.clone();
        densities[agent] = density;
        Profile::build(densities, self.cake, self.removed.clone())
    }

    /// The profile of the remaining agents, keeping this profile's cells.
    pub fn without_agent(&self, agent: usize) -> Profile {
        let mut out = self.clone();
        out.densities.remove(agent);
        out.values.remove(agent);
        out
    }

    /// Reorders agents so that new agent `k` is old agent `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Profile> {
        let mut seen = vec![false; self.n_agents()];
        if order.len() != self.n_agents() {
            return Err(CakeError::domain("permutation length mismatch"));
        }
        for &k in order {
            if k >= seen.len() || std::mem::replace(&mut seen[k], true) {
                return Err(CakeError::domain("not a permutation"));
            }
        }
        let mut out = self.clone();
        out.densities = order.iter().map(|k| self.densities[*k].clone()).collect();
        out.values = order.iter().map(|k| self.values[*k].clone()).collect();
        Ok(out)
    }

    pub fn utilities(&self, alloc: &Allocation) -> Result<Vec<f64>> {
        if alloc.n_agents() != self.n_agents() {
            return Err(CakeError::domain("allocation and profile disagree on the number of agents"));
        }
        self.densities
            .iter()
            .zip(alloc.bundles())
            .map(|(d, b)| value_of(d, b))
            .collect()
    }

    /// Utilities implied by a share matrix.
    pub fn share_utilities(&self, shares: &ShareMatrix) -> Vec<f64> {
        (0..self.n_agents())
            .map(|i| {
                (0..self.n_cells())
                    .map(|t| self.values[i][t] * shares.lengths[i][t])
                    .sum()
            })
            .collect()
    }
}

/// Lengths of every refinement cell held by every agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareMatrix {
    cells: Vec<Interval>,
    lengths: Vec<Vec<f64>>,
    complete: bool,
}

impl ShareMatrix {
    pub fn new(cells: Vec<Interval>, lengths: Vec<Vec<f64>>, complete: bool) -> Result<Self> {
        for row in &lengths {
            if row.len() != cells.len() {
                return Err(CakeError::invariant("share row length differs from the cell count"));
            }
        }
        for (t, cell) in cells.iter().enumerate() {
            let mut sum = 0.0;
            for row in &lengths {
                let x = row[t];
                if !(x >= -CMP_TOL && x <= cell.len() + CMP_TOL) {
                    return Err(CakeError::invariant(format!("share {x} of cell {t} out of range")));
                }
                sum += x;
            }
            if sum > cell.len() + CMP_TOL {
                return Err(CakeError::invariant(format!(
                    "cell {t} over-allocated: {sum} > {}",
                    cell.len()
                )));
            }
        }
        Ok(ShareMatrix {
            cells,
            lengths,
            complete,
        })
    }

    pub fn zeros(profile: &Profile) -> Self {
        ShareMatrix {
            cells: profile.cells(),
            lengths: vec![vec![0.0; profile.n_cells()]; profile.n_agents()],
            complete: false,
        }
    }

    pub fn cells(&self) -> &[Interval] {
        &self.cells
    }

    pub fn lengths(&self) -> &[Vec<f64>] {
        &self.lengths
    }

    pub fn get(&self, agent: usize, t: usize) -> f64 {
        self.lengths[agent][t]
    }

    pub fn n_agents(&self) -> usize {
        self.lengths.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// Each agent's row multiplied by its factor; the result is never complete
    /// unless every factor is 1.
    pub fn scale_rows(&self, factors: &[f64]) -> ShareMatrix {
        let lengths = self
            .lengths
            .iter()
            .zip(factors)
            .map(|(row, f)| row.iter().map(|x| if *f >= 1.0 { *x } else { x * f }).collect())
            .collect();
        ShareMatrix {
            cells: self.cells.clone(),
            lengths,
            complete: self.complete && factors.iter().all(|f| *f >= 1.0),
        }
    }
}

/// Per-agent unions of closed intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    bundles: Vec<Vec<Interval>>,
    complete: bool,
}

impl Allocation {
    /// Stores every bundle canonically (sorted, touching intervals merged).
    pub fn new(bundles: Vec<Vec<Interval>>, complete: bool) -> Self {
        Allocation {
            bundles: bundles.iter().map(|b| union_intervals(b)).collect(),
            complete,
        }
    }

    pub fn empty(n: usize) -> Self {
        Allocation {
            bundles: vec![Vec::new(); n],
            complete: false,
        }
    }

    pub fn bundles(&self) -> &[Vec<Interval>] {
        &self.bundles
    }

    pub fn bundle(&self, agent: usize) -> &[Interval] {
        &self.bundles[agent]
    }

    pub fn n_agents(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn measure(&self, agent: usize) -> f64 {
        self.bundles[agent].iter().map(Interval::len).sum()
    }

    /// Removes `piece` from every bundle.
    pub fn without(&self, piece: Interval) -> Allocation {
        let bundles = self
            .bundles
            .iter()
            .map(|b| {
                b.iter()
                    .flat_map(|iv| {
                        [
                            Interval::nonempty(iv.lo, iv.hi.min(piece.lo)),
                            Interval::nonempty(iv.lo.max(piece.hi), iv.hi),
                        ]
                    })
                    .flatten()
                    .collect()
            })
            .collect();
        Allocation { bundles, complete: false }
    }
}

/// Geometric mean of the agents' utilities, or 0 if anyone gets nothing.
pub fn nash_welfare(profile: &Profile, alloc: &Allocation) -> Result<f64> {
    Ok(geometric_mean(&profile.utilities(alloc)?))
}

pub fn geometric_mean(utilities: &[f64]) -> f64 {
    if utilities.is_empty() || utilities.iter().any(|u| *u <= 0.0) {
        return 0.0;
    }
    let log_mean = utilities.iter().map(|u| u.ln()).sum::<f64>() / utilities.len() as f64;
    log_mean.exp()
}

/// `lengths[i][t] = |A_i ∩ X_t|`.
pub fn to_share_matrix(profile: &Profile, alloc: &Allocation) -> Result<ShareMatrix> {
    if alloc.n_agents() != profile.n_agents() {
        return Err(CakeError::domain("allocation and profile disagree on the number of agents"));
    }
    let cake = profile.cake();
    for bundle in alloc.bundles() {
        if let Some(bad) = bundle.iter().find(|iv| !cake.contains(iv)) {
            return Err(CakeError::domain(format!("interval [{}, {}] outside the cake", bad.lo, bad.hi)));
        }
    }
    let mut overlap = 0.0;
    for (i, a) in alloc.bundles().iter().enumerate() {
        for b in &alloc.bundles()[i + 1..] {
            for x in a {
                for y in b {
                    overlap += x.overlap(y);
                }
            }
        }
    }
    if overlap > CMP_TOL {
        return Err(CakeError::invariant(format!("bundles overlap on measure {overlap:e}")));
    }
    let cells = profile.cells();
    let lengths = alloc
        .bundles()
        .iter()
        .map(|bundle| {
            cells
                .iter()
                .map(|cell| bundle.iter().map(|iv| iv.overlap(cell)).sum())
                .collect()
        })
        .collect();
    ShareMatrix::new(cells, lengths, alloc.is_complete())
}

/// How shares are turned into positioned intervals.
#[derive(Debug, Clone, Copy)]
pub enum Placement<'a> {
    /// Pack agents in index order from each cell's left end.
    LeftToRight,
    /// Lay out `pieces` left to right, then keep the rightmost part of each
    /// agent's piece.
    Rightmost { pieces: &'a ShareMatrix },
    /// Lay out `pieces` left to right, then keep a cyclic slice of each piece
    /// starting at a uniformly drawn point.
    CyclicRandom { pieces: &'a ShareMatrix },
}

/// Each agent's left-to-right slot in every cell (`None` for an empty share).
pub fn left_to_right_layout(matrix: &ShareMatrix) -> Result<Vec<Vec<Option<Interval>>>> {
    let n = matrix.n_agents();
    let mut layout = vec![vec![None; matrix.n_cells()]; n];
    for (t, cell) in matrix.cells.iter().enumerate() {
        let mut cursor = cell.lo;
        for (i, slots) in layout.iter_mut().enumerate() {
            let len = matrix.lengths[i][t];
            if len <= 0.0 {
                continue;
            }
            let end = cursor + len;
            if end > cell.hi + CMP_TOL {
                return Err(CakeError::invariant(format!("shares exceed the length of cell {t}")));
            }
            slots[t] = Interval::nonempty(cursor, end.min(cell.hi));
            cursor = end;
        }
    }
    Ok(layout)
}

/// The rightmost `len` of `piece`.
pub fn rightmost_slice(piece: Interval, len: f64) -> Option<Interval> {
    if len >= piece.len() {
        return Some(piece);
    }
    Interval::nonempty(piece.hi - len, piece.hi)
}

/// A slice of length `len` starting at `start`, wrapping around `piece` as a cycle.
pub fn cyclic_slice(piece: Interval, len: f64, start: f64) -> Vec<Interval> {
    if len >= piece.len() {
        return vec![piece];
    }
    let end = start + len;
    if end <= piece.hi {
        Interval::nonempty(start, end).into_iter().collect()
    } else {
        [
            Interval::nonempty(start, piece.hi),
            Interval::nonempty(piece.lo, piece.lo + (end - piece.hi)),
        ]
        .into_iter()
        .flatten()
        .collect()
    }
}

/// Turns a share matrix into positioned bundles.
///
/// Random draws come from a ChaCha8 stream seeded with `seed`, one uniform
/// start per nonempty piece in agent-major order.
pub fn realize(matrix: &ShareMatrix, placement: Placement<'_>, seed: Option<u64>) -> Result<Allocation> {
    let n = matrix.n_agents();
    let mut bundles: Vec<Vec<Interval>> = vec![Vec::new(); n];
    match placement {
        Placement::LeftToRight => {
            for (i, slots) in left_to_right_layout(matrix)?.into_iter().enumerate() {
                bundles[i].extend(slots.into_iter().flatten());
            }
        }
        Placement::Rightmost { pieces } | Placement::CyclicRandom { pieces } => {
            if pieces.n_agents() != n || pieces.n_cells() != matrix.n_cells() {
                return Err(CakeError::invariant("piece matrix shape differs from the share matrix"));
            }
            let mut rng = match (placement, seed) {
                (Placement::CyclicRandom { .. }, None) => {
                    return Err(CakeError::domain("cyclic placement needs a seed"))
                }
                (_, s) => ChaCha8Rng::seed_from_u64(s.unwrap_or(0)),
            };
            let layout = left_to_right_layout(pieces)?;
            for (i, slots) in layout.iter().enumerate() {
                for (t, slot) in slots.iter().enumerate() {
                    let keep = matrix.lengths[i][t];
                    let Some(piece) = slot else {
                        if keep > CMP_TOL {
                            return Err(CakeError::invariant(format!(
                                "agent {i} keeps {keep} of cell {t} but owns no piece there"
                            )));
                        }
                        continue;
                    };
                    if keep > piece.len() + CMP_TOL {
                        return Err(CakeError::invariant(format!(
                            "agent {i} keeps more of cell {t} than its piece"
                        )));
                    }
                    match placement {
                        Placement::Rightmost { .. } => bundles[i].extend(rightmost_slice(*piece, keep)),
                        _ => {
                            let start = piece.lo + rng.gen::<f64>() * piece.len();
                            bundles[i].extend(cyclic_slice(*piece, keep, start));
                        }
                    }
                }
            }
        }
    }
    Ok(Allocation::new(bundles, matrix.complete))
}

/// The profile on the cake minus `removed`; the removed part is never allocated.
pub fn restrict_profile(profile: &Profile, removed: Interval) -> Result<Profile> {
    if !profile.cake().contains(&removed) {
        return Err(CakeError::domain("removed interval lies outside the cake"));
    }
    let mut all_removed = profile.removed.clone();
    all_removed.push(removed);
    Profile::build(profile.densities.clone(), profile.cake, all_removed)
}

/// Affinely maps the whole profile onto `target`. Density values are kept, so
/// utilities scale by the length ratio.
pub fn scale_cake(profile: &Profile, target: Interval) -> Result<Profile> {
    let src = profile.cake();
    let ratio = target.len() / src.len();
    let map = |x: f64| {
        if x == src.lo {
            target.lo
        } else if x == src.hi {
            target.hi
        } else {
            target.lo + (x - src.lo) * ratio
        }
    };
    let densities = profile
        .densities
        .iter()
        .map(|d| d.mapped(map))
        .collect::<Result<Vec<_>>>()?;
    let removed = profile
        .removed
        .iter()
        .map(|r| Interval::new(map(r.lo), map(r.hi)))
        .collect::<Result<Vec<_>>>()?;
    Profile::build(densities, target, removed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn unit() -> Interval {
        Interval::new(0.0, 1.0).unwrap()
    }

    fn iv(lo: f64, hi: f64) -> Interval {
        Interval::new(lo, hi).unwrap()
    }

    fn mnw_lb_densities(n: usize) -> Vec<PiecewiseDensity> {
        let bp = vec![0.0, 1.0, 2.0, 3.0];
        let nf = n as f64;
        let mut out = vec![PiecewiseDensity::new(bp.clone(), vec![nf, nf - 1.0, 0.0]).unwrap()];
        for _ in 1..n {
            out.push(PiecewiseDensity::new(bp.clone(), vec![0.0, 1.0, nf - 1.0]).unwrap());
        }
        out
    }

    #[test]
    fn interval_rejects_degenerate() {
        assert!(Interval::new(0.5, 0.5).is_err());
        assert!(Interval::new(0.6, 0.5).is_err());
        assert!(serde_json::from_str::<Interval>(r#"{"lo":1.0,"hi":0.0}"#).is_err());
    }

    #[test]
    fn value_of_examples() {
        let uniform = PiecewiseDensity::uniform(unit(), 1.0).unwrap();
        assert!(close(value_of(&uniform, &[iv(0.25, 0.75)]).unwrap(), 0.5, 1e-12));

        let lb = mnw_lb_densities(10);
        assert!(close(value_of(&lb[0], &[iv(0.0, 3.0)]).unwrap(), 19.0, 1e-12));

        let step = PiecewiseDensity::new(vec![0.0, 0.5, 1.0], vec![2.0, 0.0]).unwrap();
        assert!(close(value_of(&step, &[iv(0.25, 0.75)]).unwrap(), 0.5, 1e-12));
    }

    #[test]
    fn value_of_unions_overlaps_and_rejects_outside() {
        let uniform = PiecewiseDensity::uniform(unit(), 1.0).unwrap();
        let v = value_of(&uniform, &[iv(0.0, 0.5), iv(0.25, 0.75)]).unwrap();
        assert!(close(v, 0.75, 1e-12));
        assert!(matches!(value_of(&uniform, &[iv(0.5, 1.5)]), Err(CakeError::Domain(_))));
    }

    #[test]
    fn density_construction_errors() {
        assert!(PiecewiseDensity::new(vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(PiecewiseDensity::new(vec![0.0, 0.5, 1.0], vec![1.0]).is_err());
        assert!(PiecewiseDensity::new(vec![0.0, 0.5, 0.5, 1.0], vec![1.0, 1.0, 1.0]).is_err());
        assert!(PiecewiseDensity::new(vec![0.0, 1.0], vec![-1.0]).is_err());
    }

    #[test]
    fn canonicalize_merges_equal_neighbours() {
        let d = PiecewiseDensity::new(vec![0.0, 0.25, 0.5, 1.0], vec![1.0, 1.0, 2.0]).unwrap();
        let c = d.canonicalize();
        assert_eq!(c.breakpoints(), &[0.0, 0.5, 1.0]);
        assert_eq!(c.values(), &[1.0, 2.0]);
        assert!(c.is_canonical());
        assert_eq!(c.total(), d.total());
    }

    #[test]
    fn refinement_examples() {
        let a = PiecewiseDensity::new(vec![0.0, 0.5, 1.0], vec![1.0, 2.0]).unwrap();
        let b = PiecewiseDensity::new(vec![0.0, 0.25, 1.0], vec![3.0, 1.0]).unwrap();
        let p = common_refinement(vec![a, b], unit()).unwrap();
        assert_eq!(p.boundaries(), &[0.0, 0.25, 0.5, 1.0]);
        assert_eq!(p.value(0, 1), 1.0);
        assert_eq!(p.value(1, 1), 1.0);
        assert_eq!(p.value(0, 2), 2.0);

        let lb = common_refinement(mnw_lb_densities(3), iv(0.0, 3.0)).unwrap();
        assert_eq!(lb.boundaries(), &[0.0, 1.0, 2.0, 3.0]);

        let single = common_refinement(vec![PiecewiseDensity::uniform(unit(), 1.0).unwrap()], unit()).unwrap();
        assert_eq!(single.n_cells(), 1);
        assert_eq!(single.cell(0), unit());
    }

    #[test]
    fn refinement_collapses_near_duplicates_and_rejects_mismatch() {
        let a = PiecewiseDensity::new(vec![0.0, 0.5, 1.0], vec![1.0, 2.0]).unwrap();
        let b = PiecewiseDensity::new(vec![0.0, 0.5 + 1e-14, 1.0], vec![3.0, 1.0]).unwrap();
        let p = common_refinement(vec![a.clone(), b], unit()).unwrap();
        assert_eq!(p.n_cells(), 2);

        let other = PiecewiseDensity::uniform(iv(0.0, 2.0), 1.0).unwrap();
        assert!(matches!(common_refinement(vec![a, other], unit()), Err(CakeError::Domain(_))));
        assert!(common_refinement(Vec::new(), unit()).is_err());
    }

    #[test]
    fn refinement_is_idempotent() {
        let a = PiecewiseDensity::new(vec![0.0, 0.3, 1.0], vec![1.0, 2.0]).unwrap();
        let b = PiecewiseDensity::new(vec![0.0, 0.6, 0.9, 1.0], vec![3.0, 1.0, 4.0]).unwrap();
        let p = common_refinement(vec![a, b], unit()).unwrap();
        let again = common_refinement(
            (0..p.n_agents()).map(|i| p.refined_density(i)).collect(),
            unit(),
        )
        .unwrap();
        assert_eq!(p.boundaries(), again.boundaries());
        for i in 0..p.n_agents() {
            for t in 0..p.n_cells() {
                assert_eq!(p.value(i, t), again.value(i, t));
            }
        }
    }

    #[test]
    fn nash_welfare_examples() {
        assert!(close(geometric_mean(&[3.0 / 8.0, 5.0 / 8.0]), 15f64.sqrt() / 8.0, 1e-12));
        let u = PiecewiseDensity::uniform(unit(), 1.0).unwrap();
        let p = Profile::new(vec![u.clone(), u], unit()).unwrap();
        let halves = Allocation::new(vec![vec![iv(0.0, 0.5)], vec![iv(0.5, 1.0)]], true);
        assert!(close(nash_welfare(&p, &halves).unwrap(), 0.5, 1e-12));
        let starved = Allocation::new(vec![vec![unit()], vec![]], true);
        assert_eq!(nash_welfare(&p, &starved).unwrap(), 0.0);
    }

    #[test]
    fn share_matrix_examples() {
        let u = PiecewiseDensity::uniform(unit(), 1.0).unwrap();
        let p = Profile::new(vec![u], unit()).unwrap();
        let m = to_share_matrix(&p, &Allocation::new(vec![vec![iv(0.0, 0.5)]], false)).unwrap();
        assert_eq!(m.lengths(), &[vec![0.5]]);

        // cells (0,1/4), (1/4,3/8), (3/8,1/2), (1/2,1)
        let a = PiecewiseDensity::new(vec![0.0, 0.25, 0.375, 0.5, 1.0], vec![1.0; 4]).unwrap();
        let p = Profile::new(vec![a.clone(), a], unit()).unwrap();
        let alloc = Allocation::new(vec![vec![iv(0.0, 0.375)], vec![iv(0.375, 1.0)]], true);
        let m = to_share_matrix(&p, &alloc).unwrap();
        assert_eq!(m.lengths()[0], vec![0.25, 0.125, 0.0, 0.0]);

        let empty = Allocation::new(vec![vec![], vec![iv(0.0, 1.0)]], true);
        assert_eq!(to_share_matrix(&p, &empty).unwrap().lengths()[0], vec![0.0; 4]);
    }

    #[test]
    fn overlapping_bundles_are_rejected() {
        let u = PiecewiseDensity::uniform(unit(), 1.0).unwrap();
        let p = Profile::new(vec![u.clone(), u], unit()).unwrap();
        let alloc = Allocation::new(vec![vec![iv(0.0, 0.6)], vec![iv(0.5, 1.0)]], false);
        assert!(matches!(to_share_matrix(&p, &alloc), Err(CakeError::Invariant(_))));
        // touching at an endpoint is fine
        let alloc = Allocation::new(vec![vec![iv(0.0, 0.5)], vec![iv(0.5, 1.0)]], false);
        assert!(to_share_matrix(&p, &alloc).is_ok());
    }

    #[test]
    fn placement_examples() {
        assert_eq!(rightmost_slice(unit(), 0.5), Some(iv(0.5, 1.0)));
        let wrapped = cyclic_slice(unit(), 0.5, 0.9);
        assert_eq!(wrapped.len(), 2);
        assert!(close(wrapped[0].lo(), 0.9, 1e-12) && close(wrapped[0].hi(), 1.0, 1e-12));
        assert!(close(wrapped[1].lo(), 0.0, 1e-12) && close(wrapped[1].hi(), 0.4, 1e-12));

        let m = ShareMatrix::new(vec![unit()], vec![vec![0.25], vec![0.75]], true).unwrap();
        let alloc = realize(&m, Placement::LeftToRight, None).unwrap();
        assert_eq!(alloc.bundle(0), &[iv(0.0, 0.25)]);
        assert_eq!(alloc.bundle(1), &[iv(0.25, 1.0)]);

        let whole = ShareMatrix::new(vec![unit()], vec![vec![1.0]], true).unwrap();
        let half = ShareMatrix::new(vec![unit()], vec![vec![0.5]], false).unwrap();
        let kept = realize(&half, Placement::Rightmost { pieces: &whole }, None).unwrap();
        assert_eq!(kept.bundle(0), &[iv(0.5, 1.0)]);
    }

    #[test]
    fn realize_errors() {
        let over = ShareMatrix {
            cells: vec![unit()],
            lengths: vec![vec![0.75], vec![0.75]],
            complete: false,
        };
        assert!(realize(&over, Placement::LeftToRight, None).is_err());
        let whole = ShareMatrix::new(vec![unit()], vec![vec![1.0]], true).unwrap();
        assert!(realize(&whole, Placement::CyclicRandom { pieces: &whole }, None).is_err());
        assert!(ShareMatrix::new(vec![unit()], vec![vec![0.75], vec![0.75]], false).is_err());
    }

    #[test]
    fn cyclic_realization_is_seeded() {
        let whole = ShareMatrix::new(vec![iv(0.0, 0.5), iv(0.5, 1.0)], vec![vec![0.5, 0.5]], true).unwrap();
        let part = whole.scale_rows(&[0.3]);
        let a = realize(&part, Placement::CyclicRandom { pieces: &whole }, Some(7)).unwrap();
        let b = realize(&part, Placement::CyclicRandom { pieces: &whole }, Some(7)).unwrap();
        assert_eq!(a, b);
        assert!(close(a.measure(0), 0.3, 1e-12));
    }

    #[test]
    fn restrict_examples() {
        let u = PiecewiseDensity::uniform(unit(), 1.0).unwrap();
        let p = Profile::new(vec![u.clone(), u], unit()).unwrap();
        let r = restrict_profile(&p, iv(0.4, 0.6)).unwrap();
        assert!(close(r.available_measure(), 0.8, 1e-12));
        assert!(restrict_profile(&p, iv(0.5, 1.5)).is_err());
    }

    #[test]
    fn scale_examples() {
        let p = Profile::new(mnw_lb_densities(3), iv(0.0, 3.0)).unwrap();
        let s = scale_cake(&p, unit()).unwrap();
        assert!(close(s.boundaries()[1], 1.0 / 3.0, 1e-15));
        assert_eq!(s.boundaries()[3], 1.0);
        let same = scale_cake(&p, iv(0.0, 3.0)).unwrap();
        assert_eq!(same, p);
    }
}
