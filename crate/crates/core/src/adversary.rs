//! Hard instances and brute-force best-response search.
//!
//! Every ratio produced here is a lower bound on the incentive ratio over the
//! searched space only.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cake::{Interval, PiecewiseDensity, Profile, MERGE_TOL};
use crate::error::{CakeError, Result};
use crate::mechanisms::{Mechanism, ManipulationEvaluator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyMode {
    /// Breakpoints and values may both be misreported.
    Cake,
    /// The profile's cells are fixed; only the value on each cell changes.
    ValuesOnly,
}

/// A finite set of misreports for one agent, always containing the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisreportFamily {
    pub mode: FamilyMode,
    /// Number of equal grid steps across the cake (cake mode only).
    pub grid: usize,
    pub values: Vec<f64>,
    /// Maximum number of cells of a cake-mode misreport.
    pub max_cells: usize,
    /// Extra candidates searched right after the truth.
    #[serde(default)]
    pub extras: Vec<PiecewiseDensity>,
}

impl Default for MisreportFamily {
    fn default() -> Self {
        MisreportFamily::cake(8, vec![0.0, 1.0, 2.0, 3.0], 4)
    }
}

impl MisreportFamily {
    pub fn cake(grid: usize, values: Vec<f64>, max_cells: usize) -> Self {
        MisreportFamily {
            mode: FamilyMode::Cake,
            grid,
            values,
            max_cells,
            extras: Vec::new(),
        }
    }

    pub fn values_only(values: Vec<f64>) -> Self {
        MisreportFamily {
            mode: FamilyMode::ValuesOnly,
            grid: 0,
            values,
            max_cells: 0,
            extras: Vec::new(),
        }
    }

    /// Only the truth.
    pub fn truth_only() -> Self {
        MisreportFamily::values_only(Vec::new())
    }

    pub fn with_extras(mut self, extras: Vec<PiecewiseDensity>) -> Self {
        self.extras = extras;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CakeError::domain("misreport values must be finite and nonnegative"));
        }
        if self.mode == FamilyMode::Cake && !self.values.is_empty() && (self.grid == 0 || self.max_cells == 0) {
            return Err(CakeError::domain("cake families need a grid and max_cells >= 1"));
        }
        Ok(())
    }

    /// All candidates in enumeration order; index 0 is the agent's true density.
    pub fn candidates(&self, profile: &Profile, agent: usize) -> Result<Vec<PiecewiseDensity>> {
        self.validate()?;
        if agent >= profile.n_agents() {
            return Err(CakeError::domain(format!("no agent {agent}")));
        }
        let mut out = vec![profile.density(agent).clone()];
        out.extend(self.extras.iter().cloned());
        if self.values.is_empty() {
            return Ok(out);
        }
        match self.mode {
            FamilyMode::Cake => self.cake_candidates(profile, &mut out)?,
            FamilyMode::ValuesOnly => {
                let cells = profile.boundaries().to_vec();
                for values in tuples(&self.values, cells.len() - 1) {
                    if values.iter().any(|v| *v > 0.0) {
                        out.push(PiecewiseDensity::new(cells.clone(), values)?);
                    }
                }
            }
        }
        Ok(out)
    }

    fn cake_candidates(&self, profile: &Profile, out: &mut Vec<PiecewiseDensity>) -> Result<()> {
        let cake = profile.cake();
        let mut interior: Vec<f64> = (1..self.grid)
            .map(|k| cake.lo() + cake.len() * k as f64 / self.grid as f64)
            .chain(profile.boundaries().iter().copied())
            .filter(|p| *p > cake.lo() + MERGE_TOL && *p < cake.hi() - MERGE_TOL)
            .collect();
        interior.sort_by(f64::total_cmp);
        interior.dedup_by(|a, b| (*a - *b).abs() <= MERGE_TOL);

        for cells in 1..=self.max_cells.min(interior.len() + 1) {
            for cut in combinations(interior.len(), cells - 1) {
                let breakpoints: Vec<f64> = std::iter::once(cake.lo())
                    .chain(cut.iter().map(|k| interior[*k]))
                    .chain(std::iter::once(cake.hi()))
                    .collect();
                for values in tuples(&self.values, cells) {
                    let canonical = values.windows(2).all(|w| w[0] != w[1]);
                    if canonical && values.iter().any(|v| *v > 0.0) {
                        out.push(PiecewiseDensity::new(breakpoints.clone(), values)?);
                    }
                }
            }
        }
        Ok(())
    }
}

/// All `len`-tuples over `alphabet` in lexicographic order.
fn tuples(alphabet: &[f64], len: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                alphabet.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(*v);
                    next
                })
            })
            .collect();
    }
    out
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            go(i + 1, n, k, current, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub mechanism: Mechanism,
    pub agent: usize,
    pub best_ratio: f64,
    pub best_misreport: PiecewiseDensity,
    /// Position of the best misreport in the enumeration; 0 is the truth.
    pub best_index: usize,
    pub truthful_utility: f64,
    pub manipulated_utility: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

pub fn best_response_search(
    mechanism: Mechanism,
    profile: &Profile,
    agent: usize,
    family: &MisreportFamily,
) -> Result<AttackResult> {
    let candidates = family.candidates(profile, agent)?;
    let truth = candidates[0].clone();
    let evaluator = ManipulationEvaluator::new(mechanism, profile, agent, truth.clone())?;
    let truthful = evaluator.evaluate(&truth)?;
    if truthful <= 0.0 {
        return Err(CakeError::invariant(format!(
            "agent {agent} gets nothing when truthful under {mechanism}"
        )));
    }

    let mut best = (0, truthful);
    let mut skipped = 0;
    for (k, candidate) in candidates.iter().enumerate().skip(1) {
        match evaluator.evaluate(candidate) {
            Ok(u) if u > best.1 => best = (k, u),
            Ok(_) => {}
            Err(e) => {
                warn!("skipping misreport #{k} for agent {agent}: {e}");
                skipped += 1;
            }
        }
    }
    Ok(AttackResult {
        mechanism,
        agent,
        best_ratio: best.1 / truthful,
        best_misreport: candidates[best.0].clone(),
        best_index: best.0,
        truthful_utility: truthful,
        manipulated_utility: best.1,
        evaluated: candidates.len() - skipped,
        skipped,
    })
}

/// Which agents an [`incentive_ratio_sweep`] attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAgents {
    All,
    /// Agent `k mod n` on the `k`-th instance.
    Rotate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_ratio: f64,
    pub best: AttackResult,
    pub best_instance: usize,
    /// Largest `manipulated - truthful` over all attacks.
    pub worst_gain: f64,
    pub attacks: usize,
    pub skipped: usize,
}

/// Largest best-response ratio over the instances.
pub fn incentive_ratio_sweep(
    mechanism: Mechanism,
    instances: &[Profile],
    family: &MisreportFamily,
    agents: SweepAgents,
) -> Result<SweepResult> {
    let mut result: Option<SweepResult> = None;
    let mut attacks = 0;
    let mut skipped = 0;
    let mut worst_gain = f64::NEG_INFINITY;
    for (k, profile) in instances.iter().enumerate() {
        let targets: Vec<usize> = match agents {
            SweepAgents::All => (0..profile.n_agents()).collect(),
            SweepAgents::Rotate => vec![k % profile.n_agents()],
        };
        for agent in targets {
            let attack = best_response_search(mechanism, profile, agent, family)?;
            attacks += 1;
            skipped += attack.skipped;
            worst_gain = worst_gain.max(attack.manipulated_utility - attack.truthful_utility);
            if result.as_ref().is_none_or(|r| attack.best_ratio > r.best_ratio) {
                result = Some(SweepResult {
                    best_ratio: attack.best_ratio,
                    best: attack,
                    best_instance: k,
                    worst_gain: 0.0,
                    attacks: 0,
                    skipped: 0,
                });
            }
        }
    }
    let mut result = result.ok_or_else(|| CakeError::domain("the sweep needs at least one instance"))?;
    result.worst_gain = worst_gain;
    result.attacks = attacks;
    result.skipped = skipped;
    Ok(result)
}

/// A profile together with a profitable misreport for agent 0.
#[derive(Debug, Clone, PartialEq)]
pub struct HardInstance {
    pub profile: Profile,
    pub misreport: PiecewiseDensity,
}

/// Cake `[0, 3]`; agent 0 values the cells `(n, n-1, 0)`, everyone else
/// `(0, 1, n-1)`. Reporting `(eps, 1, n-1)` wins agent 0 most of the middle cell.
pub fn gen_mnw_lb(n: usize, eps: f64) -> Result<HardInstance> {
    if n < 2 || !(eps > 0.0) {
        return Err(CakeError::domain("need n >= 2 and eps > 0"));
    }
    let cake = Interval::new(0.0, 3.0)?;
    let bp = vec![0.0, 1.0, 2.0, 3.0];
    let m = n as f64;
    let first = PiecewiseDensity::new(bp.clone(), vec![m, m - 1.0, 0.0])?;
    let rest = PiecewiseDensity::new(bp.clone(), vec![0.0, 1.0, m - 1.0])?;
    let mut densities = vec![first];
    densities.extend(std::iter::repeat_n(rest, n - 1));
    Ok(HardInstance {
        profile: Profile::new(densities, cake)?,
        misreport: PiecewiseDensity::new(bp, vec![eps, 1.0, m - 1.0])?,
    })
}

/// `((n-1)/n)^(n-1)`.
pub fn pa_lb_h(n: usize) -> f64 {
    let m = n as f64;
    ((m - 1.0) / m).powi(n as i32 - 1)
}

/// Cake `[0, n]`; agent 0 only values `[1-h, 1]`, everyone else is uniform.
/// Claiming all of `[0, 1]` raises agent 0's partial-allocation factor.
pub fn gen_pa_lb(n: usize) -> Result<HardInstance> {
    if n < 2 {
        return Err(CakeError::domain("need n >= 2"));
    }
    let cake = Interval::new(0.0, n as f64)?;
    let h = pa_lb_h(n);
    let first = PiecewiseDensity::indicator(cake, Interval::new(1.0 - h, 1.0)?, 1.0, 0.0)?;
    let rest = PiecewiseDensity::uniform(cake, 1.0)?;
    let mut densities = vec![first];
    densities.extend(std::iter::repeat_n(rest, n - 1));
    Ok(HardInstance {
        profile: Profile::new(densities, cake)?,
        misreport: PiecewiseDensity::indicator(cake, Interval::new(0.0, 1.0)?, 1.0, 0.0)?,
    })
}

/// Agent 0 only values `[0, 1/2]`, agent 1 is uniform; agent 0 gains by
/// claiming to be uniform too.
pub fn gen_ef2_lb() -> Result<HardInstance> {
    let cake = Interval::new(0.0, 1.0)?;
    let first = PiecewiseDensity::indicator(cake, Interval::new(0.0, 0.5)?, 1.0, 0.0)?;
    let second = PiecewiseDensity::uniform(cake, 1.0)?;
    Ok(HardInstance {
        profile: Profile::new(vec![first, second.clone()], cake)?,
        misreport: second,
    })
}

/// `(k+1)n` unit items on `[0, (k+1)n]`. Instance `which = n+1` gives every
/// agent `j` the premium value `kn+1` on item `j`; instance `which <= n`
/// removes agent `which`'s premium. Agents and items are numbered from 1 here.
pub fn gen_interp_lb(n: usize, k: usize, which: usize) -> Result<Profile> {
    if n < 2 || k < 1 {
        return Err(CakeError::domain("need n >= 2 and k >= 1"));
    }
    if which == 0 || which > n + 1 {
        return Err(CakeError::domain(format!("instance index {which} outside 1..={}", n + 1)));
    }
    let items = (k + 1) * n;
    let bp: Vec<f64> = (0..=items).map(|t| t as f64).collect();
    let premium = (k * n + 1) as f64;
    let densities = (1..=n)
        .map(|agent| {
            let values = (1..=items)
                .map(|item| if item == agent && agent != which { premium } else { 1.0 })
                .collect();
            PiecewiseDensity::new(bp.clone(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Profile::new(densities, Interval::new(0.0, items as f64)?)
}

/// A random profile on `[0, 1]`: `m` cells on the `1/grid` lattice shared by
/// all agents, integer values in `0..=max_value`, every agent valuing
/// something.
pub fn random_profile<R: Rng>(rng: &mut R, n: usize, m: usize, grid: usize, max_value: u32) -> Result<Profile> {
    if n == 0 || m == 0 || m > grid || max_value == 0 {
        return Err(CakeError::domain("need n, m >= 1, m <= grid and max_value >= 1"));
    }
    let cake = Interval::new(0.0, 1.0)?;
    let mut cuts = rand::seq::index::sample(rng, grid - 1, m - 1).into_vec();
    cuts.sort_unstable();
    let bp: Vec<f64> = std::iter::once(0.0)
        .chain(cuts.iter().map(|c| (c + 1) as f64 / grid as f64))
        .chain(std::iter::once(1.0))
        .collect();
    let densities = (0..n)
        .map(|_| loop {
            let values: Vec<f64> = (0..m).map(|_| rng.gen_range(0..=max_value) as f64).collect();
            if values.iter().any(|v| *v > 0.0) {
                break PiecewiseDensity::new(bp.clone(), values);
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Profile::new(densities, cake)
}
