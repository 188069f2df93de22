//! The runnable mechanisms.
//!
//! Every mechanism here is a pure function of the reported profile (and a seed
//! for the randomized ones). MNW-based mechanisms always solve with complete
//! allocation, so cells nobody values end up with agent 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cake::{
    realize, value_of, Allocation, Interval, PiecewiseDensity, Placement, Profile, ShareMatrix,
};
use crate::error::{CakeError, Result};
use crate::mnw::{solve_mnw, MnwSolution, DEFAULT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum Mechanism {
    Mnw,
    Pa,
    #[serde(rename = "rpa")]
    RandomizedPa,
    #[serde(rename = "interp")]
    Interpolated { c: f64 },
    InterpolatedItems { c: f64 },
    Ef2,
    EvenSplit,
}

impl Mechanism {
    pub const IDS: [&'static str; 7] = ["mnw", "pa", "rpa", "interp", "interp-items", "ef2", "even-split"];

    /// Parses a CLI id; `interp` and `interp-items` require `c`.
    pub fn parse(id: &str, c: Option<f64>) -> Result<Self> {
        let need_c = || {
            let c = c.ok_or_else(|| CakeError::domain(format!("mechanism `{id}` needs a value for c")))?;
            check_exponent(c)?;
            Ok(c)
        };
        Ok(match id {
            "mnw" => Mechanism::Mnw,
            "pa" => Mechanism::Pa,
            "rpa" => Mechanism::RandomizedPa,
            "interp" => Mechanism::Interpolated { c: need_c()? },
            "interp-items" => Mechanism::InterpolatedItems { c: need_c()? },
            "ef2" => Mechanism::Ef2,
            "even-split" => Mechanism::EvenSplit,
            other => return Err(CakeError::UnknownMechanism(other.to_string())),
        })
    }

    pub fn id(&self) -> &'static str {
        match self {
            Mechanism::Mnw => "mnw",
            Mechanism::Pa => "pa",
            Mechanism::RandomizedPa => "rpa",
            Mechanism::Interpolated { .. } => "interp",
            Mechanism::InterpolatedItems { .. } => "interp-items",
            Mechanism::Ef2 => "ef2",
            Mechanism::EvenSplit => "even-split",
        }
    }

    pub fn exponent(&self) -> Option<f64> {
        match self {
            Mechanism::Interpolated { c } | Mechanism::InterpolatedItems { c } => Some(*c),
            _ => None,
        }
    }

    pub fn is_randomized(&self) -> bool {
        match self {
            Mechanism::RandomizedPa => true,
            Mechanism::Interpolated { c } => *c != 0.0,
            _ => false,
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.exponent() {
            Some(c) => write!(f, "{}(c={c})", self.id()),
            None => f.write_str(self.id()),
        }
    }
}

impl FromStr for Mechanism {
    type Err = CakeError;

    /// Accepts `id` or `id:c`, e.g. `interp:0.5`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((id, c)) => {
                let c = c
                    .parse::<f64>()
                    .map_err(|_| CakeError::domain(format!("bad exponent in `{s}`")))?;
                Mechanism::parse(id, Some(c))
            }
            None => Mechanism::parse(s, None),
        }
    }
}

fn check_exponent(c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(CakeError::domain(format!("exponent c = {c} outside [0, 1]")))
    }
}

/// The quantities the Partial Allocation mechanism computes before cutting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaIntermediate {
    pub full_solution: MnwSolution,
    /// Solution without agent `i` (indices of the remaining agents shift down);
    /// `None` when `i` is the only agent.
    pub leaveout_solutions: Vec<Option<MnwSolution>>,
    pub factors: Vec<f64>,
}

/// `Π_{j≠i} v_j(A_j) / Π_{j≠i} v_j(A^i_j)`, computed in log space.
fn pa_factor(full: &[f64], leaveout: Option<&MnwSolution>, agent: usize) -> f64 {
    let Some(leaveout) = leaveout else { return 1.0 };
    let with: f64 = full
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != agent)
        .map(|(_, u)| u.ln())
        .sum();
    let without: f64 = leaveout.utilities.iter().map(|u| u.ln()).sum();
    (with - without).exp()
}

fn leaveout_solution(profile: &Profile, agent: usize) -> Result<Option<MnwSolution>> {
    if profile.n_agents() == 1 {
        return Ok(None);
    }
    solve_mnw(&profile.without_agent(agent), true, DEFAULT_TOL).map(Some)
}

fn solve_complete(profile: &Profile) -> Result<MnwSolution> {
    solve_mnw(profile, true, DEFAULT_TOL)
}

fn mnw_allocation(solution: &MnwSolution) -> Result<Allocation> {
    realize(&solution.shares, Placement::LeftToRight, None)
}

pub fn run_mnw_mechanism(profile: &Profile) -> Result<Allocation> {
    mnw_allocation(&solve_complete(profile)?)
}

pub fn pa_factors(profile: &Profile) -> Result<PaIntermediate> {
    let full = solve_complete(profile)?;
    let leaveout = (0..profile.n_agents())
        .map(|i| leaveout_solution(profile, i))
        .collect::<Result<Vec<_>>>()?;
    let factors = leaveout
        .iter()
        .enumerate()
        .map(|(i, l)| pa_factor(&full.utilities, l.as_ref(), i))
        .collect();
    Ok(PaIntermediate {
        full_solution: full,
        leaveout_solutions: leaveout,
        factors,
    })
}

fn exponentiated(factors: &[f64], c: f64) -> Vec<f64> {
    if c == 1.0 {
        return factors.to_vec();
    }
    factors.iter().map(|y| y.powf(c)).collect()
}

fn keep_rightmost(full: &ShareMatrix, factors: &[f64]) -> Result<Allocation> {
    realize(&full.scale_rows(factors), Placement::Rightmost { pieces: full }, None)
}

fn keep_cyclic(full: &ShareMatrix, factors: &[f64], seed: u64) -> Result<Allocation> {
    realize(&full.scale_rows(factors), Placement::CyclicRandom { pieces: full }, Some(seed))
}

/// Deterministic Partial Allocation: the rightmost `y_i` of each MNW piece.
pub fn run_pa(profile: &Profile) -> Result<Allocation> {
    let pa = pa_factors(profile)?;
    keep_rightmost(&pa.full_solution.shares, &pa.factors)
}

/// Partial Allocation keeping a uniformly placed cyclic slice of each MNW piece.
pub fn run_randomized_pa(profile: &Profile, seed: u64) -> Result<Allocation> {
    let pa = pa_factors(profile)?;
    keep_cyclic(&pa.full_solution.shares, &pa.factors, seed)
}

/// Randomized PA with factors raised to the power `c`.
pub fn run_interpolated(profile: &Profile, c: f64, seed: u64) -> Result<Allocation> {
    check_exponent(c)?;
    if c == 0.0 {
        return run_mnw_mechanism(profile);
    }
    let pa = pa_factors(profile)?;
    keep_cyclic(&pa.full_solution.shares, &exponentiated(&pa.factors, c), seed)
}

/// Deterministic counterpart of [`run_interpolated`] for fixed cells.
pub fn run_interpolated_items(profile: &Profile, c: f64) -> Result<Allocation> {
    check_exponent(c)?;
    if c == 0.0 {
        return run_mnw_mechanism(profile);
    }
    let pa = pa_factors(profile)?;
    keep_rightmost(&pa.full_solution.shares, &exponentiated(&pa.factors, c))
}

/// Leftmost point splitting the density's value on `[lo, hi]` in half.
fn half_point_between(density: &PiecewiseDensity, lo: f64, hi: f64) -> f64 {
    let target = 0.5 * density.integral(lo, hi);
    if target <= 0.0 {
        return lo;
    }
    let mut acc = 0.0;
    for (cell, v) in density.cells() {
        let a = cell.lo().max(lo);
        let b = cell.hi().min(hi);
        if b <= a || v <= 0.0 {
            continue;
        }
        let piece = v * (b - a);
        // Rounding slack keeps the leftmost point when a cell ends at the half.
        if acc + piece >= target * (1.0 - 1e-12) {
            return (a + (target - acc).max(0.0) / v).min(b);
        }
        acc += piece;
    }
    hi
}

/// Leftmost `h` in `segment` with `v([lo, h]) = v(segment) / 2`; the left
/// endpoint if the density vanishes on the segment.
pub fn half_point(density: &PiecewiseDensity, segment: Interval) -> f64 {
    half_point_between(density, segment.lo(), segment.hi())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ef2Branch {
    #[serde(rename = "p<=q")]
    Connected,
    #[serde(rename = "p>q")]
    Split,
}

/// Cut points of the two-agent envy-free mechanism, in the normalized roles
/// where the left agent's half-point `x` is not right of the other's `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ef2Trace {
    pub x: f64,
    pub y: f64,
    pub p: f64,
    pub q: f64,
    /// Agent 1 plays the left role.
    pub swapped: bool,
    pub branch: Ef2Branch,
}

fn bundle(pieces: &[(f64, f64)]) -> Vec<Interval> {
    pieces.iter().filter_map(|(a, b)| Interval::nonempty(*a, *b)).collect()
}

/// Envy-free mechanism for two agents built from half-points.
pub fn run_ef2(profile: &Profile) -> Result<(Allocation, Ef2Trace)> {
    if profile.n_agents() != 2 {
        return Err(CakeError::domain(format!(
            "the two-agent mechanism got {} agents",
            profile.n_agents()
        )));
    }
    let cake = profile.cake();
    let (lo, hi) = (cake.lo(), cake.hi());
    let h0 = half_point(profile.density(0), cake);
    let h1 = half_point(profile.density(1), cake);
    let swapped = h0 > h1;
    let (left, right) = if swapped {
        (profile.density(1), profile.density(0))
    } else {
        (profile.density(0), profile.density(1))
    };
    let (x, y) = if swapped { (h1, h0) } else { (h0, h1) };
    let p = half_point_between(left, x, y);
    let q = half_point_between(right, x, y);
    let (branch, left_bundle, right_bundle) = if p <= q {
        (Ef2Branch::Connected, bundle(&[(lo, p)]), bundle(&[(p, hi)]))
    } else {
        (
            Ef2Branch::Split,
            bundle(&[(lo, x), (p, y)]),
            bundle(&[(x, p), (y, hi)]),
        )
    };
    let bundles = if swapped {
        vec![right_bundle, left_bundle]
    } else {
        vec![left_bundle, right_bundle]
    };
    let trace = Ef2Trace {
        x,
        y,
        p,
        q,
        swapped,
        branch,
    };
    Ok((Allocation::new(bundles, true), trace))
}

/// Splits every allocatable cell into `n` equal consecutive pieces.
pub fn run_even_split(profile: &Profile) -> Allocation {
    let n = profile.n_agents();
    let mut bundles = vec![Vec::new(); n];
    for t in 0..profile.n_cells() {
        if profile.is_forbidden(t) {
            continue;
        }
        let cell = profile.cell(t);
        let step = cell.len() / n as f64;
        for (k, b) in bundles.iter_mut().enumerate() {
            let a = cell.lo() + k as f64 * step;
            let e = if k + 1 == n { cell.hi() } else { cell.lo() + (k + 1) as f64 * step };
            b.extend(Interval::nonempty(a, e));
        }
    }
    Allocation::new(bundles, profile.removed().is_empty())
}

/// Runs `mechanism`; `seed` is only read by randomized mechanisms.
pub fn run(mechanism: Mechanism, profile: &Profile, seed: u64) -> Result<Allocation> {
    match mechanism {
        Mechanism::Mnw => run_mnw_mechanism(profile),
        Mechanism::Pa => run_pa(profile),
        Mechanism::RandomizedPa => run_randomized_pa(profile, seed),
        Mechanism::Interpolated { c } => run_interpolated(profile, c, seed),
        Mechanism::InterpolatedItems { c } => run_interpolated_items(profile, c),
        Mechanism::Ef2 => run_ef2(profile).map(|(a, _)| a),
        Mechanism::EvenSplit => Ok(run_even_split(profile)),
    }
}

/// Evaluates what one agent gets from a mechanism for different reports of
/// its own density, while the other agents' reports stay fixed.
///
/// The MNW solution without the agent does not depend on its report, so it is
/// computed once.
pub struct ManipulationEvaluator<'a> {
    mechanism: Mechanism,
    base: &'a Profile,
    agent: usize,
    truth: PiecewiseDensity,
    leaveout: Option<MnwSolution>,
}

impl<'a> ManipulationEvaluator<'a> {
    pub fn new(mechanism: Mechanism, base: &'a Profile, agent: usize, truth: PiecewiseDensity) -> Result<Self> {
        if agent >= base.n_agents() {
            return Err(CakeError::domain(format!("no agent {agent}")));
        }
        let needs_leaveout = matches!(
            mechanism,
            Mechanism::Pa | Mechanism::RandomizedPa
        ) || mechanism.exponent().is_some_and(|c| c != 0.0);
        let leaveout = if needs_leaveout {
            leaveout_solution(base, agent)?
        } else {
            None
        };
        Ok(ManipulationEvaluator {
            mechanism,
            base,
            agent,
            truth,
            leaveout,
        })
    }

    pub fn truth(&self) -> &PiecewiseDensity {
        &self.truth
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    /// Expected true value the agent receives when reporting `report`.
    pub fn evaluate(&self, report: &PiecewiseDensity) -> Result<f64> {
        let profile = self.base.with_density(self.agent, report.clone())?;
        self.evaluate_profile(&profile)
    }

    fn evaluate_profile(&self, profile: &Profile) -> Result<f64> {
        let i = self.agent;
        let c = match self.mechanism {
            Mechanism::Mnw => 0.0,
            Mechanism::Pa | Mechanism::RandomizedPa => 1.0,
            Mechanism::Interpolated { c } | Mechanism::InterpolatedItems { c } => c,
            Mechanism::Ef2 | Mechanism::EvenSplit => {
                let alloc = run(self.mechanism, profile, 0)?;
                return value_of(&self.truth, alloc.bundle(i));
            }
        };
        let full = solve_complete(profile)?;
        let y = if c == 0.0 {
            1.0
        } else {
            let y = pa_factor(&full.utilities, self.leaveout.as_ref(), i);
            if c == 1.0 {
                y
            } else {
                y.powf(c)
            }
        };
        match self.mechanism {
            Mechanism::Pa | Mechanism::InterpolatedItems { .. } if c != 0.0 => {
                let mut factors = vec![1.0; profile.n_agents()];
                factors[i] = y;
                let alloc = keep_rightmost(&full.shares, &factors)?;
                value_of(&self.truth, alloc.bundle(i))
            }
            _ => {
                // Each point of the MNW piece is kept with probability y.
                let alloc = mnw_allocation(&full)?;
                Ok(y * value_of(&self.truth, alloc.bundle(i))?)
            }
        }
    }
}

/// Expected value of `agent`'s bundle under `true_density` when the profile is
/// reported. Randomized mechanisms use the closed form `y_i · v_i(A_i)`.
pub fn expected_utility(
    mechanism: Mechanism,
    profile: &Profile,
    true_density: &PiecewiseDensity,
    agent: usize,
) -> Result<f64> {
    let evaluator = ManipulationEvaluator::new(mechanism, profile, agent, true_density.clone())?;
    evaluator.evaluate_profile(profile)
}
