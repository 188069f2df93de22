//! Nash-welfare-maximizing share matrices and the first-order condition that
//! certifies them.
//!
//! The solver runs proportional-response dynamics on the equal-budget Fisher
//! market induced by the profile (every agent has budget 1, every cell is a
//! good). Periodically it guesses the equilibrium's tight agent/cell pairs from
//! the current ratios `f_i(X_t) / u_i`, reconstructs exact prices and utilities
//! from that guess, and recovers shares with a max-flow. A guess is accepted
//! only if the recovered shares pass [`check_mnw_condition`].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cake::{Profile, ShareMatrix};
use crate::error::{CakeError, Result};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 1_000_000;

/// Relative slack used when deciding whether a ratio is tight.
const TIGHT_REL: f64 = 1e-10;
const SUPPORT_GUESSES: [f64; 8] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnwSolution {
    pub shares: ShareMatrix,
    pub utilities: Vec<f64>,
    /// Largest violation of the MNW condition by the returned shares.
    pub kkt_residual: f64,
    /// Equilibrium price per unit length of every cell (0 for cells nobody values).
    pub prices: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Agent holding a positive share of `cell`.
    pub owner: usize,
    /// Agent whose ratio on `cell` beats the owner's.
    pub rival: usize,
    pub cell: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub satisfied: bool,
    pub worst_violation: Option<Violation>,
}

impl ConditionReport {
    pub fn magnitude(&self) -> f64 {
        self.worst_violation.map_or(0.0, |v| v.magnitude.max(0.0))
    }
}

/// Maximizes the Nash product over share matrices of `profile`.
///
/// With `complete`, cells nobody values go to agent 0; otherwise they stay
/// unallocated. Forbidden cells are never allocated.
pub fn solve_mnw(profile: &Profile, complete: bool, tol: f64) -> Result<MnwSolution> {
    if !(tol > 0.0) {
        return Err(CakeError::domain("solver tolerance must be positive"));
    }
    let market = Market::new(profile);
    if market.goods.is_empty() {
        return Err(CakeError::domain("no agent values the allocatable cake"));
    }
    for i in 0..market.n {
        if market.goods.iter().all(|&t| profile.value(i, t) == 0.0) {
            return Err(CakeError::domain(format!(
                "agent {i} has no value for the allocatable cake"
            )));
        }
    }

    let mut dynamics = ProportionalResponse::new(&market);
    let mut checkpoint = 8;
    while dynamics.iterations < MAX_ITERATIONS {
        dynamics.run(checkpoint - dynamics.iterations);
        let utilities = dynamics.utilities();
        for delta in SUPPORT_GUESSES {
            if let Some(mut lengths) = market.polish(&utilities, delta) {
                if complete {
                    market.assign_worthless(&mut lengths);
                }
                let solution = finish(profile, lengths, complete, dynamics.iterations, tol)?;
                if solution.kkt_residual <= tol {
                    log::debug!(
                        "MNW solved after {} iterations (support slack {delta:e})",
                        dynamics.iterations
                    );
                    return Ok(solution);
                }
            }
        }
        checkpoint = (checkpoint * 2).min(MAX_ITERATIONS);
    }

    let mut lengths = dynamics.lengths();
    if complete {
        market.assign_worthless(&mut lengths);
    }
    let last = finish(profile, lengths, complete, dynamics.iterations, tol)?;
    if last.kkt_residual <= tol {
        return Ok(last);
    }
    Err(CakeError::NotConverged {
        iterations: dynamics.iterations,
        residual: last.kkt_residual,
    })
}

fn finish(
    profile: &Profile,
    lengths: Vec<Vec<f64>>,
    complete: bool,
    iterations: usize,
    tol: f64,
) -> Result<MnwSolution> {
    let shares = ShareMatrix::new(profile.cells(), lengths, complete)?;
    let utilities = profile.share_utilities(&shares);
    if utilities.iter().any(|u| *u <= 0.0) {
        return Ok(MnwSolution {
            shares,
            utilities,
            kkt_residual: f64::INFINITY,
            prices: vec![0.0; profile.n_cells()],
            iterations,
        });
    }
    let report = condition(profile, &shares, &utilities, tol, 0);
    let prices = (0..profile.n_cells())
        .map(|t| {
            if profile.is_forbidden(t) {
                return 0.0;
            }
            (0..profile.n_agents())
                .map(|i| profile.value(i, t) / utilities[i])
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(MnwSolution {
        shares,
        utilities,
        kkt_residual: report.magnitude(),
        prices,
        iterations,
    })
}

/// Allocatable cells with positive value for someone.
struct Market<'a> {
    profile: &'a Profile,
    n: usize,
    goods: Vec<usize>,
}

impl<'a> Market<'a> {
    fn new(profile: &'a Profile) -> Self {
        let goods = (0..profile.n_cells())
            .filter(|&t| !profile.is_forbidden(t))
            .filter(|&t| (0..profile.n_agents()).any(|i| profile.value(i, t) > 0.0))
            .collect();
        Market {
            profile,
            n: profile.n_agents(),
            goods,
        }
    }

    fn assign_worthless(&self, lengths: &mut [Vec<f64>]) {
        let p = self.profile;
        for t in 0..p.n_cells() {
            if !p.is_forbidden(t) && !self.goods.contains(&t) {
                for row in lengths.iter_mut() {
                    row[t] = 0.0;
                }
                lengths[0][t] = p.cell_len(t);
            }
        }
    }

    /// Reconstructs an exact equilibrium from approximate utilities, treating
    /// pairs within relative `delta` of the best ratio on a cell as tight.
    fn polish(&self, approx: &[f64], delta: f64) -> Option<Vec<Vec<f64>>> {
        let p = self.profile;
        let n = self.n;
        let k = self.goods.len();

        // Tight-pair guess: agent i, good g.
        let mut edges = vec![Vec::new(); n];
        for (g, &t) in self.goods.iter().enumerate() {
            let best = (0..n).map(|i| p.value(i, t) / approx[i]).fold(0.0, f64::max);
            for (i, adj) in edges.iter_mut().enumerate() {
                let f = p.value(i, t);
                if f > 0.0 && f / approx[i] >= best * (1.0 - delta) {
                    adj.push(g);
                }
            }
        }
        if edges.iter().any(Vec::is_empty) {
            return None;
        }
        let mut by_good = vec![Vec::new(); k];
        for (i, adj) in edges.iter().enumerate() {
            for &g in adj {
                by_good[g].push(i);
            }
        }

        // Within a connected component the tight pairs fix all utility ratios;
        // market clearing fixes the scale.
        let mut rel_u = vec![0.0; n];
        let mut rel_p = vec![0.0; k];
        let mut comp_agent = vec![usize::MAX; n];
        let mut comp_good = vec![usize::MAX; k];
        let mut utilities = vec![0.0; n];
        let mut prices = vec![0.0; k];
        let mut ncomp = 0;
        for root in 0..n {
            if comp_agent[root] != usize::MAX {
                continue;
            }
            let c = ncomp;
            ncomp += 1;
            comp_agent[root] = c;
            rel_u[root] = 1.0;
            let mut members = vec![root];
            let mut goods = Vec::new();
            let mut queue = VecDeque::from([root]);
            while let Some(i) = queue.pop_front() {
                for &g in &edges[i] {
                    if comp_good[g] != usize::MAX {
                        continue;
                    }
                    comp_good[g] = c;
                    let t = self.goods[g];
                    rel_p[g] = p.value(i, t) / rel_u[i];
                    goods.push(g);
                    for &j in &by_good[g] {
                        if comp_agent[j] == usize::MAX {
                            comp_agent[j] = c;
                            rel_u[j] = p.value(j, t) / rel_p[g];
                            members.push(j);
                            queue.push_back(j);
                        }
                    }
                }
            }
            let spend: f64 = goods
                .iter()
                .map(|&g| rel_p[g] * p.cell_len(self.goods[g]))
                .sum();
            let scale = spend / members.len() as f64;
            if !(scale > 0.0 && scale.is_finite()) {
                return None;
            }
            for &i in &members {
                utilities[i] = rel_u[i] * scale;
            }
            for &g in &goods {
                prices[g] = rel_p[g] / scale;
            }
        }
        if comp_good.contains(&usize::MAX) {
            return None;
        }

        // No agent may strictly prefer a good at these prices.
        let mut tight = vec![Vec::new(); n];
        for (g, &t) in self.goods.iter().enumerate() {
            for i in 0..n {
                let ratio = p.value(i, t) / utilities[i];
                if ratio > prices[g] * (1.0 + TIGHT_REL) {
                    return None;
                }
                if p.value(i, t) > 0.0 && ratio >= prices[g] * (1.0 - TIGHT_REL) {
                    tight[i].push(g);
                }
            }
        }

        let capacity: Vec<f64> = self
            .goods
            .iter()
            .enumerate()
            .map(|(g, &t)| prices[g] * p.cell_len(t))
            .collect();
        let spending = spending_flow(&tight, &capacity)?;

        let mut lengths = vec![vec![0.0; p.n_cells()]; n];
        for (g, &t) in self.goods.iter().enumerate() {
            let len = p.cell_len(t);
            let bought: f64 = (0..n).map(|i| spending[i][g]).sum();
            if bought <= 0.0 {
                return None;
            }
            for i in 0..n {
                lengths[i][t] = len * spending[i][g] / bought;
            }
        }
        Some(lengths)
    }
}

/// Routes one unit of budget per agent along tight pairs into goods with the
/// given spending capacities. Returns per-pair spending, or `None` if some
/// budget cannot be placed.
///
/// Augmenting paths are searched breadth-first with agents and goods visited in
/// index order, so lower-indexed agents claim lower-indexed goods first when
/// the equilibrium leaves a choice.
fn spending_flow(tight: &[Vec<usize>], capacity: &[f64]) -> Option<Vec<Vec<f64>>> {
    let n = tight.len();
    let k = capacity.len();
    let eps = 1e-13 * (n as f64).max(1.0);
    let mut budget = vec![1.0; n];
    let mut room = capacity.to_vec();
    let mut flow = vec![vec![0.0; k]; n];
    let mut buyers = vec![Vec::new(); k];
    for (i, adj) in tight.iter().enumerate() {
        for &g in adj {
            buyers[g].push(i);
        }
    }

    loop {
        // Nodes: agents 0..n, goods n..n+k.
        let mut parent: Vec<Option<usize>> = vec![None; n + k];
        let mut seen = vec![false; n + k];
        let mut queue = VecDeque::new();
        for i in 0..n {
            if budget[i] > eps {
                seen[i] = true;
                queue.push_back(i);
            }
        }
        let mut sink_good = None;
        'search: while let Some(node) = queue.pop_front() {
            if node < n {
                for &g in &tight[node] {
                    let v = n + g;
                    if !seen[v] {
                        seen[v] = true;
                        parent[v] = Some(node);
                        if room[g] > eps {
                            sink_good = Some(g);
                            break 'search;
                        }
                        queue.push_back(v);
                    }
                }
            } else {
                let g = node - n;
                for &j in &buyers[g] {
                    if !seen[j] && flow[j][g] > eps {
                        seen[j] = true;
                        parent[j] = Some(node);
                        queue.push_back(j);
                    }
                }
            }
        }
        let Some(g_end) = sink_good else { break };

        // Walk back to the root agent collecting the bottleneck.
        let mut amount = room[g_end];
        let mut v = n + g_end;
        while let Some(u) = parent[v] {
            if v < n {
                // good u -> agent v along a reverse edge
                amount = amount.min(flow[v][u - n]);
            }
            v = u;
        }
        let start = v;
        amount = amount.min(budget[start]);

        let mut v = n + g_end;
        while let Some(u) = parent[v] {
            if v >= n {
                flow[u][v - n] += amount;
            } else {
                flow[v][u - n] -= amount;
            }
            v = u;
        }
        budget[start] -= amount;
        room[g_end] -= amount;
    }

    if budget.iter().any(|b| *b > 1e-9) {
        return None;
    }
    Some(flow)
}

/// Bids of the equal-budget Fisher market, updated proportionally to the value
/// each good contributes to its bidder.
struct ProportionalResponse<'a> {
    market: &'a Market<'a>,
    bids: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    lens: Vec<f64>,
    iterations: usize,
}

impl<'a> ProportionalResponse<'a> {
    fn new(market: &'a Market<'a>) -> Self {
        let p = market.profile;
        let lens: Vec<f64> = market.goods.iter().map(|&t| p.cell_len(t)).collect();
        let values: Vec<Vec<f64>> = (0..market.n)
            .map(|i| market.goods.iter().map(|&t| p.value(i, t)).collect())
            .collect();
        let bids = values
            .iter()
            .map(|row| {
                let worth: Vec<f64> = row.iter().zip(&lens).map(|(f, l)| f * l).collect();
                let total: f64 = worth.iter().sum();
                worth.iter().map(|w| w / total).collect()
            })
            .collect();
        ProportionalResponse {
            market,
            bids,
            values,
            lens,
            iterations: 0,
        }
    }

    fn prices(&self) -> Vec<f64> {
        let mut prices = vec![0.0; self.lens.len()];
        for row in &self.bids {
            for (p, b) in prices.iter_mut().zip(row) {
                *p += b;
            }
        }
        prices
    }

    fn run(&mut self, steps: usize) {
        for _ in 0..steps {
            let prices = self.prices();
            for (row, vals) in self.bids.iter_mut().zip(&self.values) {
                let mut utility = 0.0;
                for g in 0..row.len() {
                    if row[g] > 0.0 {
                        row[g] *= vals[g] * self.lens[g] / prices[g];
                        utility += row[g];
                    }
                }
                for b in row.iter_mut() {
                    *b /= utility;
                }
            }
            self.iterations += 1;
        }
    }

    fn utilities(&self) -> Vec<f64> {
        let prices = self.prices();
        self.bids
            .iter()
            .zip(&self.values)
            .map(|(row, vals)| {
                (0..row.len())
                    .map(|g| vals[g] * self.lens[g] * row[g] / prices[g])
                    .sum()
            })
            .collect()
    }

    fn lengths(&self) -> Vec<Vec<f64>> {
        let p = self.market.profile;
        let prices = self.prices();
        self.bids
            .iter()
            .map(|row| {
                let mut out = vec![0.0; p.n_cells()];
                for (g, &t) in self.market.goods.iter().enumerate() {
                    out[t] = self.lens[g] * row[g] / prices[g];
                }
                out
            })
            .collect()
    }
}

fn condition(
    profile: &Profile,
    shares: &ShareMatrix,
    utilities: &[f64],
    tol: f64,
    first_rival: usize,
) -> ConditionReport {
    let mut worst: Option<Violation> = None;
    for t in 0..profile.n_cells() {
        let threshold = tol * profile.cell_len(t);
        for owner in 0..profile.n_agents() {
            if shares.get(owner, t) <= threshold {
                continue;
            }
            let own = profile.value(owner, t) / utilities[owner];
            for rival in first_rival..profile.n_agents() {
                if rival == owner {
                    continue;
                }
                let magnitude = profile.value(rival, t) / utilities[rival] - own;
                if worst.is_none_or(|w| magnitude > w.magnitude) {
                    worst = Some(Violation {
                        owner,
                        rival,
                        cell: t,
                        magnitude,
                    });
                }
            }
        }
    }
    ConditionReport {
        satisfied: worst.is_none_or(|w| w.magnitude <= tol),
        worst_violation: worst,
    }
}

fn positive_utilities(profile: &Profile, shares: &ShareMatrix) -> Result<Vec<f64>> {
    if shares.n_agents() != profile.n_agents() || shares.n_cells() != profile.n_cells() {
        return Err(CakeError::domain("share matrix does not match the profile"));
    }
    let utilities = profile.share_utilities(shares);
    if let Some(i) = utilities.iter().position(|u| *u <= 0.0) {
        return Err(CakeError::domain(format!("agent {i} has zero utility")));
    }
    Ok(utilities)
}

/// Checks that every owner of a cell has the largest `f_i(X_t) / v_i(A_i)` on it.
pub fn check_mnw_condition(profile: &Profile, shares: &ShareMatrix, tol: f64) -> Result<ConditionReport> {
    let utilities = positive_utilities(profile, shares)?;
    Ok(condition(profile, shares, &utilities, tol, 0))
}

/// Like [`check_mnw_condition`] but agent 0 never counts as a rival, so agent 0
/// may be left without cells only it deserves.
pub fn check_weak_mnw(profile: &Profile, shares: &ShareMatrix, tol: f64) -> Result<ConditionReport> {
    let utilities = positive_utilities(profile, shares)?;
    Ok(condition(profile, shares, &utilities, tol, 1))
}

/// Whether `agent` has a ratio on `cell` at least as large as every other agent's.
pub fn deserves(profile: &Profile, solution: &MnwSolution, agent: usize, cell: usize) -> bool {
    let u = &solution.utilities;
    let own = profile.value(agent, cell) / u[agent];
    (0..profile.n_agents())
        .filter(|j| *j != agent)
        .all(|j| own >= profile.value(j, cell) / u[j] - crate::cake::CMP_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cake::{Interval, PiecewiseDensity};

    fn unit() -> Interval {
        Interval::new(0.0, 1.0).unwrap()
    }

    fn lb_profile(n: usize) -> Profile {
        let bp = vec![0.0, 1.0, 2.0, 3.0];
        let nf = n as f64;
        let mut ds = vec![PiecewiseDensity::new(bp.clone(), vec![nf, nf - 1.0, 0.0]).unwrap()];
        for _ in 1..n {
            ds.push(PiecewiseDensity::new(bp.clone(), vec![0.0, 1.0, nf - 1.0]).unwrap());
        }
        Profile::new(ds, Interval::new(0.0, 3.0).unwrap()).unwrap()
    }

    fn shares(profile: &Profile, rows: Vec<Vec<f64>>) -> ShareMatrix {
        ShareMatrix::new(profile.cells(), rows, false).unwrap()
    }

    #[test]
    fn lower_bound_instance_solution() {
        let p = lb_profile(3);
        let sol = solve_mnw(&p, true, DEFAULT_TOL).unwrap();
        assert!((sol.utilities[0] - 3.0).abs() < 1e-9);
        assert!((sol.utilities[1] - 1.5).abs() < 1e-9);
        assert!((sol.utilities[2] - 1.5).abs() < 1e-9);
        assert!((sol.shares.get(0, 0) - 1.0).abs() < 1e-9);
        assert!(sol.kkt_residual <= DEFAULT_TOL);
    }

    #[test]
    fn identical_uniform_agents() {
        let u = PiecewiseDensity::uniform(unit(), 1.0).unwrap();
        let p = Profile::new(vec![u.clone(), u], unit()).unwrap();
        let sol = solve_mnw(&p, true, DEFAULT_TOL).unwrap();
        assert!((sol.utilities[0] - 0.5).abs() < 1e-12);
        assert!((sol.utilities[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_agent_takes_everything() {
        let d = PiecewiseDensity::new(vec![0.0, 0.5, 1.0], vec![2.0, 0.0]).unwrap();
        let p = Profile::new(vec![d], unit()).unwrap();
        let sol = solve_mnw(&p, true, DEFAULT_TOL).unwrap();
        assert_eq!(sol.shares.lengths(), &[vec![0.5, 0.5]]);
        assert!((sol.utilities[0] - 1.0).abs() < 1e-12);
        let report = check_mnw_condition(&p, &sol.shares, DEFAULT_TOL).unwrap();
        assert!(report.satisfied);

        let free = solve_mnw(&p, false, DEFAULT_TOL).unwrap();
        assert_eq!(free.shares.lengths(), &[vec![0.5, 0.0]]);
    }

    #[test]
    fn worthless_cells_go_to_first_agent() {
        let a = PiecewiseDensity::new(vec![0.0, 0.5, 1.0], vec![1.0, 0.0]).unwrap();
        let b = PiecewiseDensity::new(vec![0.0, 0.25, 0.5, 1.0], vec![0.0, 1.0, 0.0]).unwrap();
        let p = Profile::new(vec![a, b], unit()).unwrap();
        let sol = solve_mnw(&p, true, DEFAULT_TOL).unwrap();
        let last = p.n_cells() - 1;
        assert_eq!(sol.shares.get(0, last), 0.5);
        assert_eq!(sol.shares.get(1, last), 0.0);
        let free = solve_mnw(&p, false, DEFAULT_TOL).unwrap();
        for i in 0..2 {
            assert!((free.utilities[i] - sol.utilities[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn giving_agent_two_the_first_cell_violates_condition() {
        let p = lb_profile(3);
        let s = shares(&p, vec![vec![0.0, 0.5, 0.0], vec![1.0, 0.25, 0.5], vec![0.0, 0.25, 0.5]]);
        let report = check_mnw_condition(&p, &s, 1e-9).unwrap();
        assert!(!report.satisfied);
        let w = report.worst_violation.unwrap();
        assert_eq!((w.owner, w.rival, w.cell), (1, 0, 0));
    }

    #[test]
    fn weakly_mnw_but_not_mnw() {
        let p = lb_profile(3);
        let s = shares(&p, vec![vec![0.5, 0.0, 0.0], vec![0.0, 0.5, 0.5], vec![0.0, 0.5, 0.5]]);
        assert!(!check_mnw_condition(&p, &s, 1e-9).unwrap().satisfied);
        assert!(check_weak_mnw(&p, &s, 1e-9).unwrap().satisfied);
    }

    #[test]
    fn misplaced_cells_fail_both_checks() {
        // Agent 1 (0-based) holds cell (2,3) although agent 2 has the larger ratio there.
        let p = lb_profile(3);
        let s = shares(&p, vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]);
        assert!(!check_mnw_condition(&p, &s, 1e-9).unwrap().satisfied);
        let weak = check_weak_mnw(&p, &s, 1e-9).unwrap();
        assert!(!weak.satisfied);
        let w = weak.worst_violation.unwrap();
        assert_eq!((w.owner, w.rival, w.cell), (1, 2, 2));
    }

    #[test]
    fn mnw_solution_passes_weak_check_and_deserves() {
        let p = lb_profile(3);
        let sol = solve_mnw(&p, true, DEFAULT_TOL).unwrap();
        assert!(check_weak_mnw(&p, &sol.shares, DEFAULT_TOL).unwrap().satisfied);
        assert!(deserves(&p, &sol, 0, 0));
        assert!(!deserves(&p, &sol, 0, 2));
        assert!(deserves(&p, &sol, 1, 2));
        assert!(!deserves(&p, &sol, 1, 0));
    }

    #[test]
    fn single_agent_condition_is_vacuous() {
        let u = PiecewiseDensity::uniform(unit(), 1.0).unwrap();
        let p = Profile::new(vec![u], unit()).unwrap();
        let s = shares(&p, vec![vec![1.0]]);
        assert!(check_mnw_condition(&p, &s, 1e-9).unwrap().satisfied);
    }

    #[test]
    fn zero_utility_is_a_domain_error() {
        let u = PiecewiseDensity::uniform(unit(), 1.0).unwrap();
        let p = Profile::new(vec![u.clone(), u], unit()).unwrap();
        let s = shares(&p, vec![vec![1.0], vec![0.0]]);
        assert!(matches!(check_mnw_condition(&p, &s, 1e-9), Err(CakeError::Domain(_))));
        assert!(matches!(check_weak_mnw(&p, &s, 1e-9), Err(CakeError::Domain(_))));
    }

    #[test]
    fn flow_prefers_low_indices() {
        let flow = spending_flow(&[vec![0, 1], vec![0, 1]], &[1.0, 1.0]).unwrap();
        assert_eq!(flow[0], vec![1.0, 0.0]);
        assert_eq!(flow[1], vec![0.0, 1.0]);
        assert!(spending_flow(&[vec![0], vec![0]], &[1.0, 1.0]).is_none());
    }
}
