//! Named reproduction scenarios, per-run reports and the brute-force welfare oracle.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    best_response_search, gen_ef2_lb, gen_interp_lb, gen_mnw_lb, gen_pa_lb, incentive_ratio_sweep, pa_lb_h,
    random_profile, AttackResult, MisreportFamily, SweepAgents,
};
use crate::audit::{audit, AuditReport};
use crate::cake::{geometric_mean, restrict_profile, value_of, Allocation, Interval, Profile, CMP_TOL};
use crate::error::{CakeError, Result};
use crate::instance::InstanceFile;
use crate::mechanisms::{
    expected_utility, pa_factors, run, run_ef2, run_interpolated, run_mnw_mechanism, run_pa, run_randomized_pa,
    Mechanism,
};
use crate::mnw::{solve_mnw, DEFAULT_TOL};

/// Everything one `run` or `attack` invocation produces. All fields except
/// `wall_clock_seconds` are reproducible from the instance and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismReport {
    pub mechanism: Mechanism,
    pub seed: u64,
    pub instance_digest: String,
    pub utilities: Vec<f64>,
    pub allocation: Allocation,
    pub audit: AuditReport,
    pub attack: Option<AttackResult>,
    pub wall_clock_seconds: f64,
}

pub fn mechanism_report(
    mechanism: Mechanism,
    instance: &InstanceFile,
    profile: &Profile,
    seed: u64,
    tol: f64,
) -> Result<MechanismReport> {
    let start = Instant::now();
    let allocation = run(mechanism, profile, seed)?;
    let audit = audit(profile, &allocation, tol)?;
    Ok(MechanismReport {
        mechanism,
        seed,
        instance_digest: instance.digest(),
        utilities: audit.utilities.clone(),
        allocation,
        audit,
        attack: None,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub agent: usize,
    pub utility: f64,
    pub mnw_utility: Option<f64>,
    pub ratio: Option<f64>,
}

/// One row per agent, numbered from 1.
pub fn utility_rows(utilities: &[f64], mnw_utilities: Option<&[f64]>) -> Vec<UtilityRow> {
    utilities
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let m = mnw_utilities.map(|m| m[i]);
            UtilityRow {
                agent: i + 1,
                utility: *u,
                mnw_utility: m,
                ratio: m.map(|m| u / m),
            }
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    Ok(String::from_utf8(writer.into_inner()?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    MnwLb,
    PaBounds,
    PaLb,
    PaItemsTruthful,
    RpaTruthful,
    MnwAttack,
    InterpCurve,
    Ef2Lb,
    InterpLb,
    Monotonicity,
}

impl Scenario {
    pub const ALL: [Scenario; 10] = [
        Scenario::MnwLb,
        Scenario::PaBounds,
        Scenario::PaLb,
        Scenario::PaItemsTruthful,
        Scenario::RpaTruthful,
        Scenario::MnwAttack,
        Scenario::InterpCurve,
        Scenario::Ef2Lb,
        Scenario::InterpLb,
        Scenario::Monotonicity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::MnwLb => "mnw-lb",
            Scenario::PaBounds => "pa-bounds",
            Scenario::PaLb => "pa-lb",
            Scenario::PaItemsTruthful => "pa-items-truthful",
            Scenario::RpaTruthful => "rpa-truthful",
            Scenario::MnwAttack => "mnw-attack",
            Scenario::InterpCurve => "interp-curve",
            Scenario::Ef2Lb => "ef2-lb",
            Scenario::InterpLb => "interp-lb",
            Scenario::Monotonicity => "monotonicity",
        }
    }

    /// The acceptance criterion this scenario decides.
    pub fn criterion(&self) -> u32 {
        Scenario::ALL.iter().position(|s| s == self).unwrap() as u32 + 1
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = CakeError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| CakeError::domain(format!("unknown scenario `{s}`")))
    }
}

/// Parameters of a reproduction; unset fields take the scenario defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproSpec {
    pub scenario: Scenario,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub eps: Option<f64>,
    pub c_grid: Option<Vec<f64>>,
    /// Number of random instances for the randomized parts.
    pub instances: Option<usize>,
    pub seed: u64,
}

impl ReproSpec {
    pub fn new(scenario: Scenario) -> Self {
        ReproSpec {
            scenario,
            n: None,
            k: None,
            eps: None,
            c_grid: None,
            instances: None,
            seed: 1,
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn count(&self, default: usize) -> usize {
        self.instances.unwrap_or(default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u32,
    pub label: String,
    pub observed: f64,
    pub expected: String,
    pub passed: bool,
}

impl Check {
    fn near(criterion: u32, label: impl Into<String>, observed: f64, target: f64, tol: f64) -> Self {
        Check {
            criterion,
            label: label.into(),
            observed,
            expected: format!("{target} ± {tol:e}"),
            passed: (observed - target).abs() <= tol,
        }
    }

    fn at_most(criterion: u32, label: impl Into<String>, observed: f64, bound: f64) -> Self {
        Check {
            criterion,
            label: label.into(),
            observed,
            expected: format!("<= {bound}"),
            passed: observed <= bound,
        }
    }

    fn at_least(criterion: u32, label: impl Into<String>, observed: f64, bound: f64) -> Self {
        Check {
            criterion,
            label: label.into(),
            observed,
            expected: format!(">= {bound}"),
            passed: observed >= bound,
        }
    }

    fn within(criterion: u32, label: impl Into<String>, observed: f64, lo: f64, hi: f64) -> Self {
        Check {
            criterion,
            label: label.into(),
            observed,
            expected: format!("in [{lo}, {hi}]"),
            passed: lo <= observed && observed <= hi,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] criterion {}: {}: observed {} (expected {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.label,
            self.observed,
            self.expected
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub spec: ReproSpec,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub wall_clock_seconds: f64,
}

pub fn run_repro(spec: &ReproSpec) -> Result<ReproReport> {
    let start = Instant::now();
    let checks = match spec.scenario {
        Scenario::MnwLb => mnw_lb(spec)?,
        Scenario::PaBounds => pa_bounds(spec)?,
        Scenario::PaLb => pa_lb(spec)?,
        Scenario::PaItemsTruthful => pa_items_truthful(spec)?,
        Scenario::RpaTruthful => rpa_truthful(spec)?,
        Scenario::MnwAttack => mnw_attack(spec)?,
        Scenario::InterpCurve => interp_curve(spec)?,
        Scenario::Ef2Lb => ef2_lb(spec)?,
        Scenario::InterpLb => interp_lb(spec)?,
        Scenario::Monotonicity => monotonicity(spec)?,
    };
    Ok(ReproReport {
        spec: spec.clone(),
        passed: checks.iter().all(|c| c.passed),
        checks,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Random cake instances with `n` drawn from `agents`, up to 6 cells on the
/// 1/8 lattice and integer values 0..=4.
pub fn random_instances<R: Rng>(rng: &mut R, count: usize, agents: (usize, usize)) -> Result<Vec<Profile>> {
    (0..count)
        .map(|_| {
            let n = rng.gen_range(agents.0..=agents.1);
            let m = rng.gen_range(1..=6);
            random_profile(rng, n, m, 8, 4)
        })
        .collect()
}

/// Agent 0's true utility from `mechanism` when it reports `report` instead.
fn manipulated_utility(mechanism: Mechanism, profile: &Profile, report: &crate::cake::PiecewiseDensity) -> Result<f64> {
    let lied = profile.with_density(0, report.clone())?;
    expected_utility(mechanism, &lied, profile.density(0), 0)
}

fn mnw_lb(spec: &ReproSpec) -> Result<Vec<Check>> {
    let c = Scenario::MnwLb.criterion();
    let n = spec.n.unwrap_or(10);
    let eps = spec.eps.unwrap_or(1e-3);
    let hard = gen_mnw_lb(n, eps)?;
    let m = n as f64;

    let truthful_alloc = run_mnw_mechanism(&hard.profile)?;
    let truthful = value_of(hard.profile.density(0), truthful_alloc.bundle(0))?;
    let lied = hard.profile.with_density(0, hard.misreport.clone())?;
    let manipulated = value_of(hard.profile.density(0), run_mnw_mechanism(&lied)?.bundle(0))?;
    let predicted = (2.0 * m - 1.0 - (m - 1.0).powi(2) / m * eps) / m;
    Ok(vec![
        Check::near(c, "truthful utility of agent 1", truthful, m, 1e-6),
        Check::near(
            c,
            "manipulated utility of agent 1",
            manipulated,
            2.0 * m - 1.0 - (m - 1.0).powi(2) / m * eps,
            1e-4 * m,
        ),
        Check::near(c, "manipulation ratio", manipulated / truthful, predicted, 1e-4),
    ])
}

fn pa_bounds(spec: &ReproSpec) -> Result<Vec<Check>> {
    let c = Scenario::PaBounds.criterion();
    let mut rng = spec.rng();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for profile in random_instances(&mut rng, spec.count(500), (2, spec.n.unwrap_or(5)))? {
        for y in pa_factors(&profile)?.factors {
            lo = lo.min(y);
            hi = hi.max(y);
        }
    }
    let e_inv = (-1.0f64).exp();
    Ok(vec![
        Check::at_least(c, "smallest PA factor", lo, e_inv - 1e-9),
        Check::at_most(c, "largest PA factor", hi, 1.0 + 1e-9),
    ])
}

/// Agent 0's deterministic-PA ratio on the hard instance with `n` agents.
fn pa_lb_ratio(n: usize) -> Result<f64> {
    let hard = gen_pa_lb(n)?;
    let truthful = value_of(hard.profile.density(0), run_pa(&hard.profile)?.bundle(0))?;
    let lied = hard.profile.with_density(0, hard.misreport.clone())?;
    let manipulated = value_of(hard.profile.density(0), run_pa(&lied)?.bundle(0))?;
    Ok(manipulated / truthful)
}

fn pa_lb_closed_form(n: usize) -> f64 {
    (1.0 - pa_lb_h(n) / n as f64).powi(1 - n as i32)
}

fn pa_lb(spec: &ReproSpec) -> Result<Vec<Check>> {
    let c = Scenario::PaLb.criterion();
    let n = spec.n.unwrap_or(10);
    let mut checks = vec![Check::near(
        c,
        format!("PA ratio at n = {n}"),
        pa_lb_ratio(n)?,
        pa_lb_closed_form(n),
        1e-5,
    )];
    if spec.n.is_none() {
        checks.push(Check::within(c, "PA ratio at n = 200", pa_lb_ratio(200)?, 1.440, 1.4447));
    }
    Ok(checks)
}

fn pa_items_truthful(spec: &ReproSpec) -> Result<Vec<Check>> {
    let c = Scenario::PaItemsTruthful.criterion();
    let n = spec.n.unwrap_or(3);
    let mut rng = spec.rng();
    let instances = (0..spec.count(50))
        .map(|_| random_profile(&mut rng, n, 3, 8, 4))
        .collect::<Result<Vec<_>>>()?;
    let family = MisreportFamily::values_only(vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    let sweep = incentive_ratio_sweep(Mechanism::Pa, &instances, &family, SweepAgents::All)?;
    Ok(vec![Check::at_most(c, "best values-only ratio against PA", sweep.best_ratio, 1.0 + 1e-6)])
}

fn rpa_truthful(spec: &ReproSpec) -> Result<Vec<Check>> {
    let c = Scenario::RpaTruthful.criterion();
    let mut rng = spec.rng();
    let instances = random_instances(&mut rng, spec.count(50), (2, 3))?;
    let sweep = incentive_ratio_sweep(Mechanism::RandomizedPa, &instances, &MisreportFamily::default(), SweepAgents::All)?;

    let n = 10;
    let h = pa_lb_h(n);
    let hard = gen_pa_lb(n)?;
    let truthful = expected_utility(Mechanism::RandomizedPa, &hard.profile, hard.profile.density(0), 0)?;
    let manipulated = manipulated_utility(Mechanism::RandomizedPa, &hard.profile, &hard.misreport)?;
    let truthful_closed = h * (1.0 - h / n as f64).powi(n as i32 - 1);
    Ok(vec![
        Check::at_most(c, "largest expected gain from misreporting", sweep.worst_gain, 1e-6),
        Check::near(c, "truthful expected utility on the hard instance", truthful, truthful_closed, 1e-6),
        Check::near(c, "manipulated expected utility on the hard instance", manipulated, h * h, 1e-6),
        Check::at_most(c, "manipulated minus truthful on the hard instance", manipulated - truthful, 0.0),
    ])
}

fn mnw_attack(spec: &ReproSpec) -> Result<Vec<Check>> {
    let c = Scenario::MnwAttack.criterion();
    let mut rng = spec.rng();
    let instances = random_instances(&mut rng, spec.count(50), (2, 3))?;
    let sweep = incentive_ratio_sweep(Mechanism::Mnw, &instances, &MisreportFamily::default(), SweepAgents::All)?;
    Ok(vec![Check::at_most(c, "best ratio against MNW", sweep.best_ratio, 2.0 + 1e-6)])
}

pub const DEFAULT_C_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn interp_curve(spec: &ReproSpec) -> Result<Vec<Check>> {
    let crit = Scenario::InterpCurve.criterion();
    let grid = spec.c_grid.clone().unwrap_or_else(|| DEFAULT_C_GRID.to_vec());
    let mut rng = spec.rng();
    let welfare_instances = random_instances(&mut rng, spec.count(100), (2, 5))?;
    let attack_instances = random_instances(&mut rng, 50, (2, 3))?;

    let mut checks = Vec::new();
    let mut exact_mismatches = 0;
    for &c in &grid {
        let mut slack = f64::INFINITY;
        for (k, profile) in welfare_instances.iter().enumerate() {
            let seed = spec.seed.wrapping_add(k as u64);
            let mnw = solve_mnw(profile, true, DEFAULT_TOL)?.utilities;
            let alloc = run_interpolated(profile, c, seed)?;
            let utilities = profile.utilities(&alloc)?;
            for (u, m) in utilities.iter().zip(&mnw) {
                slack = slack.min(u - (-c).exp() * m);
            }
            if c == 0.0 && utilities != profile.utilities(&run_mnw_mechanism(profile)?)? {
                exact_mismatches += 1;
            }
            if c == 1.0 && alloc != run_randomized_pa(profile, seed)? {
                exact_mismatches += 1;
            }
        }
        checks.push(Check::at_least(
            crit,
            format!("c = {c}: min utility - e^-c * MNW utility"),
            slack,
            -1e-6,
        ));
        let sweep = incentive_ratio_sweep(
            Mechanism::Interpolated { c },
            &attack_instances,
            &MisreportFamily::default(),
            SweepAgents::All,
        )?;
        checks.push(Check::at_most(
            crit,
            format!("c = {c}: best attack ratio"),
            sweep.best_ratio,
            2f64.powf(1.0 - c) + 1e-6,
        ));
    }
    checks.push(Check::at_most(
        crit,
        "runs where c = 0 differs from MNW or c = 1 from randomized PA",
        exact_mismatches as f64,
        0.0,
    ));
    Ok(checks)
}

fn ef2_lb(spec: &ReproSpec) -> Result<Vec<Check>> {
    let c = Scenario::Ef2Lb.criterion();
    let hard = gen_ef2_lb()?;
    let truthful = value_of(hard.profile.density(0), run_ef2(&hard.profile)?.0.bundle(0))?;
    let manipulated = manipulated_utility(Mechanism::Ef2, &hard.profile, &hard.misreport)?;

    let mut rng = spec.rng();
    let attack_instances = random_instances(&mut rng, 50, (2, 2))?;
    let sweep = incentive_ratio_sweep(Mechanism::Ef2, &attack_instances, &MisreportFamily::default(), SweepAgents::All)?;

    let mut worst_envy = f64::NEG_INFINITY;
    for profile in random_instances(&mut rng, spec.count(500), (2, 2))? {
        let (alloc, _) = run_ef2(&profile)?;
        let report = audit(&profile, &alloc, CMP_TOL)?;
        worst_envy = worst_envy.max(report.worst_envy.map_or(0.0, |e| e.magnitude));
    }
    Ok(vec![
        Check::near(c, "truthful utility of agent 1", truthful, 3.0 / 8.0, 1e-9),
        Check::near(c, "manipulated utility of agent 1", manipulated, 0.5, 1e-9),
        Check::near(c, "manipulation ratio", manipulated / truthful, 4.0 / 3.0, 1e-9),
        Check::at_most(c, "best attack ratio on 2-agent instances", sweep.best_ratio, 4.0 / 3.0 + 1e-6),
        Check::at_most(c, "largest envy over random 2-agent instances", worst_envy, CMP_TOL),
    ])
}

fn interp_lb(spec: &ReproSpec) -> Result<Vec<Check>> {
    let crit = Scenario::InterpLb.criterion();
    let n = spec.n.unwrap_or(3);
    let k = spec.k.unwrap_or(5);
    let (nf, kf) = (n as f64, k as f64);
    let mut checks = Vec::new();

    let top = solve_mnw(&gen_interp_lb(n, k, n + 1)?, true, DEFAULT_TOL)?;
    let worst = top
        .utilities
        .iter()
        .map(|u| (u - (kf * nf + kf + 1.0)).abs())
        .fold(0.0, f64::max);
    checks.push(Check::at_most(
        crit,
        format!("instance {}: largest |utility - {}|", n + 1, k * n + k + 1),
        worst,
        1e-5,
    ));

    for which in 1..=n {
        let profile = gen_interp_lb(n, k, which)?;
        let solution = solve_mnw(&profile, true, DEFAULT_TOL)?;
        let agent = which - 1;
        checks.push(Check::near(
            crit,
            format!("instance {which}: utility of agent {which}"),
            solution.utilities[agent],
            nf * kf + 1.0,
            1e-5,
        ));
        // Every other agent j must own all of item j (cell j - 1).
        let missing = (0..n)
            .filter(|j| *j != agent)
            .map(|j| profile.cell_len(j) - solution.shares.get(j, j))
            .fold(0.0, f64::max);
        checks.push(Check::at_most(
            crit,
            format!("instance {which}: largest missing part of a premium item"),
            missing,
            1e-5,
        ));
    }
    Ok(checks)
}

fn monotonicity(spec: &ReproSpec) -> Result<Vec<Check>> {
    let crit = Scenario::Monotonicity.criterion();
    let mut rng = spec.rng();
    let count = spec.count(200);
    let instances = random_instances(&mut rng, count, (2, 4))?;

    let mut worst_gain = f64::NEG_INFINITY;
    let mut worst_permutation = 0.0f64;
    for profile in &instances {
        let full = solve_mnw(profile, true, DEFAULT_TOL)?.utilities;

        let restricted = loop {
            let a = rng.gen_range(0..16);
            let b = rng.gen_range(a + 1..=16);
            if b - a == 16 {
                continue;
            }
            let removed = Interval::new(a as f64 / 16.0, b as f64 / 16.0)?;
            let candidate = restrict_profile(profile, removed)?;
            if (0..profile.n_agents()).all(|i| candidate.available_value(i) > 0.0) {
                break candidate;
            }
        };
        let less = solve_mnw(&restricted, true, DEFAULT_TOL)?.utilities;
        for (u_less, u) in less.iter().zip(&full) {
            worst_gain = worst_gain.max(u_less - u);
        }

        let mut order: Vec<usize> = (0..profile.n_agents()).collect();
        order.shuffle(&mut rng);
        let permuted = solve_mnw(&profile.permuted(&order)?, true, DEFAULT_TOL)?.utilities;
        for (k, &i) in order.iter().enumerate() {
            worst_permutation = worst_permutation.max((permuted[k] - full[i]).abs());
        }
    }

    let mut worst_oracle_gap = 0.0f64;
    let mut oracle_beats_solver = f64::NEG_INFINITY;
    let oracle_instances = (0..30)
        .map(|_| {
            let n = rng.gen_range(2..=3);
            let m = rng.gen_range(1..=3);
            random_profile(&mut rng, n, m, 8, 4)
        })
        .collect::<Result<Vec<_>>>()?;
    for profile in &oracle_instances {
        let solver = geometric_mean(&solve_mnw(profile, true, DEFAULT_TOL)?.utilities);
        let oracle = brute_force_nash_welfare(profile, 16, 40);
        worst_oracle_gap = worst_oracle_gap.max((solver - oracle).abs() / oracle);
        oracle_beats_solver = oracle_beats_solver.max(oracle - solver);
    }

    Ok(vec![
        Check::at_most(crit, "largest utility gain after removing cake", worst_gain, 1e-6),
        Check::at_most(crit, "largest utility change under agent permutation", worst_permutation, 1e-6),
        Check::at_most(crit, "largest relative gap to the brute-force welfare", worst_oracle_gap, 1e-4),
        Check::at_most(crit, "brute-force welfare above solver welfare", oracle_beats_solver, 1e-9),
    ])
}

/// Maximum Nash welfare by exhaustive search over share matrices: a full grid
/// with `resolution` steps per cell, then `refinements` rounds of searching a
/// ±2-step box around the incumbent with the step halved each round.
pub fn brute_force_nash_welfare(profile: &Profile, resolution: usize, refinements: usize) -> f64 {
    let n = profile.n_agents();
    let m = profile.n_cells();
    // worth[t][i]: agent i's value for all of cell t
    let worth: Vec<Vec<f64>> = (0..m)
        .map(|t| {
            (0..n)
                .map(|i| if profile.is_forbidden(t) { 0.0 } else { profile.value(i, t) * profile.cell_len(t) })
                .collect()
        })
        .collect();

    let simplex: Vec<Vec<f64>> = compositions(resolution, n)
        .into_iter()
        .map(|c| c.into_iter().map(|k| k as f64 / resolution as f64).collect())
        .collect();
    let mut choice = best_product(&worth, &vec![simplex; m]);

    let mut step = 1.0 / resolution as f64;
    for _ in 0..refinements {
        step /= 2.0;
        let candidates: Vec<Vec<Vec<f64>>> = choice.iter().map(|x| neighbourhood(x, step)).collect();
        choice = best_product(&worth, &candidates);
    }
    let utilities: Vec<f64> = (0..n)
        .map(|i| (0..m).map(|t| choice[t][i] * worth[t][i]).sum())
        .collect();
    geometric_mean(&utilities)
}

/// All ways to write `total` as an ordered sum of `parts` nonnegative integers.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    (0..=total)
        .flat_map(|first| {
            compositions(total - first, parts - 1).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

/// Points of the simplex within two steps of `x` in every free coordinate.
fn neighbourhood(x: &[f64], step: f64) -> Vec<Vec<f64>> {
    let free = x.len() - 1;
    let mut out = Vec::new();
    let offsets = 5usize.pow(free as u32);
    for code in 0..offsets {
        let mut point = x.to_vec();
        let mut c = code;
        for v in point.iter_mut().take(free) {
            *v += (c % 5) as f64 * step - 2.0 * step;
            c /= 5;
        }
        let rest = 1.0 - point[..free].iter().sum::<f64>();
        point[free] = rest;
        if point.iter().all(|v| *v >= 0.0) {
            out.push(point);
        }
    }
    out
}

/// The per-cell choice maximizing the sum of log utilities.
fn best_product(worth: &[Vec<f64>], candidates: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    fn go(
        t: usize,
        worth: &[Vec<f64>],
        candidates: &[Vec<Vec<f64>>],
        acc: &mut Vec<f64>,
        picked: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        if t == worth.len() {
            let score: f64 = acc.iter().map(|u| u.ln()).sum();
            if score > best.0 {
                *best = (score, picked.clone());
            }
            return;
        }
        for (k, x) in candidates[t].iter().enumerate() {
            for i in 0..acc.len() {
                acc[i] += x[i] * worth[t][i];
            }
            picked.push(k);
            go(t + 1, worth, candidates, acc, picked, best);
            picked.pop();
            for i in 0..acc.len() {
                acc[i] -= x[i] * worth[t][i];
            }
        }
    }
    let n = candidates[0][0].len();
    let mut best = (f64::NEG_INFINITY, vec![0; worth.len()]);
    go(0, worth, candidates, &mut vec![0.0; n], &mut Vec::new(), &mut best);
    best.1.iter().enumerate().map(|(t, k)| candidates[t][*k].clone()).collect()
}

pub fn attack_report(
    mechanism: Mechanism,
    instance: &InstanceFile,
    profile: &Profile,
    agent: usize,
    family: &MisreportFamily,
    seed: u64,
    tol: f64,
) -> Result<MechanismReport> {
    let start = Instant::now();
    let mut report = mechanism_report(mechanism, instance, profile, seed, tol)?;
    report.attack = Some(best_response_search(mechanism, profile, agent, family)?);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
