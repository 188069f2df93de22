//! Post-hoc fairness and efficiency checks for any allocation.

use serde::{Deserialize, Serialize};

use crate::cake::{geometric_mean, value_of, Allocation, Profile, CMP_TOL};
use crate::error::Result;
use crate::mnw::{solve_mnw, DEFAULT_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envy {
    pub envious: usize,
    pub envied: usize,
    /// `v_i(A_j) - v_i(A_i)`; nonpositive when nobody envies anybody.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub agent: usize,
    /// `v_i(cake) / n - v_i(A_i)`.
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub utilities: Vec<f64>,
    pub envy_free: bool,
    pub worst_envy: Option<Envy>,
    pub proportional: bool,
    pub worst_shortfall: Shortfall,
    /// `min_i v_i(A_i) / v_i(A_i^MNW)`; absent when the MNW solve failed.
    pub mnw_approx: Option<f64>,
    pub mnw_utilities: Option<Vec<f64>>,
    pub mnw_error: Option<String>,
    pub nash_welfare: f64,
}

pub fn audit(profile: &Profile, alloc: &Allocation, tol: f64) -> Result<AuditReport> {
    let n = profile.n_agents();
    let utilities = profile.utilities(alloc)?;

    let mut worst_envy: Option<Envy> = None;
    for i in 0..n {
        for j in (0..n).filter(|j| *j != i) {
            let magnitude = value_of(profile.density(i), alloc.bundle(j))? - utilities[i];
            if worst_envy.as_ref().is_none_or(|w| magnitude > w.magnitude) {
                worst_envy = Some(Envy {
                    envious: i,
                    envied: j,
                    magnitude,
                });
            }
        }
    }
    let envy_free = worst_envy.as_ref().is_none_or(|w| w.magnitude <= tol);

    let worst_shortfall = (0..n)
        .map(|i| Shortfall {
            agent: i,
            amount: profile.available_value(i) / n as f64 - utilities[i],
        })
        .reduce(|a, b| if b.amount > a.amount { b } else { a })
        .expect("profiles have at least one agent");
    let proportional = worst_shortfall.amount <= tol;

    let (mnw_approx, mnw_utilities, mnw_error) = match solve_mnw(profile, false, DEFAULT_TOL) {
        Ok(sol) => {
            let approx = utilities
                .iter()
                .zip(&sol.utilities)
                .map(|(u, m)| u / m)
                .fold(f64::INFINITY, f64::min);
            (Some(approx), Some(sol.utilities), None)
        }
        Err(e) => (None, None, Some(e.to_string())),
    };

    Ok(AuditReport {
        nash_welfare: geometric_mean(&utilities),
        utilities,
        envy_free,
        worst_envy,
        proportional,
        worst_shortfall,
        mnw_approx,
        mnw_utilities,
        mnw_error,
    })
}

/// Whether every agent weakly prefers `a` to `b` and someone strictly (by more than the comparison tolerance).
pub fn dominates(profile: &Profile, a: &Allocation, b: &Allocation) -> Result<bool> {
    let ua = profile.utilities(a)?;
    let ub = profile.utilities(b)?;
    let weakly = ua.iter().zip(&ub).all(|(x, y)| *x >= y - CMP_TOL);
    let strictly = ua.iter().zip(&ub).any(|(x, y)| *x > y + CMP_TOL);
    Ok(weakly && strictly)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cake::{Interval, PiecewiseDensity};
    use crate::mechanisms::{run_ef2, run_even_split, run_mnw_mechanism};

    fn lb3() -> Profile {
        let bp = vec![0.0, 1.0, 2.0, 3.0];
        let f1 = PiecewiseDensity::new(bp.clone(), vec![3.0, 2.0, 0.0]).unwrap();
        let fi = PiecewiseDensity::new(bp, vec![0.0, 1.0, 2.0]).unwrap();
        Profile::new(vec![f1, fi.clone(), fi], Interval::new(0.0, 3.0).unwrap()).unwrap()
    }

    #[test]
    fn ef2_allocation_is_envy_free() {
        let unit = Interval::new(0.0, 1.0).unwrap();
        let f1 = PiecewiseDensity::indicator(unit, Interval::new(0.0, 0.5).unwrap(), 1.0, 0.0).unwrap();
        let f2 = PiecewiseDensity::uniform(unit, 1.0).unwrap();
        let p = Profile::new(vec![f1, f2], unit).unwrap();
        let (alloc, _) = run_ef2(&p).unwrap();
        let report = audit(&p, &alloc, CMP_TOL).unwrap();
        assert!(report.envy_free);
        assert!((report.utilities[0] - 0.375).abs() < 1e-12);
        let envy_of_first = value_of(p.density(0), alloc.bundle(1)).unwrap();
        assert!((envy_of_first - 0.125).abs() < 1e-12);
    }

    #[test]
    fn even_split_approximation_on_lower_bound_instance() {
        let p = lb3();
        let report = audit(&p, &run_even_split(&p), CMP_TOL).unwrap();
        assert!((report.mnw_approx.unwrap() - 5.0 / 9.0).abs() < 1e-9);
        assert!(report.envy_free);
    }

    #[test]
    fn mnw_output_passes_every_check() {
        let p = lb3();
        let report = audit(&p, &run_mnw_mechanism(&p).unwrap(), CMP_TOL).unwrap();
        assert!(report.envy_free);
        assert!(report.proportional);
        assert!((report.mnw_approx.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn domination() {
        let p = lb3();
        let mnw = run_mnw_mechanism(&p).unwrap();
        assert!(!dominates(&p, &mnw, &mnw).unwrap());
        let trimmed = mnw.without(Interval::new(0.0, 0.5).unwrap());
        assert!(dominates(&p, &mnw, &trimmed).unwrap());
        assert!(dominates(&p, &mnw, &run_even_split(&p)).unwrap());
        assert!(!dominates(&p, &run_even_split(&p), &mnw).unwrap());
    }

    #[test]
    fn envy_is_detected() {
        let unit = Interval::new(0.0, 1.0).unwrap();
        let u = PiecewiseDensity::uniform(unit, 1.0).unwrap();
        let p = Profile::new(vec![u.clone(), u], unit).unwrap();
        let alloc = Allocation::new(
            vec![vec![Interval::new(0.0, 0.3).unwrap()], vec![Interval::new(0.3, 1.0).unwrap()]],
            true,
        );
        let report = audit(&p, &alloc, CMP_TOL).unwrap();
        assert!(!report.envy_free);
        assert!(!report.proportional);
        let envy = report.worst_envy.unwrap();
        assert_eq!((envy.envious, envy.envied), (0, 1));
        assert!((envy.magnitude - 0.4).abs() < 1e-12);
        assert_eq!(report.worst_shortfall.agent, 0);
    }
}
