use std::ops::RangeInclusive;

use serde::Serialize;

use super::{build_ernet, intrinsic_complexity, ComplexityReport, CountMode, Family, MAX_EXPANSION};
use crate::blockflow::ncr_discrete;
use crate::par;

/// Largest admissible configuration for one module count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanCandidate {
    pub b: u32,
    pub r: u32,
    pub n: u32,
    pub expansion_ratio: f64,
    pub report: ComplexityReport,
}

impl ScanCandidate {
    pub fn name(&self, family: Family) -> String {
        format!("{family}-B{}R{}N{}", self.b, self.r, self.n)
    }
}

/// (R, N) pairs for `b` modules in decreasing order of `R + N/B`.
fn ratios_descending(b: u32) -> impl Iterator<Item = (u32, u32)> {
    let top = std::iter::once((MAX_EXPANSION, 0));
    let rest = (1..MAX_EXPANSION).rev().flat_map(move |r| (0..b).rev().map(move |n| (r, n)));
    top.chain(rest)
}

fn evaluate(family: Family, b: u32, r: u32, n: u32, x_i: usize, mode: CountMode) -> Option<ScanCandidate> {
    let m = build_ernet(family, b, r, n, 32).ok()?;
    let ncr = ncr_discrete(&m, x_i).ok()?;
    let report = intrinsic_complexity(&m, mode).with_ncr(ncr);
    let expansion_ratio = m.hyper?.expansion_ratio();
    Some(ScanCandidate { b, r, n, expansion_ratio, report })
}

/// For every `B`, the largest expansion ratio whose effective complexity
/// (intrinsic times the discrete NCR at `x_i`) fits `budget` KOP/pixel.
/// Module counts with no feasible `R_E >= 1` are omitted.
pub fn scan_models(
    family: Family,
    budget: f64,
    x_i: usize,
    b_range: RangeInclusive<u32>,
    mode: CountMode,
) -> Vec<ScanCandidate> {
    let bs: Vec<u32> = b_range.filter(|&b| b > 0).collect();
    let picks = par::map(&bs, |&b| {
        // effective complexity grows with R_E at fixed depth, so the first
        // feasible pair in descending order is the maximum
        let (r, n) = (1, 0);
        let floor = evaluate(family, b, r, n, x_i, mode)?;
        if floor.report.effective_kop_per_pixel > budget {
            return None;
        }
        ratios_descending(b)
            .filter_map(|(r, n)| evaluate(family, b, r, n, x_i, mode))
            .find(|c| c.report.effective_kop_per_pixel <= budget)
    });
    picks.into_iter().flatten().collect()
}

/// [`scan_models`] ordered by a caller-supplied quality proxy, best first.
/// Ties keep ascending `B`.
pub fn scan_models_ranked(
    family: Family,
    budget: f64,
    x_i: usize,
    b_range: RangeInclusive<u32>,
    mode: CountMode,
    proxy: impl Fn(&ScanCandidate) -> f64,
) -> Vec<(f64, ScanCandidate)> {
    let mut ranked: Vec<(f64, ScanCandidate)> =
        scan_models(family, budget, x_i, b_range, mode).into_iter().map(|c| (proxy(&c), c)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descending_ratio_order() {
        let v: Vec<f64> = ratios_descending(3).map(|(r, n)| r as f64 + n as f64 / 3.0).collect();
        assert_eq!(v.len(), 1 + 3 * 3);
        assert!(v.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(v[0], 4.0);
        assert_eq!(*v.last().unwrap(), 1.0);
    }

    #[test]
    fn unlimited_budget_caps_at_four() {
        let c = scan_models(Family::Dn, f64::INFINITY, 128, 1..=6, CountMode::Hardware);
        assert_eq!(c.len(), 6);
        assert!(c.iter().all(|c| c.expansion_ratio == 4.0));
    }

    #[test]
    fn tiny_budget_is_empty() {
        assert!(scan_models(Family::SR2, 0.001, 128, 1..=8, CountMode::Hardware).is_empty());
    }

    #[test]
    fn larger_budget_never_shrinks_a_pick() {
        let lo = scan_models(Family::SR2, 164.8, 128, 1..=30, CountMode::Hardware);
        let hi = scan_models(Family::SR2, 329.6, 128, 1..=30, CountMode::Hardware);
        for c in &lo {
            let h = hi.iter().find(|h| h.b == c.b).expect("B stays feasible");
            assert!(h.expansion_ratio >= c.expansion_ratio);
        }
        assert!(hi.len() >= lo.len());
    }

    #[test]
    fn ranking_uses_the_proxy() {
        let ranked = scan_models_ranked(Family::Dn, 200.0, 128, 1..=5, CountMode::Hardware, |c| {
            c.b as f64 * c.expansion_ratio
        });
        assert!(ranked.windows(2).all(|w| w[0].0 >= w[1].0));
    }
}
