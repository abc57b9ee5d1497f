//! Hard-sphere pressure laws, their potential, and the renormalization
//! functions used by the relative energy bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::quad;

/// Relative tolerance of the adaptive quadrature behind the potential.
pub const QUAD_TOL: f64 = 1e-12;
/// Node count of the cached potential table.
pub const TABLE_NODES: usize = 2048;
/// Fraction of the maximal density below which the series expansion is used.
pub const SMALL_Z: f64 = 1e-3;
/// Evaluations are rejected at or above `rho_bar * (1 - CEILING)`.
pub const CEILING: f64 = 1e-12;

const SERIES_TERMS: usize = 16;

/// Equation of state variants, as written in study configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum LawSpec {
    Power { a: f64, gamma: f64, beta: f64, rho_bar: f64 },
    Cs {
        #[serde(rename = "kT")]
        kt: f64,
        rho_bar: f64,
    },
}

impl LawSpec {
    pub fn build(&self) -> Result<PressureLaw> {
        match *self {
            LawSpec::Power { a, gamma, beta, rho_bar } => PressureLaw::power(a, gamma, beta, rho_bar),
            LawSpec::Cs { kt, rho_bar } => PressureLaw::carnahan_starling(kt, rho_bar),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Variant {
    Power { a: f64, gamma: f64, beta: f64 },
    CarnahanStarling { kt: f64 },
}

/// Piecewise quintic Hermite table of the potential, in local coordinates.
#[derive(Clone, Debug)]
struct PotentialTable {
    nodes: Vec<f64>,
    coeffs: Vec<[f64; 6]>,
}

/// Singular pressure law on `[0, rho_bar)` with its potential
/// `P(s) = s * ∫_{rho_bar/2}^s p(z)/z² dz`.
#[derive(Clone, Debug)]
pub struct PressureLaw {
    rho_bar: f64,
    variant: Variant,
    /// Series `p(z)/z² = Σ coef z^exp` valid for small z.
    series: Vec<(f64, f64)>,
    z_switch: f64,
    /// `∫_{rho_bar/2}^{z_switch} p/z²`.
    i_switch: f64,
    table: PotentialTable,
}

impl PressureLaw {
    /// `p(s) = a s^γ / (rho_bar - s)^β`.
    pub fn power(a: f64, gamma: f64, beta: f64, rho_bar: f64) -> Result<Self> {
        if !(a > 0.0 && gamma >= 1.0 && rho_bar > 0.0) || !(a.is_finite() && gamma.is_finite()) {
            return Err(Error::Parameter(format!(
                "power law needs a > 0, gamma >= 1, rho_bar > 0 (got a={a}, gamma={gamma}, rho_bar={rho_bar})"
            )));
        }
        if !(beta > 2.5) || !beta.is_finite() {
            return Err(Error::Parameter(format!("pole exponent beta={beta} must exceed 5/2")));
        }
        let mut series = Vec::with_capacity(SERIES_TERMS);
        let mut binom = 1.0;
        for k in 0..SERIES_TERMS {
            let kf = k as f64;
            series.push((a * binom * rho_bar.powf(-beta - kf), gamma - 2.0 + kf));
            binom *= (beta + kf) / (kf + 1.0);
        }
        Self::assemble(rho_bar, Variant::Power { a, gamma, beta }, series)
    }

    /// `p(s) = kT s (1 + η + η² − η³)/(1 − η)³` with `η = s/rho_bar`.
    pub fn carnahan_starling(kt: f64, rho_bar: f64) -> Result<Self> {
        if !(kt > 0.0 && rho_bar > 0.0) || !kt.is_finite() {
            return Err(Error::Parameter(format!("Carnahan-Starling needs kT > 0, rho_bar > 0 (got {kt}, {rho_bar})")));
        }
        // Compressibility factor Σ (n² + 3n) η^n.
        let series = (0..SERIES_TERMS)
            .map(|n| {
                let nf = n as f64;
                let virial = if n == 0 { 1.0 } else { nf * nf + 3.0 * nf };
                (kt * virial / rho_bar.powi(n as i32), nf - 1.0)
            })
            .collect();
        Self::assemble(rho_bar, Variant::CarnahanStarling { kt }, series)
    }

    fn assemble(rho_bar: f64, variant: Variant, series: Vec<(f64, f64)>) -> Result<Self> {
        let mut law = PressureLaw {
            rho_bar,
            variant,
            series,
            z_switch: SMALL_Z * rho_bar,
            i_switch: 0.0,
            table: PotentialTable { nodes: Vec::new(), coeffs: Vec::new() },
        };
        law.i_switch = law.integral_quad(0.5 * rho_bar, law.z_switch)?;
        law.table = law.build_table()?;
        Ok(law)
    }

    pub fn rho_bar(&self) -> f64 {
        self.rho_bar
    }

    /// Pole exponent: `lim p(s)(rho_bar − s)^β` is finite and positive.
    pub fn beta(&self) -> f64 {
        match self.variant {
            Variant::Power { beta, .. } => beta,
            Variant::CarnahanStarling { .. } => 3.0,
        }
    }

    pub fn spec(&self) -> LawSpec {
        match self.variant {
            Variant::Power { a, gamma, beta } => LawSpec::Power { a, gamma, beta, rho_bar: self.rho_bar },
            Variant::CarnahanStarling { kt } => LawSpec::Cs { kt, rho_bar: self.rho_bar },
        }
    }

    /// Largest density accepted by any evaluation.
    pub fn ceiling(&self) -> f64 {
        self.rho_bar * (1.0 - CEILING)
    }

    fn check(&self, s: f64, open_left: bool) -> Result<()> {
        let ok = if open_left { s > 0.0 } else { s >= 0.0 } && s < self.ceiling();
        if ok {
            Ok(())
        } else {
            let left = if open_left { "(0" } else { "[0" };
            Err(Error::Domain { value: s, range: format!("{left}, {})", self.rho_bar) })
        }
    }

    fn p_raw(&self, s: f64) -> f64 {
        match self.variant {
            Variant::Power { a, gamma, beta } => a * s.powf(gamma) * (self.rho_bar - s).powf(-beta),
            Variant::CarnahanStarling { kt } => {
                let eta = s / self.rho_bar;
                let d = 1.0 - eta;
                kt * s * (1.0 + eta + eta * eta - eta * eta * eta) / (d * d * d)
            }
        }
    }

    fn dp_raw(&self, s: f64) -> (f64, f64) {
        match self.variant {
            Variant::Power { a, gamma, beta } => {
                let d = self.rho_bar - s;
                let db = d.powf(-beta);
                let first = a * db * (gamma * s.powf(gamma - 1.0) + beta * s.powf(gamma) / d);
                let second = a
                    * db
                    * (gamma * (gamma - 1.0) * s.powf(gamma - 2.0)
                        + 2.0 * gamma * beta * s.powf(gamma - 1.0) / d
                        + beta * (beta + 1.0) * s.powf(gamma) / (d * d));
                (first, second)
            }
            Variant::CarnahanStarling { kt } => {
                let e = s / self.rho_bar;
                let d = 1.0 - e;
                let n = e + e * e + e * e * e - e * e * e * e;
                let n1 = 1.0 + 2.0 * e + 3.0 * e * e - 4.0 * e * e * e;
                let n2 = 2.0 + 6.0 * e - 12.0 * e * e;
                let d3 = d * d * d;
                let g1 = n1 / d3 + 3.0 * n / (d3 * d);
                let g2 = n2 / d3 + 6.0 * n1 / (d3 * d) + 12.0 * n / (d3 * d * d);
                (kt * g1, kt * g2 / self.rho_bar)
            }
        }
    }

    /// Pressure `p(s)` for `0 <= s < rho_bar`.
    pub fn pressure(&self, s: f64) -> Result<f64> {
        self.check(s, false)?;
        Ok(if s == 0.0 { 0.0 } else { self.p_raw(s) })
    }

    /// Analytic `(p′(s), p″(s))` for `0 < s < rho_bar`.
    pub fn pressure_derivatives(&self, s: f64) -> Result<(f64, f64)> {
        self.check(s, true)?;
        Ok(self.dp_raw(s))
    }

    /// `p′(s)` alone.
    pub fn dpressure(&self, s: f64) -> Result<f64> {
        Ok(self.pressure_derivatives(s)?.0)
    }

    /// `p(z)/z²` written in terms of the distance `d = rho_bar − z` to the pole.
    fn integrand_from_pole(&self, d: f64) -> f64 {
        let z = self.rho_bar - d;
        match self.variant {
            Variant::Power { a, gamma, beta } => a * z.powf(gamma - 2.0) * d.powf(-beta),
            Variant::CarnahanStarling { kt } => {
                let eta = z / self.rho_bar;
                let x = d / self.rho_bar;
                kt * (1.0 + eta + eta * eta - eta * eta * eta) / (z * x * x * x)
            }
        }
    }

    /// `∫_lo^hi p(z)/z² dz` for `z_switch <= lo, hi`.
    fn integral_quad(&self, lo: f64, hi: f64) -> Result<f64> {
        if lo > hi {
            return Ok(-self.integral_quad(hi, lo)?);
        }
        let split = 0.75 * self.rho_bar;
        let mut total = 0.0;
        if lo < split {
            total += quad::integrate(|z| self.p_raw(z) / (z * z), lo, hi.min(split), QUAD_TOL, 0.0)?;
        }
        if hi > split {
            // Substitute z = rho_bar − e^u so the pole sits at u = −∞.
            let u_top = (self.rho_bar - lo.max(split)).ln();
            let u_bot = (self.rho_bar - hi).ln();
            total += quad::integrate(
                |u| {
                    let d = u.exp();
                    self.integrand_from_pole(d) * d
                },
                u_bot,
                u_top,
                QUAD_TOL,
                0.0,
            )?;
        }
        Ok(total)
    }

    /// `∫_lo^hi p(z)/z² dz` from the series, for `0 < lo <= hi <= z_switch`.
    fn integral_series(&self, lo: f64, hi: f64) -> f64 {
        let ratio_log = (hi / lo).ln();
        self.series
            .iter()
            .map(|&(c, e)| {
                let m = e + 1.0;
                let x = m * ratio_log;
                // lo^m (exp(m ln(hi/lo)) - 1) / m, stable as m -> 0
                let factor = if x.abs() < 1e-12 { ratio_log } else { x.exp_m1() / m };
                c * lo.powf(m) * factor
            })
            .sum()
    }

    /// `I(s) = ∫_{rho_bar/2}^s p(z)/z² dz` for `0 < s`.
    fn inner_integral(&self, s: f64) -> Result<f64> {
        if s < self.z_switch {
            Ok(self.i_switch - self.integral_series(s, self.z_switch))
        } else {
            self.integral_quad(0.5 * self.rho_bar, s)
        }
    }

    /// Potential `P(s)` by adaptive quadrature.
    pub fn potential(&self, s: f64) -> Result<f64> {
        self.check(s, false)?;
        if s == 0.0 {
            return Ok(0.0);
        }
        Ok(s * self.inner_integral(s)?)
    }

    /// `(P, P′, P″)` evaluated directly from the definition.
    pub fn potential_exact_derivs(&self, s: f64) -> Result<(f64, f64, f64)> {
        self.check(s, true)?;
        let i = self.inner_integral(s)?;
        let p = self.p_raw(s);
        let (dp, _) = self.dp_raw(s);
        Ok((s * i, i + p / s, dp / s))
    }

    fn build_table(&self) -> Result<PotentialTable> {
        let rb = self.rho_bar;
        let half = TABLE_NODES / 2;
        let lo = self.z_switch;
        let knee = 0.9 * rb;
        let top = self.ceiling();
        let mut nodes = Vec::with_capacity(TABLE_NODES);
        for i in 0..half {
            nodes.push(lo + (knee - lo) * i as f64 / half as f64);
        }
        // Geometric in the distance to the pole above the knee.
        let (d0, d1) = ((rb - knee).ln(), (rb - top).ln());
        for i in 0..(TABLE_NODES - half) {
            let t = i as f64 / (TABLE_NODES - half - 1) as f64;
            nodes.push(rb - (d0 + (d1 - d0) * t).exp());
        }
        let pieces: Vec<Result<f64>> =
            par::map_range(nodes.len() - 1, |i| self.integral_quad(nodes[i], nodes[i + 1]));
        let pieces: Vec<f64> = pieces.into_iter().collect::<Result<_>>()?;
        // Anchor at the node nearest rho_bar/2 and accumulate outwards.
        let anchor = nodes.partition_point(|&x| x < 0.5 * rb).min(nodes.len() - 1);
        let mut inner = vec![0.0; nodes.len()];
        inner[anchor] = self.integral_quad(0.5 * rb, nodes[anchor])?;
        for i in anchor + 1..nodes.len() {
            inner[i] = inner[i - 1] + pieces[i - 1];
        }
        for i in (0..anchor).rev() {
            inner[i] = inner[i + 1] - pieces[i];
        }
        let vals: Vec<[f64; 3]> = nodes
            .iter()
            .zip(&inner)
            .map(|(&s, &i)| {
                let (dp, _) = self.dp_raw(s);
                [s * i, i + self.p_raw(s) / s, dp / s]
            })
            .collect();
        let coeffs = (0..nodes.len() - 1)
            .map(|k| {
                let h = nodes[k + 1] - nodes[k];
                let [f0, d0, s0] = vals[k];
                let [f1, d1, s1] = vals[k + 1];
                let c0 = f0;
                let c1 = h * d0;
                let c2 = 0.5 * h * h * s0;
                let a = f1 - (c0 + c1 + c2);
                let b = h * d1 - (c1 + 2.0 * c2);
                let c = h * h * s1 - 2.0 * c2;
                [c0, c1, c2, 10.0 * a - 4.0 * b + 0.5 * c, -15.0 * a + 7.0 * b - c, 6.0 * a - 3.0 * b + 0.5 * c]
            })
            .collect();
        Ok(PotentialTable { nodes, coeffs })
    }

    /// `(P, P′, P″)` from the cached table (series below the switch point).
    pub fn potential_cached(&self, s: f64) -> Result<(f64, f64, f64)> {
        self.check(s, true)?;
        if s < self.z_switch {
            let i = self.i_switch - self.integral_series(s, self.z_switch);
            let (dp, _) = self.dp_raw(s);
            return Ok((s * i, i + self.p_raw(s) / s, dp / s));
        }
        let nodes = &self.table.nodes;
        let k = nodes.partition_point(|&x| x <= s).saturating_sub(1).min(nodes.len() - 2);
        let h = nodes[k + 1] - nodes[k];
        let t = (s - nodes[k]) / h;
        let c = &self.table.coeffs[k];
        let f = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
        let df = c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])));
        let d2f = 2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]));
        Ok((f, df / h, d2f / (h * h)))
    }

    /// Potential value from the cache; `P(0) = 0`.
    pub fn potential_fast(&self, s: f64) -> Result<f64> {
        if s == 0.0 {
            return Ok(0.0);
        }
        Ok(self.potential_cached(s)?.0)
    }

    /// Bregman gap `P(ρ) − P(r) − P′(r)(ρ − r)`.
    pub fn relative_potential(&self, rho: f64, r: f64) -> Result<f64> {
        self.check(rho, false)?;
        self.check(r, true)?;
        if rho == r {
            return Ok(0.0);
        }
        if (rho - r).abs() < 1e-2 * self.rho_bar {
            // Integral remainder avoids cancellation for nearby arguments.
            let v = quad::integrate(
                |z| (rho - z) * self.dp_raw(z).0 / z,
                r,
                rho,
                QUAD_TOL,
                0.0,
            )?;
            return Ok(v.max(0.0));
        }
        let (pr, dpr, _) = self.potential_cached(r)?;
        let g = self.potential_fast(rho)? - pr - dpr * (rho - r);
        Ok(g.max(0.0))
    }

    /// `p(ρ) − p(r) − p′(r)(ρ − r)`.
    pub fn pressure_gap(&self, rho: f64, r: f64) -> Result<f64> {
        let (dpr, _) = self.pressure_derivatives(r)?;
        self.check(rho, false)?;
        if (rho - r).abs() < 1e-2 * self.rho_bar {
            return quad::integrate(|z| (rho - z) * self.dp_raw(z).1, r, rho, QUAD_TOL, 0.0);
        }
        Ok(self.pressure(rho)? - self.pressure(r)? - dpr * (rho - r))
    }
}

/// Maximal residuals of the potential identities on a sample set.
#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub first_identity: f64,
    pub second_identity: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Checks `P′s − P = p` and `P″ = p′/s` (relative) using the cached table.
pub fn potential_identities_check(law: &PressureLaw, samples: &[f64], tol: f64) -> Result<IdentityReport> {
    let rows: Vec<Result<(f64, f64)>> = par::map_slice(samples, |&s| {
        let (pp, dpp, d2pp) = law.potential_cached(s)?;
        let p = law.pressure(s)?;
        let dp = law.dpressure(s)?;
        let first = (dpp * s - pp - p).abs() / p.abs().max(f64::MIN_POSITIVE);
        let second = (d2pp - dp / s).abs() / (dp / s).abs();
        Ok((first, second))
    });
    let mut first_identity: f64 = 0.0;
    let mut second_identity: f64 = 0.0;
    for row in rows {
        let (a, b) = row?;
        first_identity = first_identity.max(a);
        second_identity = second_identity.max(b);
    }
    Ok(IdentityReport { first_identity, second_identity, tol, pass: first_identity < tol && second_identity < tol })
}

/// Explicit constants for the three-branch gap bounds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Certificate {
    pub alpha0: f64,
    pub alpha1: f64,
    pub c_low: f64,
    pub c_up: f64,
}

/// Worst slack of each branch inequality over a sample grid (nonnegative means satisfied).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BranchSlack {
    pub gap_middle: f64,
    pub gap_low: f64,
    pub gap_high: f64,
    pub pgap_middle: f64,
    pub pgap_low: f64,
    pub pgap_high: f64,
    pub potential_high_floor: f64,
}

impl BranchSlack {
    pub fn holds(&self) -> bool {
        self.gap_middle >= 0.0
            && self.gap_low >= 0.0
            && self.gap_high >= 0.0
            && self.pgap_middle >= 0.0
            && self.pgap_low >= 0.0
            && self.pgap_high >= 0.0
            && self.potential_high_floor > 0.0
    }
}

/// Density samples covering all three branches for a given `alpha1`.
pub fn branch_samples(law: &PressureLaw, alpha1: f64, n: usize) -> Vec<f64> {
    let rb = law.rho_bar();
    let edge = (n / 10).max(4);
    let mid = n - 2 * edge;
    let mut out = Vec::with_capacity(n);
    for i in 0..edge {
        out.push(alpha1 * i as f64 / (edge - 1) as f64);
    }
    for i in 0..mid {
        out.push(alpha1 + (rb - 2.0 * alpha1) * i as f64 / (mid - 1) as f64);
    }
    let (d0, d1) = (alpha1.ln(), (rb - law.ceiling()).ln() + 1.0);
    for i in 0..edge {
        let t = i as f64 / (edge - 1) as f64;
        out.push(rb - (d0 + (d1 - d0) * t).exp());
    }
    out
}

/// Reference densities on `[alpha0, rho_bar − alpha0]`.
pub fn reference_samples(law: &PressureLaw, alpha0: f64, n: usize) -> Vec<f64> {
    let rb = law.rho_bar();
    (0..n).map(|j| alpha0 + (rb - 2.0 * alpha0) * j as f64 / (n - 1) as f64).collect()
}

struct PairStats {
    slack: BranchSlack,
    c_low: f64,
    c_up: f64,
}

fn pair_stats(law: &PressureLaw, alpha1: f64, c_low: f64, c_up: f64, rhos: &[f64], rs: &[f64]) -> Result<PairStats> {
    let rb = law.rho_bar();
    let rows: Vec<Result<PairStats>> = par::map_slice(rs, |&r| {
        let (dpr, _) = law.pressure_derivatives(r)?;
        let pr = law.pressure(r)?;
        let mut st = PairStats {
            slack: BranchSlack {
                gap_middle: f64::INFINITY,
                gap_low: f64::INFINITY,
                gap_high: f64::INFINITY,
                pgap_middle: f64::INFINITY,
                pgap_low: f64::INFINITY,
                pgap_high: f64::INFINITY,
                potential_high_floor: f64::INFINITY,
            },
            c_low: f64::INFINITY,
            c_up: 0.0,
        };
        for &rho in rhos {
            let gap = law.relative_potential(rho, r)?;
            let pgap = law.pressure_gap(rho, r)?;
            let sq = (rho - r) * (rho - r);
            let s = &mut st.slack;
            if rho <= alpha1 {
                s.gap_low = s.gap_low.min(gap - 0.5 * pr);
                s.pgap_low = s.pgap_low.min(1.0 + dpr * r - pr - pgap);
            } else if rho >= rb - alpha1 {
                let pot = law.potential_fast(rho)?;
                s.gap_high = s.gap_high.min(gap - 0.5 * pot);
                s.potential_high_floor = s.potential_high_floor.min(0.5 * pot - 1.0);
                s.pgap_high = s.pgap_high.min(2.0 * law.pressure(rho)? - pgap);
            }
            // Middle constants are fitted on the closed branch; the extremes sit on its edges.
            if rho >= alpha1 && rho <= rb - alpha1 {
                let s = &mut st.slack;
                s.gap_middle = s.gap_middle.min(gap - c_low * sq);
                s.pgap_middle = s.pgap_middle.min(c_up * sq - pgap);
                if sq > 0.0 {
                    st.c_low = st.c_low.min(gap / sq);
                    st.c_up = st.c_up.max(pgap / sq);
                }
            }
        }
        Ok(st)
    });
    let mut acc: Option<PairStats> = None;
    for row in rows {
        let row = row?;
        acc = Some(match acc {
            None => row,
            Some(a) => PairStats {
                slack: BranchSlack {
                    gap_middle: a.slack.gap_middle.min(row.slack.gap_middle),
                    gap_low: a.slack.gap_low.min(row.slack.gap_low),
                    gap_high: a.slack.gap_high.min(row.slack.gap_high),
                    pgap_middle: a.slack.pgap_middle.min(row.slack.pgap_middle),
                    pgap_low: a.slack.pgap_low.min(row.slack.pgap_low),
                    pgap_high: a.slack.pgap_high.min(row.slack.pgap_high),
                    potential_high_floor: a.slack.potential_high_floor.min(row.slack.potential_high_floor),
                },
                c_low: a.c_low.min(row.c_low),
                c_up: a.c_up.max(row.c_up),
            },
        });
    }
    acc.ok_or_else(|| Error::Certificate("empty sample set".into()))
}

/// Evaluates the branch inequalities of `cert` on an `n × n` grid.
pub fn certificate_slack(law: &PressureLaw, cert: &Certificate, n: usize) -> Result<BranchSlack> {
    let rhos = branch_samples(law, cert.alpha1, n);
    let rs = reference_samples(law, cert.alpha0, n);
    Ok(pair_stats(law, cert.alpha1, cert.c_low, cert.c_up, &rhos, &rs)?.slack)
}

const CERT_SAMPLES: usize = 500;
const CERT_MARGIN: f64 = 0.9;

/// Searches `alpha1 ∈ {alpha0 / 2^k}` for explicit constants of the pointwise bounds.
pub fn pointwise_bounds_certificate(law: &PressureLaw, alpha0: f64) -> Result<Certificate> {
    let rb = law.rho_bar();
    if !(alpha0 > 0.0 && alpha0 < 0.5 * rb) {
        return Err(Error::Certificate(format!("alpha0={alpha0} must lie in (0, rho_bar/2)")));
    }
    let rs = reference_samples(law, alpha0, CERT_SAMPLES);
    let rs_fine = reference_samples(law, alpha0, 2 * CERT_SAMPLES);
    for k in 1..40 {
        let alpha1 = alpha0 / 2f64.powi(k);
        let rhos = branch_samples(law, alpha1, CERT_SAMPLES);
        let fit = pair_stats(law, alpha1, 0.0, 0.0, &rhos, &rs)?;
        if !(fit.c_low > 0.0 && fit.c_low.is_finite() && fit.c_up.is_finite()) {
            continue;
        }
        let cert = Certificate { alpha0, alpha1, c_low: CERT_MARGIN * fit.c_low, c_up: fit.c_up / CERT_MARGIN };
        let coarse = pair_stats(law, alpha1, cert.c_low, cert.c_up, &rhos, &rs)?;
        if !coarse.slack.holds() {
            continue;
        }
        let fine_rhos = branch_samples(law, alpha1, 2 * CERT_SAMPLES);
        let fine = pair_stats(law, alpha1, cert.c_low, cert.c_up, &fine_rhos, &rs_fine)?;
        if fine.slack.holds() {
            return Ok(cert);
        }
    }
    Err(Error::Certificate(format!("no alpha1 below alpha0={alpha0} validated the branch bounds")))
}

/// Constant `C` in `‖ρ − r‖² <= C ∫ gap(ρ, r)`.
pub fn l2_density_control_constant(law: &PressureLaw, cert: &Certificate) -> Result<f64> {
    let rb = law.rho_bar();
    let p0 = law.pressure(cert.alpha0)?;
    if !(cert.c_low > 0.0) {
        return Err(Error::Certificate("nonpositive lower constant".into()));
    }
    Ok((2.0 * rb * rb / p0).max(1.0 / cert.c_low).max(4.0 * rb * rb))
}

/// `(‖ρ − r‖², ∫ gap)` with cell volume `dv`.
pub fn l2_control_sides(law: &PressureLaw, rho: &[f64], r: &[f64], dv: f64) -> Result<(f64, f64)> {
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for (&a, &b) in rho.iter().zip(r) {
        lhs += (a - b) * (a - b) * dv;
        rhs += law.relative_potential(a, b)? * dv;
    }
    Ok((lhs, rhs))
}

/// C¹ renormalization: zero below `rho_bar − alpha1`, `−log(rho_bar − s)` above
/// `rho_bar − alpha2`, and a convex bridge `b′ = A·t + B·t^k` in between.
#[derive(Clone, Debug)]
pub struct RenormFunction {
    rho_bar: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Optional truncation level `α` for `b_α`.
    pub truncation: Option<f64>,
    bridge_exp: f64,
    bridge_lin: f64,
    /// Fitted admissibility constant `c` in `|b′|^{5/2} + |b|^{5/2} <= c(1 + p)`.
    pub admissibility: f64,
}

impl RenormFunction {
    fn raw(&self, s: f64) -> (f64, f64) {
        let x0 = self.rho_bar - self.alpha1;
        let x1 = self.rho_bar - self.alpha2;
        if s <= x0 {
            (0.0, 0.0)
        } else if s >= x1 {
            let d = self.rho_bar - s;
            (-d.ln(), 1.0 / d)
        } else {
            let w = x1 - x0;
            let t = (s - x0) / w;
            let a = self.bridge_lin;
            let bk = 1.0 / self.alpha2 - a;
            let k = self.bridge_exp;
            (w * (0.5 * a * t * t + bk * t.powf(k + 1.0) / (k + 1.0)), a * t + bk * t.powf(k))
        }
    }

    /// `(b(s), b′(s))`, honouring the truncation if set.
    pub fn eval(&self, s: f64) -> (f64, f64) {
        match self.truncation {
            Some(a) if s > self.rho_bar - a => (self.raw(self.rho_bar - a).0, 0.0),
            _ => self.raw(s),
        }
    }

    pub fn b(&self, s: f64) -> f64 {
        self.eval(s).0
    }

    pub fn db(&self, s: f64) -> f64 {
        self.eval(s).1
    }

    /// Copy truncated at level `alpha`.
    pub fn truncated(&self, alpha: f64) -> Self {
        RenormFunction { truncation: Some(alpha), ..self.clone() }
    }

    pub fn rho_bar(&self) -> f64 {
        self.rho_bar
    }
}

/// Assembles `b` for the given inner threshold and divergence bound.
pub fn renorm_b(law: &PressureLaw, alpha1: f64, m_div: f64) -> Result<RenormFunction> {
    let rb = law.rho_bar();
    if !(alpha1 > 0.0 && alpha1 < rb) || !(m_div >= 0.0) {
        return Err(Error::Certificate(format!("renormalization needs 0 < alpha1 < rho_bar and M_div >= 0 (got {alpha1}, {m_div})")));
    }
    let mut alpha2 = (0.5 * alpha1).min((-8.0 * m_div).exp());
    // Shrink until the bridge can be convex: b′ must climb from 0 to 1/α₂ while
    // b climbs to −log α₂, which needs (α₁ − α₂)/α₂ >= 2(−log α₂).
    let mut guard = 0;
    while alpha2 >= 1.0 || (alpha1 - alpha2) / alpha2 < 2.0 * (-alpha2.ln()) {
        alpha2 *= 0.5;
        guard += 1;
        if guard > 200 {
            return Err(Error::Certificate("no admissible alpha2".into()));
        }
    }
    let lift = -alpha2.ln();
    let w = alpha1 - alpha2;
    // The linear part carries 90% of the lift; the power part supplies the end slope 1/α₂.
    let bridge_lin = 0.9 * 2.0 * lift / w;
    let bridge_exp = (1.0 / alpha2 - bridge_lin) * w / (0.1 * lift) - 1.0;
    let mut b =
        RenormFunction { rho_bar: rb, alpha1, alpha2, truncation: None, bridge_exp, bridge_lin, admissibility: 0.0 };
    b.admissibility = admissibility_constant(law, &b)?;
    Ok(b)
}

/// Dense-grid maximum of `(|b′|^{5/2} + |b|^{5/2}) / (1 + p)` plus a monotonicity check.
pub fn admissibility_constant(law: &PressureLaw, b: &RenormFunction) -> Result<f64> {
    let rb = law.rho_bar();
    let x0 = rb - b.alpha1;
    let n = 20_000;
    let (d0, d1) = (b.alpha1.ln(), (rb - law.ceiling()).ln() + 1.0);
    let mut worst: f64 = 0.0;
    let mut prev = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let s = rb - (d0 + (d1 - d0) * t).exp();
        let s = s.max(x0);
        let (v, dv) = b.eval(s);
        if v < prev.0 - 1e-12 * v.abs().max(1.0) || dv < prev.1 - 1e-9 * dv.abs().max(1.0) {
            return Err(Error::Certificate(format!("b or b' decreases near s={s}")));
        }
        prev = (v, dv);
        let ratio = (dv.abs().powf(2.5) + v.abs().powf(2.5)) / (1.0 + law.pressure(s)?);
        if !ratio.is_finite() {
            return Err(Error::Certificate(format!("admissibility ratio not finite at s={s}")));
        }
        worst = worst.max(ratio);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_power() -> PressureLaw {
        PressureLaw::power(1.0, 2.0, 3.0, 1.0).unwrap()
    }

    #[test]
    fn rejects_weak_pole() {
        assert!(matches!(PressureLaw::power(1.0, 2.0, 2.5, 1.0), Err(Error::Parameter(_))));
        assert!(PressureLaw::power(1.0, 2.0, 2.51, 1.0).is_ok());
    }

    #[test]
    fn closed_form_values() {
        let law = unit_power();
        assert_eq!(law.pressure(0.0).unwrap(), 0.0);
        assert!((law.pressure(0.5).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(law.pressure(1.0), Err(Error::Domain { .. })));
        assert!(matches!(law.pressure(-0.1), Err(Error::Domain { .. })));
        assert!(matches!(law.pressure_derivatives(0.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn potential_anchor_and_origin() {
        for law in [unit_power(), PressureLaw::carnahan_starling(1.0, 1.0).unwrap()] {
            assert_eq!(law.potential(0.0).unwrap(), 0.0);
            assert!(law.potential(0.5).unwrap().abs() < 1e-15);
            assert!(law.potential(1e-9).unwrap().abs() < 1e-6);
        }
    }

    #[test]
    fn series_matches_quadrature_at_switch() {
        let law = PressureLaw::carnahan_starling(1.3, 0.8).unwrap();
        let z = law.z_switch;
        let a = law.integral_series(0.5 * z, z);
        let b = law.integral_quad(0.5 * z, z).unwrap();
        assert!((a - b).abs() < 1e-12 * b.abs());
    }

    #[test]
    fn cache_agrees_with_direct() {
        let law = unit_power();
        for &s in &[0.0005, 0.002, 0.3, 0.77, 0.95, 0.9999] {
            let (a, da, d2a) = law.potential_cached(s).unwrap();
            let (b, db, d2b) = law.potential_exact_derivs(s).unwrap();
            let scale = b.abs().max(1.0);
            assert!((a - b).abs() < 1e-9 * scale, "{s}: {a} vs {b}");
            assert!((da - db).abs() < 1e-8 * db.abs().max(1.0));
            assert!((d2a - d2b).abs() < 1e-6 * d2b.abs());
        }
    }

    #[test]
    fn bridge_is_c1() {
        let law = unit_power();
        let b = renorm_b(&law, 0.05, 0.3).unwrap();
        let x1 = 1.0 - b.alpha2;
        let (l, dl) = b.eval(x1 - 1e-13);
        let (r, dr) = b.eval(x1 + 1e-13);
        assert!((l - r).abs() < 1e-9 && (dl - dr).abs() < 1e-6 * dr);
        assert_eq!(b.eval(1.0 - 0.05), (0.0, 0.0));
        assert!(b.alpha2 <= (-8.0f64 * 0.3).exp());
    }
}
