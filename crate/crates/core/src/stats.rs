//! Nonparametric tests, post-hoc comparisons, normality check, effect sizes
//! and questionnaire scoring, with the special functions behind the
//! p-values.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{sum_range, Execution};

/// Largest number of nonzero differences for the exact Wilcoxon p.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("need at least 2 subjects, got {0}")]
    TooFewRows(usize),
    #[error("sample size {0} outside [3, 5000]")]
    NOutOfRange(usize),
    #[error("zero variance")]
    ZeroVariance,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("missing cell: {0}")]
    MissingCell(String),
    #[error("item {index} = {value} outside {min}..={max}")]
    ItemOutOfRange {
        index: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("expected {expected} items, got {found}")]
    WrongItemCount { expected: String, found: usize },
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

// ---------------------------------------------------------------------------
// special functions

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut sum = 1.0 / a;
    let mut term = sum;
    let mut ap = a;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    (sum.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

/// Modified Lentz evaluation of the continued fraction for Q(a, x).
fn gamma_q_fraction(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> Result<f64, StatsError> {
    if !(a > 0.0 && a.is_finite()) || !(x >= 0.0) {
        return Err(StatsError::InvalidArgument(format!(
            "gamma_q(a={a}, x={x})"
        )));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    let q = if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_fraction(a, x)
    };
    Ok(q.clamp(0.0, 1.0))
}

/// Upper tail of the chi-squared distribution.
pub fn chi2_sf(x: f64, df: f64) -> Result<f64, StatsError> {
    if !(x >= 0.0) || !(df >= 1.0 && df.is_finite()) {
        return Err(StatsError::InvalidArgument(format!(
            "chi2_sf(x={x}, df={df})"
        )));
    }
    gamma_q(df / 2.0, x / 2.0)
}

pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let q = gamma_q(0.5, x * x).unwrap_or(0.0);
    if x >= 0.0 {
        q
    } else {
        2.0 - q
    }
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z * FRAC_1_SQRT_2)
}

pub fn normal_cdf(z: f64) -> f64 {
    normal_sf(-z)
}

/// Standard normal quantile (Wichura's AS241, about 1e-16 relative).
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2_509.080_928_730_122_7 * r + 33_430.575_583_588_13) * r
            + 67_265.770_927_008_7)
            * r
            + 45_921.953_931_549_87)
            * r
            + 13_731.693_765_509_461)
            * r
            + 1_971.590_950_306_551_3)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5_226.495_278_852_545 * r + 28_729.085_735_721_943) * r
            + 39_307.895_800_092_71)
            * r
            + 21_213.794_301_586_597)
            * r
            + 5_394.196_021_424_751)
            * r
            + 687.187_007_492_057_9)
            * r
            + 42.313_330_701_600_91)
            * r
            + 1.0;
        return q * num / den;
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 0.015_198_666_563_616_457)
            * r
            + 0.148_103_976_427_480_08)
            * r
            + 0.689_767_334_985_1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 0.014_875_361_290_850_615)
            * r
            + 0.136_929_880_922_735_8)
            * r
            + 0.599_832_206_555_888)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

// ---------------------------------------------------------------------------
// ranks

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks_with_ties(values: &[f64]) -> Vec<f64> {
    rank_and_ties(values).0
}

/// Ranks plus the sizes of all tie groups of size > 1.
fn rank_and_ties(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum()
}

// ---------------------------------------------------------------------------
// results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: String,
    /// W, H, chi-squared, z or the Shapiro-Wilk W depending on `method`.
    pub statistic: f64,
    pub p_value: f64,
    pub df: Option<f64>,
    /// Cohen's d, eta squared or Kendall's W depending on `method`.
    pub effect_size: Option<f64>,
    /// Normal-approximation z where one exists.
    pub z: Option<f64>,
    /// Set when the data admit no ordering (all values tied).
    pub degenerate: bool,
}

impl TestResult {
    fn new(method: &str, statistic: f64, p_value: f64) -> Self {
        TestResult {
            method: method.to_string(),
            statistic,
            p_value: p_value.clamp(0.0, 1.0),
            df: None,
            effect_size: None,
            z: None,
            degenerate: false,
        }
    }
}

fn check_finite(values: &[f64]) -> Result<(), StatsError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank

/// Paired observations `(a, b)`; differences are `a - b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub pairs: Vec<(f64, f64)>,
}

impl PairedSample {
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self, StatsError> {
        if pairs.is_empty() {
            return Err(StatsError::InsufficientData(
                "paired sample is empty".into(),
            ));
        }
        if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        Ok(PairedSample { pairs })
    }

    pub fn from_differences(d: &[f64]) -> Result<Self, StatsError> {
        PairedSample::new(d.iter().map(|&v| (v, 0.0)).collect())
    }

    pub fn differences(&self) -> Vec<f64> {
        self.pairs.iter().map(|(a, b)| a - b).collect()
    }
}

/// Count of sign assignments whose smaller signed-rank sum is at most
/// `w2`; ranks are doubled so that every sum is an integer.
fn wilcoxon_tail_count(doubled_ranks: &[u64], w2: u64, exec: Execution) -> u64 {
    let total: u64 = doubled_ranks.iter().sum();
    let m = doubled_ranks.len() as u64;
    sum_range(exec, 1u64 << m, |mask| {
        let mut plus = 0;
        let mut bits = mask;
        while bits != 0 {
            let i = bits.trailing_zeros() as usize;
            plus += doubled_ranks[i];
            bits &= bits - 1;
        }
        u64::from(plus.min(total - plus) <= w2)
    })
}

pub fn wilcoxon_signed_rank(s: &PairedSample) -> Result<TestResult, StatsError> {
    wilcoxon_signed_rank_with(s, Execution::default())
}

pub fn wilcoxon_signed_rank_with(
    s: &PairedSample,
    exec: Execution,
) -> Result<TestResult, StatsError> {
    let all = s.differences();
    let d: Vec<f64> = all.iter().copied().filter(|&v| v != 0.0).collect();
    if d.is_empty() {
        return Err(StatsError::AllZeroDifferences);
    }
    let m = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = rank_and_ties(&abs);
    let w_plus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .fold(0.0, |a, r| a + r);
    let w_minus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v < 0.0)
        .map(|(_, r)| r)
        .fold(0.0, |a, r| a + r);
    let w = w_plus.min(w_minus);

    let mf = m as f64;
    let mu = mf * (mf + 1.0) / 4.0;
    let var = mf * (mf + 1.0) * (2.0 * mf + 1.0) / 24.0 - tie_sum(&ties) / 48.0;
    let sd = var.sqrt();

    let (p, z) = if m <= WILCOXON_EXACT_MAX {
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let w2 = (2.0 * w).round() as u64;
        let count = wilcoxon_tail_count(&doubled, w2, exec);
        let z = if sd > 0.0 { (w - mu) / sd } else { 0.0 };
        (count as f64 / (1u64 << m) as f64, z)
    } else {
        let z = if sd > 0.0 {
            -((mu - w).abs() - 0.5).max(0.0) / sd
        } else {
            0.0
        };
        ((2.0 * normal_sf(z.abs())).min(1.0), z)
    };

    let mut r = TestResult::new(
        if m <= WILCOXON_EXACT_MAX {
            "wilcoxon_exact"
        } else {
            "wilcoxon_normal"
        },
        w,
        p,
    );
    r.z = Some(z);
    r.effect_size = cohens_d_paired_diffs(&all).ok();
    Ok(r)
}

// ---------------------------------------------------------------------------
// Kruskal-Wallis

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSample {
    pub groups: Vec<Vec<f64>>,
}

impl GroupedSample {
    pub fn new(groups: Vec<Vec<f64>>) -> Result<Self, StatsError> {
        if groups.len() < 2 {
            return Err(StatsError::InsufficientData(format!(
                "need at least 2 groups, got {}",
                groups.len()
            )));
        }
        if let Some(i) = groups.iter().position(Vec::is_empty) {
            return Err(StatsError::InsufficientData(format!("group {i} is empty")));
        }
        for g in &groups {
            check_finite(g)?;
        }
        Ok(GroupedSample { groups })
    }

    pub fn n(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    fn pooled_ranks(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        let pooled: Vec<f64> = self.groups.iter().flatten().copied().collect();
        let (ranks, ties) = rank_and_ties(&pooled);
        let mut out = Vec::with_capacity(self.groups.len());
        let mut at = 0;
        for g in &self.groups {
            out.push(ranks[at..at + g.len()].to_vec());
            at += g.len();
        }
        (out, ties)
    }
}

pub fn kruskal_wallis(s: &GroupedSample) -> Result<TestResult, StatsError> {
    let k = s.groups.len();
    let n = s.n();
    if n < k + 1 {
        return Err(StatsError::InsufficientData(format!(
            "need n >= k + 1, got n = {n}, k = {k}"
        )));
    }
    let (ranks, ties) = s.pooled_ranks();
    let nf = n as f64;
    let df = (k - 1) as f64;
    let correction = 1.0 - tie_sum(&ties) / (nf.powi(3) - nf);
    if correction <= 0.0 {
        let mut r = TestResult::new("kruskal_wallis", 0.0, 1.0);
        r.df = Some(df);
        r.degenerate = true;
        return Ok(r);
    }
    let sum_sq: f64 = ranks
        .iter()
        .map(|g| g.iter().sum::<f64>().powi(2) / g.len() as f64)
        .sum();
    let h = (12.0 / (nf * (nf + 1.0)) * sum_sq - 3.0 * (nf + 1.0)) / correction;
    let h = h.max(0.0);
    let mut r = TestResult::new("kruskal_wallis", h, chi2_sf(h, df)?);
    r.df = Some(df);
    r.effect_size = Some(eta_squared_h(h, k, n));
    Ok(r)
}

/// `(H - k + 1) / (n - k)`.
pub fn eta_squared_h(h: f64, k: usize, n: usize) -> f64 {
    (h - k as f64 + 1.0) / (n as f64 - k as f64)
}

// ---------------------------------------------------------------------------
// Friedman

/// Subjects by conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedSample {
    pub rows: Vec<Vec<f64>>,
}

impl BlockedSample {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, StatsError> {
        let k = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != k) {
            return Err(StatsError::MissingCell(format!(
                "row {i} has {} cells, expected {k}",
                rows[i].len()
            )));
        }
        for r in &rows {
            check_finite(r)?;
        }
        Ok(BlockedSample { rows })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn k(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Column rank sums and the summed row tie term.
    fn rank_sums(&self) -> (Vec<f64>, f64) {
        let mut sums = vec![0.0; self.k()];
        let mut ties = 0.0;
        for row in &self.rows {
            let (r, t) = rank_and_ties(row);
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
            ties += tie_sum(&t);
        }
        (sums, ties)
    }

    fn tie_factor(&self, ties: f64) -> f64 {
        let (n, k) = (self.n() as f64, self.k() as f64);
        1.0 - ties / (n * (k.powi(3) - k))
    }
}

pub fn friedman(s: &BlockedSample) -> Result<TestResult, StatsError> {
    let (n, k) = (s.n(), s.k());
    if n < 2 {
        return Err(StatsError::TooFewRows(n));
    }
    if k < 3 {
        return Err(StatsError::InsufficientData(format!(
            "need at least 3 conditions, got {k}"
        )));
    }
    let (sums, ties) = s.rank_sums();
    let (nf, kf) = (n as f64, k as f64);
    let df = kf - 1.0;
    let correction = s.tie_factor(ties);
    if correction <= 0.0 {
        let mut r = TestResult::new("friedman", 0.0, 1.0);
        r.df = Some(df);
        r.degenerate = true;
        return Ok(r);
    }
    let ss: f64 = sums.iter().map(|r| r * r).sum();
    let chi2 = ((12.0 / (nf * kf * (kf + 1.0)) * ss - 3.0 * nf * (kf + 1.0)) / correction).max(0.0);
    let mut r = TestResult::new("friedman", chi2, chi2_sf(chi2, df)?);
    r.df = Some(df);
    // Kendall's W
    r.effect_size = Some(chi2 / (nf * df));
    Ok(r)
}

// ---------------------------------------------------------------------------
// Dunn-Sidak

/// `1 - (1 - p)^m`, never below `p` or above 1.
pub fn sidak_adjust(p: f64, m: usize) -> f64 {
    let p = p.clamp(0.0, 1.0);
    (-(m as f64 * (-p).ln_1p()).exp_m1()).clamp(p, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub a: usize,
    pub b: usize,
    pub z: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
}

fn pairwise(mean_ranks: &[f64], se: impl Fn(usize, usize) -> f64) -> Vec<PairwiseResult> {
    let k = mean_ranks.len();
    let m = k * (k - 1) / 2;
    let mut out = Vec::with_capacity(m);
    for a in 0..k {
        for b in a + 1..k {
            let s = se(a, b);
            let z = if s > 0.0 {
                (mean_ranks[a] - mean_ranks[b]) / s
            } else {
                0.0
            };
            let p_raw = (2.0 * normal_sf(z.abs())).min(1.0);
            out.push(PairwiseResult {
                a,
                b,
                z,
                p_raw,
                p_adjusted: sidak_adjust(p_raw, m),
            });
        }
    }
    out
}

/// Dunn's test on pooled ranks of independent groups.
pub fn dunn_sidak_grouped(s: &GroupedSample) -> Vec<PairwiseResult> {
    let (ranks, ties) = s.pooled_ranks();
    let n = s.n() as f64;
    let mean_ranks: Vec<f64> = ranks.iter().map(|g| mean(g)).collect();
    let base = n * (n + 1.0) / 12.0 - tie_sum(&ties) / (12.0 * (n - 1.0));
    let sizes: Vec<f64> = s.groups.iter().map(|g| g.len() as f64).collect();
    pairwise(&mean_ranks, |a, b| {
        (base * (1.0 / sizes[a] + 1.0 / sizes[b])).max(0.0).sqrt()
    })
}

/// Dunn-type comparison of mean within-subject ranks.
pub fn dunn_sidak_blocked(s: &BlockedSample) -> Vec<PairwiseResult> {
    let (sums, ties) = s.rank_sums();
    let (n, k) = (s.n() as f64, s.k() as f64);
    let mean_ranks: Vec<f64> = sums.iter().map(|r| r / n).collect();
    let se = (k * (k + 1.0) / (6.0 * n) * s.tie_factor(ties))
        .max(0.0)
        .sqrt();
    pairwise(&mean_ranks, |_, _| se)
}

// ---------------------------------------------------------------------------
// Shapiro-Wilk (Royston)

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

pub fn shapiro_wilk(values: &[f64]) -> Result<TestResult, StatsError> {
    let n = values.len();
    if !(3..=5000).contains(&n) {
        return Err(StatsError::NOutOfRange(n));
    }
    check_finite(values)?;
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    if x[n - 1] - x[0] <= 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let nn2 = n / 2;
    let an = n as f64;

    // coefficients for the lower half, stored positive
    let mut a = vec![0.0; nn2];
    if n == 3 {
        a[0] = FRAC_1_SQRT_2;
    } else {
        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let m: Vec<f64> = (1..=nn2)
            .map(|i| normal_quantile((i as f64 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
                / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
                .sqrt();
            a[1] = a2;
            (2, fac)
        } else {
            (
                1,
                ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt(),
            )
        };
        a[0] = a1;
        for i in first..nn2 {
            a[i] = -m[i] / fac;
        }
    }

    let xm = mean(&x);
    let ssq: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let num: f64 = (0..nn2).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (num * num / ssq).min(1.0);

    let p = if n == 3 {
        let pi6 = 6.0 / PI;
        let stqr = PI / 3.0;
        (pi6 * (w.sqrt().asin() - stqr)).max(0.0)
    } else {
        let w1 = 1.0 - w;
        let y = w1.ln();
        let lnn = an.ln();
        if n <= 11 {
            const G: [f64; 2] = [-2.273, 0.459];
            const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
            const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
            let gamma = poly(&G, an);
            if y >= gamma {
                1e-99
            } else {
                let y = -(gamma - y).ln();
                let m = poly(&C3, an);
                let s = poly(&C4, an).exp();
                normal_sf((y - m) / s)
            }
        } else {
            const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
            const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
            let m = poly(&C5, lnn);
            let s = poly(&C6, lnn).exp();
            normal_sf((y - m) / s)
        }
    };
    Ok(TestResult::new("shapiro_wilk", w, p))
}

// ---------------------------------------------------------------------------
// effect sizes

/// Mean over standard deviation of paired differences.
pub fn cohens_d_paired_diffs(d: &[f64]) -> Result<f64, StatsError> {
    if d.len() < 2 {
        return Err(StatsError::InsufficientData(
            "need at least 2 differences".into(),
        ));
    }
    check_finite(d)?;
    let sd = sample_var(d).sqrt();
    if !(sd > 0.0) {
        return Err(StatsError::ZeroVariance);
    }
    Ok(mean(d) / sd)
}

pub fn cohens_d_paired(s: &PairedSample) -> Result<f64, StatsError> {
    cohens_d_paired_diffs(&s.differences())
}

/// `(mean(a) - mean(b)) / pooled sd`, n - 1 denominators.
pub fn cohens_d_two_group(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::InsufficientData(
            "need at least 2 values per group".into(),
        ));
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled =
        (((na - 1.0) * sample_var(a) + (nb - 1.0) * sample_var(b)) / (na + nb - 2.0)).sqrt();
    if !(pooled > 0.0) {
        return Err(StatsError::ZeroVariance);
    }
    Ok((mean(a) - mean(b)) / pooled)
}

// ---------------------------------------------------------------------------
// questionnaires

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionnaireKind {
    #[serde(rename = "SUS")]
    Sus,
    #[serde(rename = "NASA_TLX")]
    NasaTlx,
    #[serde(rename = "HRI_TRUST")]
    HriTrust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireResponse {
    pub kind: QuestionnaireKind,
    pub items: Vec<f64>,
}

fn check_items(items: &[f64], min: f64, max: f64) -> Result<(), StatsError> {
    for (index, &value) in items.iter().enumerate() {
        if !(value >= min && value <= max) {
            return Err(StatsError::ItemOutOfRange {
                index,
                value,
                min,
                max,
            });
        }
    }
    Ok(())
}

/// SUS and NASA-TLX normalized to [0, 1]; trust reported on its 1..5 scale.
pub fn score_questionnaire(r: &QuestionnaireResponse) -> Result<f64, StatsError> {
    let items = &r.items;
    match r.kind {
        QuestionnaireKind::Sus => {
            if items.len() != 10 {
                return Err(StatsError::WrongItemCount {
                    expected: "10".into(),
                    found: items.len(),
                });
            }
            check_items(items, 1.0, 5.0)?;
            let raw: f64 = items
                .iter()
                .enumerate()
                .map(|(i, &v)| if i % 2 == 0 { v - 1.0 } else { 5.0 - v })
                .sum();
            Ok(raw * 2.5 / 100.0)
        }
        QuestionnaireKind::NasaTlx => {
            if items.len() != 6 {
                return Err(StatsError::WrongItemCount {
                    expected: "6".into(),
                    found: items.len(),
                });
            }
            check_items(items, 0.0, 100.0)?;
            Ok(mean(items) / 100.0)
        }
        QuestionnaireKind::HriTrust => {
            if items.is_empty() {
                return Err(StatsError::WrongItemCount {
                    expected: "at least 1".into(),
                    found: 0,
                });
            }
            check_items(items, 1.0, 5.0)?;
            Ok(mean(items))
        }
    }
}

// ---------------------------------------------------------------------------
// long-format data and the analysis battery

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub subject: String,
    pub condition: String,
    pub phase: String,
    pub measure: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LongTable {
    pub rows: Vec<LongRow>,
}

impl LongTable {
    /// CSV `subject,condition,phase,measure,value`.
    pub fn from_csv_reader<R: io::Read>(r: R) -> Result<Self, StatsError> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(r);
        let headers = rdr
            .headers()
            .map_err(|e| StatsError::Parse(format!("row 1: {e}")))?
            .clone();
        let expected = ["subject", "condition", "phase", "measure", "value"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(StatsError::Parse(
                "row 1: expected header subject,condition,phase,measure,value".into(),
            ));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| StatsError::Parse(format!("row {row}: {e}")))?;
            let value = rec
                .get(4)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    StatsError::Parse(format!(
                        "row {row}: bad value `{}`",
                        rec.get(4).unwrap_or("")
                    ))
                })?;
            rows.push(LongRow {
                subject: rec[0].to_string(),
                condition: rec[1].to_string(),
                phase: rec[2].to_string(),
                measure: rec[3].to_string(),
                value,
            });
        }
        Ok(LongTable { rows })
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, StatsError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn filter(&self, measure: Option<&str>, phase: Option<&str>) -> LongTable {
        LongTable {
            rows: self
                .rows
                .iter()
                .filter(|r| {
                    measure.is_none_or(|m| r.measure == m) && phase.is_none_or(|p| r.phase == p)
                })
                .cloned()
                .collect(),
        }
    }

    fn distinct(&self, f: impl Fn(&LongRow) -> &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.iter().any(|x| x == f(r)) {
                out.push(f(r).to_string());
            }
        }
        out
    }

    pub fn conditions(&self) -> Vec<String> {
        self.distinct(|r| &r.condition)
    }

    /// Values per condition, in first-appearance order.
    pub fn grouped(&self) -> Result<(Vec<String>, GroupedSample), StatsError> {
        let names = self.conditions();
        let groups = names
            .iter()
            .map(|c| {
                self.rows
                    .iter()
                    .filter(|r| &r.condition == c)
                    .map(|r| r.value)
                    .collect()
            })
            .collect();
        Ok((names, GroupedSample::new(groups)?))
    }

    /// Subjects by conditions; every cell must hold exactly one value.
    pub fn blocked(&self) -> Result<(Vec<String>, BlockedSample), StatsError> {
        let conditions = self.conditions();
        let subjects = self.distinct(|r| &r.subject);
        let mut cells: BTreeMap<(&str, &str), f64> = BTreeMap::new();
        for r in &self.rows {
            if cells.insert((&r.subject, &r.condition), r.value).is_some() {
                return Err(StatsError::MissingCell(format!(
                    "subject {} has several values for condition {}",
                    r.subject, r.condition
                )));
            }
        }
        let mut rows = Vec::with_capacity(subjects.len());
        for s in &subjects {
            let mut row = Vec::with_capacity(conditions.len());
            for c in &conditions {
                let v = cells.get(&(s.as_str(), c.as_str())).ok_or_else(|| {
                    StatsError::MissingCell(format!("subject {s}, condition {c}"))
                })?;
                row.push(*v);
            }
            rows.push(row);
        }
        Ok((conditions, BlockedSample::new(rows)?))
    }

    /// Pairs each subject's values in the two phases, per condition.
    pub fn paired_by_phase(&self) -> Result<Vec<(String, PairedSample)>, StatsError> {
        let phases = self.distinct(|r| &r.phase);
        if phases.len() != 2 {
            return Err(StatsError::InsufficientData(format!(
                "paired design needs exactly 2 phases, found {}",
                phases.len()
            )));
        }
        let mut out = Vec::new();
        for c in self.conditions() {
            let sub: Vec<&LongRow> = self.rows.iter().filter(|r| r.condition == c).collect();
            let mut pairs = Vec::new();
            let subjects: Vec<&str> = {
                let mut s: Vec<&str> = Vec::new();
                for r in &sub {
                    if !s.contains(&r.subject.as_str()) {
                        s.push(&r.subject);
                    }
                }
                s
            };
            for s in subjects {
                let get = |p: &str| {
                    let hits: Vec<f64> = sub
                        .iter()
                        .filter(|r| r.subject == s && r.phase == p)
                        .map(|r| r.value)
                        .collect();
                    match hits.as_slice() {
                        [v] => Ok(*v),
                        _ => Err(StatsError::MissingCell(format!(
                            "subject {s}, condition {c}, phase {p}"
                        ))),
                    }
                };
                pairs.push((get(&phases[0])?, get(&phases[1])?));
            }
            out.push((c.clone(), PairedSample::new(pairs)?));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Wilcoxon,
    Kruskal,
    Friedman,
    Shapiro,
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub statistic: f64,
    pub df: Option<f64>,
    pub p: f64,
    pub effect_size: Option<f64>,
}

impl From<&TestResult> for ResultRow {
    fn from(r: &TestResult) -> Self {
        ResultRow {
            method: r.method.clone(),
            statistic: r.statistic,
            df: r.df,
            p: r.p_value,
            effect_size: r.effect_size,
        }
    }
}

fn posthoc_rows(names: &[String], results: &[PairwiseResult]) -> Vec<ResultRow> {
    results
        .iter()
        .map(|p| ResultRow {
            method: format!("dunn_sidak[{}|{}]", names[p.a], names[p.b]),
            statistic: p.z,
            df: None,
            p: p.p_adjusted,
            effect_size: None,
        })
        .collect()
}

pub fn analyze(table: &LongTable, design: Design) -> Result<Vec<ResultRow>, StatsError> {
    if table.rows.is_empty() {
        return Err(StatsError::InsufficientData("no rows selected".into()));
    }
    match design {
        Design::Wilcoxon => table
            .paired_by_phase()?
            .iter()
            .map(|(c, s)| {
                let r = wilcoxon_signed_rank(s)?;
                Ok(ResultRow {
                    method: format!("{}[{c}]", r.method),
                    ..ResultRow::from(&r)
                })
            })
            .collect(),
        Design::Shapiro => table
            .conditions()
            .iter()
            .map(|c| {
                let v: Vec<f64> = table
                    .rows
                    .iter()
                    .filter(|r| &r.condition == c)
                    .map(|r| r.value)
                    .collect();
                let r = shapiro_wilk(&v)?;
                Ok(ResultRow {
                    method: format!("shapiro_wilk[{c}]"),
                    ..ResultRow::from(&r)
                })
            })
            .collect(),
        Design::Kruskal => {
            let (names, s) = table.grouped()?;
            let omnibus = kruskal_wallis(&s)?;
            let mut out = vec![ResultRow::from(&omnibus)];
            out.extend(posthoc_rows(&names, &dunn_sidak_grouped(&s)));
            Ok(out)
        }
        Design::Friedman => {
            let (names, s) = table.blocked()?;
            let omnibus = friedman(&s)?;
            let mut out = vec![ResultRow::from(&omnibus)];
            out.extend(posthoc_rows(&names, &dunn_sidak_blocked(&s)));
            Ok(out)
        }
    }
}

/// CSV `method,statistic,df,p,effect_size`.
pub fn write_results_csv<W: io::Write>(rows: &[ResultRow], w: W) -> io::Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let io_err = |e: csv::Error| io::Error::other(e);
    csv.write_record(["method", "statistic", "df", "p", "effect_size"])
        .map_err(io_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        csv.write_record([
            r.method.clone(),
            r.statistic.to_string(),
            opt(r.df),
            r.p.to_string(),
            opt(r.effect_size),
        ])
        .map_err(io_err)?;
    }
    csv.flush()
}
