//! Aggregation of stage scores and Welch's ANOVA.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::eval::{EvalRecord, Stage};
use crate::noise::NoiseLevel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGroup {
    pub label: String,
    pub values: Vec<f64>,
}

impl ScoreGroup {
    pub fn new(label: impl Into<String>, values: impl IntoIterator<Item = f64>) -> Self {
        Self {
            label: label.into(),
            values: values.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f_statistic: f64,
    pub p_value: f64,
    pub df1: f64,
    pub df2: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("need at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("group `{label}` has {n} values, need at least two")]
    GroupTooSmall { label: String, n: usize },
    #[error("group `{0}` has zero variance but its mean differs from the others")]
    DegenerateVariance(String),
    #[error("group `{0}` contains a non-finite value")]
    NonFinite(String),
}

const BETA_EPS: f64 = 1e-15;
const BETA_MAX_ITER: usize = 10_000;
const TINY: f64 = 1e-300;

/// Regularized incomplete beta `I_x(a, b)`, by Lentz's continued fraction
/// on whichever side of the mean converges fastest.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x.is_nan() || a <= 0.0 || b <= 0.0 {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < BETA_EPS {
            break;
        }
    }
    h
}

/// `P(F > f)` for an F distribution with `(df1, df2)` degrees of freedom.
pub fn f_upper_tail(f: f64, df1: f64, df2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df2 / (df2 + df1 * f), df2 / 2.0, df1 / 2.0)
}

struct GroupStats {
    n: f64,
    mean: f64,
    var: f64,
    constant: bool,
}

fn describe(group: &ScoreGroup) -> Result<GroupStats, StatsError> {
    let n = group.values.len();
    if n < 2 {
        return Err(StatsError::GroupTooSmall {
            label: group.label.clone(),
            n,
        });
    }
    if group.values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(group.label.clone()));
    }
    let first = group.values[0];
    let constant = group.values.iter().all(|&v| v == first);
    let nf = n as f64;
    let mean = if constant {
        first
    } else {
        group.values.iter().sum::<f64>() / nf
    };
    let var = if constant {
        0.0
    } else {
        group.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0)
    };
    Ok(GroupStats {
        n: nf,
        mean,
        var,
        constant,
    })
}

/// Welch's heteroscedastic one-way ANOVA.
///
/// With weights `w_i = n_i / s_i²`, `W = Σ w_i` and weighted mean
/// `m = Σ w_i x̄_i / W`:
///
/// ```text
/// Λ  = Σ (1 − w_i/W)² / (n_i − 1)
/// F* = [Σ w_i (x̄_i − m)² / (k − 1)] / [1 + 2(k − 2) Λ / (k² − 1)]
/// df1 = k − 1,  df2 = (k² − 1) / (3 Λ)
/// ```
///
/// Groups that are all constant with one common mean give `F = 0, p = 1`
/// (with `df2 = N − k`); any other zero-variance group is an error.
pub fn welch_anova(groups: &[ScoreGroup]) -> Result<AnovaResult, StatsError> {
    let k = groups.len();
    if k < 2 {
        return Err(StatsError::TooFewGroups(k));
    }
    let stats = groups.iter().map(describe).collect::<Result<Vec<_>, _>>()?;
    let kf = k as f64;

    if let Some(i) = stats.iter().position(|s| s.constant) {
        let all_equal = stats.iter().all(|s| s.constant && s.mean == stats[i].mean);
        if all_equal {
            let total: f64 = stats.iter().map(|s| s.n).sum();
            return Ok(AnovaResult {
                f_statistic: 0.0,
                p_value: 1.0,
                df1: kf - 1.0,
                df2: total - kf,
            });
        }
        let culprit = stats
            .iter()
            .zip(groups)
            .find(|(s, _)| s.constant)
            .map(|(_, g)| g.label.clone())
            .unwrap_or_default();
        return Err(StatsError::DegenerateVariance(culprit));
    }

    let df1 = kf - 1.0;
    let weights: Vec<f64> = stats.iter().map(|s| s.n / s.var).collect();
    let w_total: f64 = weights.iter().sum();
    let weighted_mean = stats
        .iter()
        .zip(&weights)
        .map(|(s, w)| w * s.mean)
        .sum::<f64>()
        / w_total;
    let between = stats
        .iter()
        .zip(&weights)
        .map(|(s, w)| w * (s.mean - weighted_mean) * (s.mean - weighted_mean))
        .sum::<f64>()
        / (kf - 1.0);
    let lambda = stats
        .iter()
        .zip(&weights)
        .map(|(s, w)| {
            let r = 1.0 - w / w_total;
            r * r / (s.n - 1.0)
        })
        .sum::<f64>();
    let denom = 1.0 + 2.0 * (kf - 2.0) * lambda / (kf * kf - 1.0);
    // Exactly equal means: skip the rounding noise of the weighted mean.
    let f = if stats.iter().all(|s| s.mean == stats[0].mean) {
        0.0
    } else {
        (between / denom).max(0.0)
    };
    let df2 = (kf * kf - 1.0) / (3.0 * lambda);
    Ok(AnovaResult {
        f_statistic: f,
        p_value: f_upper_tail(f, df1, df2).clamp(0.0, 1.0),
        df1,
        df2,
    })
}

/// Mean stage scores of one group of records, as percentages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StagePercentages {
    pub ts: f64,
    pub pi: f64,
    pub cf: f64,
}

impl StagePercentages {
    pub fn get(&self, stage: Stage) -> f64 {
        match stage {
            Stage::ToolSelection => self.ts,
            Stage::ParameterIdentification => self.pi,
            Stage::ContentFilling => self.cf,
        }
    }

    fn from_records<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Option<Self> {
        let (mut n, mut ts, mut pi, mut cf) = (0u64, 0u64, 0u64, 0u64);
        for r in records {
            n += 1;
            ts += u64::from(r.scores.s_ts);
            pi += u64::from(r.scores.s_pi);
            cf += u64::from(r.scores.s_cf);
        }
        if n == 0 {
            return None;
        }
        let pct = |x: u64| 100.0 * x as f64 / n as f64;
        Some(Self {
            ts: pct(ts),
            pi: pct(pi),
            cf: pct(cf),
        })
    }

    pub fn rounded(&self) -> Self {
        Self {
            ts: round2(self.ts),
            pi: round2(self.pi),
            cf: round2(self.cf),
        }
    }
}

pub fn round2(x: f64) -> f64 {
    libm::round(x * 100.0) / 100.0
}

/// Mean score per level and stage, in percent. Levels without records are
/// absent.
pub fn stage_means(records: &[EvalRecord]) -> BTreeMap<NoiseLevel, StagePercentages> {
    NoiseLevel::ALL
        .into_iter()
        .filter_map(|level| {
            StagePercentages::from_records(records.iter().filter(|r| r.level == level))
                .map(|m| (level, m))
        })
        .collect()
}

pub fn stage_means_by_scenario(
    records: &[EvalRecord],
) -> BTreeMap<String, BTreeMap<NoiseLevel, StagePercentages>> {
    let mut by_scenario: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        by_scenario.entry(&r.scenario).or_default().push(r.clone());
    }
    by_scenario
        .into_iter()
        .map(|(s, rs)| (String::from(s), stage_means(&rs)))
        .collect()
}

/// `|mean(level) − mean(Clean)|` per stage; `None` without a Clean entry.
pub fn delta_vs_clean(
    means: &BTreeMap<NoiseLevel, StagePercentages>,
) -> Option<BTreeMap<NoiseLevel, StagePercentages>> {
    let clean = *means.get(&NoiseLevel::Clean)?;
    Some(
        means
            .iter()
            .map(|(&level, m)| {
                (
                    level,
                    StagePercentages {
                        ts: (m.ts - clean.ts).abs(),
                        pi: (m.pi - clean.pi).abs(),
                        cf: (m.cf - clean.cf).abs(),
                    },
                )
            })
            .collect(),
    )
}

/// `max − min` over the given level means; `None` for fewer than two.
pub fn extreme_difference(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Some(max - min)
}

/// Per-level 0/1 score groups for one stage, in level order.
pub fn score_groups(records: &[EvalRecord], stage: Stage) -> Vec<ScoreGroup> {
    NoiseLevel::ALL
        .into_iter()
        .filter_map(|level| {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.level == level)
                .map(|r| f64::from(r.scores.get(stage)))
                .collect();
            (!values.is_empty()).then(|| ScoreGroup::new(level.label(), values))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticCounts {
    pub cases: usize,
    pub hallucinations: usize,
    pub noise_corrections: usize,
    pub param_noise_corrections: usize,
    pub parse_failures: usize,
}

pub fn diagnostic_counts(records: &[EvalRecord]) -> BTreeMap<NoiseLevel, DiagnosticCounts> {
    let mut out: BTreeMap<NoiseLevel, DiagnosticCounts> = BTreeMap::new();
    for r in records {
        let c = out.entry(r.level).or_default();
        c.cases += 1;
        c.hallucinations += usize::from(r.hallucinated);
        c.noise_corrections += usize::from(r.noise_corrected);
        c.param_noise_corrections += usize::from(r.param_noise_corrected);
        c.parse_failures += usize::from(r.parse_failed);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::StageScores;

    fn record(level: NoiseLevel, s: (u8, u8, u8)) -> EvalRecord {
        EvalRecord {
            case_id: String::from("x"),
            base: String::from("x"),
            scenario: String::from("s"),
            level,
            scores: StageScores {
                s_ts: s.0,
                s_pi: s.1,
                s_cf: s.2,
            },
            hallucinated: false,
            noise_corrected: false,
            param_noise_corrected: false,
            parse_failed: false,
        }
    }

    #[test]
    fn means_examples() {
        let all_ones: Vec<_> = (0..3).map(|_| record(NoiseLevel::Clean, (1, 1, 1))).collect();
        assert_eq!(stage_means(&all_ones)[&NoiseLevel::Clean].ts, 100.0);
        let half: Vec<_> = [1, 0, 1, 0]
            .into_iter()
            .map(|v| record(NoiseLevel::Slight, (v, 0, 0)))
            .collect();
        let m = stage_means(&half);
        assert_eq!(m[&NoiseLevel::Slight].ts, 50.0);
        assert!(!m.contains_key(&NoiseLevel::Clean));
    }

    #[test]
    fn identical_groups_give_zero_f() {
        let g = [
            ScoreGroup::new("a", [0.0, 0.0, 1.0, 1.0]),
            ScoreGroup::new("b", [0.0, 0.0, 1.0, 1.0]),
        ];
        let r = welch_anova(&g).unwrap();
        assert_eq!(r.f_statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn constant_groups() {
        let same = [
            ScoreGroup::new("a", [1.0, 1.0]),
            ScoreGroup::new("b", [1.0, 1.0, 1.0]),
        ];
        let r = welch_anova(&same).unwrap();
        assert_eq!((r.f_statistic, r.p_value, r.df1, r.df2), (0.0, 1.0, 1.0, 3.0));

        let differ = [
            ScoreGroup::new("a", [0.0, 1.0, 1.0]),
            ScoreGroup::new("b", [1.0, 1.0, 1.0]),
        ];
        assert_eq!(welch_anova(&differ), Err(StatsError::DegenerateVariance("b".into())));
    }

    #[test]
    fn input_errors() {
        assert_eq!(welch_anova(&[ScoreGroup::new("a", [0.0, 1.0])]), Err(StatsError::TooFewGroups(1)));
        assert!(matches!(
            welch_anova(&[ScoreGroup::new("a", [0.0, 1.0]), ScoreGroup::new("b", [1.0])]),
            Err(StatsError::GroupTooSmall { .. })
        ));
    }

    #[test]
    fn incomplete_beta_known_values() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a
        assert!((regularized_incomplete_beta(0.3, 1.0, 1.0) - 0.3).abs() < 1e-14);
        assert!((regularized_incomplete_beta(0.5, 3.0, 1.0) - 0.125).abs() < 1e-14);
        assert_eq!(regularized_incomplete_beta(0.0, 2.0, 3.0), 0.0);
        assert_eq!(regularized_incomplete_beta(1.0, 2.0, 3.0), 1.0);
    }

    #[test]
    fn delta_and_extreme() {
        let mut means = BTreeMap::new();
        means.insert(NoiseLevel::Clean, StagePercentages { ts: 80.00, pi: 0.0, cf: 0.0 });
        means.insert(NoiseLevel::Union, StagePercentages { ts: 58.10, pi: 0.0, cf: 0.0 });
        let d = delta_vs_clean(&means).unwrap();
        assert!((d[&NoiseLevel::Union].ts - 21.90).abs() < 1e-9);
        assert_eq!(d[&NoiseLevel::Clean].ts, 0.0);
        means.remove(&NoiseLevel::Clean);
        assert!(delta_vs_clean(&means).is_none());

        let gpt4 = [80.00, 77.14, 84.29, 60.00, 58.10];
        assert!((extreme_difference(&gpt4).unwrap() - 26.19).abs() < 1e-9);
        let rot = [76.19, 72.38, 70.48, 65.24, 63.81];
        assert!((extreme_difference(&rot).unwrap() - 12.38).abs() < 1e-9);
        assert_eq!(extreme_difference(&[5.0, 5.0, 5.0]), Some(0.0));
        assert_eq!(extreme_difference(&[5.0]), None);
    }

    #[test]
    fn round2_examples() {
        assert_eq!(round2(100.0 * 2.0 / 3.0), 66.67);
        assert_eq!(round2(50.0), 50.0);
    }
}
