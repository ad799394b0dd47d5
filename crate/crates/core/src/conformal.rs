//! Split conformalized quantile regression.
//!
//! A raw quantile pair `(q_lo, q_hi)` is widened by an offset taken from the
//! conformity scores of a held-out calibration set, either one offset for all
//! samples or one per group.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ScenarioFeatures};
use crate::error::{Error, Result};
use crate::featdiag::{assign_group, GroupingSpec};
use crate::plot::{Chart, PALETTE};
use crate::quantnet::QuantileModel;
use crate::util::{fmt_sig, percentile_sorted};

/// Groups with fewer calibration samples than this get a warning.
pub const MIN_GROUP_SIZE: usize = 20;

pub const LENGTH_PERCENTILES: [f64; 5] = [10.0, 25.0, 50.0, 75.0, 90.0];

/// Anything that yields a sorted raw quantile pair per feature row.
pub trait QuantilePredictor {
    fn predict_pairs(&self, rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>>;
}

impl QuantilePredictor for QuantileModel {
    fn predict_pairs(&self, rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
        self.predict_batch(rows)
    }
}

/// `max(q_lo − y, y − q_hi)`; negative inside the raw interval.
pub fn conformity_score(q_lo: f64, q_hi: f64, y: f64) -> f64 {
    (q_lo - y).max(y - q_hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "Option<f64>", into = "Option<f64>")]
pub enum Offset {
    Finite(f64),
    /// Too few calibration scores for the requested level.
    Unbounded,
}

impl From<Option<f64>> for Offset {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Offset::Unbounded, Offset::Finite)
    }
}

impl From<Offset> for Option<f64> {
    fn from(o: Offset) -> Self {
        match o {
            Offset::Finite(q) => Some(q),
            Offset::Unbounded => None,
        }
    }
}

impl Offset {
    pub fn value(self) -> f64 {
        match self {
            Offset::Finite(q) => q,
            Offset::Unbounded => f64::INFINITY,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config("alpha", format!("must lie in (0, 1), got {alpha}")))
    }
}

/// 1-based rank `ceil((n + 1)(1 − α))` of the offset among `n` sorted scores.
pub fn conformal_index(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    // Absorb representation error in decimal alphas such as 0.1.
    (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as usize
}

pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<Offset> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Calibration("no conformity scores".into()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Calibration(format!("score {i} is NaN")));
    }
    let m = conformal_index(scores.len(), alpha);
    if m > scores.len() {
        return Ok(Offset::Unbounded);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Offset::Finite(sorted[m - 1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    Marginal,
    Equalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub mode: CalibrationMode,
    /// How group ids are derived from scenario features; `None` when the
    /// caller supplied the ids directly.
    pub grouping: Option<GroupingSpec>,
    pub offsets: BTreeMap<usize, Offset>,
    pub counts: BTreeMap<usize, usize>,
    /// Lower bounds are clamped up to this value; `None` leaves them free.
    #[serde(default = "default_floor")]
    pub lower_floor: Option<f64>,
}

fn default_floor() -> Option<f64> {
    Some(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionInterval {
    pub lo: f64,
    /// `+∞` when unbounded.
    pub hi: f64,
    pub group: usize,
    pub unbounded: bool,
}

impl PredictionInterval {
    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Offsets from precomputed scores. In marginal mode `groups` is ignored and
/// the single offset is stored under group 0; in equalized mode every group
/// id below `n_groups` must be present.
pub fn calibrate_scores(
    scores: &[f64],
    groups: &[usize],
    n_groups: usize,
    alpha: f64,
    mode: CalibrationMode,
) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Calibration("calibration set is empty".into()));
    }
    let mut offsets = BTreeMap::new();
    let mut counts = BTreeMap::new();
    match mode {
        CalibrationMode::Marginal => {
            offsets.insert(0, conformal_quantile(scores, alpha)?);
            counts.insert(0, scores.len());
        }
        CalibrationMode::Equalized => {
            if groups.len() != scores.len() {
                return Err(Error::Calibration(format!(
                    "{} scores but {} group ids",
                    scores.len(),
                    groups.len()
                )));
            }
            let mut by_group: BTreeMap<usize, Vec<f64>> = (0..n_groups).map(|g| (g, Vec::new())).collect();
            for (&s, &g) in scores.iter().zip(groups) {
                by_group.entry(g).or_default().push(s);
            }
            for (g, sc) in by_group {
                if sc.is_empty() {
                    return Err(Error::Calibration(format!("group {g} has no calibration samples")));
                }
                if sc.len() < MIN_GROUP_SIZE {
                    log::warn!(
                        "group {g} has only {} calibration samples; its offset may be unbounded or loose",
                        sc.len()
                    );
                }
                counts.insert(g, sc.len());
                offsets.insert(g, conformal_quantile(&sc, alpha)?);
            }
        }
    }
    for (g, o) in &offsets {
        if *o == Offset::Unbounded {
            log::warn!("group {g}: too few calibration samples for alpha = {alpha}; offset is unbounded");
        }
    }
    Ok(CalibrationResult {
        alpha,
        mode,
        grouping: None,
        offsets,
        counts,
        lower_floor: default_floor(),
    })
}

impl CalibrationResult {
    pub fn offset(&self, group: usize) -> Result<Offset> {
        let g = match self.mode {
            CalibrationMode::Marginal => 0,
            CalibrationMode::Equalized => group,
        };
        self.offsets
            .get(&g)
            .copied()
            .ok_or_else(|| Error::Calibration(format!("group {group} was not seen during calibration")))
    }

    /// `[max(floor, q_lo − Q_g), q_hi + Q_g]`.
    pub fn interval(&self, q_lo: f64, q_hi: f64, group: usize) -> Result<PredictionInterval> {
        let floor = self.lower_floor.unwrap_or(f64::NEG_INFINITY);
        Ok(match self.offset(group)? {
            Offset::Finite(q) => PredictionInterval {
                lo: (q_lo - q).max(floor),
                hi: q_hi + q,
                group,
                unbounded: false,
            },
            Offset::Unbounded => PredictionInterval {
                lo: floor,
                hi: f64::INFINITY,
                group,
                unbounded: true,
            },
        })
    }

    /// Group id of a scenario under this calibration's grouping.
    pub fn group_of(&self, features: &ScenarioFeatures) -> usize {
        match (&self.mode, &self.grouping) {
            (CalibrationMode::Equalized, Some(spec)) => assign_group(features, spec),
            _ => 0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: CalibrationResult = serde_json::from_str(text)?;
        check_alpha(c.alpha)?;
        if c.offsets.is_empty() || c.offsets.len() != c.counts.len() || c.counts.values().any(|&n| n == 0) {
            return Err(Error::Calibration("calibration file has inconsistent offsets and counts".into()));
        }
        Ok(c)
    }
}

fn mode_for(grouping: &GroupingSpec) -> CalibrationMode {
    match grouping {
        GroupingSpec::None => CalibrationMode::Marginal,
        _ => CalibrationMode::Equalized,
    }
}

/// Calibrates a predictor on a dataset. `GroupingSpec::None` gives marginal
/// calibration, any other grouping one offset per group.
pub fn calibrate<P: QuantilePredictor + ?Sized>(
    predictor: &P,
    cal: &Dataset,
    alpha: f64,
    grouping: &GroupingSpec,
) -> Result<CalibrationResult> {
    grouping.validate()?;
    let preds = predictor.predict_pairs(&cal.features())?;
    let scores: Vec<f64> = preds
        .iter()
        .zip(&cal.samples)
        .map(|(&(lo, hi), s)| conformity_score(lo, hi, s.y()))
        .collect();
    let groups: Vec<usize> = cal.samples.iter().map(|s| assign_group(&s.features, grouping)).collect();
    let mut result = calibrate_scores(&scores, &groups, grouping.n_groups(), alpha, mode_for(grouping))?;
    result.grouping = Some(*grouping);
    Ok(result)
}

pub fn predict_interval<P: QuantilePredictor + ?Sized>(
    predictor: &P,
    calib: &CalibrationResult,
    features: &ScenarioFeatures,
) -> Result<PredictionInterval> {
    let (lo, hi) = predictor.predict_pairs(&[features.to_vector()])?[0];
    calib.interval(lo, hi, calib.group_of(features))
}

pub fn predict_intervals<P: QuantilePredictor + ?Sized>(
    predictor: &P,
    calib: &CalibrationResult,
    ds: &Dataset,
) -> Result<Vec<PredictionInterval>> {
    let preds = predictor.predict_pairs(&ds.features())?;
    preds
        .iter()
        .zip(&ds.samples)
        .map(|(&(lo, hi), s)| calib.interval(lo, hi, calib.group_of(&s.features)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupCoverage {
    pub n: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub n: usize,
    pub marginal: f64,
    pub per_group: BTreeMap<usize, GroupCoverage>,
    /// (percentile, length) pairs over bounded intervals, ascending.
    pub length_percentiles: Vec<(f64, f64)>,
    pub mean_length: f64,
    pub n_unbounded: usize,
}

impl CoverageReport {
    pub fn length_percentile(&self, pct: f64) -> Option<f64> {
        self.length_percentiles.iter().find(|(p, _)| *p == pct).map(|&(_, v)| v)
    }

    /// Largest absolute difference between two groups' coverage.
    pub fn group_gap(&self) -> f64 {
        let c: Vec<f64> = self.per_group.values().map(|g| g.coverage).collect();
        let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = c.iter().copied().fold(f64::INFINITY, f64::min);
        if c.is_empty() {
            0.0
        } else {
            max - min
        }
    }

    /// Rows of `metric,group,value`; `group` is `all` for marginal metrics.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "metric,group,value")?;
        writeln!(out, "n,all,{}", self.n)?;
        writeln!(out, "coverage,all,{}", fmt_sig(self.marginal, 9))?;
        for (g, c) in &self.per_group {
            writeln!(out, "n,{g},{}", c.n)?;
            writeln!(out, "coverage,{g},{}", fmt_sig(c.coverage, 9))?;
        }
        writeln!(out, "mean_length,all,{}", fmt_sig(self.mean_length, 9))?;
        for (p, v) in &self.length_percentiles {
            writeln!(out, "length_p{},all,{}", p, fmt_sig(*v, 9))?;
        }
        writeln!(out, "n_unbounded,all,{}", self.n_unbounded)
    }
}

/// Coverage of `intervals` on labels `y`, broken down by `groups`.
pub fn coverage_report(intervals: &[PredictionInterval], y: &[f64], groups: &[usize]) -> Result<CoverageReport> {
    if intervals.is_empty() || intervals.len() != y.len() || groups.len() != y.len() {
        return Err(Error::Invalid(format!(
            "coverage needs matching non-empty inputs: {} intervals, {} labels, {} groups",
            intervals.len(),
            y.len(),
            groups.len()
        )));
    }
    let mut hits = 0usize;
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut lengths = Vec::with_capacity(y.len());
    for ((iv, &yi), &g) in intervals.iter().zip(y).zip(groups) {
        let hit = iv.contains(yi);
        hits += usize::from(hit);
        let e = per.entry(g).or_default();
        e.0 += 1;
        e.1 += usize::from(hit);
        if !iv.unbounded {
            lengths.push(iv.length());
        }
    }
    lengths.sort_by(f64::total_cmp);
    let n_unbounded = y.len() - lengths.len();
    let (length_percentiles, mean_length) = if lengths.is_empty() {
        (Vec::new(), f64::INFINITY)
    } else {
        (
            LENGTH_PERCENTILES.iter().map(|&p| (p, percentile_sorted(&lengths, p))).collect(),
            lengths.iter().sum::<f64>() / lengths.len() as f64,
        )
    };
    Ok(CoverageReport {
        n: y.len(),
        marginal: hits as f64 / y.len() as f64,
        per_group: per
            .into_iter()
            .map(|(g, (n, h))| {
                (
                    g,
                    GroupCoverage {
                        n,
                        coverage: h as f64 / n as f64,
                    },
                )
            })
            .collect(),
        length_percentiles,
        mean_length,
        n_unbounded,
    })
}

/// Evaluates on a test set; `report_grouping` chooses the per-group breakdown
/// independently of how the offsets were calibrated.
pub fn evaluate<P: QuantilePredictor + ?Sized>(
    predictor: &P,
    calib: &CalibrationResult,
    test: &Dataset,
    report_grouping: &GroupingSpec,
) -> Result<CoverageReport> {
    if test.is_empty() {
        return Err(Error::Invalid("test set is empty".into()));
    }
    let intervals = predict_intervals(predictor, calib, test)?;
    let groups: Vec<usize> = test.samples.iter().map(|s| assign_group(&s.features, report_grouping)).collect();
    coverage_report(&intervals, &test.labels(), &groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    /// False when no candidate met the coverage tolerance.
    pub conformant: bool,
}

/// Keeps candidates with `|coverage − target| ≤ tolerance` and picks the one
/// with the shortest 90th-percentile interval length; without survivors,
/// the coverage closest to target. Ties go to the lower index.
pub fn select_model(reports: &[CoverageReport], target: f64, tolerance: f64) -> Result<Selection> {
    if reports.is_empty() {
        return Err(Error::Invalid("no candidate models to select from".into()));
    }
    let p90 = |r: &CoverageReport| r.length_percentile(90.0).unwrap_or(f64::INFINITY);
    // Small slack so a coverage printed as exactly on the band edge survives.
    let slack = 1e-12;
    let best = reports
        .iter()
        .enumerate()
        .filter(|(_, r)| (r.marginal - target).abs() <= tolerance + slack)
        .min_by(|a, b| p90(a.1).total_cmp(&p90(b.1)).then(a.0.cmp(&b.0)));
    if let Some((index, _)) = best {
        return Ok(Selection { index, conformant: true });
    }
    let (index, _) = reports
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (a.1.marginal - target)
                .abs()
                .total_cmp(&(b.1.marginal - target).abs())
                .then(a.0.cmp(&b.0))
        })
        .expect("non-empty");
    Ok(Selection {
        index,
        conformant: false,
    })
}

/// `(bin_lo, bin_hi, count)` per bin.
pub type Histogram = Vec<(f64, f64, usize)>;

/// Equal-width histogram of bounded interval lengths over `[0, max]`;
/// returns `(lo, hi, count)` per bin, the last bin closed.
pub fn length_histogram(intervals: &[PredictionInterval], bins: usize, max: f64) -> Histogram {
    let bins = bins.max(1);
    let width = max / bins as f64;
    let mut counts = vec![0usize; bins];
    for iv in intervals.iter().filter(|iv| !iv.unbounded) {
        let len = iv.length();
        if (0.0..=max).contains(&len) {
            counts[((len / width) as usize).min(bins - 1)] += 1;
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 * width, (i + 1) as f64 * width, c))
        .collect()
}

pub fn write_histogram_csv<W: Write>(mut out: W, hist: &[(f64, f64, usize)]) -> std::io::Result<()> {
    writeln!(out, "bin_lo,bin_hi,count")?;
    for (lo, hi, c) in hist {
        writeln!(out, "{},{},{c}", fmt_sig(*lo, 9), fmt_sig(*hi, 9))?;
    }
    Ok(())
}

/// Overlaid length histograms, one series per labelled entry.
pub fn histogram_svg(title: &str, series: &[(&str, Histogram)]) -> String {
    let x_max = series
        .iter()
        .flat_map(|(_, h)| h.last().map(|b| b.1))
        .fold(0.0, f64::max);
    let y_max = series
        .iter()
        .flat_map(|(_, h)| h.iter().map(|b| b.2 as f64))
        .fold(1.0, f64::max);
    let mut chart = Chart::new(title, (0.0, x_max), (0.0, y_max * 1.05)).labels("interval length [m]", "count");
    for (i, (label, hist)) in series.iter().enumerate() {
        let bars: Vec<(f64, f64, f64)> = hist.iter().map(|&(lo, hi, c)| (lo, hi, c as f64)).collect();
        chart.bars(&bars, PALETTE[i % PALETTE.len()], Some(label));
    }
    chart.render()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    use statrs::distribution::{Beta, ContinuousCDF};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn score_examples() {
        assert!(close(conformity_score(0.2, 0.4, 0.3), -0.1));
        assert!(close(conformity_score(0.2, 0.4, 0.5), 0.1));
        assert!(close(conformity_score(0.2, 0.4, 0.1), 0.1));
    }

    #[test]
    fn quantile_examples() {
        let s: Vec<f64> = (1..=19).map(f64::from).collect();
        assert_eq!(conformal_quantile(&s, 0.1).unwrap(), Offset::Finite(18.0));
        assert_eq!(conformal_quantile(&[0.3, 0.1, 0.2], 0.5).unwrap(), Offset::Finite(0.2));
        assert_eq!(conformal_quantile(&[0.3, 0.1, 0.2], 0.1).unwrap(), Offset::Unbounded);
        assert!(matches!(conformal_quantile(&[], 0.1), Err(Error::Calibration(_))));
        assert!(conformal_quantile(&[1.0], 1.0).is_err());
        assert_eq!(conformal_index(4000, 0.1), 3601);
        assert_eq!(conformal_index(19, 0.1), 18);
    }

    /// Smallest score q with at least m scores ≤ q, by scanning candidates.
    fn brute_force(scores: &[f64], alpha_permille: u64) -> Offset {
        let n = scores.len() as u64;
        let m = ((n + 1) * (1000 - alpha_permille)).div_ceil(1000);
        if m > n {
            return Offset::Unbounded;
        }
        let mut best = f64::INFINITY;
        for &q in scores {
            let at_most = scores.iter().filter(|&&s| s <= q).count() as u64;
            if at_most >= m && q < best {
                best = q;
            }
        }
        Offset::Finite(best)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn quantile_matches_brute_force(
            raw in proptest::collection::vec(0u8..12, 1..60),
            alpha_permille in 1u64..999,
        ) {
            // Few distinct values so ties are common.
            let scores: Vec<f64> = raw.iter().map(|&v| f64::from(v) * 0.05 - 0.2).collect();
            let alpha = alpha_permille as f64 / 1000.0;
            prop_assert_eq!(conformal_quantile(&scores, alpha).unwrap(), brute_force(&scores, alpha_permille));
        }

        #[test]
        fn larger_alpha_never_raises_offset(
            scores in proptest::collection::vec(-1.0f64..1.0, 1..80),
            a in 0.01f64..0.98,
            b in 0.01f64..0.98,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let q_lo_alpha = conformal_quantile(&scores, lo).unwrap().value();
            let q_hi_alpha = conformal_quantile(&scores, hi).unwrap().value();
            prop_assert!(q_hi_alpha <= q_lo_alpha);
        }

        #[test]
        fn interval_floor_holds(q_lo in 0.0f64..1.0, width in 0.0f64..1.0, q in -0.5f64..1.0) {
            let calib = CalibrationResult {
                alpha: 0.1,
                mode: CalibrationMode::Marginal,
                grouping: None,
                offsets: BTreeMap::from([(0, Offset::Finite(q))]),
                counts: BTreeMap::from([(0, 100)]),
                lower_floor: Some(0.0),
            };
            let iv = calib.interval(q_lo, q_lo + width, 0).unwrap();
            prop_assert!(iv.lo >= 0.0);
        }
    }

    #[test]
    fn marginal_equals_single_group_equalized() {
        let mut rng = seeded_rng(1);
        let scores: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zeros = vec![0; scores.len()];
        let m = calibrate_scores(&scores, &zeros, 1, 0.1, CalibrationMode::Marginal).unwrap();
        let e = calibrate_scores(&scores, &zeros, 1, 0.1, CalibrationMode::Equalized).unwrap();
        assert_eq!(m.offsets, e.offsets);
        assert_eq!(m.counts, e.counts);
    }

    #[test]
    fn shifted_group_offsets_follow_the_shift() {
        let mut rng = seeded_rng(2);
        let mut scores = Vec::new();
        let mut groups = Vec::new();
        for g in 0..2 {
            for _ in 0..2000 {
                scores.push(rng.random_range(0.0..1.0) + 0.2 * g as f64);
                groups.push(g);
            }
        }
        let c = calibrate_scores(&scores, &groups, 2, 0.1, CalibrationMode::Equalized).unwrap();
        let q0 = c.offsets[&0].value();
        let q1 = c.offsets[&1].value();
        // Each order statistic has sd ≈ 0.0067 here.
        assert!((q1 - q0 - 0.2).abs() < 0.04, "{q0} {q1}");
        assert_eq!(c.counts[&0], 2000);
    }

    #[test]
    fn empty_group_is_named() {
        let err = calibrate_scores(&[0.1, 0.2], &[0, 0], 2, 0.1, CalibrationMode::Equalized).unwrap_err();
        assert!(err.to_string().contains("group 1"), "{err}");
    }

    #[test]
    fn interval_examples() {
        let mk = |q| CalibrationResult {
            alpha: 0.1,
            mode: CalibrationMode::Marginal,
            grouping: None,
            offsets: BTreeMap::from([(0, Offset::Finite(q))]),
            counts: BTreeMap::from([(0, 10)]),
            lower_floor: Some(0.0),
        };
        let iv = mk(0.0).interval(0.2, 0.4, 0).unwrap();
        assert!(close(iv.lo, 0.2) && close(iv.hi, 0.4));
        let iv = mk(0.05).interval(0.2, 0.4, 0).unwrap();
        assert!(close(iv.lo, 0.15) && close(iv.hi, 0.45));
        let iv = mk(0.05).interval(0.02, 0.4, 0).unwrap();
        assert!(iv.lo == 0.0 && close(iv.hi, 0.45));
        let free = CalibrationResult {
            lower_floor: None,
            ..mk(0.05)
        };
        assert!(close(free.interval(0.02, 0.4, 0).unwrap().lo, -0.03));
    }

    #[test]
    fn unseen_group_is_an_error() {
        let c = calibrate_scores(&[0.1; 30], &[0; 30], 1, 0.1, CalibrationMode::Equalized).unwrap();
        assert!(c.interval(0.1, 0.2, 1).is_err());
    }

    #[test]
    fn unbounded_interval_covers_everything() {
        let c = calibrate_scores(&[0.1, 0.2], &[0, 0], 1, 0.1, CalibrationMode::Marginal).unwrap();
        let iv = c.interval(0.1, 0.2, 0).unwrap();
        assert!(iv.unbounded && iv.contains(1e9));
        let r = coverage_report(&[iv], &[5.0], &[0]).unwrap();
        assert_eq!(r.n_unbounded, 1);
        assert_eq!(r.marginal, 1.0);
    }

    #[test]
    fn evaluation_examples() {
        let y = [0.1, 0.5, 0.3];
        let wide: Vec<_> = y
            .iter()
            .map(|_| PredictionInterval {
                lo: 0.0,
                hi: 1.0,
                group: 0,
                unbounded: false,
            })
            .collect();
        assert_eq!(coverage_report(&wide, &y, &[0, 0, 1]).unwrap().marginal, 1.0);
        let exact: Vec<_> = y
            .iter()
            .map(|&v| PredictionInterval {
                lo: v,
                hi: v,
                group: 0,
                unbounded: false,
            })
            .collect();
        let r = coverage_report(&exact, &y, &[0, 1, 1]).unwrap();
        assert_eq!(r.marginal, 1.0);
        assert_eq!(r.mean_length, 0.0);
        assert_eq!(r.per_group[&1].n, 2);
        let sorted: Vec<f64> = r.length_percentiles.iter().map(|p| p.0).collect();
        assert!(sorted.windows(2).all(|w| w[0] < w[1]));
    }

    fn report(cov: f64, p90: f64) -> CoverageReport {
        CoverageReport {
            n: 100,
            marginal: cov,
            per_group: BTreeMap::new(),
            length_percentiles: vec![(90.0, p90)],
            mean_length: p90,
            n_unbounded: 0,
        }
    }

    #[test]
    fn selection_rule() {
        let r = [report(0.893, 0.30), report(0.905, 0.35), report(0.92, 0.10)];
        assert_eq!(select_model(&r, 0.9, 0.01).unwrap(), Selection { index: 0, conformant: true });
        let r = [report(0.9, 0.31), report(0.9, 0.28)];
        assert_eq!(select_model(&r, 0.9, 0.01).unwrap().index, 1);
        assert_eq!(select_model(&[report(0.7, 0.1)], 0.9, 0.01).unwrap(), Selection { index: 0, conformant: false });
        assert_eq!(select_model(&[report(0.9, 0.1)], 0.9, 0.01).unwrap(), Selection { index: 0, conformant: true });
        let r = [report(0.95, 0.1), report(0.86, 0.1), report(0.87, 0.1)];
        assert_eq!(select_model(&r, 0.9, 0.01).unwrap(), Selection { index: 2, conformant: false });
        assert!(select_model(&[], 0.9, 0.01).is_err());
    }

    #[test]
    fn calibration_json_round_trip() {
        let mut c = calibrate_scores(&[0.1, 0.2, 0.3, 0.1, 0.4], &[0, 1, 0, 1, 1], 2, 0.5, CalibrationMode::Equalized).unwrap();
        c.grouping = Some(GroupingSpec::default());
        let c2 = calibrate_scores(&[0.1, 0.2], &[0, 0], 1, 0.1, CalibrationMode::Marginal).unwrap();
        for c in [c, c2] {
            let text = c.to_json().unwrap();
            assert_eq!(CalibrationResult::from_json(&text).unwrap(), c);
        }
    }

    #[test]
    fn histogram_counts_every_bounded_interval() {
        let ivs: Vec<_> = [0.0, 0.1, 0.25, 0.5, 0.5]
            .iter()
            .map(|&l| PredictionInterval {
                lo: 0.0,
                hi: l,
                group: 0,
                unbounded: false,
            })
            .collect();
        let h = length_histogram(&ivs, 5, 0.5);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 5);
        assert_eq!(h[4].2, 2);
        let svg = histogram_svg("lengths", &[("a", h)]);
        assert!(svg.contains("<rect"));
    }

    // Synthetic regression with a fixed, deliberately too narrow predictor
    // q = f(x) ± 0.1, so conditional coverage given the calibration draw has
    // a closed form: P(|σ(x) ε| ≤ Q + 0.1) averaged over x ~ U[0, 1].
    fn sigma(x: f64) -> f64 {
        0.1 + 0.4 * x
    }

    fn exact_coverage(q: f64) -> f64 {
        use statrs::distribution::Normal as SNormal;
        let n = SNormal::new(0.0, 1.0).unwrap();
        let k = 2000;
        let mut acc = 0.0;
        for i in 0..k {
            let x = (i as f64 + 0.5) / k as f64;
            let t = (q + 0.1) / sigma(x);
            acc += if t <= 0.0 { 0.0 } else { 2.0 * n.cdf(t) - 1.0 };
        }
        acc / k as f64
    }

    #[test]
    fn finite_sample_guarantee() {
        let (n, alpha) = (500, 0.1);
        let m = conformal_index(n, alpha);
        let beta = Beta::new(m as f64, (n + 1 - m) as f64).unwrap();
        let band = (beta.inverse_cdf(0.005), beta.inverse_cdf(0.995));
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut total = 0.0;
        let mut outside = Vec::new();
        let mut pit = Vec::new();
        for trial in 0..50 {
            let mut rng = seeded_rng(1000 + trial);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let x: f64 = rng.random_range(0.0..1.0);
                    let y = (2.0 * x).sin() + sigma(x) * noise.sample(&mut rng);
                    let f = (2.0 * x).sin();
                    conformity_score(f - 0.1, f + 0.1, y)
                })
                .collect();
            let q = conformal_quantile(&scores, alpha).unwrap().value();
            let c = exact_coverage(q);
            if !(band.0 <= c && c <= band.1) {
                outside.push((trial, c));
            }
            pit.push(beta.cdf(c));
            total += c;
        }
        // 50 independent 99% bands: more than two misses has probability 0.014.
        assert!(outside.len() <= 2, "coverage outside {band:?}: {outside:?}");
        // The conditional coverage is Beta(m, n + 1 − m), so its PIT is uniform.
        pit.sort_by(f64::total_cmp);
        let ks = pit
            .iter()
            .enumerate()
            .map(|(i, &u)| ((i + 1) as f64 / 50.0 - u).max(u - i as f64 / 50.0))
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / 50f64.sqrt(), "KS distance {ks}");
        assert!(total / 50.0 >= 1.0 - alpha - 0.01);
    }

    #[test]
    fn equalized_lifts_the_worst_group() {
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut wins = 0;
        for trial in 0..50 {
            let mut rng = seeded_rng(2000 + trial);
            let mut draw = |n: usize| {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    let g = usize::from(rng.random_bool(0.5));
                    let sd = if g == 1 { 0.5 } else { 0.1 };
                    let y = sd * noise.sample(&mut rng);
                    // A predictor that ignores the groups: ± 0.1 around 0.
                    out.push((conformity_score(-0.1, 0.1, y), y, g));
                }
                out
            };
            let cal = draw(1000);
            let test = draw(2000);
            let scores: Vec<f64> = cal.iter().map(|c| c.0).collect();
            let groups: Vec<usize> = cal.iter().map(|c| c.2).collect();
            let y: Vec<f64> = test.iter().map(|t| t.1).collect();
            let tg: Vec<usize> = test.iter().map(|t| t.2).collect();
            let worst = |mode| {
                let mut c = calibrate_scores(&scores, &groups, 2, 0.1, mode).unwrap();
                c.lower_floor = None;
                let ivs: Vec<_> = tg.iter().map(|&g| c.interval(-0.1, 0.1, g).unwrap()).collect();
                let r = coverage_report(&ivs, &y, &tg).unwrap();
                r.per_group.values().map(|g| g.coverage).fold(1.0, f64::min)
            };
            if worst(CalibrationMode::Equalized) >= worst(CalibrationMode::Marginal) {
                wins += 1;
            }
        }
        assert!(wins >= 45, "equalized won {wins} of 50");
    }
}
