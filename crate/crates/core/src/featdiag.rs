//! Grouping-variable diagnostics: plug-in mutual information, mRMR ranking,
//! the Breusch–Pagan F-test, Brown–Forsythe variance equality, degradation
//! dummies and group assignment.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ScenarioFeatures, FEATURE_NAMES};
use crate::error::{Error, Result};
use crate::special::f_upper_tail;
use crate::util::{fmt_sig, mean, percentile_sorted};
use crate::vehiclesim::DegradationState;

pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_CURVATURE_THRESHOLD: f64 = 0.003;
const BP_JITTER: f64 = 1e-10;

/// Mutual information in nats. `degenerate` is set when either column is constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    pub nats: f64,
    pub degenerate: bool,
}

/// A column reduced to cell indices.
#[derive(Debug, Clone)]
struct Binned {
    cells: Vec<usize>,
    levels: usize,
}

/// Columns with at most `bins` distinct values keep their categories;
/// others are cut at equal-frequency edges. Ties always share a cell.
fn discretize(col: &[f64], bins: usize) -> Binned {
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() <= bins {
        let cells = col
            .iter()
            .map(|v| distinct.binary_search_by(|d| d.total_cmp(v)).expect("value present"))
            .collect();
        return Binned {
            cells,
            levels: distinct.len(),
        };
    }
    let n = sorted.len();
    let edges: Vec<f64> = (1..bins).map(|i| sorted[i * n / bins]).collect();
    let cells = col.iter().map(|v| edges.partition_point(|e| e <= v)).collect();
    Binned { cells, levels: bins }
}

/// Plug-in MI of a joint count table.
pub fn mi_from_counts(table: &[Vec<u64>]) -> f64 {
    let n: u64 = table.iter().flatten().sum();
    if n == 0 {
        return 0.0;
    }
    let rows: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols_n = table.iter().map(Vec::len).max().unwrap_or(0);
    let cols: Vec<u64> = (0..cols_n)
        .map(|j| table.iter().map(|r| r.get(j).copied().unwrap_or(0)).sum())
        .collect();
    let nf = n as f64;
    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / nf * (c * nf / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

fn mi_binned(a: &Binned, b: &Binned) -> f64 {
    let mut table = vec![vec![0u64; b.levels]; a.levels];
    for (&i, &j) in a.cells.iter().zip(&b.cells) {
        table[i][j] += 1;
    }
    mi_from_counts(&table)
}

fn check_mi_input(x: &[f64], y: &[f64], bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::config("bins", "need at least 2 bins"));
    }
    if x.len() != y.len() {
        return Err(Error::Invalid(format!("column lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 10 * bins {
        return Err(Error::Invalid(format!(
            "{} rows is too few for {bins} bins (need {})",
            x.len(),
            10 * bins
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite value in MI input".into()));
    }
    Ok(())
}

pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<MiEstimate> {
    check_mi_input(x, y, bins)?;
    let (bx, by) = (discretize(x, bins), discretize(y, bins));
    if bx.levels < 2 || by.levels < 2 {
        return Ok(MiEstimate {
            nats: 0.0,
            degenerate: true,
        });
    }
    Ok(MiEstimate {
        nats: mi_binned(&bx, &by),
        degenerate: false,
    })
}

/// Greedy MID ranking: returns feature indices in selection order.
pub fn mrmr_rank(features: &[Vec<f64>], y: &[f64], bins: usize) -> Result<Vec<usize>> {
    if features.is_empty() {
        return Err(Error::Invalid("mRMR needs at least one feature".into()));
    }
    for f in features {
        check_mi_input(f, y, bins)?;
    }
    let by = discretize(y, bins);
    let binned: Vec<Binned> = features.par_iter().map(|f| discretize(f, bins)).collect();
    let relevance: Vec<f64> = binned.par_iter().map(|b| mi_binned(b, &by)).collect();
    let p = features.len();
    let mut redundancy_sum = vec![0.0; p];
    let mut chosen = Vec::with_capacity(p);
    let mut remaining: Vec<usize> = (0..p).collect();
    while !remaining.is_empty() {
        let k = chosen.len() as f64;
        let score = |j: usize| {
            if chosen.is_empty() {
                relevance[j]
            } else {
                relevance[j] - redundancy_sum[j] / k
            }
        };
        // `remaining` stays sorted, so the first strict maximum is the lowest index.
        let mut best = 0;
        for pos in 1..remaining.len() {
            if score(remaining[pos]) > score(remaining[best]) + 1e-12 {
                best = pos;
            }
        }
        let pick = remaining.remove(best);
        chosen.push(pick);
        let picked = &binned[pick];
        let add: Vec<(usize, f64)> = remaining.par_iter().map(|&j| (j, mi_binned(&binned[j], picked))).collect();
        for (j, mi) in add {
            redundancy_sum[j] += mi;
        }
    }
    Ok(chosen)
}

/// Converts a selection order into 1-based ranks per feature index.
pub fn ranks_from_order(order: &[usize]) -> Vec<usize> {
    let mut ranks = vec![0; order.len()];
    for (pos, &j) in order.iter().enumerate() {
        ranks[j] = pos + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreuschPagan {
    pub f: f64,
    pub p: f64,
    pub r2_aux: f64,
}

/// Least squares on `[1, X]` through jittered normal equations. Columns are
/// centered and scaled first; that leaves fitted values unchanged.
struct LeastSquares {
    chol: Vec<Vec<f64>>,
    design: Vec<Vec<f64>>,
}

impl LeastSquares {
    fn new(columns: &[Vec<f64>], names: &[String]) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        let mut design = vec![vec![1.0; n]];
        for (c, name) in columns.iter().zip(names) {
            let m = mean(c);
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::RankDeficient {
                    columns: vec![name.clone(), "intercept".into()],
                });
            }
            design.push(c.iter().map(|v| (v - m) / sd).collect());
        }
        let p = design.len();
        let mut gram = vec![vec![0.0; p]; p];
        for i in 0..p {
            for j in 0..=i {
                let g: f64 = design[i].iter().zip(&design[j]).map(|(a, b)| a * b).sum();
                gram[i][j] = g;
                gram[j][i] = g;
            }
            gram[i][i] += BP_JITTER;
        }
        // Cholesky; a pivot that collapses relative to its diagonal marks a
        // column lying in the span of the ones before it.
        let mut l = vec![vec![0.0; p]; p];
        for j in 0..p {
            let mut d = gram[j][j];
            for k in 0..j {
                d -= l[j][k] * l[j][k];
            }
            if d <= 1e-9 * gram[j][j] {
                return Err(Error::RankDeficient {
                    columns: collinear_names(&gram, j, names),
                });
            }
            let d = d.sqrt();
            l[j][j] = d;
            for i in j + 1..p {
                let mut s = gram[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                l[i][j] = s / d;
            }
        }
        Ok(LeastSquares { chol: l, design })
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let p = self.chol.len();
        let mut z = vec![0.0; p];
        for i in 0..p {
            let mut s = rhs[i];
            for k in 0..i {
                s -= self.chol[i][k] * z[k];
            }
            z[i] = s / self.chol[i][i];
        }
        for i in (0..p).rev() {
            let mut s = z[i];
            for k in i + 1..p {
                s -= self.chol[k][i] * z[k];
            }
            z[i] = s / self.chol[i][i];
        }
        z
    }

    fn residuals(&self, y: &[f64]) -> Vec<f64> {
        let xty: Vec<f64> = self.design.iter().map(|c| c.iter().zip(y).map(|(a, b)| a * b).sum()).collect();
        let beta = self.solve(&xty);
        (0..y.len())
            .map(|r| y[r] - self.design.iter().zip(&beta).map(|(c, b)| c[r] * b).sum::<f64>())
            .collect()
    }
}

/// Names the dependent column and the earlier columns it is built from.
fn collinear_names(gram: &[Vec<f64>], j: usize, names: &[String]) -> Vec<String> {
    let label = |i: usize| if i == 0 { "intercept".to_string() } else { names[i - 1].clone() };
    // Regress column j on columns 0..j with a small ridge to find the culprits.
    let sub: Vec<Vec<f64>> = (0..j)
        .map(|a| (0..j).map(|b| gram[a][b] + if a == b { 1e-8 } else { 0.0 }).collect())
        .collect();
    let rhs: Vec<f64> = (0..j).map(|a| gram[a][j]).collect();
    let coef = gauss_solve(sub, rhs);
    let mut out: Vec<String> = coef
        .iter()
        .enumerate()
        .filter(|(_, c)| c.abs() > 1e-6)
        .map(|(i, _)| label(i))
        .collect();
    out.push(label(j));
    out
}

fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &k| a[i][c].abs().total_cmp(&a[k][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        if a[c][c].abs() < 1e-300 {
            continue;
        }
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = if a[r][r].abs() < 1e-300 { 0.0 } else { (b[r] - s) / a[r][r] };
    }
    x
}

/// F-version Breusch–Pagan test of `y ~ [1, X]`, `X` given as columns.
pub fn breusch_pagan(columns: &[Vec<f64>], y: &[f64]) -> Result<BreuschPagan> {
    let names: Vec<String> = (0..columns.len()).map(|i| format!("x{i}")).collect();
    breusch_pagan_named(columns, &names, y)
}

pub fn breusch_pagan_named(columns: &[Vec<f64>], names: &[String], y: &[f64]) -> Result<BreuschPagan> {
    let n = y.len();
    let k = columns.len();
    if k == 0 {
        return Err(Error::Invalid("Breusch–Pagan needs at least one regressor".into()));
    }
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::Invalid("regressor length differs from response".into()));
    }
    if n <= k + 2 {
        return Err(Error::Invalid(format!("need n > k + 2, got n = {n}, k = {k}")));
    }
    let ls = LeastSquares::new(columns, names)?;
    let e2: Vec<f64> = ls.residuals(y).iter().map(|e| e * e).collect();
    aux_f(&ls, &e2, k)
}

fn aux_f(ls: &LeastSquares, e2: &[f64], k: usize) -> Result<BreuschPagan> {
    let n = e2.len();
    let m = mean(e2);
    let sst: f64 = e2.iter().map(|v| (v - m).powi(2)).sum();
    // Exactly constant squared residuals carry no signal.
    if sst <= f64::EPSILON * m * m * n as f64 || sst == 0.0 {
        return Ok(BreuschPagan {
            f: 0.0,
            p: 1.0,
            r2_aux: 0.0,
        });
    }
    let ssr: f64 = ls.residuals(e2).iter().map(|u| u * u).sum();
    let r2 = (1.0 - ssr / sst).clamp(0.0, 1.0);
    let (d1, d2) = (k as f64, (n - k - 1) as f64);
    let f = if r2 >= 1.0 { f64::INFINITY } else { (r2 / d1) / ((1.0 - r2) / d2) };
    Ok(BreuschPagan {
        f,
        p: f_upper_tail(f, d1, d2),
        r2_aux: r2,
    })
}

/// Brown–Forsythe statistic: one-way ANOVA F on absolute deviations from
/// each group's median. Groups with fewer than two members are dropped.
pub fn brown_forsythe(values: &[f64], groups: &[usize]) -> Result<f64> {
    if values.len() != groups.len() {
        return Err(Error::Invalid("values and groups differ in length".into()));
    }
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut by_group: Vec<Vec<f64>> = vec![Vec::new(); n_groups];
    for (&v, &g) in values.iter().zip(groups) {
        by_group[g].push(v);
    }
    let devs: Vec<Vec<f64>> = by_group
        .into_iter()
        .filter(|g| g.len() >= 2)
        .map(|mut g| {
            g.sort_by(f64::total_cmp);
            let med = percentile_sorted(&g, 50.0);
            g.iter().map(|v| (v - med).abs()).collect()
        })
        .collect();
    if devs.len() < 2 {
        return Ok(0.0);
    }
    let n: usize = devs.iter().map(Vec::len).sum();
    let grand = devs.iter().flatten().sum::<f64>() / n as f64;
    let mut between = 0.0;
    let mut within = 0.0;
    for g in &devs {
        let m = mean(g);
        between += g.len() as f64 * (m - grand).powi(2);
        within += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    let df_b = (devs.len() - 1) as f64;
    let df_w = (n - devs.len()) as f64;
    if within == 0.0 {
        return Ok(if between == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((between / df_b) / (within / df_w))
}

/// 1 when at least `n_w` of the eight steering-angle and steering-rate
/// factors are `<= level`. Torque factors are not counted.
pub fn make_dummy(degradations: &[DegradationState], n_w: usize, level: f64) -> Vec<u8> {
    degradations.iter().map(|d| dummy_value(d, n_w, level)).collect()
}

pub fn dummy_value(d: &DegradationState, n_w: usize, level: f64) -> u8 {
    let hits = d.steer_angle.iter().chain(&d.steer_rate).filter(|&&f| f <= level).count();
    u8::from(hits >= n_w)
}

fn validate_dummy(n_w: usize, level: f64) -> Result<()> {
    if !(1..=12).contains(&n_w) {
        return Err(Error::config("n_w", format!("must be in 1..=12, got {n_w}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config("level", format!("must be in (0, 1), got {level}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupingSpec {
    CurvatureThreshold { threshold: f64 },
    Dummy { n_w: usize, level: f64 },
    None,
}

impl Default for GroupingSpec {
    fn default() -> Self {
        GroupingSpec::CurvatureThreshold {
            threshold: DEFAULT_CURVATURE_THRESHOLD,
        }
    }
}

impl GroupingSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GroupingSpec::CurvatureThreshold { threshold } if !(threshold > 0.0 && threshold.is_finite()) => {
                Err(Error::config("threshold", format!("must be positive, got {threshold}")))
            }
            GroupingSpec::Dummy { n_w, level } => validate_dummy(n_w, level),
            _ => Ok(()),
        }
    }

    pub fn n_groups(&self) -> usize {
        match self {
            GroupingSpec::None => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for GroupingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupingSpec::CurvatureThreshold { threshold } => write!(f, "curvature:{threshold}"),
            GroupingSpec::Dummy { n_w, level } => write!(f, "dummy:{n_w},{level}"),
            GroupingSpec::None => write!(f, "none"),
        }
    }
}

impl FromStr for GroupingSpec {
    type Err = Error;

    /// Accepts `none`, `curvature:K` and `dummy:N,L`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("grouping", format!("expected none|curvature:K|dummy:N,L, got {s:?}"));
        let spec = match s.split_once(':') {
            None if s == "none" => GroupingSpec::None,
            Some(("curvature", k)) => GroupingSpec::CurvatureThreshold {
                threshold: k.trim().parse().map_err(|_| bad())?,
            },
            Some(("dummy", rest)) => {
                let (n, l) = rest.split_once(',').ok_or_else(bad)?;
                GroupingSpec::Dummy {
                    n_w: n.trim().parse().map_err(|_| bad())?,
                    level: l.trim().parse().map_err(|_| bad())?,
                }
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn assign_group(features: &ScenarioFeatures, spec: &GroupingSpec) -> usize {
    match *spec {
        GroupingSpec::CurvatureThreshold { threshold } => usize::from(features.k_abs_max > threshold),
        GroupingSpec::Dummy { n_w, level } => usize::from(dummy_value(&features.degradation, n_w, level)),
        GroupingSpec::None => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    pub bins: usize,
    /// Extra dummy columns as `(N_W, level)` pairs.
    pub dummies: Vec<(usize, f64)>,
    pub brown_forsythe: bool,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            bins: DEFAULT_BINS,
            dummies: vec![(2, 0.1), (2, 0.2)],
            brown_forsythe: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: String,
    pub mi_nats: f64,
    pub mi_degenerate: bool,
    pub mrmr_rank: usize,
    pub bp_f: f64,
    pub bp_p: f64,
    pub bf_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub config: DiagnoseConfig,
    pub mrmr_variant: String,
    pub rows: Vec<FeatureScore>,
}

impl DiagnosticsReport {
    pub fn row(&self, feature: &str) -> Option<&FeatureScore> {
        self.rows.iter().find(|r| r.feature == feature)
    }

    /// 1-based rank of `feature` when sorting by `key` descending.
    pub fn rank_by(&self, feature: &str, key: impl Fn(&FeatureScore) -> f64) -> Option<usize> {
        let target = key(self.row(feature)?);
        Some(1 + self.rows.iter().filter(|r| key(r) > target).count())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "feature,mi_nats,mrmr_rank,bp_F,bp_p,bf_F")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.feature,
                fmt_sig(r.mi_nats, 9),
                r.mrmr_rank,
                fmt_sig(r.bp_f, 9),
                fmt_sig(r.bp_p, 9),
                r.bf_f.map(|v| fmt_sig(v, 9)).unwrap_or_default()
            )?;
        }
        Ok(())
    }
}

pub fn dummy_name(n_w: usize, level: f64) -> String {
    format!("D_ge{n_w}_le{level}")
}

/// Named diagnostic columns: the predictor inputs followed by configured dummies.
pub fn diagnostic_columns(ds: &Dataset, dummies: &[(usize, f64)]) -> Result<Vec<(String, Vec<f64>)>> {
    let xs = ds.features();
    let mut cols: Vec<(String, Vec<f64>)> = FEATURE_NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| (name.to_string(), xs.iter().map(|x| x[j]).collect()))
        .collect();
    let degs: Vec<DegradationState> = ds.samples.iter().map(|s| s.features.degradation).collect();
    for &(n_w, level) in dummies {
        validate_dummy(n_w, level)?;
        let d = make_dummy(&degs, n_w, level);
        cols.push((dummy_name(n_w, level), d.into_iter().map(f64::from).collect()));
    }
    Ok(cols)
}

/// Groups for Brown–Forsythe: binary columns split by value, others at the median.
fn split_for_bf(col: &[f64]) -> Vec<usize> {
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let cut = if sorted.len() == 2 {
        sorted[0]
    } else {
        let mut all = col.to_vec();
        all.sort_by(f64::total_cmp);
        percentile_sorted(&all, 50.0)
    };
    col.iter().map(|&v| usize::from(v > cut)).collect()
}

/// Per-feature MI, mRMR rank and univariate Breusch–Pagan scores against the labels.
pub fn diagnose(ds: &Dataset, cfg: &DiagnoseConfig) -> Result<DiagnosticsReport> {
    let cols = diagnostic_columns(ds, &cfg.dummies)?;
    let y = ds.labels();
    let values: Vec<Vec<f64>> = cols.iter().map(|(_, c)| c.clone()).collect();
    let order = mrmr_rank(&values, &y, cfg.bins)?;

    let ranks = ranks_from_order(&order);
    let rows = cols
        .par_iter()
        .zip(ranks.par_iter())
        .map(|((name, col), &rank)| {
            let mi = mutual_information(col, &y, cfg.bins)?;
            let (bp_f, bp_p) = match breusch_pagan_named(std::slice::from_ref(col), std::slice::from_ref(name), &y) {
                Ok(bp) => (bp.f, bp.p),
                // A constant column carries no variance signal.
                Err(Error::RankDeficient { .. }) => (0.0, 1.0),
                Err(e) => return Err(e),
            };
            let bf_f = if cfg.brown_forsythe {
                Some(brown_forsythe(&y, &split_for_bf(col))?)
            } else {
                None
            };
            Ok(FeatureScore {
                feature: name.clone(),
                mi_nats: mi.nats,
                mi_degenerate: mi.degenerate,
                mrmr_rank: rank,
                bp_f,
                bp_p,
                bf_f,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiagnosticsReport {
        config: cfg.clone(),
        mrmr_variant: "MID".into(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub n: [usize; 2],
    pub label_variance: [f64; 2],
    pub bf_f: f64,
}

/// Group sizes, per-group label variance and Brown–Forsythe F for each candidate
/// curvature threshold.
pub fn evaluate_thresholds(ds: &Dataset, thresholds: &[f64]) -> Result<Vec<ThresholdScore>> {
    let y = ds.labels();
    thresholds
        .iter()
        .map(|&threshold| {
            let spec = GroupingSpec::CurvatureThreshold { threshold };
            spec.validate()?;
            let groups: Vec<usize> = ds.samples.iter().map(|s| assign_group(&s.features, &spec)).collect();
            let mut split: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            for (&g, &v) in groups.iter().zip(&y) {
                split[g].push(v);
            }
            Ok(ThresholdScore {
                threshold,
                n: [split[0].len(), split[1].len()],
                label_variance: [crate::util::variance(&split[0]), crate::util::variance(&split[1])],
                bf_f: brown_forsythe(&y, &groups)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn uniform(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn plug_in_matches_hand_computed_table() {
        let table = vec![vec![20, 5, 0, 0], vec![5, 20, 5, 0], vec![0, 5, 20, 5], vec![0, 0, 5, 20]];
        // Row sums 25,30,30,25; column sums equal by symmetry; n = 110.
        let n = 110.0f64;
        let m = [25.0, 30.0, 30.0, 25.0];
        let mut expect = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let c = table[i][j] as f64;
                if c > 0.0 {
                    expect += c / n * (c * n / (m[i] * m[j])).ln();
                }
            }
        }
        assert!((mi_from_counts(&table) - expect).abs() < 1e-15);
        assert!((expect - 0.681_484_465_529).abs() < 1e-9, "{expect}");

        // The same table expanded into samples of two 4-category columns.
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (i, r) in table.iter().enumerate() {
            for (j, &c) in r.iter().enumerate() {
                for _ in 0..c {
                    x.push(i as f64);
                    y.push(j as f64);
                }
            }
        }
        let mi = mutual_information(&x, &y, 4).unwrap();
        assert!((mi.nats - expect).abs() < 1e-12);
    }

    #[test]
    fn self_information_of_eight_categories() {
        let mut rng = seeded_rng(1);
        let x: Vec<f64> = (0..100_000).map(|_| rng.random_range(0..8) as f64).collect();
        let mi = mutual_information(&x, &x, DEFAULT_BINS).unwrap();
        assert!((mi.nats - 8f64.ln()).abs() < 0.05);
    }

    #[test]
    fn independent_columns_have_little_information() {
        let x = uniform(100_000, 2);
        let y = uniform(100_000, 3);
        assert!(mutual_information(&x, &y, DEFAULT_BINS).unwrap().nats < 0.02);
    }

    #[test]
    fn constant_column_is_flagged() {
        let x = vec![1.5; 200];
        let y = uniform(200, 4);
        let mi = mutual_information(&x, &y, DEFAULT_BINS).unwrap();
        assert_eq!(mi, MiEstimate { nats: 0.0, degenerate: true });
    }

    #[test]
    fn mi_preconditions() {
        let x = uniform(100, 5);
        assert!(mutual_information(&x, &x, 16).is_err());
        assert!(mutual_information(&x, &x, 1).is_err());
        assert!(mutual_information(&x, &x[..50], 2).is_err());
    }

    #[test]
    fn tied_values_share_a_cell() {
        let mut x = vec![0.675; 400];
        x.extend(uniform(600, 6));
        let b = discretize(&x, 16);
        let c = b.cells[0];
        assert!(b.cells[..400].iter().all(|&v| v == c));
    }

    #[test]
    fn mrmr_picks_the_signal_first() {
        let mut rng = seeded_rng(7);
        let y = uniform(5000, 8);
        let signal: Vec<f64> = y.iter().map(|v| v + 0.05 * rng.random::<f64>()).collect();
        let noise = uniform(5000, 9);
        assert_eq!(mrmr_rank(&[noise.clone(), signal.clone()], &y, 16).unwrap(), vec![1, 0]);
        assert_eq!(mrmr_rank(&[signal, noise], &y, 16).unwrap(), vec![0, 1]);
    }

    #[test]
    fn mrmr_penalizes_an_exact_copy() {
        let mut rng = seeded_rng(10);
        let n = 20_000;
        let y = uniform(n, 11);
        let f: Vec<f64> = y.iter().map(|v| v + 0.3 * rng.random::<f64>()).collect();
        let g: Vec<f64> = y.iter().map(|v| v + 3.0 * rng.random::<f64>()).collect();
        let cols = vec![f.clone(), f.clone(), g.clone()];
        let order = mrmr_rank(&cols, &y, 16).unwrap();
        // Hand scores after picking f: copy = I(f;y) - I(f;f), g = I(g;y) - I(g;f).
        let mi = |a: &[f64], b: &[f64]| mutual_information(a, b, 16).unwrap().nats;
        let copy_score = mi(&f, &y) - mi(&f, &f);
        let g_score = mi(&g, &y) - mi(&g, &f);
        assert!(g_score > copy_score);
        assert_eq!(order, vec![0, 2, 1]);
    }

    #[test]
    fn mrmr_single_feature() {
        let y = uniform(500, 12);
        assert_eq!(ranks_from_order(&mrmr_rank(std::slice::from_ref(&y), &y, 16).unwrap()), vec![1]);
    }

    #[test]
    fn mrmr_ties_go_to_lower_index() {
        let y = uniform(1000, 13);
        let order = mrmr_rank(&[y.clone(), y.clone()], &y, 16).unwrap();
        assert_eq!(order, vec![0, 1]);
    }

    fn gaussian(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Two-regression reference built on explicit 2x2 normal equations.
    fn reference_bp(x: &[f64], y: &[f64]) -> f64 {
        let fit = |t: &[f64]| {
            let n = x.len() as f64;
            let (sx, sxx) = (x.iter().sum::<f64>(), x.iter().map(|v| v * v).sum::<f64>());
            let (st, sxt) = (t.iter().sum::<f64>(), x.iter().zip(t).map(|(a, b)| a * b).sum::<f64>());
            let det = n * sxx - sx * sx;
            let b1 = (n * sxt - sx * st) / det;
            let b0 = (st - b1 * sx) / n;
            x.iter().zip(t).map(|(a, b)| b - b0 - b1 * a).collect::<Vec<f64>>()
        };
        let e2: Vec<f64> = fit(y).iter().map(|e| e * e).collect();
        let u = fit(&e2);
        let m = mean(&e2);
        let sst: f64 = e2.iter().map(|v| (v - m).powi(2)).sum();
        let r2 = 1.0 - u.iter().map(|v| v * v).sum::<f64>() / sst;
        r2 / ((1.0 - r2) / (x.len() as f64 - 2.0))
    }

    #[test]
    fn bp_detects_variance_growing_with_x() {
        let x = uniform(2000, 20);
        let z = gaussian(2000, 21);
        let y: Vec<f64> = x.iter().zip(&z).map(|(a, e)| a + a * e).collect();
        let bp = breusch_pagan(std::slice::from_ref(&x), &y).unwrap();
        assert!(bp.p < 0.01, "{bp:?}");
        assert!((bp.f - reference_bp(&x, &y)).abs() < 1e-8 * bp.f);
    }

    #[test]
    fn bp_constant_squared_residuals_give_zero() {
        // Residuals of +-1 alternating, orthogonal to x and the intercept.
        let x: Vec<f64> = (0..100).map(|i| (i / 2) as f64).collect();
        let y: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let bp = breusch_pagan(&[x], &y).unwrap();
        assert_eq!(bp.f, 0.0);
        assert_eq!(bp.p, 1.0);
    }

    #[test]
    fn bp_names_collinear_columns() {
        let a = uniform(300, 22);
        let b = uniform(300, 23);
        let c: Vec<f64> = a.iter().zip(&b).map(|(u, v)| 2.0 * u - v).collect();
        let y = uniform(300, 24);
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        match breusch_pagan_named(&[a, b, c], &names, &y) {
            Err(Error::RankDeficient { columns }) => {
                assert!(columns.contains(&"a".to_string()));
                assert!(columns.contains(&"b".to_string()));
                assert!(columns.contains(&"c".to_string()));
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        let names = vec!["k".to_string()];
        assert!(matches!(
            breusch_pagan_named(&[vec![3.0; 50]], &names, &uniform(50, 25)),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn bp_needs_enough_rows() {
        assert!(breusch_pagan(&[vec![1.0, 2.0, 3.0]], &[1.0, 2.0, 4.0]).is_err());
    }

    #[test]
    fn bp_null_rejects_near_nominal_rate() {
        let mut rejections = 0;
        for t in 0..200 {
            let x = uniform(500, 1000 + t);
            let y = gaussian(500, 5000 + t);
            if breusch_pagan(&[x], &y).unwrap().p < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / 200.0;
        assert!((rate - 0.05).abs() < 0.04, "{rate}");
    }

    #[test]
    fn brown_forsythe_separates_spreads() {
        let a = gaussian(500, 30);
        let b: Vec<f64> = gaussian(500, 31).iter().map(|v| 4.0 * v).collect();
        let mut values = a.clone();
        values.extend(&b);
        let groups: Vec<usize> = (0..1000).map(|i| usize::from(i >= 500)).collect();
        assert!(brown_forsythe(&values, &groups).unwrap() > 100.0);
        let same: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        assert!(brown_forsythe(&values[..500], &same[..500]).unwrap() < 10.0);
        assert_eq!(brown_forsythe(&values, &vec![0; 1000]).unwrap(), 0.0);
    }

    #[test]
    fn dummy_examples() {
        let nominal = DegradationState::nominal();
        assert_eq!(dummy_value(&nominal, 1, 0.5), 0);
        let mut d = nominal;
        d.steer_angle[1] = 0.05;
        d.steer_rate[3] = 0.05;
        assert_eq!(dummy_value(&d, 2, 0.1), 1);
        assert_eq!(dummy_value(&d, 3, 0.1), 0);
        let mut d = nominal;
        d.steer_rate[0] = 0.2;
        assert_eq!(dummy_value(&d, 1, 0.2), 1);
        let mut d = nominal;
        d.torque = [0.0; 4];
        assert_eq!(dummy_value(&d, 1, 0.5), 0);
    }

    #[test]
    fn grouping_assignment() {
        let mut f = ScenarioFeatures::new(
            &crate::roadgeom::segment_features(&crate::roadgeom::RoadSegment::straight(0, 100.0, 3.5)),
            &crate::vehiclesim::ManeuverTemplate::lane_follow(40.0, 3.0),
            &DegradationState::nominal(),
        );
        let spec = GroupingSpec::default();
        f.k_abs_max = 0.004;
        assert_eq!(assign_group(&f, &spec), 1);
        f.k_abs_max = 0.003;
        assert_eq!(assign_group(&f, &spec), 0);
        assert_eq!(assign_group(&f, &GroupingSpec::None), 0);
        f.degradation.steer_angle = [0.05, 0.05, 1.0, 1.0];
        assert_eq!(assign_group(&f, &GroupingSpec::Dummy { n_w: 2, level: 0.1 }), 1);
    }

    #[test]
    fn grouping_spec_parsing() {
        assert_eq!("none".parse::<GroupingSpec>().unwrap(), GroupingSpec::None);
        assert_eq!(
            "curvature:0.003".parse::<GroupingSpec>().unwrap(),
            GroupingSpec::CurvatureThreshold { threshold: 0.003 }
        );
        assert_eq!(
            "dummy:2,0.1".parse::<GroupingSpec>().unwrap(),
            GroupingSpec::Dummy { n_w: 2, level: 0.1 }
        );
        for bad in ["", "curvature:", "curvature:-1", "dummy:0,0.1", "dummy:2,1.0", "dummy:2", "k:1"] {
            assert!(bad.parse::<GroupingSpec>().is_err(), "{bad}");
        }
        for spec in [GroupingSpec::None, GroupingSpec::default(), GroupingSpec::Dummy { n_w: 3, level: 0.25 }] {
            assert_eq!(spec.to_string().parse::<GroupingSpec>().unwrap(), spec);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mi_is_symmetric_and_nonnegative(seed in 0u64..10_000, bins in 2usize..20, n in 400usize..2000) {
            let x = uniform(n, seed);
            let y: Vec<f64> = uniform(n, seed + 1).iter().zip(&x).map(|(a, b)| a * b).collect();
            let a = mutual_information(&x, &y, bins).unwrap().nats;
            let b = mutual_information(&y, &x, bins).unwrap().nats;
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn mrmr_starts_at_mi_argmax(seed in 0u64..10_000) {
            let y = uniform(800, seed);
            let cols: Vec<Vec<f64>> = (0..4u64)
                .map(|k| uniform(800, seed + 10 + k).iter().zip(&y).map(|(u, v)| v + (k as f64) * u).collect())
                .collect();
            let order = mrmr_rank(&cols, &y, 8).unwrap();
            let mis: Vec<f64> = cols.iter().map(|c| mutual_information(c, &y, 8).unwrap().nats).collect();
            let best = (0..4).fold(0, |b, j| if mis[j] > mis[b] + 1e-12 { j } else { b });
            prop_assert_eq!(order[0], best);
            let mut sorted = order.clone();
            sorted.sort();
            prop_assert_eq!(sorted, vec![0, 1, 2, 3]);
        }

        #[test]
        fn bp_ignores_response_shift(seed in 0u64..10_000, shift in -50.0f64..50.0) {
            let x = uniform(300, seed);
            let y: Vec<f64> = gaussian(300, seed + 1).iter().zip(&x).map(|(e, a)| e * (0.2 + a)).collect();
            let moved: Vec<f64> = y.iter().map(|v| v + shift).collect();
            let a = breusch_pagan(std::slice::from_ref(&x), &y).unwrap();
            let b = breusch_pagan(&[x], &moved).unwrap();
            prop_assert!((a.f - b.f).abs() < 1e-9 * a.f.max(1.0));
            prop_assert!((a.p - b.p).abs() < 1e-9);
        }
    }
}
