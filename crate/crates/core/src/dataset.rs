//! Scenario grids, labelled samples, CSV persistence and splits.
//!
//! One scenario is a (segment, maneuver template, degradation state) triple;
//! running it through the simulator yields one [`Sample`]. The CSV layout is
//! fixed (see [`CSV_HEADER`]); floats are written with nine significant
//! digits so identical inputs give identical bytes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roadgeom::{segment_features, RoadSegment, SegmentFeatures};
use crate::util::{fmt_sig, mix_seed, round_sig, seeded_rng, sha256_hex};
use crate::vehiclesim::{
    run_scenario, DegradationState, ManeuverKind, ManeuverTemplate, VehicleParams, DEVIATION_CUTOFF,
    SIMULATOR_VERSION,
};

pub const CSV_HEADER: [&str; 23] = [
    "run_id",
    "r_q",
    "w_min",
    "w_max",
    "k_min",
    "k_max",
    "v_q",
    "a_lat_max",
    "d_fl",
    "d_fr",
    "d_rl",
    "d_rr",
    "dr_fl",
    "dr_fr",
    "dr_rl",
    "dr_rr",
    "t_fl",
    "t_fr",
    "t_rl",
    "t_rr",
    "k_abs_max",
    "eps_lat_max",
    "clipped",
];

/// Predictor input columns, in vector order. `w_min` is recorded as metadata
/// only; the predictor sees the maximum lane width.
pub const FEATURE_NAMES: [&str; 19] = [
    "r_q",
    "w_max",
    "k_min",
    "k_max",
    "v_q",
    "a_lat_max",
    "d_fl",
    "d_fr",
    "d_rl",
    "d_rr",
    "dr_fl",
    "dr_fr",
    "dr_rl",
    "dr_rr",
    "t_fl",
    "t_fr",
    "t_rl",
    "t_rr",
    "k_abs_max",
];

pub const N_FEATURES: usize = FEATURE_NAMES.len();

/// Acceleration levels span this range evenly.
pub const ACCEL_RANGE: (f64, f64) = (2.5, 4.5);
/// Per-run target speed range, km/h.
pub const SPEED_RANGE_KMH: (f64, f64) = (30.0, 50.0);

/// Named scenario features; the source of both the predictor vector and the
/// grouping variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFeatures {
    pub r_q: i8,
    pub w_min: f64,
    pub w_max: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub v_q: f64,
    pub a_lat_max: f64,
    pub degradation: DegradationState,
    pub k_abs_max: f64,
}

impl ScenarioFeatures {
    pub fn new(geom: &SegmentFeatures, m: &ManeuverTemplate, deg: &DegradationState) -> Self {
        ScenarioFeatures {
            r_q: m.direction,
            w_min: geom.w_min,
            w_max: geom.w_max,
            k_min: geom.k_min,
            k_max: geom.k_max,
            v_q: m.target_speed_kmh,
            a_lat_max: m.a_lat_max,
            degradation: *deg,
            k_abs_max: geom.k_abs_max,
        }
    }

    pub fn from_scenario(seg: &RoadSegment, m: &ManeuverTemplate, deg: &DegradationState) -> Self {
        Self::new(&segment_features(seg), m, deg)
    }

    /// The 19-value predictor input in [`FEATURE_NAMES`] order.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(N_FEATURES);
        x.extend_from_slice(&[
            f64::from(self.r_q),
            self.w_max,
            self.k_min,
            self.k_max,
            self.v_q,
            self.a_lat_max,
        ]);
        x.extend_from_slice(&self.degradation.factors());
        x.push(self.k_abs_max);
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub run_id: u64,
    pub features: ScenarioFeatures,
    pub eps_lat_max: f64,
    pub clipped: bool,
}

impl Sample {
    /// Rounds every float to the CSV's 9 significant digits, so a sample
    /// survives a write/read cycle unchanged.
    pub fn quantized(mut self) -> Self {
        let f = &mut self.features;
        for v in [&mut f.w_min, &mut f.w_max, &mut f.k_min, &mut f.k_max, &mut f.v_q, &mut f.a_lat_max, &mut f.k_abs_max] {
            *v = round_sig(*v, 9);
        }
        let d = &mut f.degradation;
        for v in d.steer_angle.iter_mut().chain(d.steer_rate.iter_mut()).chain(d.torque.iter_mut()) {
            *v = round_sig(*v, 9);
        }
        self.eps_lat_max = round_sig(self.eps_lat_max, 9);
        self
    }

    pub fn x(&self) -> Vec<f64> {
        self.features.to_vector()
    }

    pub fn y(&self) -> f64 {
        self.eps_lat_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub base_seed: u64,
    pub config_hash: String,
    pub simulator_version: String,
    #[serde(default)]
    pub excluded_runs: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(Sample::x).collect()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(Sample::y).collect()
    }

    /// Same provenance, different samples.
    pub fn subset(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            samples,
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub run_id: u64,
    pub segment: usize,
    pub maneuver: ManeuverTemplate,
    pub degradation: DegradationState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub seed: u64,
    pub segments: Vec<RoadSegment>,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    pub fn features(&self, sc: &Scenario) -> ScenarioFeatures {
        ScenarioFeatures::from_scenario(&self.segments[sc.segment], &sc.maneuver, &sc.degradation)
    }
}

/// Evenly spaced acceleration levels over [`ACCEL_RANGE`].
pub fn accel_levels(n: usize) -> Vec<f64> {
    let (lo, hi) = ACCEL_RANGE;
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

const DEGRADATION_STREAM: u64 = 0xD6_0000_0000;

/// Builds the scenario grid over `segments`.
///
/// Per segment: maneuver `i` is lane change left / lane change right / lane
/// follow for `i % 3` = 0 / 1 / 2 at acceleration level `i / 3` of
/// `ceil(n_maneuvers / 3)` levels. Degradation 0 is nominal, the others draw
/// all twelve factors i.i.d. uniform on [0, 1] from the stream
/// `mix_seed(seed ^ DEGRADATION_STREAM, segment)`. The speed of run `r` is
/// drawn from `mix_seed(seed, r)`. Run ids enumerate segment-major, then
/// maneuver, then degradation.
pub fn sample_scenarios(
    segments: Vec<RoadSegment>,
    n_maneuvers: usize,
    n_degradations: usize,
    seed: u64,
) -> Result<ScenarioSet> {
    if segments.is_empty() {
        return Err(Error::config("n_segments", "at least one segment required"));
    }
    if n_maneuvers == 0 {
        return Err(Error::config("n_maneuvers", "at least one maneuver required"));
    }
    if n_degradations == 0 {
        return Err(Error::config("n_degradations", "at least one degradation setting required"));
    }
    let levels = accel_levels(n_maneuvers.div_ceil(3));
    let mut scenarios = Vec::with_capacity(segments.len() * n_maneuvers * n_degradations);
    for (seg_idx, _) in segments.iter().enumerate() {
        let mut deg_rng = seeded_rng(mix_seed(seed ^ DEGRADATION_STREAM, seg_idx as u64));
        let degradations: Vec<DegradationState> = (0..n_degradations)
            .map(|d| {
                if d == 0 {
                    DegradationState::nominal()
                } else {
                    let mut f = [0.0; 12];
                    for v in &mut f {
                        *v = deg_rng.random::<f64>();
                    }
                    DegradationState::from_factors(f).expect("unit draws")
                }
            })
            .collect();
        for m in 0..n_maneuvers {
            let a = levels[m / 3];
            for (d, deg) in degradations.iter().enumerate() {
                let run_id = ((seg_idx * n_maneuvers + m) * n_degradations + d) as u64;
                let mut rng = seeded_rng(mix_seed(seed, run_id));
                let v = rng.random_range(SPEED_RANGE_KMH.0..=SPEED_RANGE_KMH.1);
                let maneuver = match m % 3 {
                    0 => ManeuverTemplate::lane_change(1, v, a),
                    1 => ManeuverTemplate::lane_change(-1, v, a),
                    _ => ManeuverTemplate::lane_follow(v, a),
                };
                scenarios.push(Scenario {
                    run_id,
                    segment: seg_idx,
                    maneuver,
                    degradation: *deg,
                });
            }
        }
    }
    Ok(ScenarioSet {
        seed,
        segments,
        scenarios,
    })
}

/// Fraction of faulted runs above which generation fails.
pub const MAX_FAULT_FRACTION: f64 = 0.01;

/// Simulates every scenario. Faulted runs are excluded and logged; more than
/// [`MAX_FAULT_FRACTION`] faults fail the whole generation.
pub fn generate_dataset(set: &ScenarioSet, params: &VehicleParams, config_hash: &str) -> Result<Dataset> {
    let done = BTreeMap::new();
    generate_with_done(set, params, config_hash, done, None::<&mut Vec<u8>>)
}

/// Like [`generate_dataset`], but appends finished rows to `checkpoint` and
/// skips run ids already present there, so an interrupted generation resumes
/// where it stopped.
pub fn generate_dataset_resumable(
    set: &ScenarioSet,
    params: &VehicleParams,
    config_hash: &str,
    checkpoint: &Path,
) -> Result<Dataset> {
    let mut done = BTreeMap::new();
    if checkpoint.exists() {
        for s in read_csv_rows(BufReader::new(fs::File::open(checkpoint)?))? {
            done.insert(s.run_id, s);
        }
    } else {
        fs::write(checkpoint, format!("{}\n", CSV_HEADER.join(",")))?;
    }
    let mut file = fs::OpenOptions::new().append(true).open(checkpoint)?;
    generate_with_done(set, params, config_hash, done, Some(&mut file))
}

const CHECKPOINT_CHUNK: usize = 512;

fn generate_with_done<W: Write>(
    set: &ScenarioSet,
    params: &VehicleParams,
    config_hash: &str,
    mut done: BTreeMap<u64, Sample>,
    mut checkpoint: Option<W>,
) -> Result<Dataset> {
    let mut ids = HashSet::with_capacity(set.scenarios.len());
    if set.scenarios.iter().any(|s| !ids.insert(s.run_id)) {
        return Err(Error::Generation("duplicate run ids in scenario set".into()));
    }
    let todo: Vec<&Scenario> = set.scenarios.iter().filter(|s| !done.contains_key(&s.run_id)).collect();
    let mut excluded = Vec::new();
    for chunk in todo.chunks(CHECKPOINT_CHUNK) {
        let results: Vec<(u64, Result<Sample>)> = chunk
            .par_iter()
            .map(|sc| (sc.run_id, simulate_scenario(set, sc, params)))
            .collect();
        let mut fresh = Vec::new();
        for (run_id, res) in results {
            match res {
                Ok(sample) => fresh.push(sample),
                Err(e) => {
                    log::warn!("run {run_id} excluded: {e}");
                    excluded.push(run_id);
                }
            }
        }
        if let Some(w) = checkpoint.as_mut() {
            for s in &fresh {
                writeln!(w, "{}", csv_row(s))?;
            }
            w.flush()?;
        }
        for s in fresh {
            done.insert(s.run_id, s);
        }
    }
    if excluded.len() as f64 > MAX_FAULT_FRACTION * set.scenarios.len() as f64 {
        return Err(Error::Generation(format!(
            "{} of {} runs faulted",
            excluded.len(),
            set.scenarios.len()
        )));
    }
    let wanted: BTreeSet<u64> = set.scenarios.iter().map(|s| s.run_id).collect();
    let samples = done.into_values().filter(|s| wanted.contains(&s.run_id)).collect();
    excluded.sort_unstable();
    Ok(Dataset {
        samples,
        provenance: Provenance {
            base_seed: set.seed,
            config_hash: config_hash.to_string(),
            simulator_version: SIMULATOR_VERSION.to_string(),
            excluded_runs: excluded,
        },
    })
}

fn simulate_scenario(set: &ScenarioSet, sc: &Scenario, params: &VehicleParams) -> Result<Sample> {
    let seg = &set.segments[sc.segment];
    let out = run_scenario(seg, &sc.maneuver, &sc.degradation, params)?;
    Ok(Sample {
        run_id: sc.run_id,
        features: set.features(sc),
        eps_lat_max: out.eps_lat_max,
        clipped: out.clipped,
    }
    .quantized())
}

/// Uniform draw without replacement: the first `n_test` shuffled samples form
/// the test split, the next `n_cal` the calibration split, the rest training.
/// Each split keeps run-id order.
pub fn split_dataset(ds: &Dataset, n_cal: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if n_cal + n_test >= ds.len() && n_cal + n_test > 0 {
        return Err(Error::SplitSize {
            n_cal,
            n_test,
            available: ds.len(),
        });
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut seeded_rng(mix_seed(seed, 0x5711)));
    let mut role = vec![0u8; ds.len()];
    for &i in &idx[..n_test] {
        role[i] = 2;
    }
    for &i in &idx[n_test..n_test + n_cal] {
        role[i] = 1;
    }
    let mut parts: [Vec<Sample>; 3] = Default::default();
    for (s, r) in ds.samples.iter().zip(role) {
        parts[r as usize].push(s.clone());
    }
    let [train, cal, test] = parts;
    Ok((ds.subset(train), ds.subset(cal), ds.subset(test)))
}

pub fn csv_row(s: &Sample) -> String {
    let f = &s.features;
    let mut cols: Vec<String> = Vec::with_capacity(CSV_HEADER.len());
    cols.push(s.run_id.to_string());
    cols.push(f.r_q.to_string());
    for v in [f.w_min, f.w_max, f.k_min, f.k_max, f.v_q, f.a_lat_max] {
        cols.push(fmt_sig(v, 9));
    }
    for v in f.degradation.factors() {
        cols.push(fmt_sig(v, 9));
    }
    cols.push(fmt_sig(f.k_abs_max, 9));
    cols.push(fmt_sig(s.eps_lat_max, 9));
    cols.push(u8::from(s.clipped).to_string());
    cols.join(",")
}

pub fn write_csv<W: Write>(mut out: W, samples: &[Sample]) -> std::io::Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for s in samples {
        writeln!(out, "{}", csv_row(s))?;
    }
    Ok(())
}

pub fn read_csv_rows<R: BufRead>(input: R) -> Result<Vec<Sample>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != CSV_HEADER.join(",") {
        return Err(Error::Invalid(format!("unexpected dataset header `{header}`")));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_row(&line).map_err(|e| Error::Invalid(format!("dataset line {}: {e}", lineno + 2)))?);
    }
    Ok(out)
}

fn parse_row(line: &str) -> std::result::Result<Sample, String> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != CSV_HEADER.len() {
        return Err(format!("expected {} columns, got {}", CSV_HEADER.len(), cols.len()));
    }
    let num = |i: usize| cols[i].trim().parse::<f64>().map_err(|e| format!("{}: {e}", CSV_HEADER[i]));
    let mut factors = [0.0; 12];
    for (j, f) in factors.iter_mut().enumerate() {
        *f = num(8 + j)?;
    }
    let degradation = DegradationState::from_factors(factors).map_err(|e| e.to_string())?;
    let eps = num(21)?;
    if !(0.0..=DEVIATION_CUTOFF).contains(&eps) {
        return Err(format!("label {eps} outside [0, {DEVIATION_CUTOFF}]"));
    }
    Ok(Sample {
        run_id: cols[0].trim().parse().map_err(|e| format!("run_id: {e}"))?,
        features: ScenarioFeatures {
            r_q: cols[1].trim().parse().map_err(|e| format!("r_q: {e}"))?,
            w_min: num(2)?,
            w_max: num(3)?,
            k_min: num(4)?,
            k_max: num(5)?,
            v_q: num(6)?,
            a_lat_max: num(7)?,
            degradation,
            k_abs_max: num(20)?,
        },
        eps_lat_max: eps,
        clipped: match cols[22].trim() {
            "1" => true,
            "0" => false,
            other => return Err(format!("clipped: `{other}` is not 0/1")),
        },
    })
}

/// Writes `<stem>.csv` plus the provenance sidecar `<stem>.provenance.json`.
pub fn save_dataset(ds: &Dataset, csv_path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(&mut buf, &ds.samples)?;
    fs::write(csv_path, buf)?;
    fs::write(provenance_path(csv_path), serde_json::to_string_pretty(&ds.provenance)?)?;
    Ok(())
}

pub fn load_dataset(csv_path: &Path) -> Result<Dataset> {
    let samples = read_csv_rows(BufReader::new(fs::File::open(csv_path)?))?;
    let prov_path = provenance_path(csv_path);
    let provenance = if prov_path.exists() {
        serde_json::from_str(&fs::read_to_string(prov_path)?)?
    } else {
        Provenance {
            base_seed: 0,
            config_hash: "unknown".into(),
            simulator_version: "unknown".into(),
            excluded_runs: Vec::new(),
        }
    };
    Ok(Dataset { samples, provenance })
}

pub fn provenance_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("provenance.json")
}

/// Stable hash of any serializable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("serializable config").as_bytes())
}

/// Scenario lookup by run id, for re-deriving features from stored parameters.
pub fn scenario_index(set: &ScenarioSet) -> BTreeMap<u64, &Scenario> {
    set.scenarios.iter().map(|s| (s.run_id, s)).collect()
}

pub fn is_lane_change(s: &Sample) -> bool {
    s.features.r_q != 0
}

pub fn maneuver_kind(s: &Sample) -> ManeuverKind {
    if is_lane_change(s) {
        ManeuverKind::LaneChange
    } else {
        ManeuverKind::LaneFollow
    }
}
