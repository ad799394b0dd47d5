//! The end-to-end pipeline as resumable stages over one output directory.
//!
//! Every stage reads the artifacts of earlier stages by path, writes its own,
//! and leaves a run manifest under `manifests/` with the effective config and
//! the SHA-256 of each input and output. Nothing time- or host-dependent is
//! written, so identical configs give byte-identical artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::{
    calibrate, evaluate, histogram_svg, length_histogram, predict_intervals, select_model,
    CalibrationResult, CoverageReport, Histogram, Selection,
};
use crate::dataset::{
    config_hash, generate_dataset_resumable, load_dataset, provenance_path, sample_scenarios, save_dataset,
    split_dataset, Dataset,
};
use crate::error::{Error, Result};
use crate::featdiag::{diagnose, evaluate_thresholds, DiagnoseConfig, GroupingSpec};
use crate::gate::{decision_svg, evaluate_candidates, Calibrated, GateDecision, DEFAULT_ACCELS};
use crate::quantnet::{train_logged, write_training_log, QuantileModel, TrainConfig, MODEL_SCHEMA};
use crate::roadgeom::{generate_segments, RoadSegment, SegmentGenConfig};
use crate::util::{fmt_sig, mix_seed, sha256_hex};
use crate::vehiclesim::{DegradationState, VehicleParams, SIMULATOR_VERSION};

pub const ROADS_FILE: &str = "roads.json";
pub const DATASET_FILE: &str = "dataset.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const THRESHOLDS_FILE: &str = "thresholds.csv";
pub const CANDIDATES_FILE: &str = "models/candidates.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const DECISION_CSV: &str = "gate_decision.csv";
pub const DECISION_SVG: &str = "gate_decision.svg";
pub const REPORT_FILE: &str = "report.md";
pub const REPORT_JSON: &str = "report.json";
pub const LENGTHS_CSV: &str = "interval_lengths.csv";
pub const LENGTHS_SVG: &str = "interval_lengths.svg";
const CHECKPOINT_FILE: &str = "dataset.partial.csv";

const ROADS_STREAM: u64 = 1;
const SCENARIO_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;
const HOLDOUT_STREAM: u64 = 4;
const TRAIN_STREAM: u64 = 0x100;

pub fn model_file(i: usize) -> String {
    format!("models/model_{i}.json")
}

pub fn training_log_file(i: usize) -> String {
    format!("models/train_log_{i}.csv")
}

pub fn calibration_file(i: usize) -> String {
    format!("models/calibration_{i}.json")
}

pub fn test_report_file(i: usize) -> String {
    format!("reports/test_{i}.csv")
}

pub fn holdout_report_file(i: usize) -> String {
    format!("reports/holdout_{i}.csv")
}

/// Where model selection looks at coverage and interval length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectOn {
    /// A slice of the training partition never used for fitting.
    #[default]
    Holdout,
    /// The test set itself; optimistic, kept to reproduce published tables.
    Test,
}

impl std::str::FromStr for SelectOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holdout" => Ok(SelectOn::Holdout),
            "test" => Ok(SelectOn::Test),
            _ => Err(Error::config("select_on", format!("expected holdout|test, got {s:?}"))),
        }
    }
}

/// Cartesian product of training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub hidden: Vec<Vec<usize>>,
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            hidden: vec![vec![380, 380]],
            learning_rate: vec![5e-4, 1e-3],
            batch_size: vec![128],
        }
    }
}

impl HyperGrid {
    /// One training config per grid point, hidden-major.
    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for h in &self.hidden {
            for &lr in &self.learning_rate {
                for &b in &self.batch_size {
                    out.push(TrainConfig {
                        hidden: h.clone(),
                        learning_rate: lr,
                        batch_size: b,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    /// Index into the generated roads; `None` is a 200 m straight lane of
    /// width `default_width`.
    pub segment: Option<usize>,
    pub default_width: f64,
    pub speed_kmh: f64,
    pub direction: i8,
    pub accels: Vec<f64>,
    pub degradation: DegradationState,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            segment: None,
            default_width: 3.47,
            speed_kmh: 30.0,
            direction: 1,
            accels: DEFAULT_ACCELS.to_vec(),
            degradation: DegradationState::nominal(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub roads: SegmentGenConfig,
    pub n_segments: usize,
    pub n_maneuvers: usize,
    pub n_degradations: usize,
    pub vehicle: VehicleParams,
    pub n_cal: usize,
    pub n_test: usize,
    /// Held-out selection samples taken from the training partition.
    pub n_holdout: usize,
    /// Base training settings; the grid overrides its fields per candidate.
    pub train: TrainConfig,
    pub grid: HyperGrid,
    pub alpha: f64,
    pub grouping: GroupingSpec,
    /// Allowed |coverage − (1 − α)| for a candidate to count as conformant.
    pub tolerance: f64,
    pub select_on: SelectOn,
    pub diagnose: DiagnoseConfig,
    /// Curvature thresholds scored by `diagnose`.
    pub thresholds: Vec<f64>,
    pub gate: GateConfig,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            roads: SegmentGenConfig::default(),
            n_segments: 222,
            n_maneuvers: 15,
            n_degradations: 10,
            vehicle: VehicleParams::default(),
            n_cal: 4000,
            n_test: 4000,
            n_holdout: 2000,
            train: TrainConfig::default(),
            grid: HyperGrid::default(),
            alpha: 0.1,
            grouping: GroupingSpec::default(),
            tolerance: 0.01,
            select_on: SelectOn::Holdout,
            diagnose: DiagnoseConfig::default(),
            thresholds: vec![0.001, 0.002, 0.003, 0.005, 0.01],
            gate: GateConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn n_runs(&self) -> usize {
        self.n_segments * self.n_maneuvers * self.n_degradations
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::config("tolerance", "must be non-negative"));
        }
        if self.n_runs() == 0 {
            return Err(Error::config("n_segments", "scenario counts must all be positive"));
        }
        self.roads.validate()?;
        self.vehicle.validate()?;
        self.grouping.validate()?;
        let candidates = self.candidate_configs();
        if candidates.is_empty() {
            return Err(Error::config("grid", "hyperparameter grid is empty"));
        }
        for c in &candidates {
            c.validate()?;
        }
        // Faulted runs are dropped, so leave room for the tolerated fraction.
        let usable = self.n_runs() - (self.n_runs() as f64 * crate::dataset::MAX_FAULT_FRACTION).floor() as usize;
        let max_batch = candidates.iter().map(|c| c.batch_size).max().unwrap_or(1);
        let needed = self.n_cal + self.n_test + self.n_holdout + 2 * max_batch;
        if needed > usable {
            return Err(Error::config(
                "n_cal",
                format!(
                    "{} runs cannot cover cal {} + test {} + holdout {} + two training batches",
                    self.n_runs(),
                    self.n_cal,
                    self.n_test,
                    self.n_holdout
                ),
            ));
        }
        if self.select_on == SelectOn::Holdout && self.n_holdout == 0 {
            return Err(Error::config("n_holdout", "selection on the holdout needs n_holdout > 0"));
        }
        if self.n_cal == 0 || self.n_test == 0 {
            return Err(Error::config("n_cal", "calibration and test sets must be non-empty"));
        }
        Ok(())
    }

    /// Training configs for every grid point, with quantile levels from
    /// alpha and a seed per candidate.
    pub fn candidate_configs(&self) -> Vec<TrainConfig> {
        let base = self.train.clone().with_alpha(self.alpha);
        self.grid
            .expand(&base)
            .into_iter()
            .enumerate()
            .map(|(i, c)| TrainConfig {
                seed: mix_seed(self.seed, TRAIN_STREAM + i as u64),
                ..c
            })
            .collect()
    }

    /// Hash of everything but the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        config_hash(&c)
    }

    /// Hash of the settings that determine the generated dataset.
    fn data_hash(&self) -> String {
        config_hash(&(
            self.seed,
            &self.roads,
            self.n_segments,
            self.n_maneuvers,
            self.n_degradations,
            &self.vehicle,
            SIMULATOR_VERSION,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub crate_version: String,
    pub simulator_version: String,
    pub model_schema: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: PipelineConfig,
    /// Relative path to SHA-256 of the file contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Train, calibration, test and holdout partitions.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub cal: Dataset,
    pub test: Dataset,
    pub holdout: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub index: usize,
    pub train: TrainConfig,
    pub test: CoverageReport,
    pub holdout: Option<CoverageReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub selection: Selection,
    pub select_on: SelectOn,
    pub target: f64,
    pub tolerance: f64,
    pub coverage: f64,
    pub p90_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub n_runs: usize,
    pub clipped_fraction: f64,
    pub selection: SelectionRecord,
    pub grouping: GroupingSpec,
    /// One offset from all calibration scores.
    pub marginal: CoverageReport,
    /// One offset per group.
    pub equalized: CoverageReport,
    pub gate: Option<GateDecision>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
}

fn sha_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        Ok(Pipeline { cfg, out })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Path of an upstream artifact, or the error naming the stage that makes it.
    fn require(&self, rel: &str, command: &'static str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, command })
        }
    }

    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, contents)?;
        Ok(())
    }

    fn manifest(&self, command: &str, inputs: &[&str], outputs: &[&str]) -> Result<RunManifest> {
        let hash_all = |files: &[&str]| -> Result<BTreeMap<String, String>> {
            files.iter().map(|f| Ok((f.to_string(), sha_file(&self.path(f))?))).collect()
        };
        let m = RunManifest {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            simulator_version: SIMULATOR_VERSION.to_string(),
            model_schema: MODEL_SCHEMA.to_string(),
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            config: PipelineConfig {
                out_dir: PathBuf::new(),
                ..self.cfg.clone()
            },
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
        };
        self.write(&format!("manifests/{command}.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(m)
    }

    pub fn gen_roads(&self) -> Result<RunManifest> {
        let segs = generate_segments(self.cfg.n_segments, mix_seed(self.cfg.seed, ROADS_STREAM), &self.cfg.roads)?;
        self.write(ROADS_FILE, serde_json::to_string_pretty(&segs)? + "\n")?;
        self.manifest("gen-roads", &[], &[ROADS_FILE])
    }

    pub fn load_roads(&self) -> Result<Vec<RoadSegment>> {
        let p = self.require(ROADS_FILE, "gen-roads")?;
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    /// Simulates every scenario. Rows are checkpointed as they finish, so an
    /// interrupted run picks up where it stopped.
    pub fn gen_data(&self) -> Result<RunManifest> {
        let segs = self.load_roads()?;
        let set = sample_scenarios(
            segs,
            self.cfg.n_maneuvers,
            self.cfg.n_degradations,
            mix_seed(self.cfg.seed, SCENARIO_STREAM),
        )?;
        fs::create_dir_all(&self.out)?;
        let checkpoint = self.path(CHECKPOINT_FILE);
        let mut ds = generate_dataset_resumable(&set, &self.cfg.vehicle, &self.cfg.data_hash(), &checkpoint)?;
        ds.provenance.base_seed = self.cfg.seed;
        save_dataset(&ds, &self.path(DATASET_FILE))?;
        fs::remove_file(checkpoint)?;
        let prov = provenance_path(Path::new(DATASET_FILE));
        self.manifest(
            "gen-data",
            &[ROADS_FILE],
            &[DATASET_FILE, prov.to_str().expect("utf-8 path")],
        )
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        load_dataset(&self.require(DATASET_FILE, "gen-data")?)
    }

    pub fn splits(&self) -> Result<Splits> {
        let ds = self.load_dataset()?;
        let (rest, cal, test) = split_dataset(&ds, self.cfg.n_cal, self.cfg.n_test, mix_seed(self.cfg.seed, SPLIT_STREAM))?;
        let (train, holdout) = if self.cfg.n_holdout > 0 {
            let (train, holdout, _) = split_dataset(&rest, self.cfg.n_holdout, 0, mix_seed(self.cfg.seed, HOLDOUT_STREAM))?;
            (train, holdout)
        } else {
            let empty = rest.subset(Vec::new());
            (rest, empty)
        };
        Ok(Splits {
            train,
            cal,
            test,
            holdout,
        })
    }

    pub fn diagnose(&self) -> Result<RunManifest> {
        let ds = self.load_dataset()?;
        let report = diagnose(&ds, &self.cfg.diagnose)?;
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        self.write(DIAGNOSTICS_FILE, buf)?;
        let mut t = String::from("threshold,n_low,n_high,var_low,var_high,bf_F\n");
        for s in evaluate_thresholds(&ds, &self.cfg.thresholds)? {
            let _ = writeln!(
                t,
                "{},{},{},{},{},{}",
                fmt_sig(s.threshold, 9),
                s.n[0],
                s.n[1],
                fmt_sig(s.label_variance[0], 9),
                fmt_sig(s.label_variance[1], 9),
                fmt_sig(s.bf_f, 9)
            );
        }
        self.write(THRESHOLDS_FILE, t)?;
        self.manifest("diagnose", &[DATASET_FILE], &[DIAGNOSTICS_FILE, THRESHOLDS_FILE])
    }

    /// Trains one model per grid point on the training partition.
    pub fn train(&self) -> Result<RunManifest> {
        let splits = self.splits()?;
        let x = splits.train.features();
        let y = splits.train.labels();
        let configs = self.cfg.candidate_configs();
        let mut outputs = vec![CANDIDATES_FILE.to_string()];
        for (i, c) in configs.iter().enumerate() {
            log::info!("training candidate {i}: hidden {:?}, lr {}, batch {}", c.hidden, c.learning_rate, c.batch_size);
            let (model, log) = train_logged(&x, &y, c)?;
            log::info!("candidate {i}: {} epochs, best validation loss {:.5}", model.meta.epochs_run, model.meta.val_loss);
            self.write(&model_file(i), model.to_json()?)?;
            let mut buf = Vec::new();
            write_training_log(&mut buf, &log)?;
            self.write(&training_log_file(i), buf)?;
            outputs.push(model_file(i));
            outputs.push(training_log_file(i));
        }
        self.write(CANDIDATES_FILE, serde_json::to_string_pretty(&configs)? + "\n")?;
        let outs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        self.manifest("train", &[DATASET_FILE], &outs)
    }

    pub fn n_candidates(&self) -> Result<usize> {
        let p = self.require(CANDIDATES_FILE, "train")?;
        let configs: Vec<TrainConfig> = serde_json::from_str(&fs::read_to_string(p)?)?;
        Ok(configs.len())
    }

    pub fn load_model(&self, i: usize) -> Result<QuantileModel> {
        QuantileModel::load(&self.require(&model_file(i), "train")?)
    }

    pub fn load_calibration(&self, i: usize) -> Result<CalibrationResult> {
        let p = self.require(&calibration_file(i), "calibrate")?;
        CalibrationResult::from_json(&fs::read_to_string(p)?)
    }

    /// Calibrates every candidate; grouping `none` gives marginal offsets.
    pub fn calibrate(&self) -> Result<RunManifest> {
        let n = self.n_candidates()?;
        let splits = self.splits()?;
        let mut inputs = vec![DATASET_FILE.to_string()];
        let mut outputs = Vec::new();
        for i in 0..n {
            let model = self.load_model(i)?;
            let calib = calibrate(&model, &splits.cal, self.cfg.alpha, &self.cfg.grouping)?;
            self.write(&calibration_file(i), calib.to_json()? + "\n")?;
            inputs.push(model_file(i));
            outputs.push(calibration_file(i));
        }
        let ins: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let outs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        self.manifest("calibrate", &ins, &outs)
    }

    /// Coverage and length reports on the test set and the holdout, broken
    /// down by the configured grouping.
    pub fn evaluate(&self) -> Result<RunManifest> {
        let n = self.n_candidates()?;
        let splits = self.splits()?;
        let configs: Vec<TrainConfig> = serde_json::from_str(&fs::read_to_string(self.path(CANDIDATES_FILE))?)?;
        let mut evals = Vec::new();
        let mut inputs = vec![DATASET_FILE.to_string(), CANDIDATES_FILE.to_string()];
        let mut outputs = vec![EVALUATION_FILE.to_string()];
        for i in 0..n {
            let model = self.load_model(i)?;
            let calib = self.load_calibration(i)?;
            let test = evaluate(&model, &calib, &splits.test, &self.cfg.grouping)?;
            let mut buf = Vec::new();
            test.write_csv(&mut buf)?;
            self.write(&test_report_file(i), buf)?;
            outputs.push(test_report_file(i));
            let holdout = if splits.holdout.is_empty() {
                None
            } else {
                let r = evaluate(&model, &calib, &splits.holdout, &self.cfg.grouping)?;
                let mut buf = Vec::new();
                r.write_csv(&mut buf)?;
                self.write(&holdout_report_file(i), buf)?;
                outputs.push(holdout_report_file(i));
                Some(r)
            };
            inputs.push(model_file(i));
            inputs.push(calibration_file(i));
            evals.push(CandidateEvaluation {
                index: i,
                train: configs[i].clone(),
                test,
                holdout,
            });
        }
        self.write(EVALUATION_FILE, serde_json::to_string_pretty(&evals)? + "\n")?;
        let ins: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let outs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        self.manifest("evaluate", &ins, &outs)
    }

    pub fn load_evaluation(&self) -> Result<Vec<CandidateEvaluation>> {
        let p = self.require(EVALUATION_FILE, "evaluate")?;
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    pub fn select(&self) -> Result<RunManifest> {
        let evals = self.load_evaluation()?;
        let reports: Vec<CoverageReport> = evals
            .iter()
            .map(|e| match self.cfg.select_on {
                SelectOn::Test => Ok(e.test.clone()),
                SelectOn::Holdout => e.holdout.clone().ok_or_else(|| {
                    Error::config("select_on", "evaluation has no holdout reports; rerun with n_holdout > 0")
                }),
            })
            .collect::<Result<_>>()?;
        let target = 1.0 - self.cfg.alpha;
        let selection = select_model(&reports, target, self.cfg.tolerance)?;
        if !selection.conformant {
            log::warn!("no candidate within ±{} of coverage {target}", self.cfg.tolerance);
        }
        let chosen = &reports[selection.index];
        let record = SelectionRecord {
            selection,
            select_on: self.cfg.select_on,
            target,
            tolerance: self.cfg.tolerance,
            coverage: chosen.marginal,
            p90_length: chosen.length_percentile(90.0),
        };
        self.write(SELECTION_FILE, serde_json::to_string_pretty(&record)? + "\n")?;
        self.manifest("select", &[EVALUATION_FILE], &[SELECTION_FILE])
    }

    pub fn load_selection(&self) -> Result<SelectionRecord> {
        let p = self.require(SELECTION_FILE, "select")?;
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    fn gate_segment(&self) -> Result<RoadSegment> {
        match self.cfg.gate.segment {
            Some(i) => self
                .load_roads()?
                .into_iter()
                .nth(i)
                .ok_or_else(|| Error::config("gate.segment", format!("no segment with index {i}"))),
            None => Ok(RoadSegment::straight(0, 200.0, self.cfg.gate.default_width)),
        }
    }

    /// Runs the gate with the selected model.
    pub fn gate_decision(&self) -> Result<GateDecision> {
        let sel = self.load_selection()?;
        let i = sel.selection.index;
        let model = self.load_model(i)?;
        let calib = self.load_calibration(i)?;
        let g = &self.cfg.gate;
        let seg = self.gate_segment()?;
        let bound = Calibrated {
            predictor: &model,
            calibration: &calib,
        };
        evaluate_candidates(
            &seg,
            g.speed_kmh,
            g.direction,
            &g.accels,
            &g.degradation,
            &bound,
            self.cfg.vehicle.vehicle_width,
        )
    }

    pub fn gate(&self) -> Result<RunManifest> {
        let decision = self.gate_decision()?;
        if decision.is_mrm() {
            log::warn!("no candidate admitted: minimal risk maneuver");
        }
        let mut buf = Vec::new();
        decision.write_csv(&mut buf)?;
        self.write(DECISION_CSV, buf)?;
        self.write(DECISION_SVG, decision_svg(&self.gate_segment()?, &decision)?)?;
        let i = self.load_selection()?.selection.index;
        let mut inputs = vec![SELECTION_FILE.to_string(), model_file(i), calibration_file(i)];
        if self.cfg.gate.segment.is_some() {
            inputs.push(ROADS_FILE.to_string());
        }
        let ins: Vec<&str> = inputs.iter().map(String::as_str).collect();
        self.manifest("gate", &ins, &[DECISION_CSV, DECISION_SVG])
    }

    /// Marginal against group-wise calibration for the selected model, with
    /// interval length histograms and a short markdown summary.
    pub fn report_data(&self) -> Result<(PipelineReport, [Histogram; 2])> {
        let sel = self.load_selection()?;
        let i = sel.selection.index;
        let model = self.load_model(i)?;
        let splits = self.splits()?;
        let grouping = self.cfg.grouping;
        let marginal_cal = calibrate(&model, &splits.cal, self.cfg.alpha, &GroupingSpec::None)?;
        let equalized_cal = calibrate(&model, &splits.cal, self.cfg.alpha, &grouping)?;
        let marginal = evaluate(&model, &marginal_cal, &splits.test, &grouping)?;
        let equalized = evaluate(&model, &equalized_cal, &splits.test, &grouping)?;
        let iv_m = predict_intervals(&model, &marginal_cal, &splits.test)?;
        let iv_e = predict_intervals(&model, &equalized_cal, &splits.test)?;
        let max_len = iv_m
            .iter()
            .chain(&iv_e)
            .filter(|iv| !iv.unbounded)
            .map(|iv| iv.length())
            .fold(0.0, f64::max)
            .max(1e-6);
        let hists = [length_histogram(&iv_m, 30, max_len), length_histogram(&iv_e, 30, max_len)];
        let all = splits.train.len() + splits.cal.len() + splits.test.len() + splits.holdout.len();
        let clipped = [&splits.train, &splits.cal, &splits.test, &splits.holdout]
            .iter()
            .flat_map(|d| d.samples.iter())
            .filter(|s| s.clipped)
            .count();
        let gate = self.gate_decision().ok();
        Ok((
            PipelineReport {
                n_runs: all,
                clipped_fraction: clipped as f64 / all as f64,
                selection: sel,
                grouping,
                marginal,
                equalized,
                gate,
            },
            hists,
        ))
    }

    pub fn report(&self) -> Result<RunManifest> {
        let (report, [h_m, h_e]) = self.report_data()?;
        let mut csv = String::from("calibration,bin_lo,bin_hi,count\n");
        for (name, hist) in [("marginal", &h_m), ("equalized", &h_e)] {
            for (lo, hi, c) in hist {
                let _ = writeln!(csv, "{name},{},{},{c}", fmt_sig(*lo, 9), fmt_sig(*hi, 9));
            }
        }
        self.write(LENGTHS_CSV, csv)?;
        self.write(
            LENGTHS_SVG,
            histogram_svg("Interval lengths on the test set", &[("marginal", h_m), ("equalized", h_e)]),
        )?;
        self.write(REPORT_JSON, serde_json::to_string_pretty(&report)? + "\n")?;
        self.write(REPORT_FILE, render_markdown(&report))?;
        let i = report.selection.selection.index;
        self.manifest(
            "report",
            &[DATASET_FILE, SELECTION_FILE, &model_file(i)],
            &[REPORT_FILE, REPORT_JSON, LENGTHS_CSV, LENGTHS_SVG],
        )
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn render_markdown(r: &PipelineReport) -> String {
    let mut s = String::from("# Pipeline report\n\n");
    let _ = writeln!(s, "- runs: {}, clipped labels: {}", r.n_runs, pct(r.clipped_fraction));
    let sel = &r.selection;
    let _ = writeln!(
        s,
        "- selected candidate {} on the {} set: coverage {}, 90th percentile length {} m{}",
        sel.selection.index,
        match sel.select_on {
            SelectOn::Holdout => "holdout",
            SelectOn::Test => "test",
        },
        pct(sel.coverage),
        sel.p90_length.map_or("n/a".into(), |v| fmt_sig(v, 3)),
        if sel.selection.conformant { "" } else { " (outside tolerance)" }
    );
    let _ = writeln!(s, "- grouping: {}\n", r.grouping);
    s.push_str("| calibration | marginal | ");
    let groups: Vec<usize> = r.equalized.per_group.keys().copied().collect();
    for g in &groups {
        let _ = write!(s, "group {g} | ");
    }
    s.push_str("p90 length [m] |\n|---|---|");
    s.push_str(&"---|".repeat(groups.len() + 1));
    s.push('\n');
    for (name, rep) in [("marginal", &r.marginal), ("equalized", &r.equalized)] {
        let _ = write!(s, "| {name} | {} | ", pct(rep.marginal));
        for g in &groups {
            let cov = rep.per_group.get(g).map_or("n/a".into(), |c| pct(c.coverage));
            let _ = write!(s, "{cov} | ");
        }
        let _ = writeln!(s, "{} |", rep.length_percentile(90.0).map_or("n/a".into(), |v| fmt_sig(v, 3)));
    }
    if let Some(d) = &r.gate {
        let _ = writeln!(s, "\n## Gate\n\nclearance {} m\n", fmt_sig(d.clearance, 3));
        s.push_str("| a_max | eps_hat | verdict |\n|---|---|---|\n");
        for (k, c) in d.candidates.iter().enumerate() {
            let mark = if d.chosen_index == Some(k) { " (chosen)" } else { "" };
            let eps = c.eps_hat.map_or("n/a".into(), |e| fmt_sig(e, 3));
            let _ = writeln!(s, "| {} | {eps} | {}{mark} |", fmt_sig(c.maneuver.a_lat_max, 3), c.verdict.as_str());
        }
        if d.is_mrm() {
            s.push_str("\nNo candidate admitted: minimal risk maneuver.\n");
        }
    }
    s
}
