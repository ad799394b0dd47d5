//! Maneuver feasibility gate.
//!
//! Each candidate lane change is scored with the calibrated upper bound on its
//! lateral deviation. A candidate is rejected when that bound reaches the
//! label cutoff or exceeds the lateral clearance; the admitted candidate with
//! the largest lateral acceleration wins, and without one the vehicle falls
//! back to a stop in lane.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::conformal::{predict_interval, CalibrationResult, QuantilePredictor};
use crate::dataset::ScenarioFeatures;
use crate::error::{Error, Result};
use crate::plot::{Chart, PALETTE};
use crate::roadgeom::{segment_features, RoadSegment};
use crate::util::fmt_sig;
use crate::vehiclesim::{plan_reference, DegradationState, ManeuverTemplate, DEVIATION_CUTOFF};

pub const DEFAULT_ACCELS: [f64; 5] = [2.5, 3.0, 3.5, 4.0, 4.5];

/// `0.5 (w_min − w_veh)`: room on each side of a centred vehicle.
pub fn clearance(w_min: f64, w_veh: f64) -> Result<f64> {
    if !(w_min > w_veh) {
        return Err(Error::VehicleWiderThanLane { w_min, w_veh });
    }
    Ok(0.5 * (w_min - w_veh))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Admit,
    RejectClearance,
    RejectCutoff,
    RejectUnbounded,
    /// The predictor failed for this candidate.
    RejectError,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Admit => "admit",
            Verdict::RejectClearance => "reject_clearance",
            Verdict::RejectCutoff => "reject_cutoff",
            Verdict::RejectUnbounded => "reject_unbounded",
            Verdict::RejectError => "reject_error",
        }
    }
}

/// Cutoff first, so a bound at the cutoff is rejected whatever the clearance.
pub fn verdict(eps_hat: f64, unbounded: bool, clearance: f64) -> Verdict {
    if unbounded || !eps_hat.is_finite() {
        Verdict::RejectUnbounded
    } else if eps_hat >= DEVIATION_CUTOFF {
        Verdict::RejectCutoff
    } else if eps_hat > clearance {
        Verdict::RejectClearance
    } else {
        Verdict::Admit
    }
}

/// Source of the predicted deviation upper bound for a scenario.
pub trait DeviationBound {
    /// `(ε̂, unbounded)`.
    fn upper_bound(&self, features: &ScenarioFeatures) -> Result<(f64, bool)>;
}

/// A quantile predictor together with its calibration.
pub struct Calibrated<'a, P: QuantilePredictor + ?Sized> {
    pub predictor: &'a P,
    pub calibration: &'a CalibrationResult,
}

impl<P: QuantilePredictor + ?Sized> DeviationBound for Calibrated<'_, P> {
    fn upper_bound(&self, features: &ScenarioFeatures) -> Result<(f64, bool)> {
        let iv = predict_interval(self.predictor, self.calibration, features)?;
        Ok((iv.hi.max(0.0), iv.unbounded))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub maneuver: ManeuverTemplate,
    pub eps_hat: Option<f64>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub candidates: Vec<CandidateResult>,
    /// Index into `candidates`, `None` when falling back to MRM.
    pub chosen_index: Option<usize>,
    pub chosen: ManeuverTemplate,
    pub clearance: f64,
}

impl GateDecision {
    pub fn is_mrm(&self) -> bool {
        self.chosen_index.is_none()
    }

    /// `a_max,eps_hat,verdict,chosen`, one row per candidate; no row is
    /// chosen under MRM.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "a_max,eps_hat,verdict,chosen")?;
        for (i, c) in self.candidates.iter().enumerate() {
            let eps = c.eps_hat.map_or_else(|| "nan".into(), |e| fmt_sig(e, 6));
            let chosen = u8::from(self.chosen_index == Some(i));
            writeln!(out, "{},{eps},{},{chosen}", fmt_sig(c.maneuver.a_lat_max, 6), c.verdict.as_str())?;
        }
        Ok(())
    }
}

/// Applies the rejection rule to already-scored candidates and picks one.
pub fn decide(scored: Vec<(ManeuverTemplate, Result<(f64, bool)>)>, clearance: f64) -> GateDecision {
    let candidates: Vec<CandidateResult> = scored
        .into_iter()
        .map(|(maneuver, bound)| match bound {
            Ok((eps, unbounded)) => CandidateResult {
                maneuver,
                eps_hat: Some(eps),
                verdict: verdict(eps, unbounded, clearance),
                reason: None,
            },
            Err(e) => CandidateResult {
                maneuver,
                eps_hat: None,
                verdict: Verdict::RejectError,
                reason: Some(e.to_string()),
            },
        })
        .collect();
    // Largest admitted acceleration; among equal accelerations the smaller
    // bound, so the pick does not depend on candidate order.
    let chosen_index = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.verdict == Verdict::Admit)
        .max_by(|(_, a), (_, b)| {
            a.maneuver
                .a_lat_max
                .total_cmp(&b.maneuver.a_lat_max)
                .then(b.eps_hat.unwrap_or(f64::INFINITY).total_cmp(&a.eps_hat.unwrap_or(f64::INFINITY)))
        })
        .map(|(i, _)| i);
    let chosen = chosen_index.map_or_else(ManeuverTemplate::mrm, |i| candidates[i].maneuver);
    GateDecision {
        candidates,
        chosen_index,
        chosen,
        clearance,
    }
}

/// Scores lane changes at each acceleration in `accels` on `seg` and decides.
pub fn evaluate_candidates(
    seg: &RoadSegment,
    v_q: f64,
    direction: i8,
    accels: &[f64],
    deg: &DegradationState,
    bound: &dyn DeviationBound,
    vehicle_width: f64,
) -> Result<GateDecision> {
    if accels.is_empty() {
        return Err(Error::config("accels", "need at least one candidate acceleration"));
    }
    deg.validate()?;
    let geom = segment_features(seg);
    let clear = clearance(geom.w_min, vehicle_width)?;
    let scored = accels
        .iter()
        .map(|&a| {
            let m = ManeuverTemplate::lane_change(direction, v_q, a);
            let score = m
                .validate()
                .and_then(|_| bound.upper_bound(&ScenarioFeatures::new(&geom, &m, deg)));
            (m, score)
        })
        .collect();
    Ok(decide(scored, clear))
}

/// Lateral offset of the chosen reference along the segment with the ε̂
/// envelope and the clearance band around the start and target lane centres.
pub fn decision_svg(seg: &RoadSegment, decision: &GateDecision) -> Result<String> {
    let m = decision.chosen;
    let reference = plan_reference(seg, &m, m.target_speed_kmh.max(1.0))
        .or_else(|_| plan_reference(seg, &ManeuverTemplate::mrm(), 30.0))?;
    let path: Vec<(f64, f64)> = reference.samples.iter().map(|p| (p.s, p.d)).collect();
    let eps = decision
        .chosen_index
        .and_then(|i| decision.candidates[i].eps_hat)
        .unwrap_or(0.0);
    let s_max = path.last().map_or(seg.length, |p| p.0.max(1.0));
    let width = segment_features(seg).w_min;
    let target = f64::from(m.direction) * width;
    let (d_lo, d_hi) = (target.min(0.0) - width * 0.75, target.max(0.0) + width * 0.75);
    let title = if decision.is_mrm() {
        "MRM fallback".to_string()
    } else {
        format!("a_max = {} m/s², ε̂ = {} m", fmt_sig(m.a_lat_max, 3), fmt_sig(eps, 3))
    };
    let mut chart = Chart::new(&title, (0.0, s_max), (d_lo, d_hi)).labels("s [m]", "d [m]");
    chart.line(&path, PALETTE[0], false, Some("reference"));
    let shifted = |off: f64| path.iter().map(|&(s, d)| (s, d + off)).collect::<Vec<_>>();
    chart.line(&shifted(eps), PALETTE[0], true, Some("reference ± ε̂"));
    chart.line(&shifted(-eps), PALETTE[0], true, None);
    for (i, centre) in [0.0, target].into_iter().enumerate() {
        let label = (i == 0).then_some("clearance");
        chart.hline(centre + decision.clearance, PALETTE[1], label);
        chart.hline(centre - decision.clearance, PALETTE[1], None);
    }
    Ok(chart.render())
}
