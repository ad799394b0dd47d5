//! Closed-loop lateral tracking under degraded actuator limits.
//!
//! A maneuver template is turned into a reference trajectory by a geometric
//! planner (quintic lane-change offset, constant-deceleration stop), which is
//! then tracked by a saturated-feedback controller on a linear single-track
//! model with front and rear steering. The recorded label is the maximum
//! lateral deviation from the reference, clipped at [`DEVIATION_CUTOFF`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roadgeom::RoadSegment;

/// Deviation at which a run is aborted and its label clipped, in meters.
pub const DEVIATION_CUTOFF: f64 = 0.675;

/// Simulation step, seconds.
pub const SIM_DT: f64 = 0.01;
/// Reference and trace sampling rate, Hz.
pub const REFERENCE_RATE_HZ: f64 = 50.0;
/// Constant deceleration of the minimal risk maneuver, m/s².
pub const MRM_DECELERATION: f64 = 2.0;

/// Front-axle feedback gains on lateral and heading error.
pub const GAIN_LATERAL: f64 = 0.35;
pub const GAIN_HEADING: f64 = 1.2;
/// Rear-axle gains are the front gains scaled by this factor (counter-phase).
pub const REAR_GAIN_SCALE: f64 = 0.3;
/// Proportional speed-tracking gain, 1/s.
const GAIN_SPEED: f64 = 1.0;
/// Below this speed the lateral dynamics degenerate to the kinematic model.
const KINEMATIC_SPEED: f64 = 2.0;
const GRAVITY: f64 = 9.81;

pub const SIMULATOR_VERSION: &str = "capguard-sim-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ManeuverKind {
    LaneFollow,
    LaneChange,
    #[serde(rename = "MRM")]
    Mrm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManeuverTemplate {
    pub kind: ManeuverKind,
    /// -1 right, 0 none, +1 left.
    pub direction: i8,
    pub target_speed_kmh: f64,
    pub a_lat_max: f64,
}

impl ManeuverTemplate {
    pub fn lane_follow(target_speed_kmh: f64, a_lat_max: f64) -> Self {
        ManeuverTemplate {
            kind: ManeuverKind::LaneFollow,
            direction: 0,
            target_speed_kmh,
            a_lat_max,
        }
    }

    pub fn lane_change(direction: i8, target_speed_kmh: f64, a_lat_max: f64) -> Self {
        ManeuverTemplate {
            kind: ManeuverKind::LaneChange,
            direction,
            target_speed_kmh,
            a_lat_max,
        }
    }

    /// Stop in the current lane. Carries the nominal lowest acceleration level.
    pub fn mrm() -> Self {
        ManeuverTemplate {
            kind: ManeuverKind::Mrm,
            direction: 0,
            target_speed_kmh: 0.0,
            a_lat_max: 2.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ManeuverKind::LaneFollow | ManeuverKind::Mrm if self.direction != 0 => {
                return Err(Error::config("direction", "lane follow and MRM require direction 0"))
            }
            ManeuverKind::LaneChange if !matches!(self.direction, -1 | 1) => {
                return Err(Error::config("direction", "lane change requires direction -1 or +1"))
            }
            _ => {}
        }
        if !(0.0..=70.0).contains(&self.target_speed_kmh) {
            return Err(Error::config("target_speed_kmh", "must lie in [0, 70] km/h"));
        }
        if self.kind == ManeuverKind::Mrm && self.target_speed_kmh != 0.0 {
            return Err(Error::config("target_speed_kmh", "MRM targets standstill"));
        }
        if !(1.0..=6.0).contains(&self.a_lat_max) {
            return Err(Error::config("a_lat_max", "must lie in [1, 6] m/s²"));
        }
        Ok(())
    }
}

/// Remaining-performance factors per wheel, ordered fl, fr, rl, rr.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationState {
    pub steer_angle: [f64; 4],
    pub steer_rate: [f64; 4],
    pub torque: [f64; 4],
}

impl Default for DegradationState {
    fn default() -> Self {
        Self::nominal()
    }
}

impl DegradationState {
    pub fn nominal() -> Self {
        DegradationState {
            steer_angle: [1.0; 4],
            steer_rate: [1.0; 4],
            torque: [1.0; 4],
        }
    }

    pub fn uniform(factor: f64) -> Self {
        DegradationState {
            steer_angle: [factor; 4],
            steer_rate: [factor; 4],
            torque: [factor; 4],
        }
    }

    /// Builds a state from the flat order angle(fl..rr), rate(fl..rr), torque(fl..rr).
    pub fn from_factors(f: [f64; 12]) -> Result<Self> {
        let mut s = DegradationState::nominal();
        s.steer_angle.copy_from_slice(&f[0..4]);
        s.steer_rate.copy_from_slice(&f[4..8]);
        s.torque.copy_from_slice(&f[8..12]);
        s.validate()?;
        Ok(s)
    }

    pub fn factors(&self) -> [f64; 12] {
        let mut f = [0.0; 12];
        f[0..4].copy_from_slice(&self.steer_angle);
        f[4..8].copy_from_slice(&self.steer_rate);
        f[8..12].copy_from_slice(&self.torque);
        f
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors().iter().all(|f| (0.0..=1.0).contains(f)) {
            Ok(())
        } else {
            Err(Error::config("degradation", "every factor must lie in [0, 1]"))
        }
    }

    pub fn is_nominal(&self) -> bool {
        self.factors().iter().all(|&f| f == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub wheelbase: f64,
    /// Distance from the center of gravity to the front axle.
    pub cg_to_front: f64,
    pub mass: f64,
    pub yaw_inertia: f64,
    /// Axle cornering stiffnesses, N/rad.
    pub cornering_front: f64,
    pub cornering_rear: f64,
    /// Nominal steering angle limit, rad.
    pub steer_angle_max: f64,
    /// Nominal steering rate limit, rad/s.
    pub steer_rate_max: f64,
    /// Nominal per-wheel torque limit, N·m.
    pub wheel_torque_max: f64,
    pub wheel_radius: f64,
    pub rolling_resistance: f64,
    /// Aerodynamic drag force per squared speed, N/(m/s)².
    pub drag: f64,
    pub vehicle_width: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            wheelbase: 2.9,
            cg_to_front: 1.4,
            mass: 2000.0,
            yaw_inertia: 3000.0,
            cornering_front: 80_000.0,
            cornering_rear: 80_000.0,
            steer_angle_max: 45.0 * PI / 180.0,
            steer_rate_max: 120.0 * PI / 180.0,
            wheel_torque_max: 500.0,
            wheel_radius: 0.33,
            rolling_resistance: 0.015,
            drag: 0.9,
            vehicle_width: 1.96,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.wheelbase,
            self.cg_to_front,
            self.mass,
            self.yaw_inertia,
            self.cornering_front,
            self.cornering_rear,
            self.steer_angle_max,
            self.steer_rate_max,
            self.wheel_torque_max,
            self.wheel_radius,
            self.vehicle_width,
        ];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("vehicle", "all parameters must be strictly positive"));
        }
        if self.cg_to_front >= self.wheelbase {
            return Err(Error::config("cg_to_front", "must be shorter than the wheelbase"));
        }
        Ok(())
    }

    fn cg_to_rear(&self) -> f64 {
        self.wheelbase - self.cg_to_front
    }

    /// Steady-state understeer gradient, rad/(m/s²) · (1/m) scale.
    fn understeer_gradient(&self) -> f64 {
        self.mass * (self.cg_to_rear() * self.cornering_rear - self.cg_to_front * self.cornering_front)
            / (self.wheelbase * self.cornering_front * self.cornering_rear)
    }
}

/// Remaining fraction of a nominal actuator limit given its degraded range.
pub fn degradation_factor(nominal_limit: f64, degraded_range: (f64, f64)) -> Result<f64> {
    let (lo, hi) = degraded_range;
    if !(nominal_limit > 0.0) {
        return Err(Error::Domain(format!("nominal limit must be positive, got {nominal_limit}")));
    }
    if lo > hi {
        return Err(Error::Domain(format!("degraded range [{lo}, {hi}] is inverted")));
    }
    Ok((lo.abs().max(hi.abs()) / nominal_limit).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxleLimits {
    pub front_angle: f64,
    pub rear_angle: f64,
    pub front_rate: f64,
    pub rear_rate: f64,
    pub front_torque: f64,
    pub rear_torque: f64,
}

/// Per-wheel factors onto single-track axles: the weaker wheel bounds steering,
/// wheel torques add up.
pub fn effective_axle_limits(deg: &DegradationState, params: &VehicleParams) -> AxleLimits {
    let [afl, afr, arl, arr] = deg.steer_angle;
    let [rfl, rfr, rrl, rrr] = deg.steer_rate;
    let [tfl, tfr, trl, trr] = deg.torque;
    AxleLimits {
        front_angle: params.steer_angle_max * afl.min(afr),
        rear_angle: params.steer_angle_max * arl.min(arr),
        front_rate: params.steer_rate_max * rfl.min(rfr),
        rear_rate: params.steer_rate_max * rrl.min(rrr),
        front_torque: params.wheel_torque_max * (tfl + tfr),
        rear_torque: params.wheel_torque_max * (trl + trr),
    }
}

/// Reference state at one instant: arc length, lateral offset from the lane
/// centerline with its derivatives, and speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub t: f64,
    pub s: f64,
    pub d: f64,
    pub d_dot: f64,
    pub d_ddot: f64,
    pub v: f64,
    pub a_long: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Profile {
    Cruise { v: f64 },
    LaneChange { v: f64, offset: f64, duration: f64 },
    Stop { v0: f64, decel: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub maneuver: ManeuverTemplate,
    pub entry_speed: f64,
    /// Time until the reference leaves the segment or comes to rest.
    pub duration: f64,
    /// Lane-change duration, when applicable.
    pub lane_change_duration: Option<f64>,
    /// The reference sampled at [`REFERENCE_RATE_HZ`].
    pub samples: Vec<ReferencePoint>,
    profile: Profile,
}

impl ReferenceTrajectory {
    /// Analytic reference at time `t` (held constant after the end).
    pub fn at(&self, t: f64) -> ReferencePoint {
        let t = t.clamp(0.0, self.duration);
        match self.profile {
            Profile::Cruise { v } => ReferencePoint {
                t,
                s: v * t,
                d: 0.0,
                d_dot: 0.0,
                d_ddot: 0.0,
                v,
                a_long: 0.0,
            },
            Profile::LaneChange { v, offset, duration } => {
                let (d, d_dot, d_ddot) = quintic_offset(offset, duration, t);
                ReferencePoint {
                    t,
                    s: v * t,
                    d,
                    d_dot,
                    d_ddot,
                    v,
                    a_long: 0.0,
                }
            }
            Profile::Stop { v0, decel } => {
                let t_stop = v0 / decel;
                let tt = t.min(t_stop);
                ReferencePoint {
                    t,
                    s: v0 * tt - 0.5 * decel * tt * tt,
                    d: 0.0,
                    d_dot: 0.0,
                    d_ddot: 0.0,
                    v: (v0 - decel * t).max(0.0),
                    a_long: if t < t_stop { -decel } else { 0.0 },
                }
            }
        }
    }

    pub fn end(&self) -> ReferencePoint {
        self.at(self.duration)
    }
}

/// Minimum-jerk offset `h (10τ³ − 15τ⁴ + 6τ⁵)` and its first two time
/// derivatives; held at `h` after `duration`.
pub fn quintic_offset(h: f64, duration: f64, t: f64) -> (f64, f64, f64) {
    if t >= duration {
        return (h, 0.0, 0.0);
    }
    let tau = (t / duration).max(0.0);
    let (t2, t3) = (tau * tau, tau * tau * tau);
    let d = h * (10.0 * t3 - 15.0 * t3 * tau + 6.0 * t3 * t2);
    let d_dot = h / duration * (30.0 * t2 - 60.0 * t3 + 30.0 * t2 * t2);
    let d_ddot = h / (duration * duration) * (60.0 * tau - 180.0 * t2 + 120.0 * t3);
    (d, d_dot, d_ddot)
}

/// Lane-change duration whose quintic profile peaks at exactly `a_lat_max`:
/// the peak of the offset's second derivative is `(10/√3) h / T²`.
pub fn lane_change_duration(offset: f64, a_lat_max: f64) -> f64 {
    (10.0 * offset.abs() / (3f64.sqrt() * a_lat_max)).sqrt()
}

/// Plans the reference for `m` on `seg`, entering at `entry_speed_kmh`.
///
/// Lane follow and lane change hold the template speed; the lane change starts
/// at the segment entry with an offset of one lane width. MRM decelerates from
/// the entry speed to standstill on the centerline.
pub fn plan_reference(seg: &RoadSegment, m: &ManeuverTemplate, entry_speed_kmh: f64) -> Result<ReferenceTrajectory> {
    m.validate()?;
    let entry_speed = entry_speed_kmh / 3.6;
    let (profile, duration, lane_change_duration) = match m.kind {
        ManeuverKind::LaneFollow | ManeuverKind::LaneChange => {
            let v = m.target_speed_kmh / 3.6;
            if v <= 0.0 {
                return Err(Error::Infeasible("target speed must be positive to traverse the segment".into()));
            }
            let traverse = seg.length / v;
            if m.kind == ManeuverKind::LaneFollow {
                (Profile::Cruise { v }, traverse, None)
            } else {
                let h = seg.width_at(0.0);
                let duration = lane_change_duration(h, m.a_lat_max);
                if duration > traverse {
                    return Err(Error::Infeasible(format!(
                        "lane change needs {duration:.2} s but the segment is traversed in {traverse:.2} s"
                    )));
                }
                let offset = f64::from(m.direction) * h;
                (Profile::LaneChange { v, offset, duration }, traverse, Some(duration))
            }
        }
        ManeuverKind::Mrm => {
            let v0 = entry_speed.max(0.0);
            let stop_time = v0 / MRM_DECELERATION;
            let stop_dist = v0 * stop_time / 2.0;
            let duration = if stop_dist <= seg.length {
                stop_time
            } else {
                // Leaves the segment before standstill: solve s(t) = length.
                (v0 - (v0 * v0 - 2.0 * MRM_DECELERATION * seg.length).sqrt()) / MRM_DECELERATION
            };
            (
                Profile::Stop {
                    v0,
                    decel: MRM_DECELERATION,
                },
                duration,
                None,
            )
        }
    };
    let mut traj = ReferenceTrajectory {
        maneuver: *m,
        entry_speed,
        duration,
        lane_change_duration,
        samples: Vec::new(),
        profile,
    };
    let n = (duration * REFERENCE_RATE_HZ).floor() as usize;
    traj.samples = (0..=n).map(|i| traj.at(i as f64 / REFERENCE_RATE_HZ)).collect();
    if traj.samples.last().map(|p| p.t) != Some(duration) {
        traj.samples.push(traj.at(duration));
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub s: f64,
    pub e_d: f64,
    pub delta_f: f64,
    pub delta_r: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub eps_lat_max: f64,
    pub clipped: bool,
    pub completed: bool,
    pub trace: Option<Vec<TraceRecord>>,
}

#[derive(Debug, Clone, Copy, Default)]
struct State {
    beta: f64,
    yaw_rate: f64,
    /// Heading relative to the lane tangent.
    psi: f64,
    /// Lateral offset from the lane centerline, positive to the left.
    d: f64,
    delta_f: f64,
    delta_r: f64,
    v: f64,
    s: f64,
}

/// Tracks `reference` on `seg` and records the maximum lateral deviation.
///
/// Steering: `δ_f = (L + K_us v²) k_ref − k1 e_d − k2 e_ψ` with
/// `e_d = d − d_ref`, `e_ψ = ψ − ψ_ref`; rear steering applies the same
/// feedback, scaled by [`REAR_GAIN_SCALE`], in counter-phase. Commands are
/// clamped to the axle angle limits and slewed at the axle rate limits.
/// Speed is tracked by a proportional drive/brake torque saturated at the
/// summed axle torque limits.
pub fn simulate_tracking(
    seg: &RoadSegment,
    reference: &ReferenceTrajectory,
    deg: &DegradationState,
    params: &VehicleParams,
    keep_trace: bool,
) -> Result<SimOutcome> {
    deg.validate()?;
    params.validate()?;
    let limits = effective_axle_limits(deg, params);
    let lf = params.cg_to_front;
    let lr = params.cg_to_rear();
    let wheelbase = params.wheelbase;
    let k_us = params.understeer_gradient();
    let torque_limit = limits.front_torque + limits.rear_torque;

    // Enter from a straight approach: wheels centred, no yaw.
    let mut x = State {
        v: reference.entry_speed.max(0.0),
        ..State::default()
    };
    let mut t = 0.0;
    let mut eps = 0.0f64;
    let mut trace = Vec::new();
    let mut step: u64 = 0;
    let record_every = (1.0 / (REFERENCE_RATE_HZ * SIM_DT)).round() as u64;
    let t_max = reference.duration + 20.0;
    let is_stop = reference.maneuver.kind == ManeuverKind::Mrm;

    loop {
        let r = reference.at(t);
        let v_ref = r.v.max(0.1);
        let psi_ref = r.d_dot.atan2(v_ref);
        let e_d = x.d - r.d;
        let e_psi = x.psi - psi_ref;
        eps = eps.max(e_d.abs());

        if step.is_multiple_of(record_every) {
            trace.push(TraceRecord {
                t,
                s: x.s,
                e_d,
                delta_f: x.delta_f,
                delta_r: x.delta_r,
                v: x.v,
            });
        }

        let state_ok = [x.beta, x.yaw_rate, x.psi, x.d, x.delta_f, x.delta_r, x.v, x.s]
            .iter()
            .all(|v| v.is_finite());
        if !state_ok {
            return Err(Error::SimulationFault {
                time: t,
                reason: "non-finite state".into(),
                trace,
            });
        }
        if eps >= DEVIATION_CUTOFF {
            return Ok(SimOutcome {
                eps_lat_max: DEVIATION_CUTOFF,
                clipped: true,
                completed: false,
                trace: keep_trace.then_some(trace),
            });
        }
        let finished = if is_stop {
            (x.v <= 1e-3 && t >= reference.duration) || x.s >= seg.length
        } else {
            x.s >= seg.length
        };
        if finished || t > t_max {
            return Ok(SimOutcome {
                eps_lat_max: eps,
                clipped: false,
                completed: finished,
                trace: keep_trace.then_some(trace),
            });
        }

        // Control.
        let s_eval = x.s.clamp(0.0, seg.length);
        let k_road = seg.curvature_at(s_eval);
        let k_ref = k_road + r.d_ddot / (v_ref * v_ref);
        let feedback = GAIN_LATERAL * e_d + GAIN_HEADING * e_psi;
        let cmd_f = (wheelbase + k_us * x.v * x.v) * k_ref - feedback;
        let delta_f = slew(x.delta_f, cmd_f, limits.front_angle, limits.front_rate * SIM_DT);
        let cmd_r = REAR_GAIN_SCALE * feedback;
        let delta_r = slew(x.delta_r, cmd_r, limits.rear_angle, limits.rear_rate * SIM_DT);

        let resist = if x.v > 0.0 {
            params.rolling_resistance * params.mass * GRAVITY + params.drag * x.v * x.v
        } else {
            0.0
        };
        let force_cmd = params.mass * (GAIN_SPEED * (r.v - x.v) + r.a_long) + resist;
        let torque = (force_cmd * params.wheel_radius).clamp(-torque_limit, torque_limit);
        let accel = (torque / params.wheel_radius - resist) / params.mass;

        // Dynamics.
        let s_dot = x.v * (x.psi + x.beta).cos() / (1.0 - k_road * x.d);
        let d_dot = x.v * (x.psi + x.beta).sin();
        let (beta_dot, yaw_rate_next) = if x.v >= KINEMATIC_SPEED {
            let alpha_f = x.delta_f - x.beta - lf * x.yaw_rate / x.v;
            let alpha_r = x.delta_r - x.beta + lr * x.yaw_rate / x.v;
            let fy_f = params.cornering_front * alpha_f;
            let fy_r = params.cornering_rear * alpha_r;
            let beta_dot = (fy_f + fy_r) / (params.mass * x.v) - x.yaw_rate;
            let yaw_acc = (lf * fy_f - lr * fy_r) / params.yaw_inertia;
            (beta_dot, x.yaw_rate + SIM_DT * yaw_acc)
        } else {
            let beta_kin = (lr * x.delta_f.tan() + lf * x.delta_r.tan()) / wheelbase;
            let yaw_kin = x.v * (x.delta_f.tan() - x.delta_r.tan()) / wheelbase;
            ((beta_kin - x.beta) / SIM_DT, yaw_kin)
        };
        let psi_dot = x.yaw_rate - k_road * s_dot;

        x = State {
            beta: x.beta + SIM_DT * beta_dot,
            yaw_rate: yaw_rate_next,
            psi: x.psi + SIM_DT * psi_dot,
            d: x.d + SIM_DT * d_dot,
            delta_f,
            delta_r,
            v: (x.v + SIM_DT * accel).max(0.0),
            s: x.s + SIM_DT * s_dot,
        };
        step += 1;
        t = step as f64 * SIM_DT;
    }
}

/// Clamp the command to `±angle_limit`, then move toward it by at most `max_step`.
fn slew(current: f64, command: f64, angle_limit: f64, max_step: f64) -> f64 {
    let target = command.clamp(-angle_limit, angle_limit);
    (current + (target - current).clamp(-max_step, max_step)).clamp(-angle_limit, angle_limit)
}

/// One simulation run: plan, then track. Lane follow/change enter at the
/// template speed.
pub fn run_scenario(
    seg: &RoadSegment,
    m: &ManeuverTemplate,
    deg: &DegradationState,
    params: &VehicleParams,
) -> Result<SimOutcome> {
    let reference = plan_reference(seg, m, m.target_speed_kmh)?;
    simulate_tracking(seg, &reference, deg, params, false)
}

/// Writes a trace as CSV with header `t,s,e_d,delta_f,delta_r,v`.
pub fn write_trace_csv<W: std::io::Write>(mut out: W, trace: &[TraceRecord]) -> std::io::Result<()> {
    use crate::util::fmt_sig;
    writeln!(out, "t,s,e_d,delta_f,delta_r,v")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_sig(r.t, 9),
            fmt_sig(r.s, 9),
            fmt_sig(r.e_d, 9),
            fmt_sig(r.delta_f, 9),
            fmt_sig(r.delta_r, 9),
            fmt_sig(r.v, 9)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degradation_factor_examples() {
        let d = PI / 180.0;
        assert_eq!(degradation_factor(30.0 * d, (-30.0 * d, 30.0 * d)).unwrap(), 1.0);
        assert!((degradation_factor(30.0 * d, (-10.0 * d, 12.0 * d)).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(degradation_factor(30.0 * d, (0.0, 0.0)).unwrap(), 0.0);
        assert_eq!(degradation_factor(30.0, (-45.0, 10.0)).unwrap(), 1.0);
        assert!(matches!(degradation_factor(0.0, (0.0, 1.0)), Err(Error::Domain(_))));
        assert!(matches!(degradation_factor(1.0, (0.5, 0.1)), Err(Error::Domain(_))));
    }

    #[test]
    fn axle_limits_min_and_sum_rules() {
        let p = VehicleParams::default();
        let lim = effective_axle_limits(&DegradationState::nominal(), &p);
        assert_eq!(lim.front_angle, p.steer_angle_max);
        assert_eq!(lim.rear_rate, p.steer_rate_max);
        assert_eq!(lim.front_torque, 2.0 * p.wheel_torque_max);

        let mut d = DegradationState::nominal();
        d.steer_angle[0] = 0.5;
        assert_eq!(effective_axle_limits(&d, &p).front_angle, 0.5 * p.steer_angle_max);

        let mut d = DegradationState::nominal();
        d.steer_rate[2] = 0.0;
        d.steer_rate[3] = 0.0;
        d.torque = [0.5, 0.25, 1.0, 0.0];
        let lim = effective_axle_limits(&d, &p);
        assert_eq!(lim.rear_rate, 0.0);
        assert_eq!(lim.front_torque, 375.0);
        assert_eq!(lim.rear_torque, 500.0);
    }

    #[test]
    fn template_validation() {
        assert!(ManeuverTemplate::lane_follow(40.0, 3.0).validate().is_ok());
        assert!(ManeuverTemplate::lane_change(0, 40.0, 3.0).validate().is_err());
        assert!(ManeuverTemplate::lane_change(1, 80.0, 3.0).validate().is_err());
        assert!(ManeuverTemplate::lane_change(-1, 40.0, 0.5).validate().is_err());
        let mut m = ManeuverTemplate::mrm();
        assert!(m.validate().is_ok());
        m.target_speed_kmh = 10.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn lane_follow_reference_is_centerline() {
        let seg = RoadSegment::straight(0, 150.0, 3.5);
        let r = plan_reference(&seg, &ManeuverTemplate::lane_follow(40.0, 3.0), 40.0).unwrap();
        assert!(r.samples.iter().all(|p| p.d == 0.0));
        let dt = r.samples[1].t - r.samples[0].t;
        assert!((dt - 0.02).abs() < 1e-12);
    }

    #[test]
    fn lane_change_duration_matches_peak_acceleration() {
        let t = lane_change_duration(3.31, 2.5);
        assert!((t - 2.765).abs() < 1e-3, "{t}");
        // Independent check: scan the quintic's second derivative numerically.
        let peak = (0..=100_000)
            .map(|i| quintic_offset(3.31, t, t * i as f64 / 100_000.0).2.abs())
            .fold(0.0, f64::max);
        assert!((peak - 2.5).abs() < 1e-6, "{peak}");
    }

    #[test]
    fn lane_change_reference_reaches_adjacent_lane() {
        let seg = RoadSegment::straight(0, 150.0, 3.31);
        let r = plan_reference(&seg, &ManeuverTemplate::lane_change(-1, 50.0, 2.5), 50.0).unwrap();
        assert!((r.lane_change_duration.unwrap() - 2.765).abs() < 1e-3);
        assert!((r.end().d + 3.31).abs() < 1e-12);
    }

    #[test]
    fn lane_change_longer_than_segment_is_infeasible() {
        let seg = RoadSegment::straight(0, 20.0, 3.5);
        let err = plan_reference(&seg, &ManeuverTemplate::lane_change(1, 60.0, 1.0), 60.0).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn mrm_stop_kinematics() {
        let seg = RoadSegment::straight(0, 200.0, 3.5);
        let r = plan_reference(&seg, &ManeuverTemplate::mrm(), 50.0).unwrap();
        let v0 = 50.0 / 3.6;
        assert!((r.duration - v0 / 2.0).abs() < 1e-12);
        assert!((r.duration - 6.94).abs() < 0.01);
        assert!((r.end().s - 48.2).abs() < 0.05, "{}", r.end().s);
        assert_eq!(r.end().v, 0.0);
    }

    #[test]
    fn nominal_straight_lane_follow_barely_deviates() {
        let seg = RoadSegment::straight(0, 200.0, 3.5);
        let out = run_scenario(
            &seg,
            &ManeuverTemplate::lane_follow(50.0, 2.5),
            &DegradationState::nominal(),
            &VehicleParams::default(),
        )
        .unwrap();
        assert!(out.eps_lat_max < 0.05 && out.completed && !out.clipped);
    }

    #[test]
    fn frozen_steering_lane_change_clips() {
        let seg = RoadSegment::straight(0, 200.0, 3.5);
        let mut deg = DegradationState::nominal();
        deg.steer_angle = [0.0; 4];
        let out = run_scenario(
            &seg,
            &ManeuverTemplate::lane_change(1, 40.0, 3.0),
            &deg,
            &VehicleParams::default(),
        )
        .unwrap();
        assert!(out.clipped);
        assert_eq!(out.eps_lat_max, DEVIATION_CUTOFF);
    }

    #[test]
    fn mrm_comes_to_rest_in_lane() {
        let seg = RoadSegment::constant(0, 200.0, 0.01, 3.5);
        let p = VehicleParams::default();
        let r = plan_reference(&seg, &ManeuverTemplate::mrm(), 50.0).unwrap();
        let out = simulate_tracking(&seg, &r, &DegradationState::nominal(), &p, true).unwrap();
        assert!(out.completed && !out.clipped, "{out:?}");
        let trace = out.trace.unwrap();
        assert!(trace.last().unwrap().v < 0.05);
        assert!(trace.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn trace_respects_saturation() {
        let seg = RoadSegment::constant(0, 250.0, 0.02, 3.5);
        let p = VehicleParams::default();
        let mut deg = DegradationState::nominal();
        deg.steer_angle = [0.3, 0.2, 0.5, 0.4];
        deg.steer_rate = [0.1, 0.3, 0.05, 0.6];
        let lim = effective_axle_limits(&deg, &p);
        let r = plan_reference(&seg, &ManeuverTemplate::lane_change(1, 45.0, 4.0), 45.0).unwrap();
        let out = simulate_tracking(&seg, &r, &deg, &p, true).unwrap();
        let trace = out.trace.unwrap();
        for w in trace.windows(2) {
            assert!(w[1].delta_f.abs() <= lim.front_angle + 1e-12);
            assert!(w[1].delta_r.abs() <= lim.rear_angle + 1e-12);
            let dt = w[1].t - w[0].t;
            assert!((w[1].delta_f - w[0].delta_f).abs() <= lim.front_rate * dt + 1e-12);
            assert!((w[1].delta_r - w[0].delta_r).abs() <= lim.rear_rate * dt + 1e-12);
        }
    }

    #[test]
    fn mild_uniform_degradation_never_helps() {
        use crate::roadgeom::{generate_segments, SegmentGenConfig};
        use crate::util::seeded_rng;
        use rand::Rng;
        let segs = generate_segments(100, 99, &SegmentGenConfig::default()).unwrap();
        let p = VehicleParams::default();
        let mut rng = seeded_rng(5);
        for seg in &segs {
            let v = rng.random_range(30.0..50.0);
            let m = match rng.random_range(0..3) {
                0 => ManeuverTemplate::lane_follow(v, 3.0),
                k => ManeuverTemplate::lane_change(if k == 1 { 1 } else { -1 }, v, rng.random_range(2.5..4.5)),
            };
            let Ok(r) = plan_reference(seg, &m, v) else { continue };
            let nominal = simulate_tracking(seg, &r, &DegradationState::nominal(), &p, false).unwrap();
            let mild = simulate_tracking(seg, &r, &DegradationState::uniform(0.9), &p, false).unwrap();
            assert!(
                mild.eps_lat_max >= nominal.eps_lat_max - 1e-9,
                "segment {}: {} < {}",
                seg.id,
                mild.eps_lat_max,
                nominal.eps_lat_max
            );
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let seg = RoadSegment::constant(0, 180.0, -0.015, 3.2);
        let deg = DegradationState::from_factors([0.4, 0.7, 0.2, 0.9, 0.5, 0.3, 0.8, 0.6, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = ManeuverTemplate::lane_change(-1, 35.0, 3.5);
        let p = VehicleParams::default();
        let r = plan_reference(&seg, &m, 35.0).unwrap();
        let a = simulate_tracking(&seg, &r, &deg, &p, true).unwrap();
        let b = simulate_tracking(&seg, &r, &deg, &p, true).unwrap();
        assert_eq!(a.eps_lat_max.to_bits(), b.eps_lat_max.to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace_csv(
            &mut buf,
            &[TraceRecord {
                t: 0.0,
                s: 0.0,
                e_d: 0.01,
                delta_f: 0.0,
                delta_r: 0.0,
                v: 13.9,
            }],
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,s,e_d,delta_f,delta_r,v\n0,0,0.01,0,0,13.9\n");
    }
}
