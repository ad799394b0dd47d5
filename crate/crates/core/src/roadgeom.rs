//! Synthetic lane-segment geometry.
//!
//! A [`RoadSegment`] carries piecewise-linear curvature and lane-width profiles
//! over arc length. The geometric predictor inputs (width and curvature
//! extremes) are read off the knots, and [`eval_geometry`] integrates the
//! centerline pose for simulation and figure export.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{mix_seed, seeded_rng};

/// Hard bounds every generated or loaded segment must respect.
pub const WIDTH_BOUNDS: (f64, f64) = (2.0, 6.0);
pub const MAX_ABS_CURVATURE: f64 = 0.05;

/// Integration step for centerline poses, in meters.
const POSE_STEP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: u32,
    #[serde(rename = "length_m")]
    pub length: f64,
    /// `[s, k]` pairs, `s` in meters, `k` in 1/m.
    #[serde(rename = "curvature_knots")]
    pub curvature: Vec<[f64; 2]>,
    /// `[s, w]` pairs, lane width `w` in meters.
    #[serde(rename = "width_knots")]
    pub width: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentFeatures {
    pub w_min: f64,
    pub w_max: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub k_abs_max: f64,
}

/// Curvature, width and centerline pose at one arc-length position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryPoint {
    pub curvature: f64,
    pub width: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl RoadSegment {
    /// Straight segment with constant width; handy for tests and examples.
    pub fn straight(id: u32, length: f64, width: f64) -> Self {
        Self::constant(id, length, 0.0, width)
    }

    pub fn constant(id: u32, length: f64, curvature: f64, width: f64) -> Self {
        RoadSegment {
            id,
            length,
            curvature: vec![[0.0, curvature], [length, curvature]],
            width: vec![[0.0, width], [length, width]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::config("length_m", format!("must be positive, got {}", self.length)));
        }
        check_knots("curvature_knots", &self.curvature, self.length)?;
        check_knots("width_knots", &self.width, self.length)?;
        if let Some([_, w]) = self
            .width
            .iter()
            .find(|[_, w]| !(WIDTH_BOUNDS.0..=WIDTH_BOUNDS.1).contains(w))
        {
            return Err(Error::config(
                "width_knots",
                format!("width {w} outside [{}, {}] m", WIDTH_BOUNDS.0, WIDTH_BOUNDS.1),
            ));
        }
        if let Some([_, k]) = self.curvature.iter().find(|[_, k]| k.abs() > MAX_ABS_CURVATURE) {
            return Err(Error::config(
                "curvature_knots",
                format!("|k| = {} exceeds {MAX_ABS_CURVATURE} 1/m", k.abs()),
            ));
        }
        Ok(())
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        interp(&self.curvature, s)
    }

    pub fn width_at(&self, s: f64) -> f64 {
        interp(&self.width, s)
    }
}

fn check_knots(field: &'static str, knots: &[[f64; 2]], length: f64) -> Result<()> {
    if knots.len() < 2 {
        return Err(Error::config(field, "need at least two knots"));
    }
    if knots[0][0] != 0.0 || knots[knots.len() - 1][0] != length {
        return Err(Error::config(field, "first knot must be at s = 0 and last at s = length"));
    }
    if knots.windows(2).any(|w| w[1][0] <= w[0][0]) {
        return Err(Error::config(field, "knot positions must be strictly increasing"));
    }
    if knots.iter().any(|[s, v]| !s.is_finite() || !v.is_finite()) {
        return Err(Error::config(field, "non-finite knot"));
    }
    Ok(())
}

/// Piecewise-linear interpolation; clamps outside the knot range.
fn interp(knots: &[[f64; 2]], s: f64) -> f64 {
    let i = knots.partition_point(|k| k[0] <= s);
    if i == 0 {
        return knots[0][1];
    }
    if i == knots.len() {
        return knots[knots.len() - 1][1];
    }
    let [s0, v0] = knots[i - 1];
    let [s1, v1] = knots[i];
    v0 + (v1 - v0) * (s - s0) / (s1 - s0)
}

/// Width and curvature extremes. Piecewise-linear profiles attain their
/// extremes at knots, so only the knots are scanned.
pub fn segment_features(seg: &RoadSegment) -> SegmentFeatures {
    let (w_min, w_max) = min_max(seg.width.iter().map(|k| k[1]));
    let (k_min, k_max) = min_max(seg.curvature.iter().map(|k| k[1]));
    SegmentFeatures {
        w_min,
        w_max,
        k_min,
        k_max,
        k_abs_max: k_min.abs().max(k_max.abs()),
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Curvature, width and centerline pose at arc length `s`.
///
/// The heading is integrated from `s = 0` with the trapezoidal rule on a grid
/// no coarser than 0.1 m; the position uses the trapezoidal rule on the
/// heading's cosine and sine.
pub fn eval_geometry(seg: &RoadSegment, s: f64) -> Result<GeometryPoint> {
    if !(0.0..=seg.length).contains(&s) {
        return Err(Error::Domain(format!(
            "arc length {s} outside segment [0, {}]",
            seg.length
        )));
    }
    let steps = (s / POSE_STEP).ceil().max(1.0) as usize;
    let h = s / steps as f64;
    let (mut x, mut y, mut heading) = (0.0, 0.0, 0.0);
    let mut k_prev = seg.curvature_at(0.0);
    for i in 1..=steps {
        let k = seg.curvature_at(i as f64 * h);
        let next_heading = heading + 0.5 * h * (k_prev + k);
        x += 0.5 * h * (heading.cos() + next_heading.cos());
        y += 0.5 * h * (heading.sin() + next_heading.sin());
        heading = next_heading;
        k_prev = k;
    }
    Ok(GeometryPoint {
        curvature: seg.curvature_at(s),
        width: seg.width_at(s),
        x,
        y,
        heading,
    })
}

/// Centerline poses sampled every `spacing` meters (endpoint included), in a
/// single integration pass.
pub fn sample_centerline(seg: &RoadSegment, spacing: f64) -> Vec<GeometryPoint> {
    let n = (seg.length / spacing).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(n + 1);
    let sub = (spacing / POSE_STEP).ceil().max(1.0) as usize;
    let (mut x, mut y, mut heading) = (0.0, 0.0, 0.0);
    let mut s = 0.0;
    out.push(GeometryPoint {
        curvature: seg.curvature_at(0.0),
        width: seg.width_at(0.0),
        x,
        y,
        heading,
    });
    for i in 1..=n {
        let target = (i as f64 * spacing).min(seg.length);
        let h = (target - s) / sub as f64;
        let mut k_prev = seg.curvature_at(s);
        for j in 1..=sub {
            let k = seg.curvature_at(s + j as f64 * h);
            let next_heading = heading + 0.5 * h * (k_prev + k);
            x += 0.5 * h * (heading.cos() + next_heading.cos());
            y += 0.5 * h * (heading.sin() + next_heading.sin());
            heading = next_heading;
            k_prev = k;
        }
        s = target;
        out.push(GeometryPoint {
            curvature: seg.curvature_at(s),
            width: seg.width_at(s),
            x,
            y,
            heading,
        });
    }
    out
}

/// Parameter ranges for [`generate_segments`].
///
/// Curvature amplitude is drawn log-uniformly per segment; each knot value is
/// `amplitude * (sign * bias + (1 - bias) * u)` with `u ~ U[-1, 1]`, so a
/// segment may curve one way only or wiggle both ways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentGenConfig {
    pub length_m: (f64, f64),
    pub knot_spacing_m: (f64, f64),
    pub curvature_amplitude: (f64, f64),
    pub base_width_m: (f64, f64),
    pub width_jitter_m: f64,
}

impl Default for SegmentGenConfig {
    fn default() -> Self {
        SegmentGenConfig {
            length_m: (80.0, 300.0),
            knot_spacing_m: (20.0, 60.0),
            curvature_amplitude: (5.0e-4, 0.04),
            base_width_m: (2.8, 3.8),
            width_jitter_m: 0.4,
        }
    }
}

impl SegmentGenConfig {
    pub fn validate(&self) -> Result<()> {
        let (l0, l1) = self.length_m;
        if !(l0 > 0.0 && l0 <= l1 && l1.is_finite()) {
            return Err(Error::config("length_m", format!("need 0 < lo <= hi, got ({l0}, {l1})")));
        }
        let (s0, s1) = self.knot_spacing_m;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::config("knot_spacing_m", format!("need 0 < lo <= hi, got ({s0}, {s1})")));
        }
        if l0 < 2.0 * s0 {
            return Err(Error::config(
                "knot_spacing_m",
                "minimum spacing must fit twice into the minimum length",
            ));
        }
        let (c0, c1) = self.curvature_amplitude;
        if !(c0 > 0.0 && c0 <= c1 && c1 <= MAX_ABS_CURVATURE) {
            return Err(Error::config(
                "curvature_amplitude",
                format!("need 0 < lo <= hi <= {MAX_ABS_CURVATURE}, got ({c0}, {c1})"),
            ));
        }
        let (w0, w1) = self.base_width_m;
        let j = self.width_jitter_m;
        if !(j >= 0.0 && w0 <= w1 && w0 - j >= WIDTH_BOUNDS.0 && w1 + j <= WIDTH_BOUNDS.1) {
            return Err(Error::config(
                "base_width_m",
                format!(
                    "base width ± jitter must stay within [{}, {}] m",
                    WIDTH_BOUNDS.0, WIDTH_BOUNDS.1
                ),
            ));
        }
        Ok(())
    }
}

/// Deterministic seeded segment population. Segment `i` depends only on
/// `(seed, i, ranges)`.
pub fn generate_segments(count: usize, seed: u64, ranges: &SegmentGenConfig) -> Result<Vec<RoadSegment>> {
    if count == 0 {
        return Err(Error::config("count", "at least one segment required"));
    }
    ranges.validate()?;
    Ok((0..count)
        .map(|i| generate_one(i as u32, mix_seed(seed, i as u64), ranges))
        .collect())
}

fn generate_one(id: u32, seed: u64, cfg: &SegmentGenConfig) -> RoadSegment {
    let mut rng = seeded_rng(seed);
    let length = uniform(&mut rng, cfg.length_m);

    let curvature_s = knot_positions(&mut rng, length, cfg.knot_spacing_m);
    let (a0, a1) = cfg.curvature_amplitude;
    let amplitude = (a0.ln() + rng.random::<f64>() * (a1.ln() - a0.ln())).exp();
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let bias: f64 = rng.random();
    let curvature = curvature_s
        .iter()
        .map(|&s| {
            let u = rng.random_range(-1.0..=1.0);
            [s, amplitude * (sign * bias + (1.0 - bias) * u)]
        })
        .collect();

    let width_s = knot_positions(&mut rng, length, (cfg.knot_spacing_m.0 * 2.0, cfg.knot_spacing_m.1 * 2.0));
    let base = uniform(&mut rng, cfg.base_width_m);
    let width = width_s
        .iter()
        .map(|&s| {
            let jitter = cfg.width_jitter_m * rng.random_range(-1.0..=1.0);
            [s, base + jitter]
        })
        .collect();

    RoadSegment {
        id,
        length,
        curvature,
        width,
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Knot positions from 0 to `length`; every gap lies in `spacing` except that
/// the gap range shrinks when the segment is shorter than two spacings.
fn knot_positions(rng: &mut impl Rng, length: f64, (lo, hi): (f64, f64)) -> Vec<f64> {
    let mut s = vec![0.0];
    let mut pos = 0.0;
    while length - pos > hi {
        let upper = hi.min(length - pos - lo);
        let step = if upper > lo { rng.random_range(lo..upper) } else { lo };
        pos += step;
        s.push(pos);
    }
    s.push(length);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_curvature(ks: &[f64]) -> RoadSegment {
        let n = ks.len();
        RoadSegment {
            id: 0,
            length: 100.0,
            curvature: ks
                .iter()
                .enumerate()
                .map(|(i, &k)| [100.0 * i as f64 / (n - 1) as f64, k])
                .collect(),
            width: vec![[0.0, 3.0], [100.0, 3.0]],
        }
    }

    #[test]
    fn features_of_constant_segment() {
        let seg = RoadSegment::straight(1, 120.0, 3.31);
        let f = segment_features(&seg);
        assert_eq!(
            (f.w_min, f.w_max, f.k_min, f.k_max, f.k_abs_max),
            (3.31, 3.31, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn features_of_mixed_curvature() {
        let f = segment_features(&with_curvature(&[0.0, -0.02, 0.01]));
        assert_eq!(f.k_min, -0.02);
        assert_eq!(f.k_max, 0.01);
        assert_eq!(f.k_abs_max, 0.02);
    }

    #[test]
    fn features_of_width_profile() {
        let mut seg = with_curvature(&[0.0, 0.0]);
        seg.width = vec![[0.0, 3.0], [50.0, 3.47], [100.0, 3.2]];
        let f = segment_features(&seg);
        assert_eq!((f.w_min, f.w_max), (3.0, 3.47));
    }

    #[test]
    fn one_sided_curvature_keeps_signed_extremes() {
        let f = segment_features(&with_curvature(&[0.004, 0.01, 0.006]));
        assert_eq!((f.k_min, f.k_max, f.k_abs_max), (0.004, 0.01, 0.01));
    }

    #[test]
    fn straight_pose() {
        let p = eval_geometry(&RoadSegment::straight(0, 100.0, 3.5), 50.0).unwrap();
        assert!((p.x - 50.0).abs() < 1e-9 && p.y.abs() < 1e-12 && p.heading == 0.0);
    }

    #[test]
    fn heading_is_curvature_times_arc_length() {
        let seg = RoadSegment::constant(0, 200.0, 0.01, 3.5);
        let p = eval_geometry(&seg, 100.0).unwrap();
        assert!((p.heading - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quarter_circle_matches_closed_form() {
        let seg = RoadSegment::constant(0, 200.0, 0.01, 3.5);
        let s = 157.08;
        let p = eval_geometry(&seg, s).unwrap();
        let (xc, yc) = ((0.01 * s).sin() / 0.01, (1.0 - (0.01 * s).cos()) / 0.01);
        assert!((p.x - xc).abs() < 0.1 && (p.y - yc).abs() < 0.1, "{p:?}");
        assert!((p.x - 100.0).abs() < 0.1 && (p.y - 100.0).abs() < 0.1);
    }

    #[test]
    fn outside_segment_is_a_domain_error() {
        let seg = RoadSegment::straight(0, 100.0, 3.5);
        assert!(matches!(eval_geometry(&seg, 100.5), Err(Error::Domain(_))));
        assert!(matches!(eval_geometry(&seg, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SegmentGenConfig::default();
        let a = serde_json::to_string(&generate_segments(1, 7, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_segments(1, 7, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_scale_population_is_valid() {
        let segs = generate_segments(222, 1, &SegmentGenConfig::default()).unwrap();
        assert_eq!(segs.len(), 222);
        for seg in &segs {
            seg.validate().unwrap();
            assert!((80.0..=300.0).contains(&seg.length));
            for w in seg.curvature.windows(2) {
                let gap = w[1][0] - w[0][0];
                assert!((20.0 - 1e-9..=60.0 + 1e-9).contains(&gap), "gap {gap}");
            }
        }
    }

    #[test]
    fn curvature_population_straddles_threshold() {
        let segs = generate_segments(1000, 3, &SegmentGenConfig::default()).unwrap();
        let above = segs
            .iter()
            .filter(|s| segment_features(s).k_abs_max > 0.003)
            .count() as f64
            / 1000.0;
        assert!((0.3..=0.7).contains(&above), "fraction above threshold {above}");
    }

    #[test]
    fn invalid_ranges_name_the_field() {
        let cfg = SegmentGenConfig {
            curvature_amplitude: (0.01, 0.2),
            ..Default::default()
        };
        match generate_segments(3, 0, &cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "curvature_amplitude"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = SegmentGenConfig {
            base_width_m: (1.5, 3.0),
            ..Default::default()
        };
        assert!(matches!(
            generate_segments(3, 0, &cfg),
            Err(Error::Config { field: "base_width_m", .. })
        ));
    }

    #[test]
    fn validate_rejects_bad_knots() {
        let mut seg = RoadSegment::straight(0, 100.0, 3.5);
        seg.width[1][0] = 90.0;
        assert!(seg.validate().is_err());
        let mut seg = RoadSegment::straight(0, 100.0, 3.5);
        seg.curvature = vec![[0.0, 0.0], [0.0, 0.0], [100.0, 0.0]];
        assert!(seg.validate().is_err());
        let seg = RoadSegment::constant(0, 100.0, 0.06, 3.5);
        assert!(seg.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(40))]

            #[test]
            fn k_abs_max_bounds_sampled_curvature(seed in any::<u64>()) {
                let seg = &generate_segments(1, seed, &SegmentGenConfig::default()).unwrap()[0];
                let f = segment_features(seg);
                let mut s = 0.0;
                while s <= seg.length {
                    prop_assert!(seg.curvature_at(s).abs() <= f.k_abs_max + 1e-15);
                    s += 0.5;
                }
            }

            #[test]
            fn features_stable_under_reserialization(seed in any::<u64>()) {
                let seg = &generate_segments(1, seed, &SegmentGenConfig::default()).unwrap()[0];
                let json = serde_json::to_string(seg).unwrap();
                let back: RoadSegment = serde_json::from_str(&json).unwrap();
                prop_assert_eq!(&back, seg);
                prop_assert_eq!(segment_features(&back), segment_features(seg));
                prop_assert_eq!(serde_json::to_string(&back).unwrap(), json);
            }

            #[test]
            fn sampled_path_length_tracks_arc_length(seed in any::<u64>(), frac in 0.2f64..1.0) {
                let seg = &generate_segments(1, seed, &SegmentGenConfig::default()).unwrap()[0];
                let s_end = seg.length * frac;
                let mut prev = eval_geometry(seg, 0.0).unwrap();
                let mut total = 0.0;
                let n = 50;
                for i in 1..=n {
                    let p = eval_geometry(seg, s_end * i as f64 / n as f64).unwrap();
                    total += ((p.x - prev.x).powi(2) + (p.y - prev.y).powi(2)).sqrt();
                    prev = p;
                }
                prop_assert!((total - s_end).abs() <= 0.005 * s_end);
            }
        }
    }
}
