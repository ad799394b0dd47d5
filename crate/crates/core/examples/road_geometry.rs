//! Generate a few road segments and look at their summary features.

use capguard::roadgeom::{eval_geometry, generate_segments, segment_features, SegmentGenConfig};

fn main() -> capguard::Result<()> {
    let segments = generate_segments(8, 42, &SegmentGenConfig::default())?;
    println!("{:>3} {:>7} {:>6} {:>6} {:>9} {:>9} {:>9}", "id", "len[m]", "w_min", "w_max", "k_min", "k_max", "|k|max");
    for seg in &segments {
        let f = segment_features(seg);
        println!(
            "{:>3} {:>7.1} {:>6.2} {:>6.2} {:>9.5} {:>9.5} {:>9.5}",
            seg.id, seg.length, f.w_min, f.w_max, f.k_min, f.k_max, f.k_abs_max
        );
    }

    let seg = &segments[0];
    println!("\nsegment 0 centerline every 25 m:");
    let mut s = 0.0;
    while s <= seg.length {
        let p = eval_geometry(seg, s)?;
        println!("  s={s:>6.1}  x={:>7.2}  y={:>7.2}  heading={:>6.3}  k={:>8.5}", p.x, p.y, p.heading, p.curvature);
        s += 25.0;
    }
    println!("\n{}", serde_json::to_string(seg)?);
    Ok(())
}
