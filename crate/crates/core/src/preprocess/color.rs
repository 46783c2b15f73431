use super::FlowField;

/// HSV to RGB with `h` in degrees and `s`, `v` in [0, 1].
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Colours a flow field: hue is the motion direction, value the magnitude
/// relative to the largest one in the field, saturation is full.
pub fn flow_to_rgb(flow: &FlowField) -> Vec<u8> {
    let max = flow.max_magnitude();
    let mut out = vec![0u8; flow.dx.len() * 3];
    if max <= 0.0 {
        return out;
    }
    for (i, px) in out.chunks_exact_mut(3).enumerate() {
        let hue = flow.dy[i].atan2(flow.dx[i]).to_degrees().rem_euclid(360.0);
        let rgb = hsv_to_rgb(hue, 1.0, flow.magnitude(i) / max);
        for (o, c) in px.iter_mut().zip(rgb) {
            *o = (c * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}
