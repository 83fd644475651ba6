use std::path::Path;

use ctsynth::volume::Volume;

/// Axial slice `z` as row-major `(width, height, values)`.
pub fn axial(v: &Volume, z: usize) -> (usize, usize, Vec<f32>) {
    let [nx, ny, _] = v.dims();
    let mut out = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            out.push(v.get(x, y, z));
        }
    }
    (nx, ny, out)
}

pub fn range(values: &[f32]) -> (f32, f32) {
    values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Binary 8-bit PGM, linearly windowed to `[lo, hi]`.
pub fn encode(width: usize, height: usize, values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    buf.extend(values.iter().map(|&x| (((x - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8));
    buf
}

pub fn write(path: &Path, width: usize, height: usize, values: &[f32], window: (f32, f32)) -> std::io::Result<()> {
    std::fs::write(path, encode(width, height, values, window.0, window.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_window() {
        let b = encode(2, 1, &[-1.0, 3.0], -1.0, 1.0);
        assert_eq!(&b[..11], b"P5\n2 1\n255\n");
        assert_eq!(&b[11..], &[0, 255]);
    }

    #[test]
    fn axial_is_x_fastest() {
        let v = Volume::from_fn([3, 2, 2], [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
        let (w, h, s) = axial(&v, 1);
        assert_eq!((w, h), (3, 2));
        assert_eq!(s, vec![100.0, 101.0, 102.0, 110.0, 111.0, 112.0]);
    }
}
