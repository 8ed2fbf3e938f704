//! Binary 16-bit greyscale previews.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

/// `P5` bytes with samples scaled so the image maximum maps to 65535.
pub fn encode(x: &Array2<f64>) -> Vec<u8> {
    let (h, w) = x.dim();
    let max = x.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * h * w);
    for &v in x {
        let s = if max > 0.0 && v.is_finite() {
            (v / max * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

pub fn write(path: impl AsRef<Path>, x: &Array2<f64>) -> std::io::Result<()> {
    std::fs::File::create(path)?.write_all(&encode(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_big_endian_samples() {
        let x = Array2::from_shape_vec((1, 3), vec![0.0, 0.5, 1.0]).unwrap();
        let b = encode(&x);
        let header = b"P5\n3 1\n65535\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 0, 0x80, 0x00, 0xff, 0xff]);
    }

    #[test]
    fn blank_image_is_black() {
        let b = encode(&Array2::zeros((2, 2)));
        assert!(b[b.len() - 8..].iter().all(|&v| v == 0));
    }
}
