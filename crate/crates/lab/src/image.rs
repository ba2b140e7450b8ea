//! Binary portable pixmaps: P6 for colour, P5 for grayscale.

use std::path::Path;

use gia_core::{Error, Result, Tensor};

/// Encodes a `C×H×W` tensor; values are clamped to `[0, 1]` and scaled to 8 bits.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::Shape(format!("image dump needs a 1×H×W or 3×H×W tensor, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = t.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = d[(ch * h + y) * w + x];
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn dump_image(t: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_ppm(t)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_colour_image() {
        let b = encode_ppm(&Tensor::zeros(&[3, 2, 2])).unwrap();
        let head = b"P6\n2 2\n255\n";
        assert_eq!(&b[..head.len()], head);
        assert_eq!(&b[head.len()..], &[0u8; 12]);
    }

    #[test]
    fn ones_and_grayscale() {
        let b = encode_ppm(&Tensor::full(&[1, 3, 2], 1.0)).unwrap();
        assert!(b.starts_with(b"P5\n2 3\n255\n"));
        assert!(b[11..].iter().all(|&v| v == 0xFF));
        assert_eq!(b.len(), 11 + 6);
        assert!(encode_ppm(&Tensor::zeros(&[2, 2, 2])).is_err());
        assert!(encode_ppm(&Tensor::zeros(&[3, 2])).is_err());
    }
}
