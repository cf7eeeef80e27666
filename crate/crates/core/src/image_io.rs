//! Binary PPM (P6) and PGM (P5) reading and writing.
//!
//! Grayscale images are (H, W) tensors, color images (H, W, 3), both with
//! values in [0, 1]. Color is converted to gray with the 0.299/0.587/0.114
//! luma weights.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::Shape { op: "write_pgm", detail: format!("{s:?}") });
    }
    let (h, w) = (s[0], s[1]);
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(image.data().iter().map(|&v| to_byte(v)));
    write_bytes(path, &buf)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape { op: "write_ppm", detail: format!("{s:?}") });
    }
    let (h, w) = (s[0], s[1]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.extend(image.data().iter().map(|&v| to_byte(v)));
    write_bytes(path, &buf)
}

pub fn write_bytes(path: &Path, buf: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Header {
    color: bool,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let err = |detail: &str| Error::Parse {
        what: format!("image {}", path.display()),
        detail: detail.to_string(),
    };
    if bytes.len() < 2 {
        return Err(err("file too short"));
    }
    let color = match &bytes[..2] {
        b"P6" => true,
        b"P5" => false,
        _ => return Err(err("expected P5 or P6 magic")),
    };
    // Read three whitespace-separated integers, skipping `#` comments.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(err("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("malformed header integer"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing whitespace after maxval"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(err("zero image dimension"));
    }
    Ok(Header { color, width, height, data_start: pos })
}

/// Read a PGM or PPM file as written (gray -> rank 2, color -> rank 3).
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let hdr = parse_header(path, &bytes)?;
    let channels = if hdr.color { 3 } else { 1 };
    let need = hdr.width * hdr.height * channels;
    let data = &bytes[hdr.data_start..];
    if data.len() < need {
        return Err(Error::Parse {
            what: format!("image {}", path.display()),
            detail: format!("expected {need} pixel bytes, got {}", data.len()),
        });
    }
    let values: Vec<f64> = data[..need].iter().map(|&b| b as f64 / 255.0).collect();
    if hdr.color {
        Tensor::new(vec![hdr.height, hdr.width, 3], values)
    } else {
        Tensor::new(vec![hdr.height, hdr.width], values)
    }
}

/// Read any supported image as grayscale, converting color by luma weights.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = read_image(path)?;
    Ok(to_gray(&img))
}

pub fn to_gray(img: &Tensor) -> Tensor {
    match img.rank() {
        2 => img.clone(),
        3 => {
            let s = img.shape();
            let (h, w) = (s[0], s[1]);
            let mut out = vec![0.0; h * w];
            for (i, px) in img.data().chunks_exact(3).enumerate() {
                out[i] = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
            }
            Tensor::new(vec![h, w], out).expect("gray shape")
        }
        _ => panic!("to_gray expects rank 2 or 3, got {:?}", img.shape()),
    }
}

/// Mirror an image horizontally (gray or color).
pub fn mirror_horizontal(img: &Tensor) -> Tensor {
    let s = img.shape();
    let (h, w) = (s[0], s[1]);
    let c = if s.len() == 3 { s[2] } else { 1 };
    let mut out = vec![0.0; img.len()];
    for r in 0..h {
        for col in 0..w {
            let src = (r * w + col) * c;
            let dst = (r * w + (w - 1 - col)) * c;
            out[dst..dst + c].copy_from_slice(&img.data()[src..src + c]);
        }
    }
    Tensor::new(s.to_vec(), out).expect("mirror shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn ppm_luma_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        write_ppm(&path, &img).unwrap();
        let gray = read_gray(&path).unwrap();
        assert!((gray.data()[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_image(&path).is_err());
    }

    #[test]
    fn mirror_flips_columns() {
        let img = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let m = mirror_horizontal(&img);
        assert_eq!(m.data(), &[3.0, 2.0, 1.0]);
        let mm = mirror_horizontal(&m);
        assert_eq!(mm.data(), img.data());
    }
}
