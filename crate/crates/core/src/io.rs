//! File formats: binary PPM images, OBJ meshes with fixed formatting, and
//! the loss CSV log.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::losses::LossReport;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse {path}: {message}")]
    Parse { path: String, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.display().to_string(), source }
}

fn srgb(linear: f64) -> f64 {
    let l = linear.clamp(0.0, 1.0);
    if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary PPM. Shaded (linear radiance) images pass through the
/// sRGB transfer; value images (normal maps, heatmaps) are clamped raw.
pub fn write_ppm(
    path: &Path,
    rgb: &[f64],
    width: usize,
    height: usize,
    linear_to_srgb: bool,
) -> Result<(), IoError> {
    assert_eq!(rgb.len(), width * height * 3, "pixel buffer size");
    let mut out = Vec::with_capacity(rgb.len() + 32);
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    for &v in rgb {
        let v = if linear_to_srgb { srgb(v) } else { v };
        out.push(to_byte(v));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Grayscale heatmap written as an equal-channel PPM.
pub fn write_heatmap_ppm(
    path: &Path,
    values: &[f64],
    width: usize,
    height: usize,
) -> Result<(), IoError> {
    assert_eq!(values.len(), width * height, "heatmap size");
    let rgb: Vec<f64> = values.iter().flat_map(|&v| [v, v, v]).collect();
    write_ppm(path, &rgb, width, height, false)
}

/// OBJ export: `v x y z` with fixed 9-decimal formatting, then 1-based
/// `f i j k` lines, so identical meshes diff identically.
pub fn write_obj(path: &Path, vertices: &[f64], faces: &[[usize; 3]]) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        for v in vertices.chunks_exact(3) {
            writeln!(w, "v {:.9} {:.9} {:.9}", v[0], v[1], v[2])?;
        }
        for f in faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        w.flush()
    };
    emit().map_err(io_err(path))
}

/// Minimal OBJ reader for round-trip checks: `v` and `f` records only.
pub fn read_obj(path: &Path) -> Result<(Vec<f64>, Vec<[usize; 3]>), IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let parse = |path: &Path, message: String| IoError::Parse {
        path: path.display().to_string(),
        message,
    };
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                for _ in 0..3 {
                    let tok = parts
                        .next()
                        .ok_or_else(|| parse(path, format!("line {}: short vertex", lineno + 1)))?;
                    vertices.push(
                        tok.parse::<f64>()
                            .map_err(|e| parse(path, format!("line {}: {e}", lineno + 1)))?,
                    );
                }
            }
            Some("f") => {
                let mut f = [0usize; 3];
                for slot in &mut f {
                    let tok = parts
                        .next()
                        .ok_or_else(|| parse(path, format!("line {}: short face", lineno + 1)))?;
                    let idx: usize = tok
                        .split('/')
                        .next()
                        .unwrap_or(tok)
                        .parse()
                        .map_err(|e| parse(path, format!("line {}: {e}", lineno + 1)))?;
                    *slot = idx - 1;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

pub const LOSS_CSV_HEADER: &str = "iter,stage,sds,ama,grad_norm_geo,grad_norm_mat,grad_norm_lora";

pub fn loss_csv_row(report: &LossReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        report.iteration,
        report.stage,
        report.sds,
        report.ama,
        report.grad_norm_geo,
        report.grad_norm_mat,
        report.grad_norm_lora
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obj_roundtrip_preserves_counts_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        let verts = vec![0.1234567891, -1.0, 0.5, 0.25, 0.75, -0.125];
        let faces = vec![[0, 1, 0]];
        write_obj(&path, &verts, &faces).unwrap();
        let (rv, rf) = read_obj(&path).unwrap();
        assert_eq!(rv.len(), verts.len());
        assert_eq!(rf, faces);
        for (a, b) in rv.iter().zip(&verts) {
            assert!((a - b).abs() < 1e-9, "9-decimal fixed formatting");
        }
    }

    #[test]
    fn obj_export_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.obj"), dir.path().join("b.obj"));
        let verts = vec![0.1, 0.2, 0.3, -0.4, -0.5, -0.6, 0.0, 1.0, 0.0];
        let faces = vec![[0, 1, 2]];
        write_obj(&p1, &verts, &faces).unwrap();
        write_obj(&p2, &verts, &faces).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn ppm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        write_ppm(&path, &[0.0, 0.5, 1.0, 1.0, 0.0, 0.0], 2, 1, true).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(bytes.len(), b"P6\n2 1\n255\n".len() + 6);
        // Channel above 1 clamps to 255, zero stays 0.
        let px = &bytes[b"P6\n2 1\n255\n".len()..];
        assert_eq!(px[2], 255);
        assert_eq!(px[0], 0);
    }

    #[test]
    fn csv_row_shape() {
        let row = loss_csv_row(&LossReport {
            iteration: 3,
            stage: "geometry".into(),
            sds: 1.5,
            ama: 0.25,
            per_layer_ama: vec![0.25],
            grad_norm_geo: 0.1,
            grad_norm_mat: 0.0,
            grad_norm_lora: 0.2,
        });
        assert_eq!(row, "3,geometry,1.5,0.25,0.1,0,0.2");
        assert_eq!(LOSS_CSV_HEADER.split(',').count(), row.split(',').count());
    }
}
