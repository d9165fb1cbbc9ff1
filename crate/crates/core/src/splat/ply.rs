//! Binary PLY serialization of Gaussian scenes.
//!
//! Little-endian `binary_little_endian 1.0` with per-vertex float
//! properties x, y, z, scale_0..2 (log), rot_0..3 (quaternion wxyz),
//! opacity (logit), red, green, blue. Values are stored as f32; loading
//! round-trips those f32 values exactly.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Quaternion, Vector3};
use thiserror::Error;

use super::{Gaussian3D, Scene};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a PLY file")]
    BadMagic,
    #[error("unsupported PLY layout: {0}")]
    UnsupportedLayout(String),
    #[error("truncated vertex data")]
    Truncated,
}

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity", "red", "green", "blue",
];

pub fn save_ply<W: Write>(scene: &Scene, mut w: W) -> Result<(), PlyError> {
    write!(w, "ply\nformat binary_little_endian 1.0\n")?;
    write!(w, "element vertex {}\n", scene.len())?;
    for p in PROPERTIES {
        write!(w, "property float {}\n", p)?;
    }
    write!(w, "end_header\n")?;
    for g in &scene.gaussians {
        let vals = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            g.log_scales.x,
            g.log_scales.y,
            g.log_scales.z,
            g.rotation.w,
            g.rotation.i,
            g.rotation.j,
            g.rotation.k,
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        for v in vals {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

pub fn load_ply<R: Read>(r: R) -> Result<Scene, PlyError> {
    let mut reader = std::io::BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(PlyError::BadMagic);
    }
    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(PlyError::UnsupportedLayout("missing end_header".into()));
        }
        let t = line.trim_end();
        if t == "end_header" {
            break;
        }
        if t == "format binary_little_endian 1.0" || t.starts_with("comment") {
            continue;
        }
        if let Some(rest) = t.strip_prefix("element vertex ") {
            vertex_count = Some(
                rest.parse()
                    .map_err(|_| PlyError::UnsupportedLayout(t.to_string()))?,
            );
            continue;
        }
        if let Some(rest) = t.strip_prefix("property float ") {
            props.push(rest.to_string());
            continue;
        }
        return Err(PlyError::UnsupportedLayout(t.to_string()));
    }
    if props != PROPERTIES {
        return Err(PlyError::UnsupportedLayout(format!(
            "unexpected property list: {:?}",
            props
        )));
    }
    let count = vertex_count.ok_or_else(|| PlyError::UnsupportedLayout("no vertex element".into()))?;
    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        let mut vals = [0.0f64; 14];
        for v in vals.iter_mut() {
            *v = reader
                .read_f32::<LittleEndian>()
                .map_err(|_| PlyError::Truncated)? as f64;
        }
        gaussians.push(Gaussian3D {
            mean: Vector3::new(vals[0], vals[1], vals[2]),
            log_scales: Vector3::new(vals[3], vals[4], vals[5]),
            rotation: Quaternion::new(vals[6], vals[7], vals[8], vals[9]),
            opacity_logit: vals[10],
            color: Vector3::new(vals[11], vals[12], vals[13]),
        });
    }
    Ok(Scene::new(gaussians))
}

pub fn save_ply_file(scene: &Scene, path: &Path) -> Result<(), PlyError> {
    let file = std::fs::File::create(path)?;
    save_ply(scene, std::io::BufWriter::new(file))
}

pub fn load_ply_file(path: &Path) -> Result<Scene, PlyError> {
    let file = std::fs::File::open(path)?;
    load_ply(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_clean(v: f64) -> f64 {
        v as f32 as f64
    }

    fn sample_scene() -> Scene {
        Scene::new(vec![
            Gaussian3D {
                mean: Vector3::new(0.5, -1.25, 3.0).map(f32_clean),
                log_scales: Vector3::new(-1.0, -0.5, -2.0).map(f32_clean),
                rotation: Quaternion::new(0.9, 0.1, -0.2, 0.3),
                opacity_logit: f32_clean(0.75),
                color: Vector3::new(0.25, 0.5, 0.75),
            },
            Gaussian3D {
                mean: Vector3::zeros(),
                log_scales: Vector3::repeat(-1.5),
                rotation: Quaternion::new(1.0, 0.0, 0.0, 0.0),
                opacity_logit: 0.0,
                color: Vector3::new(1.0, 0.0, 0.0),
            },
        ])
    }

    #[test]
    fn round_trip() {
        let scene = sample_scene();
        let mut buf = Vec::new();
        save_ply(&scene, &mut buf).unwrap();
        let loaded = load_ply(&buf[..]).unwrap();
        // values survive exactly at f32 precision
        let mut buf2 = Vec::new();
        save_ply(&loaded, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(loaded.len(), 2);
    }

    #[test]
    fn empty_scene_round_trips() {
        let mut buf = Vec::new();
        save_ply(&Scene::default(), &mut buf).unwrap();
        let loaded = load_ply(&buf[..]).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn bad_magic_rejected() {
        let err = load_ply(&b"off\n"[..]).unwrap_err();
        assert!(matches!(err, PlyError::BadMagic));
    }

    #[test]
    fn truncated_data_rejected() {
        let scene = sample_scene();
        let mut buf = Vec::new();
        save_ply(&scene, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(load_ply(&buf[..]), Err(PlyError::Truncated)));
    }
}
