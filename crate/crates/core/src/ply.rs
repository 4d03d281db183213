//! Binary little-endian PLY for Gaussian clouds.
//!
//! Vertex properties, in order: `x y z rot_w rot_x rot_y rot_z log_scale_x
//! log_scale_y log_scale_z opacity_logit r g b`, stored as `float` or
//! `double`. Checkpoints embed the `double` form so parameters survive a
//! round trip exactly. The reader accepts either, in any property order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussians::{Gaussian, GaussianCloud};

const PROPERTIES: [&str; 14] = [
    "x",
    "y",
    "z",
    "rot_w",
    "rot_x",
    "rot_y",
    "rot_z",
    "log_scale_x",
    "log_scale_y",
    "log_scale_z",
    "opacity_logit",
    "r",
    "g",
    "b",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyPrecision {
    F32,
    F64,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "PLY", detail: detail.into() }
}

fn row(g: &Gaussian) -> [f64; 14] {
    let [x, y, z] = g.position;
    let [qw, qx, qy, qz] = g.rotation;
    let [sx, sy, sz] = g.log_scale;
    let [r, gg, b] = g.color;
    [x, y, z, qw, qx, qy, qz, sx, sy, sz, g.opacity_logit, r, gg, b]
}

pub fn write_ply_bytes(cloud: &GaussianCloud, precision: PlyPrecision) -> Vec<u8> {
    let ty = match precision {
        PlyPrecision::F32 => "float",
        PlyPrecision::F64 => "double",
    };
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len());
    for p in PROPERTIES {
        header.push_str(&format!("property {ty} {p}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for i in 0..cloud.len() {
        for v in row(&cloud.get(i)) {
            match precision {
                PlyPrecision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                PlyPrecision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

pub fn write_ply(cloud: &GaussianCloud, path: &Path, precision: PlyPrecision) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, write_ply_bytes(cloud, precision))?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<GaussianCloud> {
    read_ply_bytes(&fs::read(path)?)
}

pub fn read_ply_bytes(bytes: &[u8]) -> Result<GaussianCloud> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let body = &bytes[end + END.len()..];

    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic"));
    }
    let mut count = None;
    let mut props: Vec<(String, usize)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["element", name, _] => return Err(bad(format!("unexpected element {name}"))),
            ["property", ty, name] if in_vertex => {
                let size = match *ty {
                    "float" | "float32" => 4,
                    "double" | "float64" => 8,
                    other => return Err(bad(format!("unsupported property type {other}"))),
                };
                props.push((name.to_string(), size));
            }
            _ => return Err(bad(format!("unrecognized header line `{line}`"))),
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element"))?;
    let mut slots = [usize::MAX; 14];
    let mut offset = 0;
    let mut layout = Vec::with_capacity(props.len());
    for (name, size) in &props {
        if let Some(k) = PROPERTIES.iter().position(|p| p == name) {
            slots[k] = layout.len();
        }
        layout.push((offset, *size));
        offset += size;
    }
    if let Some(k) = slots.iter().position(|&s| s == usize::MAX) {
        return Err(bad(format!("missing property {}", PROPERTIES[k])));
    }
    let stride = offset;
    if body.len() != n * stride {
        return Err(bad(format!("body has {} bytes, expected {}", body.len(), n * stride)));
    }
    let mut cloud = GaussianCloud::with_capacity(n);
    for rec in body.chunks_exact(stride) {
        let v = |k: usize| -> f64 {
            let (o, size) = layout[slots[k]];
            if size == 4 {
                f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(rec[o..o + 8].try_into().unwrap())
            }
        };
        cloud.push(Gaussian {
            position: [v(0), v(1), v(2)],
            rotation: [v(3), v(4), v(5), v(6)],
            log_scale: [v(7), v(8), v(9)],
            opacity_logit: v(10),
            color: [v(11), v(12), v(13)],
        });
    }
    Ok(cloud)
}
