//! Binary little-endian PLY point clouds colored by confidence.

use std::fs;
use std::path::Path;

use crate::dpm::PointCloud;
use crate::error::{Error, Result};

const RAMP: [[f64; 3]; 5] = [
    [48.0, 18.0, 59.0],
    [40.0, 120.0, 220.0],
    [60.0, 200.0, 120.0],
    [240.0, 200.0, 40.0],
    [200.0, 30.0, 20.0],
];

/// Color of `t` in `[0, 1]`, from dark violet (low) to red (high).
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let k = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - k as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (RAMP[k][c] + f * (RAMP[k + 1][c] - RAMP[k][c])).round() as u8;
    }
    out
}

/// Confidences rescaled to `[0, 1]` over the cloud; a constant cloud maps to 1.
fn normalized(conf: &[f64]) -> Vec<f64> {
    let lo = conf.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = conf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    conf.iter()
        .map(|&c| if hi > lo { (c - lo) / (hi - lo) } else { 1.0 })
        .collect()
}

pub fn encode(cloud: &PointCloud) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment confidence colormap\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    let mut out = header.into_bytes();
    out.reserve(cloud.len() * 15);
    for (p, t) in cloud.points.iter().zip(normalized(&cloud.confidence)) {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&colormap(t));
    }
    out
}

pub fn write(path: &Path, cloud: &PointCloud) -> Result<()> {
    if cloud.points.len() != cloud.confidence.len() {
        return Err(Error::Contract("point cloud with mismatched confidence".into()));
    }
    fs::write(path, encode(cloud)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyVertices {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
}

/// Reads the vertex layout [`write`] produces.
pub fn parse(data: &[u8], path: &Path) -> Result<PlyVertices> {
    let bad = |m: &str| Error::format(path, m);
    let marker = b"end_header\n";
    let end = data
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("no end_header"))?
        + marker.len();
    let header = std::str::from_utf8(&data[..end]).map_err(|_| bad("header is not text"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["element", ..] => return Err(bad("unexpected element")),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            _ => {}
        }
    }
    let expected = [
        ("float", "x"),
        ("float", "y"),
        ("float", "z"),
        ("uchar", "red"),
        ("uchar", "green"),
        ("uchar", "blue"),
    ];
    if !format_ok || props.len() != 6 || props.iter().zip(expected).any(|(a, b)| a.0 != b.0 || a.1 != b.1) {
        return Err(bad("unsupported vertex layout"));
    }
    let n = count.ok_or_else(|| bad("no vertex element"))?;
    let body = &data[end..];
    if body.len() != n * 15 {
        return Err(bad("payload size does not match vertex count"));
    }
    let mut out = PlyVertices {
        positions: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
    };
    for v in body.chunks_exact(15) {
        let f = |k: usize| f32::from_le_bytes(v[4 * k..4 * k + 4].try_into().unwrap());
        out.positions.push([f(0), f(1), f(2)]);
        out.colors.push([v[12], v[13], v[14]]);
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<PlyVertices> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&data, path)
}
