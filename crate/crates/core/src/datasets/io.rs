//! ASCII `.xyz` and `.ply` point-cloud files.
//!
//! Coordinates are written as 32-bit floats in their shortest round-trip
//! decimal form, so a write/read/write cycle reproduces the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::DatasetError;
use crate::geometry::{Point3, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self, DatasetError> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("xyz") => Ok(CloudFormat::Xyz),
            Some("ply") => Ok(CloudFormat::Ply),
            _ => Err(DatasetError::UnsupportedFormat(path.display().to_string())),
        }
    }
}

fn push_f32(out: &mut String, v: f64) {
    write!(out, "{}", v as f32).expect("string write");
}

fn push_row(out: &mut String, p: Point3, n: Option<Point3>) {
    for (i, &v) in p.iter().chain(n.iter().flatten()).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        push_f32(out, v);
    }
    out.push('\n');
}

pub fn encode_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 40);
    for (i, &p) in cloud.points.iter().enumerate() {
        push_row(&mut out, p, cloud.normals.as_ref().map(|n| n[i]));
    }
    out
}

pub fn encode_ply(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 40 + 200);
    out.push_str("ply\nformat ascii 1.0\n");
    if let Some(label) = cloud.label {
        writeln!(out, "comment label {label}").expect("string write");
    }
    writeln!(out, "element vertex {}", cloud.len()).expect("string write");
    for name in ["x", "y", "z"] {
        writeln!(out, "property float {name}").expect("string write");
    }
    if cloud.normals.is_some() {
        for name in ["nx", "ny", "nz"] {
            writeln!(out, "property float {name}").expect("string write");
        }
    }
    out.push_str("end_header\n");
    for (i, &p) in cloud.points.iter().enumerate() {
        push_row(&mut out, p, cloud.normals.as_ref().map(|n| n[i]));
    }
    out
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_floats(path: &str, line_no: usize, line: &str) -> Result<Vec<f64>, DatasetError> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| parse_err(path, line_no, format!("invalid number {tok:?}")))
        })
        .collect()
}

pub fn decode_xyz(path: &str, text: &str) -> Result<PointCloud, DatasetError> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let vals = parse_floats(path, line_no, line)?;
        if vals.len() != 3 && vals.len() != 6 {
            return Err(parse_err(path, line_no, format!("expected 3 or 6 values, found {}", vals.len())));
        }
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(parse_err(path, line_no, "inconsistent column count"));
        }
        points.push([vals[0], vals[1], vals[2]]);
        if vals.len() == 6 {
            normals.push([vals[3], vals[4], vals[5]]);
        }
    }
    if points.is_empty() {
        return Err(parse_err(path, 1, "no points"));
    }
    let mut cloud = PointCloud::new(points);
    if !normals.is_empty() {
        cloud.normals = Some(normals);
    }
    cloud.source_id = path.to_string();
    Ok(cloud)
}

pub fn decode_ply(path: &str, text: &str) -> Result<PointCloud, DatasetError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut expect = |what: &str| -> Result<(usize, &str), DatasetError> {
        lines
            .next()
            .ok_or_else(|| parse_err(path, 0, format!("unexpected end of file, expected {what}")))
    };
    let (n, magic) = expect("'ply'")?;
    if magic.trim() != "ply" {
        return Err(parse_err(path, n, "missing 'ply' magic"));
    }
    let mut vertex_count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut elements_before_vertex = false;
    let mut label = None;
    let mut last_line;
    loop {
        let (n, line) = expect("header")?;
        last_line = n;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["format", other, ..] => {
                return Err(parse_err(path, n, format!("unsupported PLY format {other}")))
            }
            ["comment", "label", v] => label = v.parse().ok(),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", count] => {
                vertex_count = Some(
                    count
                        .parse::<usize>()
                        .map_err(|_| parse_err(path, n, "invalid vertex count"))?,
                );
                in_vertex = true;
            }
            ["element", ..] => {
                if vertex_count.is_none() {
                    elements_before_vertex = true;
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(path, n, "list properties on vertices are not supported"))
            }
            ["property", _ty, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(parse_err(path, n, format!("unrecognized header line {line:?}"))),
        }
    }
    if elements_before_vertex {
        return Err(parse_err(path, last_line, "vertex element must come first"));
    }
    let count = vertex_count.ok_or_else(|| parse_err(path, last_line, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(path, last_line, "vertex element lacks x/y/z")),
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(if normal_cols.is_some() { count } else { 0 });
    for v in 0..count {
        let (n, line) = lines.next().ok_or_else(|| {
            parse_err(
                path,
                last_line + 1,
                format!("unexpected end of file: expected vertex {} of {count}", v + 1),
            )
        })?;
        last_line = n;
        let vals = parse_floats(path, n, line)?;
        if vals.len() != props.len() {
            return Err(parse_err(
                path,
                n,
                format!("expected {} values, found {}", props.len(), vals.len()),
            ));
        }
        points.push([vals[x], vals[y], vals[z]]);
        if let Some((a, b, c)) = normal_cols {
            normals.push([vals[a], vals[b], vals[c]]);
        }
    }
    let mut cloud = PointCloud::new(points);
    if normal_cols.is_some() {
        cloud.normals = Some(normals);
    }
    cloud.label = label;
    cloud.source_id = path.to_string();
    Ok(cloud)
}

pub fn encode_cloud(cloud: &PointCloud, format: CloudFormat) -> String {
    match format {
        CloudFormat::Xyz => encode_xyz(cloud),
        CloudFormat::Ply => encode_ply(cloud),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<(), DatasetError> {
    let format = CloudFormat::from_path(path)?;
    fs::write(path, encode_cloud(cloud, format)).map_err(|e| DatasetError::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud, DatasetError> {
    let format = CloudFormat::from_path(path)?;
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let name = path.display().to_string();
    match format {
        CloudFormat::Xyz => decode_xyz(&name, &text),
        CloudFormat::Ply => decode_ply(&name, &text),
    }
}
