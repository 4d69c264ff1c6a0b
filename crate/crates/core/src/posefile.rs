//! Plain-text pose and marker files.
//!
//! A pose file holds the 4×4 homogeneous model→camera matrix, one row per
//! line, numbers separated by whitespace. A marker file has three lines
//! `label x y z` with labels `left`, `right` and `target` in any order; blank
//! lines and lines starting with `#` are ignored.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix4, Point3};
use thiserror::Error;

use crate::se3::{MarkerTriple, RigidTransform, Se3Error};

#[derive(Error, Debug)]
pub enum PoseFileError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Geometry(#[from] Se3Error),
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn numbers(line: usize, fields: &[&str]) -> Result<Vec<f64>, PoseFileError> {
    fields
        .iter()
        .map(|f| f.parse::<f64>().map_err(|_| PoseFileError::Parse { line, reason: format!("'{f}' is not a number") }))
        .collect()
}

pub fn parse_pose(text: &str) -> Result<RigidTransform, PoseFileError> {
    let mut m = Matrix4::zeros();
    let mut rows = 0;
    let mut last_line = 0;
    for (line, content) in content_lines(text) {
        last_line = line;
        if rows == 4 {
            return Err(PoseFileError::Parse { line, reason: "more than four rows".into() });
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(PoseFileError::Parse { line, reason: format!("expected 4 numbers, found {}", fields.len()) });
        }
        for (j, v) in numbers(line, &fields)?.into_iter().enumerate() {
            m[(rows, j)] = v;
        }
        rows += 1;
    }
    if rows != 4 {
        return Err(PoseFileError::Parse { line: last_line, reason: format!("expected 4 rows, found {rows}") });
    }
    Ok(RigidTransform::from_homogeneous(&m)?)
}

/// Shortest exact decimal representation, so parsing restores every bit.
pub fn format_pose(pose: &RigidTransform) -> String {
    let m = pose.to_homogeneous();
    let mut out = String::new();
    for i in 0..4 {
        let row: Vec<String> = (0..4).map(|j| format!("{}", m[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_pose(path: &Path) -> Result<RigidTransform, PoseFileError> {
    let text = fs::read_to_string(path).map_err(|source| PoseFileError::Io { path: path.display().to_string(), source })?;
    parse_pose(&text)
}

pub fn write_pose(path: &Path, pose: &RigidTransform) -> Result<(), PoseFileError> {
    fs::write(path, format_pose(pose)).map_err(|source| PoseFileError::Io { path: path.display().to_string(), source })
}

pub fn parse_markers(text: &str) -> Result<MarkerTriple, PoseFileError> {
    let mut found: [Option<Point3<f64>>; 3] = [None; 3];
    let mut last_line = 0;
    for (line, content) in content_lines(text) {
        last_line = line;
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(PoseFileError::Parse { line, reason: "expected 'label x y z'".into() });
        }
        let slot = match fields[0].to_ascii_lowercase().as_str() {
            "left" | "left_cam" => 0,
            "right" | "right_cam" => 1,
            "target" => 2,
            other => return Err(PoseFileError::Parse { line, reason: format!("unknown marker label '{other}'") }),
        };
        if found[slot].is_some() {
            return Err(PoseFileError::Parse { line, reason: format!("marker '{}' given twice", fields[0]) });
        }
        let v = numbers(line, &fields[1..])?;
        found[slot] = Some(Point3::new(v[0], v[1], v[2]));
    }
    match found {
        [Some(l), Some(r), Some(t)] => Ok(MarkerTriple::new(l, r, t)?),
        _ => Err(PoseFileError::Parse { line: last_line, reason: "need markers 'left', 'right' and 'target'".into() }),
    }
}

pub fn read_markers(path: &Path) -> Result<MarkerTriple, PoseFileError> {
    let text = fs::read_to_string(path).map_err(|source| PoseFileError::Io { path: path.display().to_string(), source })?;
    parse_markers(&text)
}
