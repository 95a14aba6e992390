//! CSV dumps to cube and label containers.
//!
//! Cube CSV: one record per pixel in row-major order, one field per band.
//! Label CSV: one record per image row, one integer label per column.

use std::path::Path;

use crossview_core::datacube::{write_cube, write_ground_truth, GroundTruth, HyperCube};

use crate::error::{CliError, Result, StageContext};

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::io(path, source),
        other => CliError::Parse {
            path: path.to_path_buf(),
            line,
            reason: format!("{other:?}"),
        },
    }
}

fn parse_error(path: &Path, line: usize, reason: String) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    }
}

pub fn read_cube_csv(path: &Path, height: usize, width: usize) -> Result<HyperCube> {
    let mut rdr = reader(path)?;
    let mut data = Vec::new();
    let mut channels = 0;
    let mut rows = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if rows == 0 {
            channels = record.len();
        } else if record.len() != channels {
            return Err(parse_error(
                path,
                line,
                format!("row has {} fields, expected {channels}", record.len()),
            ));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                parse_error(path, line, format!("field {} is not a number: {field:?}", j + 1))
            })?;
            if !v.is_finite() {
                return Err(parse_error(path, line, format!("field {} is not finite", j + 1)));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows != height * width {
        return Err(parse_error(
            path,
            rows,
            format!("expected {height} x {width} = {} pixel rows, found {rows}", height * width),
        ));
    }
    HyperCube::new(height, width, channels, data).stage("convert")
}

pub fn read_labels_csv(path: &Path, num_classes: usize, class_names: Vec<String>) -> Result<GroundTruth> {
    let mut rdr = reader(path)?;
    let mut labels = Vec::new();
    let mut width = 0;
    let mut height = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if height == 0 {
            width = record.len();
        } else if record.len() != width {
            return Err(parse_error(
                path,
                line,
                format!("row has {} labels, expected {width}", record.len()),
            ));
        }
        for (j, field) in record.iter().enumerate() {
            let l: u16 = field.parse().map_err(|_| {
                parse_error(path, line, format!("column {} is not a label: {field:?}", j + 1))
            })?;
            if usize::from(l) > num_classes {
                return Err(parse_error(
                    path,
                    line,
                    format!("label {l} in column {} exceeds {num_classes} classes", j + 1),
                ));
            }
            labels.push(l);
        }
        height += 1;
    }
    GroundTruth::new(height, width, num_classes, labels, class_names).stage("convert")
}

pub fn convert_cube(input: &Path, height: usize, width: usize, note: &str, output: &Path) -> Result<HyperCube> {
    let mut cube = read_cube_csv(input, height, width)?;
    cube.wavelength_note = note.to_string();
    write_cube(output, &cube).stage("convert")?;
    Ok(cube)
}

pub fn convert_labels(
    input: &Path,
    num_classes: usize,
    class_names: Vec<String>,
    output: &Path,
) -> Result<GroundTruth> {
    let gt = read_labels_csv(input, num_classes, class_names)?;
    write_ground_truth(output, &gt).stage("convert")?;
    Ok(gt)
}
