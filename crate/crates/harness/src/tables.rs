//! CSV schemas: per-epoch metrics, barrier curves and accuracy versus
//! remaining ratio. Comma separated, header row, LF line endings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub arm: String,
    pub trial: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierRow {
    pub arm: String,
    pub trial: usize,
    pub alpha: f64,
    pub error: f64,
    pub barrier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub arm: String,
    pub trial: usize,
    pub remaining_ratio: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Metrics,
    Barrier,
    Sparsity,
}

impl Schema {
    pub const ALL: [Schema; 3] = [Schema::Metrics, Schema::Barrier, Schema::Sparsity];

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Schema::Metrics => &["arm", "trial", "epoch", "train_loss", "train_acc", "test_acc"],
            Schema::Barrier => &["arm", "trial", "alpha", "error", "barrier"],
            Schema::Sparsity => &["arm", "trial", "remaining_ratio", "test_acc"],
        }
    }

    /// Columns plotted as (x, y).
    pub fn axes(self) -> (&'static str, &'static str) {
        match self {
            Schema::Metrics => ("epoch", "test_acc"),
            Schema::Barrier => ("alpha", "barrier"),
            Schema::Sparsity => ("remaining_ratio", "test_acc"),
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Schema::Metrics => "test accuracy during training",
            Schema::Barrier => "error barrier along the linear path",
            Schema::Sparsity => "test accuracy vs remaining parameters",
        }
    }

    /// Best-matching schema for a header, or the first column it lacks.
    pub fn detect(header: &[String]) -> std::result::Result<Schema, String> {
        let score = |s: Schema| s.columns().iter().filter(|c| header.iter().any(|h| h == *c)).count();
        let best = Schema::ALL
            .into_iter()
            .max_by_key(|&s| (score(s), std::cmp::Reverse(s.columns().len())))
            .expect("non-empty schema list");
        match best.columns().iter().find(|c| !header.iter().any(|h| h == *c)) {
            None => Ok(best),
            Some(missing) => Err(missing.to_string()),
        }
    }
}

pub fn to_csv<T: Serialize>(rows: &[T], schema: Schema) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(schema.columns()).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// One (arm, trial, x, y) point read back from any schema.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub arm: String,
    pub trial: usize,
    pub x: f64,
    pub y: f64,
}

pub fn read_points(path: &Path) -> Result<(Schema, Vec<PlotPoint>)> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    read_points_from(file, path)
}

/// As [`read_points`] from any reader; `path` only labels errors.
pub fn read_points_from<R: std::io::Read>(reader: R, path: &Path) -> Result<(Schema, Vec<PlotPoint>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| HarnessError::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(HarnessError::Schema(format!("{}: empty CSV", path.display())));
    }
    let schema = Schema::detect(&header)
        .map_err(|missing| HarnessError::Schema(format!("{}: missing column '{missing}'", path.display())))?;
    let col = |name: &str| header.iter().position(|h| h == name).expect("detected column");
    let (xn, yn) = schema.axes();
    let (ai, ti, xi, yi) = (col("arm"), col("trial"), col(xn), col(yn));
    let mut points = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| HarnessError::format(path, e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize, name: &str| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                HarnessError::Schema(format!(
                    "{}: row {}: column '{name}' is not a number: '{}'",
                    path.display(),
                    line + 2,
                    field(i)
                ))
            })
        };
        // rows without a test accuracy (no monitor set) are not plottable
        if field(yi).is_empty() {
            continue;
        }
        points.push(PlotPoint {
            arm: field(ai).to_string(),
            trial: num(ti, "trial")? as usize,
            x: num(xi, xn)?,
            y: num(yi, yn)?,
        });
    }
    if points.is_empty() {
        return Err(HarnessError::Schema(format!("{}: CSV has no data rows", path.display())));
    }
    Ok((schema, points))
}
