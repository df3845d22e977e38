use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use csvortex::ScalarField;
use sha2::{Digest, Sha256};

use crate::RunError;

/// Hex SHA-256 of the canonical configuration listing.
pub fn content_hash(echo: &[String]) -> String {
    let mut h = Sha256::new();
    for line in echo {
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| RunError::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| RunError::io(path, e))
}

/// One `x,y,value` row per node, row-major.
pub fn write_field(path: &Path, field: &ScalarField) -> Result<(), RunError> {
    let file = fs::File::create(path).map_err(|e| RunError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let grid = field.grid();
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "x,y,value")?;
        for (k, v) in field.values().iter().enumerate() {
            let (x, y) = grid.coords(k);
            writeln!(w, "{x:.16e},{y:.16e},{v:.16e}")?;
        }
        w.flush()
    };
    body().map_err(|e| RunError::io(path, e))
}

pub fn write_profile(path: &Path, column: &str, rows: &[(f64, f64)]) -> Result<(), RunError> {
    let mut text = format!("r,{column}\n");
    for (r, v) in rows {
        text.push_str(&format!("{r:.16e},{v:.16e}\n"));
    }
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

pub fn write_table(path: &Path, header: &str, rows: &[String]) -> Result<(), RunError> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

/// Read a field CSV written by [`write_field`] as `(x, y, value)` rows.
pub fn read_field(path: &Path) -> Result<Vec<(f64, f64, f64)>, RunError> {
    let file = fs::File::open(path).map_err(|e| RunError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RunError::io(path, e))?;
        if i == 0 {
            if line.trim() != "x,y,value" {
                return Err(RunError::Input(format!("{}: unexpected header `{line}`", path.display())));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let nums: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| RunError::Input(format!("{}: line {}: malformed row", path.display(), i + 1)))?;
        if nums.len() != 3 {
            return Err(RunError::Input(format!("{}: line {}: expected 3 columns", path.display(), i + 1)));
        }
        rows.push((nums[0], nums[1], nums[2]));
    }
    Ok(rows)
}
