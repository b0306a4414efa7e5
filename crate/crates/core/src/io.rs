//! File formats: measure JSON, curve and spectrum CSV, report JSON.
//!
//! Every file is written once, to a temporary sibling that is then renamed
//! into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::experiments::RawTable;
use crate::measures::SpectralMeasure;

pub fn read_measure(path: &Path) -> Result<SpectralMeasure> {
    SpectralMeasure::from_json(&fs::read_to_string(path)?)
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Two-column CSV, e.g. `E,rho` or `E,F`.
pub fn curve_csv(header: (&str, &str), xs: &[f64], ys: &[f64]) -> String {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (x, y) in xs.iter().zip(ys) {
        out.push_str(&format!("{},{}\n", real(*x), real(*y)));
    }
    out
}

/// `index,eigenvalue`.
pub fn spectrum_csv(eigenvalues: &[f64]) -> String {
    let mut out = String::from("index,eigenvalue\n");
    for (k, x) in eigenvalues.iter().enumerate() {
        out.push_str(&format!("{k},{}\n", real(*x)));
    }
    out
}

const INTEGER_COLUMNS: [&str; 2] = ["N", "replicate"];

pub fn table_csv(table: &RawTable) -> String {
    let mut out = table.columns.join(",");
    out.push('\n');
    for row in &table.rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&table.columns)
            .map(|(v, c)| if INTEGER_COLUMNS.contains(&c.as_str()) { format!("{}", *v as i64) } else { real(*v) })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
