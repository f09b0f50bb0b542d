//! CSV rendering: a provenance comment, a header line, then data rows,
//! LF endings throughout, numbers at six significant digits.

use std::io::Write;
use std::path::Path;

/// Formats with six significant digits in plain decimal notation,
/// trailing zeros trimmed.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// One output table.
pub struct Csv {
    /// Provenance line content, written as `# <comment>`.
    pub comment: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn render(&self) -> String {
        let mut out = format!("# {}\n", self.comment);
        out += &self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let fields: Vec<String> = row.iter().map(|f| escape(f)).collect();
            out += &fields.join(",");
            out.push('\n');
        }
        out
    }
}

fn escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Writes the table to the path, or to stdout when none is given.
pub fn emit(csv: &Csv, out: Option<&Path>) -> std::io::Result<()> {
    let text = csv.render();
    match out {
        Some(path) => std::fs::write(path, text),
        None => std::io::stdout().lock().write_all(text.as_bytes()),
    }
}
