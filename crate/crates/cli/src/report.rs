//! Run reports and deterministic artifact formatting.
//!
//! Every numeric value is printed with 17 significant digits and a '.'
//! decimal separator, so artifacts from identical (config, seed) runs are
//! byte-identical and diff cleanly.

/// One declared assertion with its verdict and a human-readable detail.
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Everything a command produces; the caller writes files and picks the
/// exit code, so failed runs leave no partial artifacts behind.
pub struct RunOutput {
    pub assertions: Vec<Assertion>,
    /// `(key, preformatted value)` rows for the summary metrics table.
    pub metrics: Vec<(String, String)>,
    /// `(file name, contents)` artifacts, written on completion.
    pub files: Vec<(String, String)>,
}

impl RunOutput {
    pub fn new() -> Self {
        Self {
            assertions: Vec::new(),
            metrics: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn assert(&mut self, name: &str, pass: bool, detail: String) {
        self.assertions.push(Assertion {
            name: name.to_string(),
            pass,
            detail,
        });
    }

    pub fn metric(&mut self, key: &str, value: impl Into<String>) {
        self.metrics.push((key.to_string(), value.into()));
    }

    pub fn metric_f64(&mut self, key: &str, value: f64) {
        self.metric(key, fmt_f64(value));
    }

    pub fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    pub fn all_pass(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }
}

/// 17 significant digits: round-trips every finite f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV builder with provenance comment lines above the header row.
pub struct Csv {
    out: String,
    columns: usize,
}

impl Csv {
    pub fn new(provenance: &[(&str, String)], header: &[&str]) -> Self {
        let mut out = String::new();
        for (k, v) in provenance {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out.push_str(&header.join(","));
        out.push('\n');
        Self {
            out,
            columns: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.columns, "csv row width mismatch");
        self.out.push_str(&cells.join(","));
        self.out.push('\n');
    }

    pub fn finish(self) -> String {
        self.out
    }
}
