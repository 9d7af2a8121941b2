use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Sampled record of a run: one row per grid point, named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    columns: Vec<String>,
    data: Vec<f64>,
    /// First time the observer's `w` fell to `1 − μ`.
    pub t_c: Option<f64>,
    /// Times at which the amplitude and observer stages were activated.
    pub switch_times: [Option<f64>; 2],
    /// Steps in which zeros of `Ψ` were integrated in closed form, per channel.
    pub singular_steps: Vec<usize>,
    /// Whether the fundamental matrix became ill conditioned.
    pub ill_conditioned: bool,
}

impl SimulationTrace {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            data: Vec::new(),
            t_c: None,
            switch_times: [None, None],
            singular_steps: Vec::new(),
            ill_conditioned: false,
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        if self.columns.is_empty() {
            0
        } else {
            self.data.len() / self.columns.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.width(), "trace row has the wrong width");
        self.data.extend_from_slice(row);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Copy of one column, or `None` if the name is unknown.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.column_index(name)?;
        Some((0..self.len()).map(|i| self.row(i)[c]).collect())
    }

    /// CSV with a header row; keeps rows `0, N, 2N, …`. Values use the
    /// shortest decimal form that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, out: W, decimate: usize) -> Result<()> {
        let decimate = decimate.max(1);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for i in (0..self.len()).step_by(decimate) {
            w.write_record(self.row(i).iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>, decimate: usize) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        self.write_csv(std::io::BufWriter::new(file), decimate)
    }
}
