//! Result rows and the CSV files they land in. One metric per row, rows
//! append-only, header fixed, so files from any command concatenate and
//! diff cleanly.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use sawnet_core::error::named_io;
use sawnet_core::Result;

pub const CSV_HEADER: &str = "experiment,variant,points,epoch,split,metric,value";

/// One observation. All text fields come from validated identifiers, so
/// plain comma joining is safe.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub variant: String,
    pub points: usize,
    pub epoch: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

impl fmt::Display for ResultRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.experiment, self.variant, self.points, self.epoch, self.split, self.metric,
            self.value
        )
    }
}

pub struct ResultWriter {
    out: BufWriter<File>,
    rows: usize,
}

impl ResultWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| named_io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{CSV_HEADER}")?;
        Ok(Self { out, rows: 0 })
    }

    pub fn write(&mut self, row: &ResultRow) -> Result<()> {
        writeln!(self.out, "{row}")?;
        self.rows += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush()?;
        Ok(self.rows)
    }
}
