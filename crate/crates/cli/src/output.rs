//! CSV emitters. Every file starts with one `#` provenance line followed by the column
//! header; floats use shortest round-trip formatting so reruns are byte-identical.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kotelnikov::jump_monte_carlo::RNG_ID;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Header fields shared by every output of one invocation.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn line(&self) -> String {
        format!("# kotelnikov {VERSION} config={} rng={RNG_ID} seed={}", self.config_hash, self.seed)
    }
}

pub struct CsvOut {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(dir: &Path, name: &str, prov: &Provenance, notes: &[String], columns: &[&str]) -> Result<Self> {
        let path = dir.join(name);
        let mut file = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(file, "{}", prov.line())?;
        for note in notes {
            writeln!(file, "# {note}")?;
        }
        let mut inner = csv::Writer::from_writer(file);
        inner.write_record(columns)?;
        Ok(Self { path, inner })
    }

    pub fn row(&mut self, fields: &[Field]) -> Result<()> {
        self.inner.write_record(fields.iter().map(Field::render))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.inner.flush().with_context(|| format!("writing {}", self.path.display()))?;
        Ok(self.path)
    }
}

/// One CSV cell.
pub enum Field<'a> {
    F(f64),
    U(usize),
    S(&'a str),
}

impl Field<'_> {
    fn render(&self) -> String {
        match self {
            Field::F(x) => format!("{x:?}"),
            Field::U(n) => n.to_string(),
            Field::S(s) => s.to_string(),
        }
    }
}
