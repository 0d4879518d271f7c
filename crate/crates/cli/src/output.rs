use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use fpdiff::dataset::Sample;
use fpdiff::seq_ctmc::AMINO_ACIDS;
use serde::Serialize;

use crate::config::RunConfig;

pub const VERSION_TAG: &str = concat!("fpdiff ", env!("CARGO_PKG_VERSION"));

/// An output directory holding the resolved config and version tag.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating run directory {}", path.display()))?;
        let dir = RunDir { path: path.to_path_buf() };
        dir.write_text("config.toml", &cfg.to_toml()?)?;
        dir.write_text("VERSION", &format!("{VERSION_TAG}\n"))?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write_text(name, &s)
    }

    pub fn write_csv(&self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let p = self.file(name);
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `coordinates.csv`, `rotations.csv` and `sequences.csv`.
    pub fn write_samples(&self, samples: &[Sample]) -> Result<()> {
        let comp = |s: &Sample| s.component.map(|c| c.to_string()).unwrap_or_default();
        self.write_csv(
            "coordinates.csv",
            &["sample", "component", "residue", "atom", "x", "y", "z"],
            samples.iter().enumerate().flat_map(|(j, s)| {
                let c = comp(s);
                s.x.chunks(3).enumerate().map(move |(i, p)| {
                    let mut row = vec![j.to_string(), c.clone(), i.to_string(), "0".to_string()];
                    row.extend(p.iter().map(num));
                    row
                })
            }),
        )?;
        let mut rot_header = vec!["sample", "component", "residue"];
        rot_header.extend(["r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22"]);
        self.write_csv(
            "rotations.csv",
            &rot_header,
            samples.iter().enumerate().flat_map(|(j, s)| {
                let c = comp(s);
                s.rotations.iter().enumerate().map(move |(i, r)| {
                    let mut row = vec![j.to_string(), c.clone(), i.to_string()];
                    // nalgebra iterates column-major; the transpose yields row-major order.
                    row.extend(r.matrix().transpose().iter().map(num));
                    row
                })
            }),
        )?;
        self.write_csv(
            "sequences.csv",
            &["sample", "component", "sequence"],
            samples
                .iter()
                .enumerate()
                .map(|(j, s)| vec![j.to_string(), comp(s), sequence_string(&s.types)]),
        )
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn num<T: std::borrow::Borrow<f64>>(v: T) -> String {
    format!("{}", v.borrow())
}

/// One letter per position for alphabets of up to 20 types, otherwise
/// space-separated indices.
pub fn sequence_string(types: &[usize]) -> String {
    if types.iter().all(|&a| a < AMINO_ACIDS.len()) {
        types.iter().map(|&a| AMINO_ACIDS[a] as char).collect()
    } else {
        types.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" ")
    }
}
