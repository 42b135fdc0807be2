//! Independent sweep cells, cached on disk and merged in a fixed order.
//!
//! Each finished cell leaves `<key>.json` and then a `<key>.done` marker
//! under `cells/<config-hash>/<table>/`. A rerun of the same configuration
//! reuses marked cells, so an interrupted sweep resumes where it stopped.

use anyhow::Context;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Serialize};
use std::path::{Path, PathBuf};

pub struct CellCache {
    root: PathBuf,
}

impl CellCache {
    pub fn new(out: &Path, config_hash: &str) -> Self {
        CellCache { root: out.join("cells").join(&config_hash[..16]) }
    }

    /// Run `work` on every cell not yet marked done and return all outputs
    /// in the order of `cells`.
    pub fn run<C, T, K, W>(&self, table: &str, cells: &[C], key: K, work: W) -> anyhow::Result<Vec<T>>
    where
        C: Sync,
        T: Serialize + DeserializeOwned + Send,
        K: Fn(&C) -> String + Sync,
        W: Fn(&C) -> anyhow::Result<T> + Sync,
    {
        let dir = self.root.join(table);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        cells
            .par_iter()
            .map(|c| {
                let k = key(c);
                let data = dir.join(format!("{k}.json"));
                let done = dir.join(format!("{k}.done"));
                if done.exists() {
                    let text = std::fs::read_to_string(&data).with_context(|| format!("reading {}", data.display()))?;
                    return serde_json::from_str(&text).with_context(|| format!("parsing {}", data.display()));
                }
                let out = work(c).with_context(|| format!("cell {table}/{k}"))?;
                let tmp = dir.join(format!("{k}.json.tmp"));
                std::fs::write(&tmp, serde_json::to_vec(&out)?)?;
                std::fs::rename(&tmp, &data)?;
                std::fs::write(&done, b"")?;
                Ok(out)
            })
            .collect()
    }
}

/// Format a float for CSV, shortest round-trip form, with an exponent
/// for very small or large magnitudes; missing values are empty.
pub fn num(x: Option<f64>) -> String {
    match x {
        Some(v) if v == 0.0 => "0".into(),
        Some(v) if v.is_finite() && (1e-4..1e15).contains(&v.abs()) => format!("{v}"),
        Some(v) if v.is_finite() => format!("{v:e}"),
        _ => String::new(),
    }
}

/// CSV writer that appends the config hash and code version to each row.
pub struct CsvOut {
    buf: String,
    tail: String,
}

impl CsvOut {
    pub fn new(header: &[&str], config_hash: &str) -> Self {
        let mut buf = header.join(",");
        buf.push_str(",config_hash,code_version\n");
        CsvOut { buf, tail: format!(",{config_hash},{}", super::code_version()) }
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) {
        for (i, f) in fields.iter().enumerate() {
            if i > 0 {
                self.buf.push(',');
            }
            self.buf.push_str(f.as_ref());
        }
        self.buf.push_str(&self.tail);
        self.buf.push('\n');
    }

    pub fn write(self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.buf).with_context(|| format!("writing {}", path.display()))
    }
}
