//! Per-step metrics log: one line record per step, fixed key order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::records::Record;
use crate::losses::LossReport;

pub const METRICS_FILE: &str = "metrics.txt";

const LOSS_KEYS: [&str; 6] = ["l_mask", "l_attn", "l_align", "l_id", "l_warmup", "total"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    /// Losses of the update that produced this step; absent for the initial record.
    pub report: Option<LossReport>,
    pub miou: Option<f64>,
    pub wall_ms: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), crate::harness::records::fmt_f64)
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        let mut r = Record::new();
        r.push("step", self.step);
        let vals = self.report.map(|x| [x.l_mask, x.l_attn, x.l_align, x.l_id, x.l_warmup, x.total]);
        for (i, k) in LOSS_KEYS.iter().enumerate() {
            r.push(k, opt(vals.map(|v| v[i])));
        }
        r.push("miou", opt(self.miou)).push("wall_ms", self.wall_ms);
        r.to_line()
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let r = Record::parse_line(line)?;
        let get = |k: &str| -> Result<Option<f64>> {
            match r.require(k)? {
                "-" => Ok(None),
                s => s
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|e| Error::Parse(format!("metrics key `{k}`: {e}"))),
            }
        };
        let vals = LOSS_KEYS.iter().map(|k| get(k)).collect::<Result<Vec<_>>>()?;
        let report = if vals.iter().all(Option::is_some) {
            let v: Vec<f64> = vals.into_iter().flatten().collect();
            Some(LossReport {
                l_mask: v[0],
                l_attn: v[1],
                l_align: v[2],
                l_id: v[3],
                l_warmup: v[4],
                total: v[5],
            })
        } else if vals.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::Parse("metrics line has a partial loss report".into()));
        };
        Ok(MetricsRecord {
            step: r.parse("step")?,
            report,
            miou: get("miou")?,
            wall_ms: r.parse("wall_ms")?,
        })
    }

    /// Same record with the timing zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        MetricsRecord { wall_ms: 0, ..self.clone() }
    }
}

pub fn parse_log(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut out: Vec<MetricsRecord> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec = MetricsRecord::parse_line(line)?;
        if let Some(prev) = out.last() {
            if rec.step <= prev.step {
                return Err(Error::Parse(format!("metrics steps not increasing: {} after {}", rec.step, prev.step)));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Single-writer appender.
pub struct MetricsWriter {
    file: fs::File,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    /// Creates `path`, keeping only the given records.
    pub fn create(path: &Path, keep: &[MetricsRecord]) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in keep {
            writeln!(file, "{}", r.to_line()).map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", r.to_line()).map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(x: f64) -> LossReport {
        LossReport {
            l_mask: x,
            l_attn: x / 3.0,
            l_align: 0.1,
            l_id: 2.0,
            l_warmup: 0.0,
            total: x + 1e-17,
        }
    }

    #[test]
    fn initial_record_has_no_losses() {
        let r = MetricsRecord {
            step: 0,
            report: None,
            miou: Some(0.05),
            wall_ms: 3,
        };
        let line = r.to_line();
        assert!(line.starts_with("step=0 l_mask=- "));
        assert_eq!(MetricsRecord::parse_line(&line).unwrap(), r);
    }

    #[test]
    fn steps_must_increase() {
        let a = MetricsRecord {
            step: 2,
            report: Some(report(1.0)),
            miou: None,
            wall_ms: 0,
        };
        let text = format!("{}\n{}\n", a.to_line(), a.to_line());
        assert!(parse_log(&text).is_err());
    }

    #[test]
    fn partial_report_is_rejected() {
        let line = "step=1 l_mask=1.0 l_attn=- l_align=- l_id=- l_warmup=- total=- miou=- wall_ms=0";
        assert!(MetricsRecord::parse_line(line).is_err());
    }

    proptest! {
        #[test]
        fn write_parse_write_is_idempotent(step in 0usize..100000, x in -1e6f64..1e6, m in proptest::option::of(0.0f64..1.0), ms in any::<u64>()) {
            let r = MetricsRecord { step, report: Some(report(x)), miou: m, wall_ms: ms };
            let line = r.to_line();
            let back = MetricsRecord::parse_line(&line).unwrap();
            prop_assert_eq!(&back, &r);
            prop_assert_eq!(back.to_line(), line);
        }
    }
}
