//! CSV training logs. Wall-clock time goes to a separate file so the main
//! log is a pure function of the configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "step,disc_loss,gp,mean_patch_reward,sim_bar_mean,actor_loss,critic_loss,eval_return";
pub const TIMING_HEADER: &str = "step,wall_time";
pub const SIMILARITY_HEADER: &str = "step,sim_raw,sim_bar";

/// Interval means; `None` when no update of that kind ran in the interval.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// Environment steps so far.
    pub step: u64,
    pub disc_loss: Option<f64>,
    pub gp: Option<f64>,
    pub mean_patch_reward: Option<f64>,
    pub sim_bar_mean: Option<f64>,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub eval_return: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad log value `{s}`")))
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            cell(self.disc_loss),
            cell(self.gp),
            cell(self.mean_patch_reward),
            cell(self.sim_bar_mean),
            cell(self.actor_loss),
            cell(self.critic_loss),
            self.eval_return
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("expected 8 log fields, got {}", f.len())));
        }
        Ok(LogRow {
            step: f[0].parse().map_err(|_| Error::Format(format!("bad step `{}`", f[0])))?,
            disc_loss: parse_cell(f[1])?,
            gp: parse_cell(f[2])?,
            mean_patch_reward: parse_cell(f[3])?,
            sim_bar_mean: parse_cell(f[4])?,
            actor_loss: parse_cell(f[5])?,
            critic_loss: parse_cell(f[6])?,
            eval_return: parse_cell(f[7])?.ok_or_else(|| Error::Format("missing eval_return".into()))?,
        })
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        [
            self.disc_loss,
            self.gp,
            self.mean_patch_reward,
            self.sim_bar_mean,
            self.actor_loss,
            self.critic_loss,
            Some(self.eval_return),
        ]
        .into_iter()
        .flatten()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.values().all(f64::is_finite) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: format!("log row `{}`", self.to_csv()),
                step: self.step,
            })
        }
    }
}

/// Reads a `train_log.csv` back.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Format("missing or unexpected log header".into()));
    }
    lines.map(LogRow::parse).collect()
}

pub struct TrainLog {
    log: BufWriter<File>,
    timing: BufWriter<File>,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn create(log: &Path, timing: &Path) -> Result<Self> {
        let mut l = BufWriter::new(File::create(log)?);
        writeln!(l, "{LOG_HEADER}")?;
        l.flush()?;
        let mut t = BufWriter::new(File::create(timing)?);
        writeln!(t, "{TIMING_HEADER}")?;
        t.flush()?;
        Ok(TrainLog {
            log: l,
            timing: t,
            rows: Vec::new(),
        })
    }

    pub fn append(&mut self, row: &LogRow, wall_time: f64) -> Result<()> {
        writeln!(self.log, "{}", row.to_csv())?;
        self.log.flush()?;
        writeln!(self.timing, "{},{wall_time:.3}", row.step)?;
        self.timing.flush()?;
        self.rows.push(row.clone());
        Ok(())
    }
}

pub struct SimilarityLog {
    out: BufWriter<File>,
    pub rows: Vec<(u64, f64, f64)>,
}

impl SimilarityLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{SIMILARITY_HEADER}")?;
        out.flush()?;
        Ok(SimilarityLog { out, rows: Vec::new() })
    }

    pub fn append(&mut self, step: u64, raw: f64, bar: f64) -> Result<()> {
        writeln!(self.out, "{step},{raw},{bar}")?;
        self.out.flush()?;
        self.rows.push((step, raw, bar));
        Ok(())
    }
}
