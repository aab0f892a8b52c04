use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,step,loss,l_distill,l_target,mae,lr";

/// One logged virtual-batch step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub l_distill: f64,
    pub l_target: f64,
    pub mae: f64,
    pub lr: f64,
}

impl MetricsRow {
    fn to_line(self) -> String {
        // 9 significant digits.
        format!(
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.epoch, self.step, self.loss, self.l_distill, self.l_target, self.mae, self.lr
        )
    }
}

/// Appends a row, writing the header first if the file is new or empty.
pub fn append_metrics(path: impl AsRef<Path>, row: &MetricsRow) -> Result<()> {
    let path = path.as_ref();
    let existing = match std::fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let fresh = existing.is_empty();
    if !fresh && existing.lines().next() != Some(METRICS_HEADER) {
        return Err(Error::format_at_line(path, 1, format!("header does not match `{METRICS_HEADER}`")));
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    text.push_str(&row.to_line());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Creates (or truncates to) a header-only metrics file.
pub(crate) fn init_metrics(path: &Path) -> Result<()> {
    super::write_file(path, format!("{METRICS_HEADER}\n").as_bytes())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format_at_line(path, 1, "missing or wrong header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::format_at_line(path, i + 2, format!("bad {what}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("field count"));
            }
            let num = |k: usize, what: &str| f[k].parse::<f64>().map_err(|_| bad(what));
            Ok(MetricsRow {
                epoch: f[0].parse().map_err(|_| bad("epoch"))?,
                step: f[1].parse().map_err(|_| bad("step"))?,
                loss: num(2, "loss")?,
                l_distill: num(3, "l_distill")?,
                l_target: num(4, "l_target")?,
                mae: num(5, "mae")?,
                lr: num(6, "lr")?,
            })
        })
        .collect()
}
