//! Per-event score files: `seq_id,event_idx,time,score[,label]`.

use std::fmt::Write as _;
use std::path::Path;

use tpp_outlier::seqdata::Dataset;
use tpp_outlier::{Error, Result};

pub const HEADER: &str = "seq_id,event_idx,time,score";

pub fn write_scores(path: &Path, data: &Dataset, scores: &[Vec<f64>], with_labels: bool) -> Result<()> {
    let mut out = String::from(HEADER);
    out.push_str(if with_labels { ",label\n" } else { "\n" });
    for (i, (ls, s)) in data.sequences.iter().zip(scores).enumerate() {
        for (n, (t, v)) in ls.seq().times().iter().zip(s).enumerate() {
            let _ = write!(out, "{i},{n},{t},{v:.12}");
            if with_labels {
                let _ = write!(out, ",{}", ls.labels()[n]);
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::Io { path: path.into(), source: e })
}

/// Scores and labels grouped by sequence, in file order.
pub struct ScoreTable {
    pub scores: Vec<Vec<f64>>,
    pub labels: Option<Vec<Vec<u8>>>,
}

impl ScoreTable {
    pub fn flat(&self) -> (Vec<f64>, Option<Vec<u8>>) {
        (self.scores.concat(), self.labels.as_ref().map(|l| l.concat()))
    }
}

pub fn read_scores(path: &Path) -> Result<ScoreTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let err = |line: usize, msg: String| Error::Parse { path: path.into(), line, msg };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty scores file".into()))?;
    let with_labels = match header.trim() {
        h if h == HEADER => false,
        h if h == format!("{HEADER},label") => true,
        h => return Err(err(1, format!("expected header {HEADER:?}[,label], found {h:?}"))),
    };
    let mut scores: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<Vec<u8>> = Vec::new();
    let mut last_id: Option<usize> = None;
    for (lno, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let want = if with_labels { 5 } else { 4 };
        if cells.len() != want {
            return Err(err(lno + 1, format!("expected {want} cells, found {}", cells.len())));
        }
        let id: usize = cells[0].parse().map_err(|_| err(lno + 1, format!("bad seq_id {:?}", cells[0])))?;
        let score: f64 = cells[3].parse().map_err(|_| err(lno + 1, format!("bad score {:?}", cells[3])))?;
        if last_id != Some(id) {
            if last_id.is_some_and(|l| id < l) {
                return Err(err(lno + 1, "rows must be grouped by increasing seq_id".into()));
            }
            scores.push(Vec::new());
            labels.push(Vec::new());
            last_id = Some(id);
        }
        scores.last_mut().expect("group").push(score);
        if with_labels {
            let label: u8 = match cells[4] {
                "0" => 0,
                "1" => 1,
                other => return Err(err(lno + 1, format!("label must be 0 or 1, found {other:?}"))),
            };
            labels.last_mut().expect("group").push(label);
        }
    }
    Ok(ScoreTable { scores, labels: with_labels.then_some(labels) })
}
