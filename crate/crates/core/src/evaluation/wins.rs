use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::TrialResult;
use crate::model::{ModelConfig, Strategy};
use crate::{Error, Result};

/// Row `x`, column `y`: configs where `x` has a strictly lower mean L1 than
/// `y`. The fifth column counts configs where `x` is unbeaten among the
/// valid strategies and strictly better than at least one of them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinTable {
    pub cells: [[Option<usize>; 5]; 4],
}

pub const WIN_TABLE_ALL: usize = 4;

/// Mean L1 per strategy for one config, `None` where the trial is invalid
/// or missing.
pub type ConfigRow = [Option<f64>; 4];

/// Groups results by config in grid order.
pub fn rows_by_config(results: &[TrialResult]) -> Vec<(ModelConfig, ConfigRow)> {
    let mut rows: Vec<(ModelConfig, ConfigRow)> = Vec::new();
    for r in results {
        let slot = match rows.iter().position(|(c, _)| *c == r.config) {
            Some(i) => i,
            None => {
                rows.push((r.config, [None; 4]));
                rows.len() - 1
            }
        };
        let k = Strategy::ALL.iter().position(|s| *s == r.strategy).unwrap();
        rows[slot].1[k] = r.score();
    }
    rows.sort_by_key(|(c, _)| *c);
    rows
}

pub fn win_table(results: &[TrialResult]) -> WinTable {
    let rows: Vec<ConfigRow> = rows_by_config(results)
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    win_table_from_rows(&rows)
}

pub fn win_table_from_rows(rows: &[ConfigRow]) -> WinTable {
    let mut cells = [[Some(0usize); 5]; 4];
    for (x, row) in cells.iter_mut().enumerate() {
        row[x] = None;
    }
    for row in rows {
        for x in 0..4 {
            let Some(vx) = row[x] else { continue };
            let mut beaten = false;
            let mut beats_any = false;
            for y in (0..4).filter(|&y| y != x) {
                let Some(vy) = row[y] else { continue };
                if vx < vy {
                    *cells[x][y].as_mut().unwrap() += 1;
                    beats_any = true;
                } else if vy < vx {
                    beaten = true;
                }
            }
            if beats_any && !beaten {
                *cells[x][WIN_TABLE_ALL].as_mut().unwrap() += 1;
            }
        }
    }
    WinTable { cells }
}

const HEADER: [&str; 5] = [
    "single-without",
    "multiple-without",
    "single-with",
    "multiple-with",
    "all",
];

impl WinTable {
    pub fn get(&self, row: Strategy, col: Option<Strategy>) -> Option<usize> {
        let r = Strategy::ALL.iter().position(|s| *s == row)?;
        let c = match col {
            Some(c) => Strategy::ALL.iter().position(|s| *s == c)?,
            None => WIN_TABLE_ALL,
        };
        self.cells[r][c]
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("strategy,{}\n", HEADER.join(","));
        for (k, row) in Strategy::ALL.iter().zip(&self.cells) {
            let cells: Vec<String> = row
                .iter()
                .map(|c| c.map(|v| v.to_string()).unwrap_or_else(|| "-".into()))
                .collect();
            let _ = writeln!(s, "{},{}", k.name(), cells.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<WinTable> {
        let bad = |m: &str| Error::Parse {
            offset: 0,
            message: format!("win table: {m}"),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        if header != format!("strategy,{}", HEADER.join(",")) {
            return Err(bad("unexpected header"));
        }
        let mut cells = [[None; 5]; 4];
        for (i, k) in Strategy::ALL.iter().enumerate() {
            let line = lines.next().ok_or_else(|| bad("missing row"))?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 || fields[0] != k.name() {
                return Err(bad(&format!("bad row {line:?}")));
            }
            for (j, f) in fields[1..].iter().enumerate() {
                cells[i][j] = match *f {
                    "-" => None,
                    v => Some(v.parse().map_err(|_| bad(&format!("bad count {v:?}")))?),
                };
            }
        }
        if lines.any(|l| !l.is_empty()) {
            return Err(bad("trailing rows"));
        }
        Ok(WinTable { cells })
    }

    /// Fixed-width text rendering.
    pub fn render(&self) -> String {
        let names = [
            "Single-w/o",
            "Multiple-w/o",
            "Single-with",
            "Multiple-with",
            "All",
        ];
        let mut s = format!("{:<14}", "");
        for n in names {
            let _ = write!(s, "{n:>14}");
        }
        s.push('\n');
        for (n, row) in names.iter().zip(&self.cells) {
            let _ = write!(s, "{n:<14}");
            for c in row {
                let v = c.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
                let _ = write!(s, "{v:>14}");
            }
            s.push('\n');
        }
        s
    }
}
