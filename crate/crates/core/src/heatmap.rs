//! Sensitivity maps: outcome frequency per delay, as a text grid and an SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::campaign::{CampaignRow, OutcomeClass};

pub const ROWS: [&str; 5] = ["NON_CORRECT", "WRONG_OUTPUT", "TIMEOUT", "TRAP", "DETECTED"];
const RAMP: &[u8] = b" .:-=+*#%@";
const CELL_W: usize = 8;
const CELL_H: usize = 16;
const LABEL_W: usize = 110;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("campaign table is empty")]
pub struct EmptyTable;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub delays: Vec<i64>,
    pub trials: Vec<u32>,
    /// `counts[row][col]`, rows in [`ROWS`] order.
    pub counts: Vec<Vec<u32>>,
}

fn row_hits(outcome: OutcomeClass) -> [bool; 5] {
    [
        outcome != OutcomeClass::Correct,
        outcome == OutcomeClass::WrongOutput,
        outcome == OutcomeClass::Timeout,
        outcome == OutcomeClass::Trap,
        matches!(outcome, OutcomeClass::Detected(_)),
    ]
}

impl Heatmap {
    pub fn from_rows(rows: &[CampaignRow]) -> Result<Heatmap, EmptyTable> {
        if rows.is_empty() {
            return Err(EmptyTable);
        }
        let mut cols: BTreeMap<i64, (u32, [u32; 5])> = BTreeMap::new();
        for row in rows {
            let cell = cols.entry(row.delay).or_default();
            cell.0 += 1;
            for (i, hit) in row_hits(row.outcome).into_iter().enumerate() {
                cell.1[i] += hit as u32;
            }
        }
        let delays = cols.keys().copied().collect();
        let trials = cols.values().map(|c| c.0).collect();
        let counts = (0..ROWS.len()).map(|r| cols.values().map(|c| c.1[r]).collect()).collect();
        Ok(Heatmap { delays, trials, counts })
    }

    /// Fraction of the trials at column `col` that fall in `row`.
    pub fn intensity(&self, row: usize, col: usize) -> f64 {
        self.counts[row][col] as f64 / self.trials[col] as f64
    }

    fn ramp(&self, row: usize, col: usize) -> char {
        let i = (self.intensity(row, col) * (RAMP.len() - 1) as f64).round() as usize;
        RAMP[i] as char
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let first = self.delays[0];
        let last = *self.delays.last().unwrap();
        let _ = writeln!(out, "delay {first}..{last} ({} columns)", self.delays.len());
        for (r, name) in ROWS.iter().enumerate() {
            let cells: String = (0..self.delays.len()).map(|c| self.ramp(r, c)).collect();
            let _ = writeln!(out, "{name:<12} |{cells}|");
        }
        let _ = writeln!(out, "scale \"{}\" = 0..1", std::str::from_utf8(RAMP).unwrap());
        out
    }

    pub fn to_svg(&self) -> String {
        let cols = self.delays.len();
        let width = LABEL_W + cols * CELL_W + 10;
        let height = (ROWS.len() + 2) * CELL_H + 10;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
        );
        let _ = writeln!(s, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
        for (r, name) in ROWS.iter().enumerate() {
            let y = r * CELL_H + 5;
            let _ = writeln!(
                s,
                r#"<text x="4" y="{}" font-family="monospace" font-size="11">{name}</text>"#,
                y + CELL_H - 4
            );
            for c in 0..cols {
                let level = 255 - (self.intensity(r, c) * 255.0).round() as u8;
                let _ = writeln!(
                    s,
                    r##"<rect x="{}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="#{level:02x}{level:02x}{level:02x}"><title>delay {} {name} {}/{}</title></rect>"##,
                    LABEL_W + c * CELL_W,
                    self.delays[c],
                    self.counts[r][c],
                    self.trials[c]
                );
            }
        }
        let y = ROWS.len() * CELL_H + 5 + CELL_H;
        let _ = writeln!(
            s,
            r#"<text x="{LABEL_W}" y="{y}" font-family="monospace" font-size="11">delay {} .. {}</text>"#,
            self.delays[0],
            self.delays[cols - 1]
        );
        s.push_str("</svg>\n");
        s
    }
}
