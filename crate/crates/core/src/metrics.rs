//! Echo return loss enhancement, realized mixture levels and the results
//! table.

use std::fmt::Write as _;

use crate::audio::AudioBuffer;
use crate::error::{AecError, Result};
use crate::simulation::{format_db, levels, ratio_db, Condition, MixtureRecord, Scenario};

/// Values above this are printed as `>=` the cap.
pub const ERLE_DISPLAY_CAP: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErleResult {
    /// `+∞` when the processed signal is silent.
    pub erle_db: f64,
    /// False when the microphone signal carries no energy.
    pub valid: bool,
}

impl ErleResult {
    pub fn display(&self) -> String {
        if !self.valid {
            "n/a".into()
        } else if self.erle_db >= ERLE_DISPLAY_CAP {
            format!(">={ERLE_DISPLAY_CAP:.0}")
        } else {
            format!("{:.2}", self.erle_db)
        }
    }
}

/// `10·log10(Σd² / Σŝ²)` over the whole buffers.
pub fn erle(d: &AudioBuffer, s_hat: &AudioBuffer) -> Result<ErleResult> {
    if d.len() != s_hat.len() || d.sample_rate() != s_hat.sample_rate() {
        return Err(AecError::shape(format!(
            "ERLE inputs differ: {} samples at {} Hz vs {} at {} Hz",
            d.len(),
            d.sample_rate(),
            s_hat.len(),
            s_hat.sample_rate()
        )));
    }
    let (ed, es) = (d.energy(), s_hat.energy());
    Ok(ErleResult { erle_db: ratio_db(ed, es), valid: ed > 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Levels {
    pub ser_db: f64,
    pub snr_db: f64,
}

pub fn measure_levels(record: &MixtureRecord) -> Levels {
    let (ser_db, snr_db) = levels(&record.level_reference, &record.z, &record.v);
    Levels { ser_db, snr_db }
}

/// One column of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub condition: Condition,
    pub entries: usize,
    pub realized_ser_db: f64,
    pub realized_snr_db: f64,
    /// Mean ERLE in dB over the entries; far-end single talk only.
    pub erle_db: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub label: String,
    pub rows: Vec<ConditionResult>,
}

/// Per-entry score fed to [`ResultsTable::aggregate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryScore {
    pub condition: Condition,
    pub realized_ser_db: f64,
    pub realized_snr_db: f64,
    pub erle: Option<ErleResult>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut acc, mut n) = (0.0, 0usize);
    for x in v {
        acc += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        acc / n as f64
    }
}

const COLUMNS: [&str; 8] = ["scenario", "snr_db", "ser_db", "entries", "realized_ser_db", "realized_snr_db", "pesq", "erle_db"];

impl ResultsTable {
    /// Groups scores by condition, keeping first-seen order.
    pub fn aggregate(label: impl Into<String>, scores: &[EntryScore]) -> Self {
        let mut order: Vec<Condition> = Vec::new();
        for s in scores {
            if !order.contains(&s.condition) {
                order.push(s.condition);
            }
        }
        let rows = order
            .into_iter()
            .map(|cond| {
                let group: Vec<&EntryScore> = scores.iter().filter(|s| s.condition == cond).collect();
                let erles: Vec<f64> =
                    group.iter().filter_map(|s| s.erle).filter(|e| e.valid).map(|e| e.erle_db).collect();
                ConditionResult {
                    condition: cond,
                    entries: group.len(),
                    realized_ser_db: mean(group.iter().map(|s| s.realized_ser_db)),
                    realized_snr_db: mean(group.iter().map(|s| s.realized_snr_db)),
                    erle_db: (cond.scenario == Scenario::FarEnd && !erles.is_empty())
                        .then(|| mean(erles.into_iter())),
                }
            })
            .collect();
        Self { label: label.into(), rows }
    }

    fn cells(row: &ConditionResult) -> [String; 8] {
        let c = &row.condition;
        let erle = match row.erle_db {
            Some(v) => ErleResult { erle_db: v, valid: true }.display(),
            None => String::new(),
        };
        [
            c.scenario.label().to_string(),
            format_db(c.snr_db),
            format_db(c.ser_db),
            row.entries.to_string(),
            fmt_level(row.realized_ser_db),
            fmt_level(row.realized_snr_db),
            String::new(),
            erle,
        ]
    }

    /// Aligned text; PESQ is left blank for external tools.
    pub fn to_text(&self) -> String {
        let rows: Vec<[String; 8]> = self.rows.iter().map(Self::cells).collect();
        let mut width = COLUMNS.map(str::len);
        for r in &rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        if !self.label.is_empty() {
            let _ = writeln!(out, "# {}", self.label);
        }
        let line = |cells: &[String]| {
            cells.iter().zip(&width).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
        };
        let _ = writeln!(out, "{}", line(&COLUMNS.map(String::from)));
        for r in &rows {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        for r in self.rows.iter().map(Self::cells) {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn fmt_level(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else if v.is_nan() {
        String::new()
    } else {
        format_db(v)
    }
}
