//! Tabular output in three formats: aligned text, CSV and JSON lines.

use std::fmt::Write as _;

use clap::ValueEnum;
use mhelab_core::accounting::display;
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    JsonLines,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Text(String),
    /// Exact integer; tables add separators and an M/B suffix.
    Count(u64),
    Int(i64),
    /// Printed with a fixed number of decimals in every format.
    Fixed(f64, usize),
    /// Shortest round-trip form in CSV/JSON, `decimals` places in tables.
    Real(f64, usize),
    /// Scientific notation in tables.
    Sci(f64),
    Bool(bool),
    Empty,
}

impl Cell {
    pub fn text(s: impl Into<String>) -> Self {
        Cell::Text(s.into())
    }

    pub fn opt_real(v: Option<f64>, decimals: usize) -> Self {
        v.map_or(Cell::Empty, |x| Cell::Real(x, decimals))
    }

    fn human(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Count(n) => display::count(*n),
            Cell::Int(n) if *n < 0 => format!("-{}", display::thousands(n.unsigned_abs())),
            Cell::Int(n) => display::thousands(*n as u64),
            Cell::Fixed(x, d) | Cell::Real(x, d) => format!("{x:.d$}", d = *d),
            Cell::Sci(x) => format!("{x:.2e}"),
            Cell::Bool(b) => if *b { "yes" } else { "no" }.to_string(),
            Cell::Empty => "-".to_string(),
        }
    }

    fn csv(&self) -> String {
        match self {
            Cell::Text(s) => csv_escape(s),
            Cell::Count(n) => n.to_string(),
            Cell::Int(n) => n.to_string(),
            Cell::Fixed(x, d) => format!("{x:.d$}", d = *d),
            Cell::Real(x, _) | Cell::Sci(x) => x.to_string(),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Text(s) => Value::from(s.as_str()),
            Cell::Count(n) => Value::from(*n),
            Cell::Int(n) => Value::from(*n),
            Cell::Fixed(x, d) => format!("{x:.d$}", d = *d)
                .parse::<f64>()
                .ok()
                .and_then(serde_json::Number::from_f64)
                .map_or(Value::Null, Value::Number),
            Cell::Real(x, _) | Cell::Sci(x) => serde_json::Number::from_f64(*x).map_or(Value::Null, Value::Number),
            Cell::Bool(b) => Value::from(*b),
            Cell::Empty => Value::Null,
        }
    }

    fn right_aligned(&self) -> bool {
        !matches!(self, Cell::Text(_) | Cell::Bool(_))
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Table => self.render_human(),
            Format::Csv => self.render_csv(),
            Format::JsonLines => self.render_json_lines(),
        }
    }

    fn render_human(&self) -> String {
        let cells: Vec<Vec<String>> = self.rows.iter().map(|r| r.iter().map(Cell::human).collect()).collect();
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                cells
                    .iter()
                    .map(|r| r[c].chars().count())
                    .chain([self.columns[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let header: Vec<String> = self
            .columns
            .iter()
            .zip(&widths)
            .map(|(h, w)| format!("{h:<w$}"))
            .collect();
        writeln!(out, "{}", header.join("  ").trim_end()).ok();
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        writeln!(out, "{}", rule.join("  ")).ok();
        for (row, raw) in cells.iter().zip(&self.rows) {
            let line: Vec<String> = row
                .iter()
                .zip(raw)
                .zip(&widths)
                .map(|((s, cell), w)| {
                    let pad = w - s.chars().count();
                    if cell.right_aligned() {
                        format!("{}{s}", " ".repeat(pad))
                    } else {
                        format!("{s}{}", " ".repeat(pad))
                    }
                })
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).ok();
        }
        out
    }

    fn render_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(Cell::csv).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    fn render_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let obj: Map<String, Value> = self
                .columns
                .iter()
                .zip(r)
                .map(|(k, v)| (k.to_string(), v.json()))
                .collect();
            out.push_str(&Value::Object(obj).to_string());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Table {
        let mut t = Table::new(&["name", "count", "pct"]);
        t.push(vec![Cell::text("mha"), Cell::Count(28_311_552), Cell::Fixed(0.0, 2)]);
        t.push(vec![Cell::text("a,b"), Cell::Count(6), Cell::Empty]);
        t
    }

    #[test]
    fn csv_is_raw_and_escaped() {
        assert_eq!(sample().render(Format::Csv), "name,count,pct\nmha,28311552,0.00\n\"a,b\",6,\n");
    }

    #[test]
    fn human_uses_separators() {
        let s = sample().render(Format::Table);
        assert!(s.contains("28,311,552 (28.31M)"), "{s}");
    }

    #[test]
    fn json_lines_keep_column_order() {
        let s = sample().render(Format::JsonLines);
        assert_eq!(s.lines().next().unwrap(), r#"{"name":"mha","count":28311552,"pct":0.0}"#);
    }
}
