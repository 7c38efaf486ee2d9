use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{Choice, LayerSelection};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,layer,choice,d_c,d_s";

/// Step × layer record of branch choices.
///
/// Row `k` holds the selections made at the `k`-th sampling step. Policies
/// that do not select leave their rows empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionTrace {
    pub rows: Vec<Vec<LayerSelection>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerFrequency {
    pub layer: usize,
    pub content: f64,
    pub style: f64,
    pub count: usize,
}

impl SelectionTrace {
    pub fn push(&mut self, row: Vec<LayerSelection>) {
        self.rows.push(row);
    }

    pub fn num_steps(&self) -> usize {
        self.rows.len()
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, &LayerSelection)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(k, row)| row.iter().map(move |s| (k, s)))
    }

    pub fn selection_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (step, s) in self.cells() {
            // `{:?}` prints the shortest round-tripping decimal
            let _ = writeln!(
                out,
                "{step},{},{},{:?},{:?}",
                s.layer,
                s.choice.code(),
                s.d_c,
                s.d_s
            );
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output. Line numbers in errors are 1-based.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header '{CSV_HEADER}'"),
                })
            }
        }
        let mut trace = SelectionTrace::default();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", fields.len())));
            }
            let step: usize = fields[0]
                .parse()
                .map_err(|_| err(format!("bad step '{}'", fields[0])))?;
            let layer: usize = fields[1]
                .parse()
                .map_err(|_| err(format!("bad layer '{}'", fields[1])))?;
            let choice = match fields[2] {
                "C" => Choice::Content,
                "S" => Choice::Style,
                other => return Err(err(format!("choice must be C or S, found '{other}'"))),
            };
            let num = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad {what} '{s}'")))
            };
            let d_c = num(fields[3], "d_c")?;
            let d_s = num(fields[4], "d_s")?;
            if step + 1 < trace.rows.len() {
                return Err(err(format!("step {step} appears out of order")));
            }
            while trace.rows.len() <= step {
                trace.rows.push(Vec::new());
            }
            trace.rows[step].push(LayerSelection {
                layer,
                choice,
                d_c,
                d_s,
            });
        }
        Ok(trace)
    }

    /// Per-layer share of Content and Style choices, ordered by layer.
    pub fn frequencies(&self) -> Vec<LayerFrequency> {
        let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (_, s) in self.cells() {
            let e = counts.entry(s.layer).or_default();
            match s.choice {
                Choice::Content => e.0 += 1,
                Choice::Style => e.1 += 1,
            }
        }
        counts
            .into_iter()
            .map(|(layer, (c, s))| {
                let n = c + s;
                LayerFrequency {
                    layer,
                    content: c as f64 / n as f64,
                    style: s as f64 / n as f64,
                    count: n,
                }
            })
            .collect()
    }

    /// Step × layer matrix of choice codes (`C`/`S`, `.` where absent).
    pub fn choice_matrix(&self) -> (Vec<usize>, Vec<Vec<char>>) {
        let layers: Vec<usize> = self.frequencies().iter().map(|f| f.layer).collect();
        let matrix = self
            .rows
            .iter()
            .map(|row| {
                layers
                    .iter()
                    .map(|l| {
                        row.iter()
                            .find(|s| s.layer == *l)
                            .map_or('.', |s| s.choice.code())
                    })
                    .collect()
            })
            .collect();
        (layers, matrix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sel(layer: usize, choice: Choice, d_c: f64, d_s: f64) -> LayerSelection {
        LayerSelection {
            layer,
            choice,
            d_c,
            d_s,
        }
    }

    fn sample() -> SelectionTrace {
        SelectionTrace {
            rows: vec![
                vec![
                    sel(0, Choice::Content, 0.1, 0.05),
                    sel(1, Choice::Style, 1e-17, 0.3),
                ],
                vec![
                    sel(0, Choice::Style, 0.0, 2.5),
                    sel(1, Choice::Style, 0.2, 1.0 / 3.0),
                ],
                vec![
                    sel(0, Choice::Content, 0.7, 0.7),
                    sel(1, Choice::Content, 4.0, 0.0),
                ],
            ],
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = sample();
        let csv = t.to_csv();
        assert!(csv.starts_with("step,layer,choice,d_c,d_s\n0,0,C,0.1,0.05\n"));
        assert_eq!(SelectionTrace::from_csv(&csv).unwrap(), t);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let bad = "step,layer,choice,d_c,d_s\n0,0,C,0.1,0.2\n0,1,X,0.1,0.2\n";
        match SelectionTrace::from_csv(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let short = "step,layer,choice,d_c,d_s\n0,0,C,0.1\n";
        assert!(matches!(
            SelectionTrace::from_csv(short),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            SelectionTrace::from_csv("nope\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        let nan = "step,layer,choice,d_c,d_s\n0,0,C,NaN,0\n";
        assert!(matches!(
            SelectionTrace::from_csv(nan),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn frequencies_sum_to_one() {
        let f = sample().frequencies();
        assert_eq!(f.len(), 2);
        for l in &f {
            assert!((l.content + l.style - 1.0).abs() < 1e-12);
            assert_eq!(l.count, 3);
        }
        assert!((f[0].content - 2.0 / 3.0).abs() < 1e-15);
        assert!((f[1].style - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn choice_matrix_layout() {
        let (layers, m) = sample().choice_matrix();
        assert_eq!(layers, vec![0, 1]);
        assert_eq!(m, vec![vec!['C', 'S'], vec!['S', 'S'], vec!['C', 'C']]);
    }
}
