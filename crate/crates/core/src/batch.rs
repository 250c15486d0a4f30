//! Exit samples: the common currency of training data and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, fmt_f64};
use crate::schemes::Scheme;
use crate::sde::Trajectory;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub points: Vec<Vec<f64>>,
    /// Hitting times, parallel to `points`; empty for data with no times.
    pub taus: Vec<f64>,
    /// Runs that never reached the exit set and were left out.
    pub truncated_count: usize,
}

impl SampleBatch {
    pub fn from_points(points: Vec<Vec<f64>>) -> Self {
        Self {
            points,
            taus: Vec::new(),
            truncated_count: 0,
        }
    }

    /// Exit points and times of the trajectories that hit.
    pub fn from_trajectories(trajs: &[Trajectory]) -> Self {
        let mut out = Self::default();
        for t in trajs {
            match t.exit() {
                Some(x) => {
                    out.points.push(x.to_vec());
                    out.taus.push(t.tau);
                }
                None => out.truncated_count += 1,
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(Vec::len)
    }

    pub fn has_taus(&self) -> bool {
        !self.points.is_empty() && self.taus.len() == self.points.len()
    }

    /// Fraction of runs that were truncated.
    pub fn truncation_rate(&self) -> f64 {
        let total = self.points.len() + self.truncated_count;
        if total == 0 {
            0.0
        } else {
            self.truncated_count as f64 / total as f64
        }
    }

    /// Checks that every point is on `Ω` exactly.
    pub fn check_on(&self, scheme: &Scheme) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            scheme.check_target(p).map_err(|e| Error::Batch {
                index: i,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    /// Coordinate `k` of every point.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.points.iter().map(|p| p[k]).collect()
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim().unwrap_or(0);
        let mut s = String::new();
        if self.truncated_count > 0 {
            writeln!(s, "# truncated={}", self.truncated_count).unwrap();
        }
        let mut cols: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        if self.has_taus() {
            cols.push("tau".into());
        }
        s.push_str(&cols.join(","));
        s.push('\n');
        for (i, p) in self.points.iter().enumerate() {
            let mut row: Vec<String> = p.iter().map(|v| fmt_f64(*v)).collect();
            if self.has_taus() {
                row.push(fmt_f64(self.taus[i]));
            }
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut out = Self::default();
        let mut header: Option<(usize, bool)> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("truncated=") {
                    out.truncated_count = v.trim().parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad truncation count `{v}`"),
                    })?;
                }
                continue;
            }
            let Some((d, with_tau)) = header else {
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                let with_tau = cols.last() == Some(&"tau");
                let d = cols.len() - usize::from(with_tau);
                let ok = d >= 1 && cols[..d].iter().enumerate().all(|(i, c)| *c == format!("x{}", i + 1));
                if !ok {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "expected header `x1,...,xd[,tau]`".into(),
                    });
                }
                header = Some((d, with_tau));
                continue;
            };
            let vals = parse_row(line, line_no)?;
            if vals.len() != d + usize::from(with_tau) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {} fields, found {}", d + usize::from(with_tau), vals.len()),
                });
            }
            out.points.push(vals[..d].to_vec());
            if with_tau {
                out.taus.push(vals[d]);
            }
        }
        if header.is_none() {
            return Err(Error::Parse {
                line: 1,
                msg: "missing header".into(),
            });
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_csv().as_bytes())
    }
}

pub(crate) fn parse_row(line: &str, line_no: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|f| {
            f.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid number `{}`", f.trim()),
            })
        })
        .collect()
}
