//! File formats shared by the library and the command line: trajectory CSV,
//! atomic writes, and a small SVG emitter.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::batch::parse_row;
use crate::error::{Error, Result};
use crate::sde::Trajectory;

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::pre(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// `traj_id,step,t,hit,x1..xd`; `hit` is 1 on the row of the hitting state.
/// `comment` lines are written first, each prefixed with `# `.
pub fn trajectories_to_csv(trajs: &[Trajectory], comments: &[String]) -> String {
    let d = trajs.first().map_or(0, Trajectory::dim);
    let mut s = String::new();
    for c in comments {
        writeln!(s, "# {c}").unwrap();
    }
    s.push_str("traj_id,step,t,hit");
    for i in 1..=d {
        write!(s, ",x{i}").unwrap();
    }
    s.push('\n');
    for (id, tr) in trajs.iter().enumerate() {
        for k in 0..tr.states.len() {
            let hit = tr.hit && k == tr.hit_index;
            write!(s, "{id},{},{},{}", tr.steps[k], fmt_f64(tr.times[k]), u8::from(hit)).unwrap();
            for v in &tr.states[k] {
                s.push(',');
                s.push_str(&fmt_f64(*v));
            }
            s.push('\n');
        }
    }
    s
}

/// Parsed trajectory file: comment lines (without `# `) and trajectories in
/// file order. Stream ids are the `traj_id` values.
pub fn trajectories_from_csv(text: &str) -> Result<(Vec<String>, Vec<Trajectory>)> {
    let mut comments = Vec::new();
    let mut trajs: Vec<Trajectory> = Vec::new();
    let mut d: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            comments.push(c.trim().to_string());
            continue;
        }
        let Some(dim) = d else {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let ok = cols.len() >= 5
                && cols[..4] == ["traj_id", "step", "t", "hit"]
                && cols[4..].iter().enumerate().all(|(i, c)| *c == format!("x{}", i + 1));
            if !ok {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "expected header `traj_id,step,t,hit,x1,...,xd`".into(),
                });
            }
            d = Some(cols.len() - 4);
            continue;
        };
        let vals = parse_row(line, line_no)?;
        if vals.len() != dim + 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, found {}", dim + 4, vals.len()),
            });
        }
        let id = vals[0] as u64;
        let step = vals[1] as usize;
        let t = vals[2];
        let hit = vals[3] != 0.0;
        let state = vals[4..].to_vec();
        if trajs.last().is_none_or(|tr| tr.stream_id != id) {
            trajs.push(Trajectory {
                stream_id: id,
                times: Vec::new(),
                states: Vec::new(),
                steps: Vec::new(),
                hit: false,
                hit_index: 0,
                tau: f64::NAN,
            });
        }
        let tr = trajs.last_mut().unwrap();
        if tr.times.last().is_some_and(|&prev| t <= prev) {
            return Err(Error::Parse {
                line: line_no,
                msg: "times must increase within a trajectory".into(),
            });
        }
        if hit {
            tr.hit = true;
            tr.hit_index = tr.states.len();
            tr.tau = t;
        }
        tr.times.push(t);
        tr.steps.push(step);
        tr.states.push(state);
    }
    if d.is_none() {
        return Err(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        });
    }
    Ok((comments, trajs))
}

const W: f64 = 800.0;
const H: f64 = 600.0;
const PAD: f64 = 60.0;

fn svg_open(s: &mut String, title: &str) {
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" width="{W}" height="{H}">"#
    )
    .unwrap();
    writeln!(s, r##"<rect x="0" y="0" width="{W}" height="{H}" fill="#ffffff"/>"##).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="30" font-family="sans-serif" font-size="18" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r##"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="#000000"/>"##,
        H - PAD,
        W - PAD,
        H - PAD
    )
    .unwrap();
    writeln!(s, r##"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="#000000"/>"##, H - PAD).unwrap();
}

fn axis_labels(s: &mut String, xlo: f64, xhi: f64, ylo: f64, yhi: f64) {
    let f = |v: f64| format!("{v:.3}");
    let rows = [
        (PAD, H - PAD + 20.0, "start", f(xlo)),
        (W - PAD, H - PAD + 20.0, "end", f(xhi)),
        (PAD - 8.0, H - PAD, "end", f(ylo)),
        (PAD - 8.0, PAD + 5.0, "end", f(yhi)),
    ];
    for (x, y, anchor, text) in rows {
        writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="12" text-anchor="{anchor}">{text}</text>"#
        )
        .unwrap();
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of `heights` over bins with the given `edges` (`len + 1` values).
pub fn svg_bars(title: &str, edges: &[f64], heights: &[f64]) -> String {
    let mut s = String::new();
    svg_open(&mut s, title);
    let (xlo, xhi) = (edges.first().copied().unwrap_or(0.0), edges.last().copied().unwrap_or(1.0));
    let ymax = heights.iter().cloned().fold(0.0, f64::max);
    let ytop = if ymax > 0.0 { ymax } else { 1.0 };
    let span = if xhi > xlo { xhi - xlo } else { 1.0 };
    let sx = |x: f64| PAD + (x - xlo) / span * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y / ytop * (H - 2.0 * PAD);
    for (i, &h) in heights.iter().enumerate() {
        let (x0, x1) = (sx(edges[i]), sx(edges[i + 1]));
        let width = (x1 - x0).max(0.5);
        writeln!(
            s,
            r##"<rect x="{x0:.2}" y="{:.2}" width="{width:.2}" height="{:.2}" fill="#4477aa" stroke="#223355" stroke-width="0.5"/>"##,
            sy(h),
            H - PAD - sy(h)
        )
        .unwrap();
    }
    axis_labels(&mut s, xlo, xhi, 0.0, ytop);
    s.push_str("</svg>\n");
    s
}

/// Scatter plot of `(x, y)` points.
pub fn svg_scatter(title: &str, points: &[(f64, f64)]) -> String {
    let mut s = String::new();
    svg_open(&mut s, title);
    let lo_hi = |f: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else {
            (lo.min(0.0).max(-1e300), lo.max(0.0) + 1.0)
        }
    };
    let (xlo, xhi) = lo_hi(|p| p.0);
    let (ylo, yhi) = lo_hi(|p| p.1);
    for &(x, y) in points {
        let cx = PAD + (x - xlo) / (xhi - xlo) * (W - 2.0 * PAD);
        let cy = H - PAD - (y - ylo) / (yhi - ylo) * (H - 2.0 * PAD);
        writeln!(s, r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="#aa3377"/>"##).unwrap();
    }
    axis_labels(&mut s, xlo, xhi, ylo, yhi);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: u64, hit: bool) -> Trajectory {
        Trajectory {
            stream_id: id,
            times: vec![0.0, 0.1, 0.2],
            states: vec![vec![0.0, 0.0], vec![0.5, 0.25], vec![1.0, 0.0]],
            steps: vec![0, 1, 2],
            hit,
            hit_index: if hit { 2 } else { 0 },
            tau: if hit { 0.2 } else { f64::NAN },
        }
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let trajs = vec![traj(0, true), traj(1, false)];
        let text = trajectories_to_csv(&trajs, &["pool scheme=sphere:d=2 n=2 seed=1".into()]);
        assert!(text.starts_with("# pool scheme=sphere:d=2 n=2 seed=1\ntraj_id,step,t,hit,x1,x2\n"));
        let (comments, back) = trajectories_from_csv(&text).unwrap();
        assert_eq!(comments, vec!["pool scheme=sphere:d=2 n=2 seed=1".to_string()]);
        assert_eq!(back[0], trajs[0]);
        assert!(!back[1].hit);
        assert_eq!(back[1].states, trajs[1].states);
    }

    #[test]
    fn malformed_trajectory_rows_report_lines() {
        let err = trajectories_from_csv("traj_id,step,t,hit,x1\n0,0,0,0,0.1\n0,1,0.1,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        assert!(trajectories_from_csv("id,x\n").is_err());
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.csv");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn svg_has_fixed_viewbox() {
        let s = svg_bars("τ <hist>", &[0.0, 1.0, 2.0], &[3.0, 1.0]);
        assert!(s.contains(r#"viewBox="0 0 800 600""#));
        assert!(s.contains("&lt;hist&gt;"));
        assert!(s.trim_end().ends_with("</svg>"));
        let s = svg_scatter("pts", &[(0.0, 1.0), (2.0, 3.0)]);
        assert_eq!(s.matches("<circle").count(), 2);
    }
}
