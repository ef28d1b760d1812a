//! Episode CSV reading and writing.
//!
//! Layout: header `episode_id,time,<ch1>,...,<chM>`, one row per timestamp,
//! empty cell = missing. Lines starting with `#` are comments.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use nsmgp::Episode;

use crate::error::{CliError, CliResult};

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub fn ingest_csv(path: &Path) -> CliResult<Episode> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_episode(file, &path.display().to_string())
}

/// Parses an episode from any reader; `name` labels errors.
pub fn read_episode<R: std::io::Read>(reader: R, name: &str) -> CliResult<Episode> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_err(e, 1))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(CliError::EmptyFile(name.to_string()));
    }
    if header.len() < 3 || &header[0] != "episode_id" || &header[1] != "time" {
        return Err(CliError::Parse {
            row: 1,
            col: 1,
            msg: "header must be episode_id,time,<channel>...".into(),
        });
    }
    let channels: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let m = channels.len();
    let mut id: Option<String> = None;
    let mut rows: Vec<(f64, Vec<Option<f64>>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(e, 0))?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        match &id {
            None => id = Some(rec[0].to_string()),
            Some(first) if first != &rec[0] => {
                return Err(CliError::Parse {
                    row,
                    col: 1,
                    msg: format!("episode_id {:?} differs from {:?}", &rec[0], first),
                })
            }
            _ => {}
        }
        let time = parse_cell(&rec[1], row, 2)?.ok_or_else(|| CliError::Parse {
            row,
            col: 2,
            msg: "time is missing".into(),
        })?;
        let vals = (0..m).map(|c| parse_cell(&rec[c + 2], row, c + 3)).collect::<CliResult<Vec<_>>>()?;
        rows.push((time, vals));
    }
    let Some(id) = id else {
        return Err(CliError::EmptyFile(name.to_string()));
    };
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(CliError::DuplicateTimestamp { time: w[0].0 });
    }
    let n = rows.len();
    let obs = DMatrix::from_fn(n, m, |r, c| rows[r].1[c].unwrap_or(0.0));
    let mask = DMatrix::from_fn(n, m, |r, c| rows[r].1[c].is_some());
    let times = rows.into_iter().map(|r| r.0).collect();
    Ok(Episode::new(id, channels, times, obs, mask)?)
}

fn parse_cell(s: &str, row: usize, col: usize) -> CliResult<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(CliError::Parse { row, col, msg: format!("{s:?} is not a finite number") }),
    }
}

fn csv_err(e: csv::Error, fallback_row: usize) -> CliError {
    let row = e.position().map_or(fallback_row, |p| p.line() as usize);
    CliError::Parse { row, col: 0, msg: e.to_string() }
}

/// Writes `ep` in ingest format, preceded by `#` comment lines.
pub fn write_episode_csv(path: &Path, ep: &Episode, comments: &[String]) -> CliResult<()> {
    let mut rows = Vec::with_capacity(ep.n());
    for r in 0..ep.n() {
        let mut row = vec![ep.id.clone(), fmt_f64(ep.times()[r])];
        row.extend((0..ep.m()).map(|c| if ep.is_present(r, c) { fmt_f64(ep.obs()[(r, c)]) } else { String::new() }));
        rows.push(row);
    }
    let mut header = vec!["episode_id".to_string(), "time".to_string()];
    header.extend(ep.channels.iter().cloned());
    write_csv(path, comments, &header, &rows)
}

/// Writes a CSV table with leading `#` comment lines.
pub fn write_csv(path: &Path, comments: &[String], header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for c in comments {
        writeln!(out, "# {c}").map_err(|e| CliError::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> CliResult<Episode> {
        read_episode(s.as_bytes(), "test")
    }

    #[test]
    fn well_formed_three_rows() {
        let ep = parse("episode_id,time,a,b\ne,0.0,1,2\ne,1.5,3,4\ne,2.0,5,6\n").unwrap();
        assert_eq!(ep.n(), 3);
        assert_eq!(ep.m(), 2);
        assert!(ep.is_complete());
        assert_eq!(ep.channels, vec!["a", "b"]);
        assert_eq!(ep.obs()[(1, 1)], 4.0);
    }

    #[test]
    fn empty_cell_is_missing() {
        let ep = parse("episode_id,time,a,b\ne,0,1,\ne,1,3,4\n").unwrap();
        assert!(!ep.is_present(0, 1));
        assert!(ep.is_present(0, 0));
        assert_eq!(ep.n_present(), 3);
    }

    #[test]
    fn rows_are_sorted() {
        let ep = parse("episode_id,time,a\ne,2,20\ne,0,0\ne,1,10\n").unwrap();
        assert_eq!(ep.times(), &[0.0, 1.0, 2.0]);
        assert_eq!(ep.obs()[(2, 0)], 20.0);
    }

    #[test]
    fn duplicate_time_names_value() {
        let err = parse("episode_id,time,a\ne,0.5,1\ne,1.25,2\ne,1.25,3\n").unwrap_err();
        assert!(matches!(err, CliError::DuplicateTimestamp { time } if time == 1.25));
        assert!(err.to_string().contains("1.25"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn bad_number_reports_row_and_col() {
        let err = parse("episode_id,time,a,b\ne,0,1,2\ne,1,x,4\n").unwrap_err();
        match err {
            CliError::Parse { row, col, .. } => assert_eq!((row, col), (3, 3)),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(parse(""), Err(CliError::EmptyFile(_))));
        assert!(matches!(parse("episode_id,time,a\n"), Err(CliError::EmptyFile(_))));
    }

    #[test]
    fn mixed_episode_ids_rejected() {
        assert!(matches!(parse("episode_id,time,a\ne,0,1\nf,1,2\n"), Err(CliError::Parse { col: 1, .. })));
    }

    #[test]
    fn comments_skipped() {
        let ep = parse("# note\nepisode_id,time,a\n# mid\ne,0,1\n").unwrap();
        assert_eq!(ep.n(), 1);
    }

    #[test]
    fn all_missing_row_is_data_error() {
        let err = parse("episode_id,time,a,b\ne,0,,\n").unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn fmt_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.123456789, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
