use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::stats::{fit_quadratic, QuadraticFit, Summary};

/// One CSV row. Crypto rows carry `t`/`n`, load rows carry `users`; the
/// other columns stay empty. Times are per node, in nanoseconds, except
/// latency in milliseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub phase: String,
    pub t: Option<u16>,
    pub n: Option<u16>,
    pub users: Option<usize>,
    pub variant: Option<String>,
    pub step: String,
    pub round: String,
    pub samples: usize,
    pub rounds: Option<u8>,
    pub compute_mean_ns: Option<f64>,
    pub compute_median_ns: Option<f64>,
    pub compute_p95_ns: Option<f64>,
    pub io_mean_ns: Option<f64>,
    pub io_median_ns: Option<f64>,
    pub io_p95_ns: Option<f64>,
    pub latency_mean_ms: Option<f64>,
    pub latency_median_ms: Option<f64>,
    pub latency_p95_ms: Option<f64>,
    pub tps: Option<f64>,
    pub error_rate: f64,
    pub error_kind: Option<String>,
}

impl MetricsRow {
    pub fn set_compute(&mut self, s: &Summary) {
        self.compute_mean_ns = Some(s.mean);
        self.compute_median_ns = Some(s.median);
        self.compute_p95_ns = Some(s.p95);
    }

    pub fn set_io(&mut self, s: &Summary) {
        self.io_mean_ns = Some(s.mean);
        self.io_median_ns = Some(s.median);
        self.io_p95_ns = Some(s.p95);
    }

    pub fn set_latency(&mut self, s: &Summary) {
        self.latency_mean_ms = Some(s.mean);
        self.latency_median_ms = Some(s.median);
        self.latency_p95_ms = Some(s.p95);
    }
}

pub fn write_csv<W: io::Write>(rows: &[MetricsRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.serialize(MetricsRow::default())?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(input: R) -> csv::Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Quadratic fit of mean per-node DKG compute against `n`. Where several
/// thresholds were swept at one `n`, the largest `t` is used.
pub fn dkg_fit(rows: &[MetricsRow]) -> Option<QuadraticFit> {
    let mut by_n: BTreeMap<u16, (u16, f64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.step == "dkg" && r.round == "all") {
        if let (Some(t), Some(n), Some(c)) = (r.t, r.n, r.compute_mean_ns) {
            let e = by_n.entry(n).or_insert((t, c));
            if t > e.0 {
                *e = (t, c);
            }
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = by_n.iter().map(|(&n, &(_, c))| (n as f64, c)).unzip();
    fit_quadratic(&xs, &ys)
}

pub fn summary(rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    let errors = rows.iter().filter(|r| r.error_kind.is_some()).count();
    let _ = writeln!(s, "rows: {}, rows with errors: {errors}", rows.len());
    if let Some(fit) = dkg_fit(rows) {
        let _ = writeln!(
            s,
            "dkg compute per node ≈ {:.1}·n² + {:.1}·n + {:.1} ns (R² = {:.4})",
            fit.a, fit.b, fit.c, fit.r_squared
        );
    }
    for r in rows.iter().filter(|r| r.round == "all") {
        let who = match (r.t, r.n, r.users) {
            (Some(t), Some(n), _) => format!("({t},{n})"),
            (_, _, Some(u)) => format!("users={u}"),
            _ => String::new(),
        };
        let variant = r.variant.as_deref().unwrap_or("");
        let mut line = format!("{who} {variant} {}", r.step);
        if let Some(c) = r.compute_mean_ns {
            let _ = write!(line, " compute {:.2} ms", c / 1e6);
        }
        if let Some(io) = r.io_mean_ns {
            let _ = write!(line, " io {:.2} ms", io / 1e6);
        }
        if let Some(tps) = r.tps {
            let _ = write!(line, " tps {tps:.2}");
        }
        if let Some(l) = r.latency_mean_ms {
            let _ = write!(line, " latency {l:.1} ms");
        }
        if r.error_rate > 0.0 {
            let _ = write!(line, " errors {:.2}%", r.error_rate * 100.0);
        }
        let _ = writeln!(s, "{}", line.split_whitespace().collect::<Vec<_>>().join(" "));
    }
    s
}

/// Writes `<dir>/<scenario>-<phase>.csv` and a `.summary.txt` next to it.
pub fn emit_report(rows: &[MetricsRow], dir: &Path, scenario: &str, phase: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{scenario}-{phase}.csv"));
    let file = fs::File::create(&path)?;
    write_csv(rows, file).map_err(io::Error::other)?;
    fs::write(path.with_extension("summary.txt"), summary(rows))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(n: u16, compute: f64) -> MetricsRow {
        MetricsRow {
            scenario: "s".into(),
            phase: "crypto".into(),
            t: Some(2),
            n: Some(n),
            step: "dkg".into(),
            round: "all".into(),
            samples: 3,
            compute_mean_ns: Some(compute),
            ..MetricsRow::default()
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut rows = vec![row(3, 9.5), row(5, 25.0)];
        rows[1].error_kind = Some("timeout".into());
        rows[1].error_rate = 0.25;
        rows[0].variant = Some("threshold, uc1".into());
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with("scenario,phase,t,n,users,variant,step,round,"));
        assert_eq!(read_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn summary_reports_the_fit() {
        let rows: Vec<_> = [3u16, 5, 9, 13].iter().map(|&n| row(n, (n * n) as f64)).collect();
        let fit = dkg_fit(&rows).unwrap();
        assert!((fit.a - 1.0).abs() < 1e-9);
        assert!(summary(&rows).contains("R² = 1.0000"));
    }
}
