use std::path::{Path, PathBuf};

use super::{ResultSet, ScalingRow, SweepRow};
use crate::error::{Error, Result};

pub use crate::diagnostics::{NONCONVEX_HEADER, VARIANCE_HEADER};

pub const SWEEP_HEADER: &str = "family,n,stepsize,T_hit,hit";
pub const SCALING_HEADER: &str = "family,n,best_stepsize,T_best";

pub(super) fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{},{}\n",
            r.family.name(),
            r.n,
            r.stepsize,
            r.t_hit,
            r.hit
        ));
    }
    out
}

pub(super) fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = format!("{SCALING_HEADER}\n");
    for r in rows {
        let g = r
            .best_stepsize
            .map(|g| format!("{g:?}"))
            .unwrap_or_default();
        out.push_str(&format!("{},{},{g},{}\n", r.family.name(), r.n, r.t_best));
    }
    out
}

/// File name and contents for every output of `results`.
pub fn render(results: &ResultSet) -> Vec<(String, String)> {
    match results {
        ResultSet::Sweep(rows) => vec![("sweep.csv".into(), sweep_csv(rows))],
        ResultSet::Scaling(rows) => vec![("scaling.csv".into(), scaling_csv(rows))],
        ResultSet::Variance(rows) => {
            let mut out = format!("{VARIANCE_HEADER}\n");
            for r in rows {
                out.push_str(&r.report.csv_row(r.family.name(), r.n));
                out.push('\n');
            }
            vec![("variance.csv".into(), out)]
        }
        ResultSet::Nonconvex(rows) => {
            let mut out = format!("{NONCONVEX_HEADER}\n");
            for r in rows {
                out.push_str(&r.probe.csv_row(r.x, r.y, r.z));
                out.push('\n');
            }
            vec![("nonconvex.csv".into(), out)]
        }
        ResultSet::Run(runs) => runs
            .iter()
            .map(|r| {
                (
                    format!("trace_{}_n{}.csv", r.family.name(), r.n),
                    r.trace.to_csv(),
                )
            })
            .collect(),
    }
}

/// Writes every CSV of `results` into `dir` (created if missing), replacing
/// existing files. Returns the written paths.
pub fn write_results(results: &ResultSet, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    render(results)
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;

    #[test]
    fn headers_and_rows() {
        let rows = vec![SweepRow {
            family: Family::MeanField,
            n: 100,
            stepsize: 1e-6,
            t_hit: 60_000,
            hit: false,
            diverged: false,
            pruned: false,
            best: false,
        }];
        assert_eq!(
            sweep_csv(&rows),
            "family,n,stepsize,T_hit,hit\nmean_field,100,1e-6,60000,false\n"
        );
        let best = vec![ScalingRow {
            family: Family::Structured,
            n: 200,
            best_stepsize: Some(0.005),
            t_best: 150,
        }];
        assert_eq!(
            scaling_csv(&best),
            "family,n,best_stepsize,T_best\nstructured,200,0.005,150\n"
        );
    }

    #[test]
    fn unwritable_directory_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = write_results(&ResultSet::Scaling(vec![]), &blocker.join("sub")).unwrap_err();
        match err {
            Error::Io { path, .. } => assert!(path.starts_with(&blocker)),
            other => panic!("unexpected {other}"),
        }
    }
}
