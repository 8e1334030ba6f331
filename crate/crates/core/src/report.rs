//! CSV emission and parsing.
//!
//! Every file starts with `# key=value` metadata lines followed by a header
//! row. Floats are written in shortest round-trip form, so parsing a file
//! reproduces the written values bit for bit.

use crate::analysis::{ConvergenceRow, ConvergenceTable, RateFit};
use crate::error::{HambitError, Result};
use crate::hilbert::GridFunction;
use crate::simulate::PathEnsemble;
use nalgebra::DMatrix;
use std::fs;
use std::path::Path;

/// A parsed or pending CSV document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvDoc {
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn csv_err(path: &Path, reason: impl ToString) -> HambitError {
    HambitError::Csv {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

impl CsvDoc {
    pub fn new(header: &[&str]) -> Self {
        Self {
            meta: Vec::new(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_meta(mut self, meta: &[(String, String)]) -> Self {
        self.meta.extend(meta.iter().cloned());
        self
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (k, v) in &self.meta {
            out.extend_from_slice(format!("# {k}={v}\n").as_bytes());
        }
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| HambitError::Csv {
            path: "<memory>".into(),
            reason: e.to_string(),
        };
        w.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            w.write_record(row).map_err(io)?;
        }
        w.into_inner().map_err(|e| HambitError::Csv {
            path: "<memory>".into(),
            reason: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|source| HambitError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| HambitError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut meta = Vec::new();
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let Some(rest) = line.strip_prefix('#') else { break };
            let rest = rest.trim();
            let (k, v) = rest.split_once('=').ok_or_else(|| csv_err(path, format!("bad metadata line `{rest}`")))?;
            meta.push((k.trim().to_string(), v.trim().to_string()));
            body_start += line.len();
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(&text.as_bytes()[body_start..]);
        let header = reader
            .headers()
            .map_err(|e| csv_err(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()).map_err(|e| csv_err(path, e)))
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(Self { meta, header, rows })
    }
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str) -> Result<T> {
    field.parse().map_err(|_| csv_err(path, format!("cannot parse `{field}`")))
}

fn require_column(doc: &CsvDoc, path: &Path, name: &str) -> Result<usize> {
    doc.column(name).ok_or_else(|| csv_err(path, format!("missing column `{name}`")))
}

fn coordinate_header(prefix: &str, dim: usize) -> Vec<String> {
    (0..dim).map(|c| format!("{prefix}{c}")).collect()
}

/// Columns `path, step, t, x0..x{d−1}`, one row per path and time.
pub fn ensemble_doc(ensemble: &PathEnsemble, meta: &[(String, String)]) -> CsvDoc {
    let mut doc = CsvDoc::new(&["path", "step", "t"]).with_meta(meta);
    doc.push_meta("seed", ensemble.seed());
    doc.push_meta("dim", ensemble.dim());
    doc.push_meta("n_paths", ensemble.n_paths());
    doc.header.extend(coordinate_header("x", ensemble.dim()));
    for p in 0..ensemble.n_paths() {
        for (k, &t) in ensemble.times().iter().enumerate() {
            let mut row = vec![p.to_string(), k.to_string(), fmt_f64(t)];
            row.extend(ensemble.value(p, k).iter().map(|&v| fmt_f64(v)));
            doc.rows.push(row);
        }
    }
    doc
}

pub fn write_ensemble(path: &Path, ensemble: &PathEnsemble, meta: &[(String, String)]) -> Result<()> {
    ensemble_doc(ensemble, meta).write(path)
}

pub fn read_ensemble(path: &Path) -> Result<PathEnsemble> {
    let doc = CsvDoc::read(path)?;
    let dim: usize = parse(path, doc.meta_value("dim").ok_or_else(|| csv_err(path, "missing `dim` metadata"))?)?;
    let n_paths: usize = parse(path, doc.meta_value("n_paths").ok_or_else(|| csv_err(path, "missing `n_paths`"))?)?;
    let seed: u64 = parse(path, doc.meta_value("seed").unwrap_or("0"))?;
    let t_col = require_column(&doc, path, "t")?;
    let x0 = require_column(&doc, path, "x0")?;
    if n_paths == 0 {
        return PathEnsemble::new(Vec::new(), dim, 0, Vec::new(), seed);
    }
    if doc.rows.len() % n_paths != 0 {
        return Err(csv_err(path, "row count is not a multiple of n_paths"));
    }
    let n_times = doc.rows.len() / n_paths;
    let times = doc.rows[..n_times]
        .iter()
        .map(|r| parse(path, &r[t_col]))
        .collect::<Result<Vec<f64>>>()?;
    let mut data = Vec::with_capacity(doc.rows.len() * dim);
    for row in &doc.rows {
        for c in 0..dim {
            data.push(parse(path, row.get(x0 + c).ok_or_else(|| csv_err(path, "short row"))?)?);
        }
    }
    PathEnsemble::new(times, dim, n_paths, data, seed)
}

/// Columns `level, dx, dt, lambda, n_paths, mse, stderr, bound_rhs`.
pub fn convergence_doc(table: &ConvergenceTable, meta: &[(String, String)]) -> CsvDoc {
    let mut doc = CsvDoc::new(&["level", "dx", "dt", "lambda", "n_paths", "mse", "stderr", "bound_rhs"]).with_meta(meta);
    for r in &table.rows {
        doc.rows.push(vec![
            r.level.to_string(),
            fmt_f64(r.dx),
            fmt_f64(r.dt),
            fmt_f64(r.lambda),
            r.n_paths.to_string(),
            fmt_f64(r.mse),
            fmt_f64(r.stderr),
            fmt_f64(r.bound_rhs),
        ]);
    }
    doc
}

pub fn write_convergence(path: &Path, table: &ConvergenceTable, meta: &[(String, String)]) -> Result<()> {
    convergence_doc(table, meta).write(path)
}

pub fn read_convergence(path: &Path) -> Result<ConvergenceTable> {
    let doc = CsvDoc::read(path)?;
    let cols = ["level", "dx", "dt", "lambda", "n_paths", "mse", "stderr", "bound_rhs"]
        .map(|name| require_column(&doc, path, name));
    let [level, dx, dt, lambda, n_paths, mse, stderr, bound] = cols;
    let (level, dx, dt, lambda, n_paths, mse, stderr, bound) = (level?, dx?, dt?, lambda?, n_paths?, mse?, stderr?, bound?);
    let rows = doc
        .rows
        .iter()
        .map(|r| {
            Ok(ConvergenceRow {
                level: parse(path, &r[level])?,
                dx: parse(path, &r[dx])?,
                dt: parse(path, &r[dt])?,
                lambda: parse(path, &r[lambda])?,
                n_paths: parse(path, &r[n_paths])?,
                mse: parse(path, &r[mse])?,
                stderr: parse(path, &r[stderr])?,
                bound_rhs: parse(path, &r[bound])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceTable { rows })
}

/// One row per fitted predictor.
pub fn fit_doc(fits: &[(&str, &RateFit)], meta: &[(String, String)]) -> CsvDoc {
    let mut doc = CsvDoc::new(&[
        "predictor",
        "slope",
        "intercept",
        "r_squared",
        "slope_stderr",
        "ci_low",
        "ci_high",
        "used_levels",
        "dropped_coarsest",
    ])
    .with_meta(meta);
    for (name, fit) in fits {
        let used: Vec<String> = fit.used_levels.iter().map(usize::to_string).collect();
        doc.rows.push(vec![
            name.to_string(),
            fmt_f64(fit.slope),
            fmt_f64(fit.intercept),
            fmt_f64(fit.r_squared),
            fmt_f64(fit.slope_stderr),
            fmt_f64(fit.slope_ci.0),
            fmt_f64(fit.slope_ci.1),
            used.join(" "),
            fit.dropped_coarsest.to_string(),
        ]);
    }
    doc
}

/// Columns `row, c0..c{n−1}`.
pub fn matrix_doc(m: &DMatrix<f64>, meta: &[(String, String)]) -> CsvDoc {
    let mut doc = CsvDoc::new(&["row"]).with_meta(meta);
    doc.header.extend(coordinate_header("c", m.ncols()));
    for i in 0..m.nrows() {
        let mut row = vec![i.to_string()];
        row.extend((0..m.ncols()).map(|j| fmt_f64(m[(i, j)])));
        doc.rows.push(row);
    }
    doc
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, meta: &[(String, String)]) -> Result<()> {
    matrix_doc(m, meta).write(path)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let doc = CsvDoc::read(path)?;
    let ncols = doc.header.len().saturating_sub(1);
    let mut entries = Vec::with_capacity(doc.rows.len() * ncols);
    for row in &doc.rows {
        if row.len() != ncols + 1 {
            return Err(csv_err(path, "ragged matrix row"));
        }
        for v in &row[1..] {
            entries.push(parse(path, v)?);
        }
    }
    Ok(DMatrix::from_row_slice(doc.rows.len(), ncols, &entries))
}

/// Columns `path, node, x, y0..y{d−1}` for one field per path.
pub fn fields_doc(fields: &[GridFunction], meta: &[(String, String)]) -> CsvDoc {
    let dim = fields.first().map_or(0, GridFunction::dim);
    let mut doc = CsvDoc::new(&["path", "node", "x"]).with_meta(meta);
    doc.header.extend(coordinate_header("y", dim));
    for (p, f) in fields.iter().enumerate() {
        for j in 0..f.n_nodes() {
            let mut row = vec![p.to_string(), j.to_string(), fmt_f64(f.x(j))];
            row.extend(f.node(j).iter().map(|&v| fmt_f64(v)));
            doc.rows.push(row);
        }
    }
    doc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        let bytes = convergence_doc(&ConvergenceTable::default(), &[]).to_bytes().unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "level,dx,dt,lambda,n_paths,mse,stderr,bound_rhs\n");
    }

    #[test]
    fn floats_round_trip_exactly() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, f64::MAX, 5e-324, 0.0, 12345.678] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -0.2, 1.0 / 7.0, 3e-17, 4.0, 5.5]);
        write_matrix(&path, &m, &[("kind".into(), "test".into())]).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
        let doc = CsvDoc::read(&path).unwrap();
        assert_eq!(doc.meta_value("kind"), Some("test"));
    }

    #[test]
    fn ensemble_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let e = PathEnsemble::new(vec![0.0, 0.1, 0.2], 2, 2, (0..12).map(|i| i as f64 / 3.0).collect(), 42).unwrap();
        write_ensemble(&path, &e, &[]).unwrap();
        assert_eq!(read_ensemble(&path).unwrap(), e);
    }

    #[test]
    fn missing_file_names_path() {
        let err = CsvDoc::read(Path::new("/nonexistent/x.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.csv"));
    }
}
