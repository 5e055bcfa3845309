//! Field export (legacy VTK, CSV) and CSV-based error metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fields::Model;
use crate::material::{von_mises, GaussHistory};
use crate::optim::OptimTrace;
use crate::solver::{error_metrics, Metrics, SolutionState};
use crate::tensor::SymTensor;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("field length {got} does not match {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{0} and {1} have no comparable columns in common")]
    NoCommonColumns(PathBuf, PathBuf),
    #[error("{0} and {1} have different row counts")]
    RowCount(PathBuf, PathBuf),
}

/// Formats with 17 significant digits and a C-style exponent, which
/// round-trips every finite `f64`.
pub fn fmt_f64(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{x:.16e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

fn write_file(path: &Path, contents: &str) -> Result<(), OutputError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| OutputError::Write { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| OutputError::Write { path: path.to_path_buf(), source })
}

/// Element-averaged quantities for cell output.
#[derive(Clone, Debug, PartialEq)]
pub struct CellFields {
    pub stress: Vec<SymTensor>,
    pub eq_plastic_strain: Vec<f64>,
    pub von_mises: Vec<f64>,
}

impl CellFields {
    /// Arithmetic means over each element's Gauss points.
    pub fn from_history(model: &Model, history: &[GaussHistory]) -> Self {
        let disc = &model.disc;
        let n = disc.mesh().n_elements();
        let mut out = CellFields { stress: Vec::with_capacity(n), eq_plastic_strain: Vec::with_capacity(n), von_mises: Vec::with_capacity(n) };
        for e in 0..n {
            let hs = &history[disc.gauss_range(e)];
            let w = 1.0 / hs.len() as f64;
            let mut s = SymTensor::default();
            let (mut a, mut vm) = (0.0, 0.0);
            for h in hs {
                s = s + h.sigma;
                a += h.plastic.alpha;
                vm += von_mises(&h.sigma);
            }
            out.stress.push(w * s);
            out.eq_plastic_strain.push(a * w);
            out.von_mises.push(vm * w);
        }
        out
    }
}

/// Legacy ASCII VTK unstructured grid with nodal displacements and
/// element-averaged stress, equivalent plastic strain and von Mises stress.
pub fn vtk_string(model: &Model, u: &[f64], cells: &CellFields) -> Result<String, OutputError> {
    let mesh = model.disc.mesh();
    let dim = mesh.dim();
    if u.len() != mesh.n_dofs() {
        return Err(OutputError::LengthMismatch { expected: mesh.n_dofs(), got: u.len() });
    }
    let n_el = mesh.n_elements();
    for got in [cells.stress.len(), cells.eq_plastic_strain.len(), cells.von_mises.len()] {
        if got != n_el {
            return Err(OutputError::LengthMismatch { expected: n_el, got });
        }
    }
    let mut s = String::new();
    let f = fmt_f64;
    s.push_str("# vtk DataFile Version 3.0\nplasticgraph\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    writeln!(s, "POINTS {} double", mesh.n_nodes()).unwrap();
    for c in mesh.coords() {
        writeln!(s, "{} {} {}", f(c[0]), f(c[1]), f(c[2])).unwrap();
    }
    let size: usize = mesh.elements().iter().map(|e| e.nodes.len() + 1).sum();
    writeln!(s, "CELLS {n_el} {size}").unwrap();
    for el in mesh.elements() {
        s.push_str(&el.nodes.len().to_string());
        for n in &el.nodes {
            write!(s, " {n}").unwrap();
        }
        s.push('\n');
    }
    writeln!(s, "CELL_TYPES {n_el}").unwrap();
    for el in mesh.elements() {
        writeln!(s, "{}", el.kind.vtk_cell_type()).unwrap();
    }
    writeln!(s, "POINT_DATA {}\nVECTORS displacement double", mesh.n_nodes()).unwrap();
    for node in u.chunks(dim) {
        let mut v = [0.0; 3];
        v[..dim].copy_from_slice(node);
        writeln!(s, "{} {} {}", f(v[0]), f(v[1]), f(v[2])).unwrap();
    }
    writeln!(s, "CELL_DATA {n_el}\nTENSORS stress double").unwrap();
    for t in &cells.stress {
        let m = t.to_matrix();
        for i in 0..3 {
            writeln!(s, "{} {} {}", f(m[(i, 0)]), f(m[(i, 1)]), f(m[(i, 2)])).unwrap();
        }
    }
    for (name, values) in [("eq_plastic_strain", &cells.eq_plastic_strain), ("von_mises", &cells.von_mises)] {
        writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
        for v in values {
            writeln!(s, "{}", f(*v)).unwrap();
        }
    }
    Ok(s)
}

pub fn write_vtk(path: &Path, model: &Model, u: &[f64], cells: &CellFields) -> Result<(), OutputError> {
    write_file(path, &vtk_string(model, u, cells)?)
}

const AXES: [&str; 3] = ["x", "y", "z"];
const COMPONENTS: [&str; 6] = ["xx", "yy", "zz", "yz", "xz", "xy"];

/// Nodal CSV: node id, coordinates and displacement components.
pub fn nodal_csv(model: &Model, u: &[f64]) -> Result<String, OutputError> {
    let mesh = model.disc.mesh();
    let dim = mesh.dim();
    if u.len() != mesh.n_dofs() {
        return Err(OutputError::LengthMismatch { expected: mesh.n_dofs(), got: u.len() });
    }
    let mut s = String::from("node");
    for a in &AXES[..dim] {
        write!(s, ",{a}").unwrap();
    }
    for a in &AXES[..dim] {
        write!(s, ",u_{a}").unwrap();
    }
    s.push('\n');
    for (n, c) in mesh.coords().iter().enumerate() {
        s.push_str(&n.to_string());
        for v in c[..dim].iter().chain(&u[n * dim..(n + 1) * dim]) {
            write!(s, ",{}", fmt_f64(*v)).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

/// Gauss-point CSV: location, strain, stress, equivalent plastic strain and
/// von Mises stress of the committed history.
pub fn gauss_csv(model: &Model, history: &[GaussHistory]) -> Result<String, OutputError> {
    let disc = &model.disc;
    if history.len() != disc.n_gauss() {
        return Err(OutputError::LengthMismatch { expected: disc.n_gauss(), got: history.len() });
    }
    let mesh = disc.mesh();
    let mut s = String::from("element,gauss,x,y,z");
    for prefix in ["eps", "sigma"] {
        for c in COMPONENTS {
            write!(s, ",{prefix}_{c}").unwrap();
        }
    }
    s.push_str(",alpha,von_mises\n");
    for (e, geo) in disc.geometry().iter().enumerate() {
        let coords = mesh.element_coords(e);
        for (g, (gp, h)) in geo.gauss.iter().zip(&history[disc.gauss_range(e)]).enumerate() {
            let mut x = [0.0; 3];
            for (nv, c) in gp.values.iter().zip(&coords) {
                for k in 0..3 {
                    x[k] += nv * c[k];
                }
            }
            write!(s, "{e},{g}").unwrap();
            let values = x.iter().chain(&h.eps.0).chain(&h.sigma.0).copied();
            for v in values.chain([h.plastic.alpha, von_mises(&h.sigma)]) {
                write!(s, ",{}", fmt_f64(v)).unwrap();
            }
            s.push('\n');
        }
    }
    Ok(s)
}

pub const TRACE_HEADER: &str = "iter,loss,grad_inf,step_len,fevals";

/// Concatenated optimizer traces with iteration and evaluation counters
/// continued across traces. Returns the CSV and, per trace, the range of
/// global iteration numbers it occupies.
pub fn trace_csv(traces: &[&OptimTrace]) -> (String, Vec<(usize, usize)>) {
    let mut s = format!("{TRACE_HEADER}\n");
    let (mut iter0, mut fevals0) = (0, 0);
    let mut ranges = Vec::with_capacity(traces.len());
    for t in traces {
        for row in &t.rows {
            writeln!(
                s,
                "{},{},{},{},{}",
                iter0 + row.iter,
                fmt_f64(row.loss),
                fmt_f64(row.grad_inf),
                fmt_f64(row.step_len),
                fevals0 + row.fevals
            )
            .unwrap();
        }
        ranges.push((iter0, iter0 + t.iterations()));
        iter0 += t.iterations();
        fevals0 += t.fevals();
    }
    (s, ranges)
}

pub const SUMMARY_HEADER: &str = "step,label,first_iter,last_iter,iterations,termination,converged,loss,residual_inf,mae,l2";

/// One summary row per step; `metrics` holds the comparison against a
/// reference when one was supplied.
pub fn summary_csv(states: &[SolutionState], metrics: &[Option<Metrics>]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    let traces: Vec<&OptimTrace> = states.iter().flat_map(|st| &st.traces).collect();
    let (_, ranges) = trace_csv(&traces);
    let mut k = 0;
    for (i, st) in states.iter().enumerate() {
        let n = st.traces.len();
        let (first, last) = if n == 0 { (0, 0) } else { (ranges[k].0, ranges[k + n - 1].1) };
        k += n;
        let termination = st.termination().map_or_else(|| "none".to_string(), |t| t.to_string());
        let (mae, l2) = match metrics.get(i).copied().flatten() {
            Some(m) => (fmt_f64(m.mae), m.l2.map_or_else(|| "NA".into(), fmt_f64)),
            None => ("NA".into(), "NA".into()),
        };
        writeln!(
            s,
            "{},{},{first},{last},{},{termination},{},{},{},{mae},{l2}",
            i + 1,
            st.label,
            st.iterations(),
            st.converged,
            fmt_f64(st.loss),
            fmt_f64(st.residual_inf)
        )
        .unwrap();
    }
    s
}

/// What to write after a solve.
#[derive(Clone, Copy, Debug)]
pub struct OutputSelection {
    pub vtk: bool,
    pub nodal_csv: bool,
    pub gauss_csv: bool,
}

/// Writes `step_NNN.vtk`, `fields_NNN.csv`, `gauss_NNN.csv` per step plus
/// `trace.csv` and `summary.csv` into `dir`. Returns the written paths.
pub fn write_results(
    dir: &Path,
    model: &Model,
    states: &[SolutionState],
    metrics: &[Option<Metrics>],
    select: OutputSelection,
) -> Result<Vec<PathBuf>, OutputError> {
    let mut written = Vec::new();
    let mut put = |name: String, contents: String| -> Result<(), OutputError> {
        let path = dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
        Ok(())
    };
    for (i, st) in states.iter().enumerate() {
        let n = i + 1;
        if select.vtk {
            let cells = CellFields::from_history(model, &st.history);
            put(format!("step_{n:03}.vtk"), vtk_string(model, &st.u, &cells)?)?;
        }
        if select.nodal_csv {
            put(format!("fields_{n:03}.csv"), nodal_csv(model, &st.u)?)?;
        }
        if select.gauss_csv {
            put(format!("gauss_{n:03}.csv"), gauss_csv(model, &st.history)?)?;
        }
    }
    let traces: Vec<&OptimTrace> = states.iter().flat_map(|st| &st.traces).collect();
    put("trace.csv".into(), trace_csv(&traces).0)?;
    put("summary.csv".into(), summary_csv(states, metrics))?;
    Ok(written)
}

/// Header and numeric rows of a CSV file written by this module.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericCsv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_numeric_csv(path: &Path) -> Result<NumericCsv, OutputError> {
    let text = fs::read_to_string(path).map_err(|source| OutputError::Read { path: path.to_path_buf(), source })?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| OutputError::Parse { path: path.to_path_buf(), line: 1, message: "empty file".into() })?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| OutputError::Parse { path: path.to_path_buf(), line: i + 2, message: e.to_string() })?;
        if row.len() != header.len() {
            return Err(OutputError::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: format!("{} values for {} columns", row.len(), header.len()),
            });
        }
        rows.push(row);
    }
    Ok(NumericCsv { header, rows })
}

const IDENTIFIER_COLUMNS: [&str; 5] = ["node", "element", "gauss", "iter", "fevals"];

/// Columns compared by [`csv_metrics`]: displacement columns when present,
/// otherwise every shared non-identifier, non-coordinate column.
fn compared_columns(a: &NumericCsv, b: &NumericCsv) -> Vec<(usize, usize)> {
    let shared: Vec<(usize, usize)> = a
        .header
        .iter()
        .enumerate()
        .filter(|(_, h)| !IDENTIFIER_COLUMNS.contains(&h.as_str()) && !AXES.contains(&h.as_str()))
        .filter_map(|(i, h)| b.header.iter().position(|g| g == h).map(|j| (i, j)))
        .collect();
    let displacement: Vec<(usize, usize)> = shared.iter().copied().filter(|&(i, _)| a.header[i].starts_with("u_")).collect();
    if displacement.is_empty() {
        shared
    } else {
        displacement
    }
}

/// Error metrics of `fields` against `reference` over their shared
/// numeric columns, rows matched in order.
pub fn csv_metrics(fields: &Path, reference: &Path) -> Result<Metrics, OutputError> {
    let a = read_numeric_csv(fields)?;
    let b = read_numeric_csv(reference)?;
    if a.rows.len() != b.rows.len() {
        return Err(OutputError::RowCount(fields.to_path_buf(), reference.to_path_buf()));
    }
    let cols = compared_columns(&a, &b);
    if cols.is_empty() {
        return Err(OutputError::NoCommonColumns(fields.to_path_buf(), reference.to_path_buf()));
    }
    let mut u = Vec::with_capacity(a.rows.len() * cols.len());
    let mut r = Vec::with_capacity(u.capacity());
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        for &(i, j) in &cols {
            u.push(ra[i]);
            r.push(rb[j]);
        }
    }
    Ok(error_metrics(&u, &r))
}

/// Displacement vector (node-major) from a nodal CSV.
pub fn read_nodal_displacements(path: &Path) -> Result<Vec<f64>, OutputError> {
    let csv = read_numeric_csv(path)?;
    let cols: Vec<usize> = (0..csv.header.len()).filter(|&i| csv.header[i].starts_with("u_")).collect();
    if cols.is_empty() {
        return Err(OutputError::Parse { path: path.to_path_buf(), line: 1, message: "no displacement columns".into() });
    }
    Ok(csv.rows.iter().flat_map(|row| cols.iter().map(|&i| row[i])).collect())
}
