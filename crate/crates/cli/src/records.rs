//! Observation CSV schema.
//!
//! Columns are `x_1..x_D, y, sigma, op, a_1..a_D, b_1..b_D`, with an optional
//! `n_nodes` column for integral rows. `op` is `identity`, `deriv:<d>` with a
//! zero-based `d`, or `integral`. Endpoint cells are filled on integral rows
//! only, and an integral row may leave `x` empty. Query files use the same
//! schema with `y` and `sigma` optional; a filled `y` is read as the truth.

use std::path::Path;

use gridgp::kernel::DEFAULT_MC_NODES;
use gridgp::{Observation, OperatorTag};

use crate::Failure;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub x: Vec<f64>,
    pub op: OperatorTag,
    pub y: Option<f64>,
    pub sigma: Option<f64>,
}

struct Columns {
    dim: usize,
    x: Vec<usize>,
    a: Vec<usize>,
    b: Vec<usize>,
    y: Option<usize>,
    sigma: Option<usize>,
    op: usize,
    n_nodes: Option<usize>,
}

fn numbered(header: &csv::StringRecord, prefix: &str) -> Vec<usize> {
    let mut out = Vec::new();
    while let Some(i) = header
        .iter()
        .position(|h| h.trim() == format!("{prefix}_{}", out.len() + 1))
    {
        out.push(i);
    }
    out
}

impl Columns {
    fn from_header(header: &csv::StringRecord) -> Result<Self, Failure> {
        let find = |name: &str| header.iter().position(|h| h.trim() == name);
        let x = numbered(header, "x");
        let a = numbered(header, "a");
        let b = numbered(header, "b");
        let dim = x.len().max(a.len());
        if dim == 0 {
            return Err(Failure::input("header has no x_1 or a_1 column"));
        }
        if !x.is_empty() && x.len() != dim {
            return Err(Failure::input(format!(
                "header has {} x columns but {dim} endpoint columns",
                x.len()
            )));
        }
        if a.len() != b.len() || (!a.is_empty() && a.len() != dim) {
            return Err(Failure::input(
                "a_* and b_* columns must both be absent or both have D entries",
            ));
        }
        let op = find("op").ok_or_else(|| Failure::input("header has no op column"))?;
        Ok(Self {
            dim,
            x,
            a,
            b,
            y: find("y"),
            sigma: find("sigma"),
            op,
            n_nodes: find("n_nodes"),
        })
    }
}

fn cell(row: &csv::StringRecord, i: usize) -> &str {
    row.get(i).unwrap_or("").trim()
}

fn number(row: &csv::StringRecord, i: usize, name: &str, n: usize) -> Result<Option<f64>, Failure> {
    let s = cell(row, i);
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Failure::input(format!("row {n}: {name} is not a number: {s:?}")))
}

/// All cells filled, or all empty.
fn vector(row: &csv::StringRecord, cols: &[usize], prefix: &str, n: usize) -> Result<Option<Vec<f64>>, Failure> {
    let vals = cols
        .iter()
        .enumerate()
        .map(|(d, &i)| number(row, i, &format!("{prefix}_{}", d + 1), n))
        .collect::<Result<Vec<_>, _>>()?;
    if vals.iter().all(Option::is_none) {
        return Ok(None);
    }
    if vals.iter().any(Option::is_none) {
        return Err(Failure::input(format!("row {n}: {prefix}_* cells are partly empty")));
    }
    Ok(Some(vals.into_iter().flatten().collect()))
}

fn parse_row(row: &csv::StringRecord, cols: &Columns, n: usize) -> Result<Record, Failure> {
    let x = vector(row, &cols.x, "x", n)?;
    let a = vector(row, &cols.a, "a", n)?;
    let b = vector(row, &cols.b, "b", n)?;
    let op_str = cell(row, cols.op);
    let op = if op_str == "identity" {
        OperatorTag::Identity
    } else if op_str == "integral" {
        let (Some(a), Some(b)) = (a.clone(), b.clone()) else {
            return Err(Failure::input(format!("row {n}: integral rows need a_* and b_*")));
        };
        let n_nodes = match cols.n_nodes.map(|i| cell(row, i)).filter(|s| !s.is_empty()) {
            Some(s) => s
                .parse::<usize>()
                .map_err(|_| Failure::input(format!("row {n}: n_nodes is not a count: {s:?}")))?,
            None => DEFAULT_MC_NODES,
        };
        OperatorTag::Integral { a, b, n_nodes }
    } else if let Some(d) = op_str.strip_prefix("deriv:") {
        let dim = d
            .parse::<usize>()
            .map_err(|_| Failure::input(format!("row {n}: malformed op {op_str:?}")))?;
        if dim >= cols.dim {
            return Err(Failure::input(format!(
                "row {n}: derivative index {dim} out of range for {} input dimensions",
                cols.dim
            )));
        }
        OperatorTag::Derivative { dim }
    } else {
        return Err(Failure::input(format!(
            "row {n}: malformed op {op_str:?} (expected identity, deriv:<d> or integral)"
        )));
    };
    if !matches!(op, OperatorTag::Integral { .. }) && (a.is_some() || b.is_some()) {
        return Err(Failure::input(format!(
            "row {n}: a_* and b_* are only allowed on integral rows"
        )));
    }
    let x = match (x, &op) {
        (Some(x), _) => x,
        (None, OperatorTag::Integral { .. }) => Vec::new(),
        (None, _) => return Err(Failure::input(format!("row {n}: x_* cells are empty"))),
    };
    Ok(Record {
        x,
        op,
        y: cols.y.map(|i| number(row, i, "y", n)).transpose()?.flatten(),
        sigma: cols.sigma.map(|i| number(row, i, "sigma", n)).transpose()?.flatten(),
    })
}

/// Input dimension and rows. Rows are numbered from 1 after the header.
pub fn read_records(path: &Path) -> Result<(usize, Vec<Record>), Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Failure::io(path, e))?;
    let rows: Vec<csv::StringRecord> = reader
        .records()
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::io(path, e))?;
    if rows.is_empty() {
        return Err(Failure::input(format!("{}: no observations", path.display())));
    }
    let header = reader.headers().map_err(|e| Failure::io(path, e))?.clone();
    let cols = Columns::from_header(&header)?;
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, row)| parse_row(row, &cols, i + 1))
        .collect::<Result<_, _>>()?;
    Ok((cols.dim, records))
}

/// Training observations: every row needs `y` and a positive `sigma`.
pub fn read_observations(path: &Path) -> Result<Vec<Observation>, Failure> {
    let (_, records) = read_records(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let n = i + 1;
            let y = r.y.ok_or_else(|| Failure::input(format!("row {n}: y is empty")))?;
            let sigma = r
                .sigma
                .ok_or_else(|| Failure::input(format!("row {n}: sigma is empty")))?;
            Observation::new(r.x, r.op, y, sigma).map_err(|e| Failure::input(format!("row {n}: {e}")))
        })
        .collect()
}

/// Writes rows under the observation schema. An `n_nodes` column is added
/// only when some integral row departs from the default node count.
pub fn write_records(path: &Path, dim: usize, records: &[Record]) -> Result<(), Failure> {
    let custom_nodes = records
        .iter()
        .any(|r| matches!(r.op, OperatorTag::Integral { n_nodes, .. } if n_nodes != DEFAULT_MC_NODES));
    let mut header: Vec<String> = (1..=dim).map(|d| format!("x_{d}")).collect();
    header.extend(["y".into(), "sigma".into(), "op".into()]);
    header.extend((1..=dim).map(|d| format!("a_{d}")));
    header.extend((1..=dim).map(|d| format!("b_{d}")));
    if custom_nodes {
        header.push("n_nodes".into());
    }
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::io(path, e))?;
    w.write_record(&header).map_err(|e| Failure::io(path, e))?;
    for r in records {
        let mut row: Vec<String> = if r.x.is_empty() {
            vec![String::new(); dim]
        } else {
            r.x.iter().map(f64::to_string).collect()
        };
        row.extend([opt(r.y), opt(r.sigma), r.op.label()]);
        match &r.op {
            OperatorTag::Integral { a, b, n_nodes } => {
                row.extend(a.iter().chain(b).map(f64::to_string));
                if custom_nodes {
                    row.push(n_nodes.to_string());
                }
            }
            _ => {
                row.extend(std::iter::repeat_n(String::new(), 2 * dim + usize::from(custom_nodes)));
            }
        }
        w.write_record(&row).map_err(|e| Failure::io(path, e))?;
    }
    w.flush().map_err(|e| Failure::io(path, e))
}

impl From<&Observation> for Record {
    fn from(o: &Observation) -> Self {
        Record {
            x: o.x.clone(),
            op: o.op.clone(),
            y: Some(o.y),
            sigma: Some(o.sigma),
        }
    }
}
