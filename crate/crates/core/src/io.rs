//! Dataset and parameter file formats.
//!
//! Datasets are single CSV files with header
//! `bag_id,instance_id,y,a,s,loc_x,loc_y,x0,...,x{p-1}`: `a` is -1/0/1
//! with -1 meaning unobserved, `s` is 0/1, and the location columns are
//! empty when absent. Floats are written in shortest round-trip form, so
//! write-then-read is lossless. Parameter files are long-format CSVs of
//! `(block, i, j, value)` rows.

use std::fmt::Write as _;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Bag, BagDataset, EstimatorKind, FitResult, Instance, InstanceLabel, ModelParams};

/// Which optional columns the source file carried.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ColumnsPresent {
    pub a: bool,
    pub s: bool,
    pub loc: bool,
}

fn fmt_f64(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").expect("write to string");
    s
}

/// Writes a dataset; see the module docs for the schema.
pub fn write_dataset(dataset: &BagDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("bag_id,instance_id,y,a,s,loc_x,loc_y");
    for j in 0..dataset.p {
        write!(header, ",x{j}").expect("write to string");
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut line = String::new();
    for bag in &dataset.bags {
        for inst in &bag.instances {
            line.clear();
            let a = match inst.a {
                InstanceLabel::Unobserved => -1,
                InstanceLabel::Negative => 0,
                InstanceLabel::Positive => 1,
            };
            write!(
                line,
                "{},{},{},{},{}",
                csv_escape(&bag.bag_id),
                csv_escape(&inst.instance_id),
                u8::from(bag.y),
                a,
                u8::from(inst.s)
            )
            .expect("write to string");
            match inst.loc {
                Some([lx, ly]) => {
                    write!(line, ",{},{}", fmt_f64(lx), fmt_f64(ly)).expect("write to string")
                }
                None => line.push_str(",,"),
            }
            for j in 0..dataset.p {
                line.push(',');
                line.push_str(&fmt_f64(inst.x[j]));
            }
            writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

/// Reads a dataset CSV. Rows of one bag must be contiguous. Returns the
/// dataset and which optional columns were present.
pub fn read_dataset(path: &Path) -> Result<(BagDataset, ColumnsPresent)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);

    let mut missing: Vec<String> = Vec::new();
    let required = ["bag_id", "instance_id", "y"];
    let mut req_idx = [0usize; 3];
    for (k, name) in required.iter().enumerate() {
        match col(name) {
            Some(i) => req_idx[k] = i,
            None => missing.push((*name).to_string()),
        }
    }
    // x columns must be contiguous x0..x{p-1}.
    let mut x_idx = Vec::new();
    let mut j = 0usize;
    while let Some(i) = col(&format!("x{j}")) {
        x_idx.push(i);
        j += 1;
    }
    if x_idx.is_empty() {
        missing.push("x0".to_string());
    }
    if !missing.is_empty() {
        return Err(Error::Schema { path: path.display().to_string(), missing });
    }
    let p = x_idx.len();
    let present = ColumnsPresent {
        a: col("a").is_some(),
        s: col("s").is_some(),
        loc: col("loc_x").is_some() && col("loc_y").is_some(),
    };
    let a_idx = col("a");
    let s_idx = col("s");
    let lx_idx = col("loc_x");
    let ly_idx = col("loc_y");

    let mut bags: Vec<Bag> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");

        let bag_id = field(req_idx[0]).to_string();
        let instance_id = field(req_idx[1]).to_string();
        let y = match field(req_idx[2]) {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, line, format!("y must be 0/1, got '{other}'"))),
        };
        let a = match a_idx {
            None => InstanceLabel::Unobserved,
            Some(i) => match field(i) {
                "-1" | "" => InstanceLabel::Unobserved,
                "0" => InstanceLabel::Negative,
                "1" => InstanceLabel::Positive,
                other => {
                    return Err(parse_err(path, line, format!("a must be -1/0/1, got '{other}'")))
                }
            },
        };
        let s = match s_idx {
            None => false,
            Some(i) => match field(i) {
                "0" | "" => false,
                "1" => true,
                other => {
                    return Err(parse_err(path, line, format!("s must be 0/1, got '{other}'")))
                }
            },
        };
        let loc = match (lx_idx, ly_idx) {
            (Some(ix), Some(iy)) => {
                let (fx, fy) = (field(ix), field(iy));
                if fx.is_empty() && fy.is_empty() {
                    None
                } else {
                    let lx = fx.parse::<f64>().map_err(|e| {
                        parse_err(path, line, format!("loc_x '{fx}': {e}"))
                    })?;
                    let ly = fy.parse::<f64>().map_err(|e| {
                        parse_err(path, line, format!("loc_y '{fy}': {e}"))
                    })?;
                    Some([lx, ly])
                }
            }
            _ => None,
        };
        let mut x = DVector::zeros(p);
        for (k, &i) in x_idx.iter().enumerate() {
            let fv = field(i);
            x[k] = fv
                .parse::<f64>()
                .map_err(|e| parse_err(path, line, format!("x{k} '{fv}': {e}")))?;
        }

        let start_new = match bags.last() {
            None => true,
            Some(last) => last.bag_id != bag_id,
        };
        if start_new {
            bags.push(Bag { bag_id: bag_id.clone(), y, instances: Vec::new() });
        } else if let Some(last) = bags.last() {
            if last.y != y {
                return Err(parse_err(
                    path,
                    line,
                    format!("bag {bag_id} has inconsistent y values"),
                ));
            }
        }
        let mut inst = Instance::new(instance_id, x);
        inst.a = a;
        inst.s = s;
        inst.loc = loc;
        bags.last_mut().expect("bag pushed above").instances.push(inst);
    }
    Ok((BagDataset::new(bags, p), present))
}

/// Writes parameters as `(block, i, j, value)` rows: `alpha`, `pi`,
/// `mu1`, `mu0`, then the full symmetric `sigma`.
pub fn write_params(params: &ModelParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<std::fs::File>, block: &str, i: usize, j: usize, v: f64| {
        writeln!(w, "{block},{i},{j},{}", fmt_f64(v))
            .map_err(|e| Error::io(path.display().to_string(), e))
    };
    writeln!(w, "block,i,j,value").map_err(|e| Error::io(path.display().to_string(), e))?;
    emit(&mut w, "alpha", 0, 0, params.alpha)?;
    emit(&mut w, "pi", 0, 0, params.pi)?;
    let p = params.p();
    for i in 0..p {
        emit(&mut w, "mu1", i, 0, params.mu1[i])?;
    }
    for i in 0..p {
        emit(&mut w, "mu0", i, 0, params.mu0[i])?;
    }
    for j in 0..p {
        for i in 0..p {
            emit(&mut w, "sigma", i, j, params.sigma[(i, j)])?;
        }
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a parameter file written by [`write_params`].
pub fn read_params(path: &Path) -> Result<ModelParams> {
    let mut text = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut alpha = None;
    let mut pi = None;
    let mut mu1: Vec<(usize, f64)> = Vec::new();
    let mut mu0: Vec<(usize, f64)> = Vec::new();
    let mut sigma: Vec<(usize, usize, f64)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln as u64 + 1;
        if ln == 0 || line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(parse_err(path, line_no, "expected block,i,j,value"));
        }
        let i: usize =
            parts[1].parse().map_err(|e| parse_err(path, line_no, format!("i: {e}")))?;
        let j: usize =
            parts[2].parse().map_err(|e| parse_err(path, line_no, format!("j: {e}")))?;
        let v: f64 =
            parts[3].parse().map_err(|e| parse_err(path, line_no, format!("value: {e}")))?;
        match parts[0] {
            "alpha" => alpha = Some(v),
            "pi" => pi = Some(v),
            "mu1" => mu1.push((i, v)),
            "mu0" => mu0.push((i, v)),
            "sigma" => sigma.push((i, j, v)),
            other => return Err(parse_err(path, line_no, format!("unknown block '{other}'"))),
        }
    }
    let missing: Vec<String> = [
        (alpha.is_none(), "alpha"),
        (pi.is_none(), "pi"),
        (mu1.is_empty(), "mu1"),
        (mu0.is_empty(), "mu0"),
        (sigma.is_empty(), "sigma"),
    ]
    .iter()
    .filter(|(m, _)| *m)
    .map(|(_, n)| n.to_string())
    .collect();
    if !missing.is_empty() {
        return Err(Error::Schema { path: path.display().to_string(), missing });
    }
    let p = mu1.len();
    let build_vec = |entries: &[(usize, f64)], name: &str| -> Result<DVector<f64>> {
        let mut v = DVector::zeros(p);
        for &(i, val) in entries {
            if i >= p {
                return Err(parse_err(path, 0, format!("{name} index {i} out of range")));
            }
            v[i] = val;
        }
        Ok(v)
    };
    let mu1 = build_vec(&mu1, "mu1")?;
    let mu0v = build_vec(&mu0, "mu0")?;
    let mut sig = DMatrix::zeros(p, p);
    for (i, j, v) in sigma {
        if i >= p || j >= p {
            return Err(parse_err(path, 0, format!("sigma index ({i},{j}) out of range")));
        }
        sig[(i, j)] = v;
    }
    Ok(ModelParams {
        pi: pi.expect("checked"),
        mu1,
        mu0: mu0v,
        sigma: sig,
        alpha: alpha.expect("checked"),
    })
}

/// Writes the convergence diagnostics of a fit next to its parameters.
pub fn write_fit_summary(fit: &FitResult, manifest: &str, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let last_ll = fit.loglik_trace.last().copied();
    (|| -> std::io::Result<()> {
        writeln!(w, "estimator={}", fit.estimator_kind.as_str())?;
        writeln!(w, "converged={}", fit.converged)?;
        writeln!(w, "iterations={}", fit.iterations)?;
        writeln!(w, "ridge_events={}", fit.ridge_events)?;
        match last_ll {
            Some(ll) => writeln!(w, "final_loglik={}", fmt_f64(ll))?,
            None => writeln!(w, "final_loglik=")?,
        }
        for line in manifest.lines() {
            writeln!(w, "# {line}")?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes the log-likelihood trace as `(iter, loglik)` rows.
pub fn write_trace(fit: &FitResult, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "iter,loglik")?;
        for (i, ll) in fit.loglik_trace.iter().enumerate() {
            writeln!(w, "{i},{}", fmt_f64(*ll))?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes a dense matrix as CSV with a leading manifest comment.
pub fn write_matrix(matrix: &DMatrix<f64>, manifest: &str, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        for line in manifest.lines() {
            writeln!(w, "# {line}")?;
        }
        for i in 0..matrix.nrows() {
            let row: Vec<String> = (0..matrix.ncols()).map(|j| fmt_f64(matrix[(i, j)])).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a fit result back from params/summary files (params only; the
/// trace is not needed to predict).
pub fn read_params_as_fit(path: &Path, kind: EstimatorKind) -> Result<FitResult> {
    Ok(FitResult {
        params: read_params(path)?,
        estimator_kind: kind,
        loglik_trace: Vec::new(),
        iterations: 0,
        converged: true,
        ridge_events: 0,
    })
}
