//! CSV and JSON formats. Every float is written with 17 significant digits.

use std::io::{self, Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::composite::{FittedModel, Method};
use crate::design::{Partition, SlicedDesign};
use crate::error::{GpError, Result};
use crate::kernel::{BasisSpec, RoughnessParams};
use crate::model::{Dataset, GpParams};
use crate::optim::TracePoint;
use crate::predict::PredictionResult;

/// 17 significant digits in scientific notation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn x_header(p: usize) -> Vec<String> {
    (1..=p).map(|i| format!("x{i}")).collect()
}

fn parse_f64(s: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| GpError::InvalidArgument(format!("row {row}, column {col}: '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(GpError::InvalidArgument(format!("row {row}, column {col}: non-finite value")));
    }
    Ok(v)
}

/// Leading `x1..xp` columns of a header, checked for order.
fn count_x_columns(headers: &csv::StringRecord) -> Result<usize> {
    let p = headers.iter().take_while(|h| h.starts_with('x')).count();
    if p == 0 {
        return Err(GpError::InvalidArgument("header must start with x1".into()));
    }
    for (i, h) in headers.iter().take(p).enumerate() {
        if h != format!("x{}", i + 1) {
            return Err(GpError::InvalidArgument(format!("expected column x{} but found '{h}'", i + 1)));
        }
    }
    Ok(p)
}

/// Reads `x1..xp,y[,slice]`; slice labels in the file are 1-based.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let p = count_x_columns(&headers)?;
    let rest: Vec<&str> = headers.iter().skip(p).collect();
    let has_slice = match rest.as_slice() {
        ["y"] => false,
        ["y", "slice"] => true,
        _ => return Err(GpError::InvalidArgument("dataset header must be x1..xp,y[,slice]".into())),
    };
    let (mut xs, mut ys, mut slices) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 2;
        for j in 0..p {
            xs.push(parse_f64(&rec[j], row, &headers[j])?);
        }
        ys.push(parse_f64(&rec[p], row, "y")?);
        if has_slice {
            let s: usize = rec[p + 1]
                .parse()
                .map_err(|_| GpError::InvalidArgument(format!("row {row}: slice label '{}' is not a positive integer", &rec[p + 1])))?;
            if s == 0 {
                return Err(GpError::InvalidArgument(format!("row {row}: slice labels start at 1")));
            }
            slices.push(s - 1);
        }
    }
    if ys.is_empty() {
        return Err(GpError::InvalidArgument("dataset has no rows".into()));
    }
    let x = DMatrix::from_row_slice(ys.len(), p, &xs);
    Dataset::new(x, DVector::from_vec(ys), has_slice.then_some(slices))
}

pub fn write_dataset<W: Write>(writer: W, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = x_header(ds.p());
    header.push("y".into());
    if ds.slices.is_some() {
        header.push("slice".into());
    }
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| fmt_f64(*v)).collect();
        rec.push(fmt_f64(ds.y[i]));
        if let Some(s) = &ds.slices {
            rec.push((s[i] + 1).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `x1..xp` test points; extra trailing columns are ignored.
pub fn read_points<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let p = count_x_columns(&headers)?;
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        out.push((0..p).map(|j| parse_f64(&rec[j], r + 2, &headers[j])).collect::<Result<Vec<_>>>()?);
    }
    Ok(out)
}

/// Reads `x1..xp[,slice]`, returning the points and 0-based slice labels.
pub fn read_labeled_points<R: Read>(reader: R) -> Result<(Vec<Vec<f64>>, Option<Vec<usize>>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let p = count_x_columns(&headers)?;
    let has_slice = match headers.iter().skip(p).collect::<Vec<_>>().as_slice() {
        [] => false,
        ["slice"] => true,
        _ => return Err(GpError::InvalidArgument("point header must be x1..xp[,slice]".into())),
    };
    let (mut pts, mut labels) = (Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        pts.push((0..p).map(|j| parse_f64(&rec[j], r + 2, &headers[j])).collect::<Result<Vec<_>>>()?);
        if has_slice {
            match rec[p].parse::<usize>() {
                Ok(s) if s >= 1 => labels.push(s - 1),
                _ => return Err(GpError::InvalidArgument(format!("row {}: bad slice label '{}'", r + 2, &rec[p]))),
            }
        }
    }
    Ok((pts, has_slice.then_some(labels)))
}

/// `start,eval,phi1..phip,objective` with 1-based start and evaluation.
pub fn write_trace<W: Write>(writer: W, trace: &[TracePoint]) -> Result<()> {
    let p = trace.first().map_or(1, |t| t.x.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["start".to_string(), "eval".to_string()];
    header.extend((1..=p).map(|i| format!("phi{i}")));
    header.push("objective".into());
    w.write_record(&header)?;
    for t in trace {
        let mut rec = vec![(t.start + 1).to_string(), t.eval.to_string()];
        rec.extend(t.x.iter().map(|v| fmt_f64(v.exp())));
        rec.push(fmt_f64(t.value));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_points<W: Write>(writer: W, points: &[Vec<f64>]) -> Result<()> {
    let p = points.first().map_or(1, Vec::len);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(x_header(p))?;
    for x in points {
        w.write_record(x.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// `x1..xp,mean,sd,lo3,hi3` with three-sigma bands.
pub fn write_predictions<W: Write>(writer: W, points: &[Vec<f64>], preds: &[PredictionResult]) -> Result<()> {
    if points.len() != preds.len() {
        return Err(GpError::DimensionMismatch { expected: points.len(), got: preds.len() });
    }
    let p = points.first().map_or(1, Vec::len);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = x_header(p);
    header.extend(["mean", "sd", "lo3", "hi3"].map(String::from));
    w.write_record(&header)?;
    for (x, r) in points.iter().zip(preds) {
        let sd = r.sd();
        let mut rec: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
        rec.extend([r.mean, sd, r.mean - 3.0 * sd, r.mean + 3.0 * sd].map(fmt_f64));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `x1..xp,slice` with 1-based slice labels.
pub fn write_design<W: Write>(writer: W, points: &DMatrix<f64>, design: &SlicedDesign) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = x_header(points.ncols());
    header.push("slice".into());
    w.write_record(&header)?;
    for i in 0..points.nrows() {
        let mut rec: Vec<String> = points.row(i).iter().map(|v| fmt_f64(*v)).collect();
        rec.push((design.slice_of[i] + 1).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `index,block`, both 1-based.
pub fn write_partition<W: Write>(writer: W, partition: &Partition) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "block"])?;
    for (i, b) in partition.labels().iter().enumerate() {
        w.write_record([(i + 1).to_string(), (b + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Serialized form of a [`FittedModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    pub method: Method,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub phi: Vec<f64>,
    pub objective: f64,
    pub wall_time_s: f64,
    #[serde(default = "default_basis")]
    pub basis: String,
    #[serde(default)]
    pub converged: bool,
    #[serde(default)]
    pub evaluations: usize,
    #[serde(default)]
    pub k: Option<usize>,
    /// 1-based block label of every data row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<usize>>,
}

fn default_basis() -> String {
    "constant".into()
}

impl ModelDoc {
    pub fn from_model(m: &FittedModel) -> Result<Self> {
        if matches!(m.basis, BasisSpec::Custom(_)) {
            return Err(GpError::InvalidArgument("custom basis functions cannot be serialized".into()));
        }
        Ok(Self {
            method: m.method,
            beta: m.params.beta.clone(),
            sigma2: m.params.sigma2,
            phi: m.params.phi.as_slice().to_vec(),
            objective: m.objective,
            wall_time_s: m.wall_time_s,
            basis: m.basis.name().into(),
            converged: m.converged,
            evaluations: m.evaluations,
            k: m.partition.as_ref().map(Partition::k),
            blocks: m.partition.as_ref().map(|p| p.labels().iter().map(|b| b + 1).collect()),
        })
    }

    pub fn into_model(self) -> Result<FittedModel> {
        let phi = RoughnessParams::new(self.phi)?;
        let params = GpParams::new(self.beta, self.sigma2, phi)?;
        let partition = match self.blocks {
            Some(labels) => {
                if labels.contains(&0) {
                    return Err(GpError::InvalidArgument("block labels start at 1".into()));
                }
                let zero: Vec<usize> = labels.iter().map(|b| b - 1).collect();
                Some(Partition::from_labels(&zero)?)
            }
            None => None,
        };
        Ok(FittedModel {
            params,
            basis: BasisSpec::from_name(&self.basis)?,
            method: self.method,
            partition,
            objective: self.objective,
            wall_time_s: self.wall_time_s,
            converged: self.converged,
            evaluations: self.evaluations,
        })
    }
}

pub fn model_to_json(m: &FittedModel) -> Result<String> {
    to_json(&ModelDoc::from_model(m)?)
}

pub fn model_from_json(s: &str) -> Result<FittedModel> {
    serde_json::from_str::<ModelDoc>(s)?.into_model()
}

/// Pretty JSON with 17-significant-digit floats. Non-finite values become
/// `null`.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigFormatter::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

#[derive(Default)]
struct SigFormatter {
    pretty: serde_json::ser::PrettyFormatter<'static>,
}

impl serde_json::ser::Formatter for SigFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt_f64(value).as_bytes())
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object_value(w)
    }
}
