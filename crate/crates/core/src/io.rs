//! File formats: JSON documents with full-precision floats, a raw binary
//! weight dump, and the dataset file (JSON header line plus CSV rows).

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::model::{Dataset, Image, Sample, Topology, WeightParts, WeightVector};

/// Pretty JSON formatter that writes every float as `d.dddddddddddddddde±x`
/// (17 significant digits), which round-trips any `f64` exactly.
struct PreciseFormatter<'a>(PrettyFormatter<'a>);

macro_rules! delegate {
    ($($name:ident $(, $arg:ident : $ty:ty)*);* $(;)?) => {
        $(
            fn $name<W: ?Sized + Write>(&mut self, writer: &mut W $(, $arg: $ty)*) -> std::io::Result<()> {
                self.0.$name(writer $(, $arg)*)
            }
        )*
    };
}

impl Formatter for PreciseFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    delegate! {
        begin_array;
        end_array;
        begin_array_value, first: bool;
        end_array_value;
        begin_object;
        end_object;
        begin_object_key, first: bool;
        end_object_key;
        begin_object_value;
        end_object_value;
    }
}

/// Serializes `value` as indented JSON with 17-significant-digit floats and
/// a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightsDocument {
    topology: Topology,
    outer: Vec<f64>,
    filters: Vec<f64>,
    biases: Vec<f64>,
}

/// `{topology, outer, filters, biases}` with each group in canonical order.
pub fn weights_to_json(weights: &WeightVector) -> Result<String> {
    let WeightParts { outer, filters, biases } = weights.to_parts();
    to_json(&WeightsDocument {
        topology: weights.topology().clone(),
        outer,
        filters,
        biases,
    })
}

pub fn weights_from_json(text: &str) -> Result<WeightVector> {
    let doc: WeightsDocument = serde_json::from_str(text)?;
    doc.topology.check()?;
    WeightVector::from_parts(
        &doc.topology,
        WeightParts {
            outer: doc.outer,
            filters: doc.filters,
            biases: doc.biases,
        },
    )
}

pub const WEIGHTS_MAGIC: &[u8; 8] = b"OCNNWTS1";

/// Magic, parameter count (u64 LE), then every weight as f64 LE.
pub fn weights_to_bytes(weights: &WeightVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * weights.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    for v in weights.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads a binary dump; the topology is not stored and must be supplied.
pub fn weights_from_bytes(topology: &Topology, bytes: &[u8]) -> Result<WeightVector> {
    if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::Format("missing OCNNWTS1 header".into()));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if body.len() as u64 != count.saturating_mul(8) {
        return Err(Error::Format(format!(
            "header announces {count} weights but {} bytes follow",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    WeightVector::from_flat(topology, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub spec: serde_json::Value,
    pub seed: u64,
    pub n: usize,
    pub d1: usize,
    pub d2: usize,
}

/// One compact JSON header line, the CSV header `label,p_1_1,...,p_d1_d2`,
/// then one row per sample with pixels in row-major order.
pub fn dataset_to_string(data: &Dataset, spec: &serde_json::Value) -> Result<String> {
    let (d1, d2) = data.dims().ok_or(Error::EmptyDataset)?;
    let header = DatasetHeader {
        spec: spec.clone(),
        seed: data.meta().seed,
        n: data.len(),
        d1,
        d2,
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    out.push_str("label");
    for i in 1..=d1 {
        for j in 1..=d2 {
            out.push_str(&format!(",p_{i}_{j}"));
        }
    }
    out.push('\n');
    for s in data.samples() {
        out.push_str(&s.label.to_string());
        for p in s.image.pixels() {
            out.push_str(&format!(",{p:.16e}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn dataset_from_str(text: &str) -> Result<(Dataset, DatasetHeader)> {
    let mut lines = text.lines();
    let header: DatasetHeader = serde_json::from_str(lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?)?;
    let columns = lines.next().ok_or_else(|| Error::Format("missing CSV header".into()))?;
    let expected = 1 + header.d1 * header.d2;
    if columns.split(',').count() != expected || !columns.starts_with("label") {
        return Err(Error::Format(format!("CSV header must have label plus {} pixel columns", expected - 1)));
    }
    let mut samples = Vec::with_capacity(header.n);
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(Error::Format(format!("row {} has {} fields, expected {expected}", row + 1, fields.len())));
        }
        let label: u8 = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad label '{}'", row + 1, fields[0])))?;
        let pixels = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Format(format!("row {}: bad pixel '{f}'", row + 1))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            image: Image::new(header.d1, header.d2, pixels)?,
            label,
        });
    }
    if samples.len() != header.n {
        return Err(Error::Format(format!("header says n = {} but {} rows follow", header.n, samples.len())));
    }
    let generator = match &header.spec {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    Ok((Dataset::new(samples, generator, header.seed)?, header))
}
