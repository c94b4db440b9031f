use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Text, Modality::Image];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            other => Err(Error::Argument(format!("unknown modality `{other}`"))),
        }
    }
}

/// Precomputed item features for one modality, one row per item.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(modality: Modality, values: Array2<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self { modality, values })
    }

    pub fn item_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

fn check_finite(values: &Array2<f64>) -> Result<()> {
    for (r, row) in values.rows().into_iter().enumerate() {
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data {
                row: r,
                message: format!("non-finite feature value {v}"),
            });
        }
    }
    Ok(())
}

/// Reads the feature format: a text line `rows cols` followed by row-major
/// little-endian `f32` values.
pub fn read_features(reader: impl Read, modality: Modality, expected_items: usize, source: &Path) -> Result<FeatureMatrix> {
    let mut reader = BufReader::new(reader);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| Error::io(format!("reading {}", source.display()), e))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(source, 1, format!("bad header `{}`", header.trim())))?;
    let &[rows, cols] = dims.as_slice() else {
        return Err(Error::parse(source, 1, "header must be `rows cols`"));
    };
    if rows != expected_items {
        return Err(Error::Alignment(format!(
            "{} has {rows} feature rows but the dataset has {expected_items} items",
            source.display()
        )));
    }
    let mut values = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let v = reader.read_f32::<LittleEndian>().map_err(|e| {
                Error::io(format!("{}: truncated feature block at row {r}", source.display()), e)
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    row: r,
                    message: format!("non-finite value {v} in {}", source.display()),
                });
            }
            values[[r, c]] = v as f64;
        }
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest).map_err(|e| Error::io("reading feature trailer", e))? != 0 {
        return Err(Error::parse(source, 1, "trailing bytes after feature block"));
    }
    Ok(FeatureMatrix { modality, values })
}

pub fn load_features(path: &Path, modality: Modality, expected_items: usize) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_features(file, modality, expected_items, path)
}

pub fn write_features(features: &FeatureMatrix, path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{} {}", features.item_count(), features.dim()).map_err(|e| Error::io(ctx(), e))?;
    for &v in features.values.iter() {
        w.write_f32::<LittleEndian>(v as f32).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}
