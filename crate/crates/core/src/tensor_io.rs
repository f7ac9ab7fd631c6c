//! NPY (version 1.0, little-endian, C-order) storage for the domain types.
//!
//! Float grids are `<f4`, label and instance grids are `<i4`, feature maps are
//! `(C, H, W)` `<f4`, and point sets are `(N, 4)` `<f4` with columns
//! `(row, col, score, provenance)` where provenance 0 is ground truth and 1 is
//! pseudo.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use npyz::{DType, NpyFile, Order, WriterBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    DensityMap, FeatureMap, Grid, InstanceMap, LabelMap, Point, PointSet, ProbMap, Provenance,
};

const F32: &str = "<f4";
const I32: &str = "<i4";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Prob,
    Density,
    Label,
    Instance,
    Feature,
    Points,
}

impl TensorKind {
    fn rank(self) -> usize {
        match self {
            TensorKind::Feature => 3,
            _ => 2,
        }
    }

    fn dtype(self) -> &'static str {
        match self {
            TensorKind::Label | TensorKind::Instance => I32,
            _ => F32,
        }
    }
}

/// Any value that can be stored in a tensor file.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Prob(ProbMap),
    Density(DensityMap),
    Label(LabelMap),
    Instance(InstanceMap),
    Feature(FeatureMap),
    Points(PointSet),
}

impl Tensor {
    pub fn kind(&self) -> TensorKind {
        match self {
            Tensor::Prob(_) => TensorKind::Prob,
            Tensor::Density(_) => TensorKind::Density,
            Tensor::Label(_) => TensorKind::Label,
            Tensor::Instance(_) => TensorKind::Instance,
            Tensor::Feature(_) => TensorKind::Feature,
            Tensor::Points(_) => TensorKind::Points,
        }
    }
}

struct RawArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn open(path: &Path) -> Result<NpyFile<BufReader<File>>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io { path: path.to_path_buf(), source: e },
    })?;
    NpyFile::new(BufReader::new(file))
        .map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))
}

fn read_raw<T: npyz::Deserialize>(path: &Path, kind: TensorKind) -> Result<RawArray<T>> {
    let npy = open(path)?;
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    if shape.len() != kind.rank() {
        return Err(Error::RankMismatch { expected: kind.rank(), found: shape.len() });
    }
    let descr = match npy.dtype() {
        DType::Plain(ts) => ts.to_string(),
        other => format!("{other:?}"),
    };
    if descr != kind.dtype() {
        return Err(Error::DtypeMismatch { expected: kind.dtype(), found: descr });
    }
    if npy.order() != Order::C {
        return Err(Error::MalformedHeader(format!(
            "{}: Fortran-ordered arrays are not supported",
            path.display()
        )));
    }
    let data = npy
        .into_vec::<T>()
        .map_err(|e| Error::MalformedHeader(format!("{}: bad payload: {e}", path.display())))?;
    Ok(RawArray { shape, data })
}

fn write_raw<T: npyz::Serialize + npyz::AutoSerialize + Copy>(
    path: &Path,
    shape: &[u64],
    data: &[T],
) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io { path: path.to_path_buf(), source: e };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    {
        let mut writer = npyz::WriteOptions::<T>::new()
            .default_dtype()
            .shape(shape)
            .writer(&mut out)
            .begin_nd()
            .map_err(io_err)?;
        writer.extend(data.iter().copied()).map_err(io_err)?;
        writer.finish().map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn to_i32(path: &Path, data: &[u32]) -> Result<Vec<i32>> {
    data.iter()
        .map(|&v| {
            i32::try_from(v)
                .map_err(|_| Error::Internal(format!("{}: id {v} exceeds i32", path.display())))
        })
        .collect()
}

fn grid_from_raw<T: Copy>(raw: RawArray<T>) -> Result<Grid<T>> {
    Grid::new(raw.shape[0], raw.shape[1], raw.data)
}

fn decode_points(raw: RawArray<f32>) -> Result<PointSet> {
    if raw.shape[1] != 4 {
        return Err(Error::shape(format!(
            "point arrays must have 4 columns (row, col, score, provenance), found {}",
            raw.shape[1]
        )));
    }
    let coord = |v: f32, what: &str| -> Result<usize> {
        if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < (1u32 << 24) as f32 {
            Ok(v as usize)
        } else {
            Err(Error::invariant(format!("point {what} {v} is not a non-negative integer")))
        }
    };
    let points = raw
        .data
        .chunks_exact(4)
        .map(|row| {
            let provenance = match row[3] {
                0.0 => Provenance::GroundTruth,
                1.0 => Provenance::Pseudo,
                v => return Err(Error::invariant(format!("invalid provenance code {v}"))),
            };
            Ok(Point {
                row: coord(row[0], "row")?,
                col: coord(row[1], "col")?,
                score: row[2],
                provenance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PointSet::new(points)
}

/// Reads and validates a tensor of the requested kind.
pub fn load_tensor(path: impl AsRef<Path>, kind: TensorKind) -> Result<Tensor> {
    let path = path.as_ref();
    Ok(match kind {
        TensorKind::Prob => Tensor::Prob(ProbMap::new(grid_from_raw(read_raw::<f32>(path, kind)?)?)?),
        TensorKind::Density => {
            Tensor::Density(DensityMap::new(grid_from_raw(read_raw::<f32>(path, kind)?)?)?)
        }
        TensorKind::Label => {
            let raw = read_raw::<i32>(path, kind)?;
            if let Some(v) = raw.data.iter().find(|v| !matches!(**v, 0 | 1 | 255)) {
                return Err(Error::invariant(format!("invalid label value {v}")));
            }
            let data = raw.data.iter().map(|&v| v as u8).collect();
            Tensor::Label(LabelMap::new(Grid::new(raw.shape[0], raw.shape[1], data)?)?)
        }
        TensorKind::Instance => {
            let raw = read_raw::<i32>(path, kind)?;
            if let Some(v) = raw.data.iter().find(|v| **v < 0) {
                return Err(Error::invariant(format!("invalid instance id {v}")));
            }
            let data = raw.data.iter().map(|&v| v as u32).collect();
            Tensor::Instance(InstanceMap::new(Grid::new(raw.shape[0], raw.shape[1], data)?)?)
        }
        TensorKind::Feature => {
            let raw = read_raw::<f32>(path, kind)?;
            Tensor::Feature(FeatureMap::new(raw.shape[0], raw.shape[1], raw.shape[2], raw.data)?)
        }
        TensorKind::Points => Tensor::Points(decode_points(read_raw::<f32>(path, kind)?)?),
    })
}

/// Writes a tensor so that `load_tensor` returns a bit-identical value.
pub fn store_tensor(value: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match value {
        Tensor::Prob(m) => write_grid_f32(path, m.grid()),
        Tensor::Density(m) => write_grid_f32(path, m.grid()),
        Tensor::Label(m) => {
            let data: Vec<i32> = m.grid().data().iter().map(|&v| v as i32).collect();
            write_raw(path, &shape2(m.shape()), &data)
        }
        Tensor::Instance(m) => write_raw(path, &shape2(m.shape()), &to_i32(path, m.grid().data())?),
        Tensor::Feature(f) => {
            let (h, w) = f.shape();
            write_raw(path, &[f.channels() as u64, h as u64, w as u64], f.data())
        }
        Tensor::Points(points) => {
            let data: Vec<f32> = points
                .iter()
                .flat_map(|p| [p.row as f32, p.col as f32, p.score, p.provenance.code()])
                .collect();
            write_raw(path, &[points.len() as u64, 4], &data)
        }
    }
}

fn shape2((h, w): (usize, usize)) -> [u64; 2] {
    [h as u64, w as u64]
}

fn write_grid_f32(path: &Path, grid: &Grid<f32>) -> Result<()> {
    write_raw(path, &shape2(grid.shape()), grid.data())
}

/// Typed convenience wrappers over [`load_tensor`] and [`store_tensor`].
pub trait TensorFile: Sized {
    const KIND: TensorKind;

    fn from_tensor(t: Tensor) -> Option<Self>;
    fn to_tensor(&self) -> Tensor;

    fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t = load_tensor(path, Self::KIND)?;
        Self::from_tensor(t).ok_or_else(|| Error::Internal("tensor kind dispatch".into()))
    }

    fn store(&self, path: impl AsRef<Path>) -> Result<()> {
        store_tensor(&self.to_tensor(), path)
    }
}

macro_rules! tensor_file {
    ($ty:ty, $variant:ident) => {
        impl TensorFile for $ty {
            const KIND: TensorKind = TensorKind::$variant;

            fn from_tensor(t: Tensor) -> Option<Self> {
                match t {
                    Tensor::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn to_tensor(&self) -> Tensor {
                Tensor::$variant(self.clone())
            }
        }
    };
}

tensor_file!(ProbMap, Prob);
tensor_file!(DensityMap, Density);
tensor_file!(LabelMap, Label);
tensor_file!(InstanceMap, Instance);
tensor_file!(FeatureMap, Feature);
tensor_file!(PointSet, Points);

/// Writes a raw `<f4` array of arbitrary shape (used for prototype stacks).
pub fn store_f32_array(path: impl AsRef<Path>, shape: &[usize], data: &[f32]) -> Result<()> {
    let shape: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    write_raw(path.as_ref(), &shape, data)
}

/// Reads a raw `<f4` array of the given rank.
pub fn load_f32_array(path: impl AsRef<Path>, rank: usize) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    let npy = open(path)?;
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    if shape.len() != rank {
        return Err(Error::RankMismatch { expected: rank, found: shape.len() });
    }
    let data = npy
        .into_vec::<f32>()
        .map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))?;
    Ok((shape, data))
}
