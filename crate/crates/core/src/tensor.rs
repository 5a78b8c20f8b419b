//! Dense channel-major grids and the TSF1 tensor file format.
//!
//! TSF1 layout: magic `TSF1`, `u8` dtype tag (0 = f32), `u8` ndim, `ndim`
//! little-endian `u32` dims, then the little-endian payload in row-major
//! order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TSF1_MAGIC: &[u8; 4] = b"TSF1";
pub const DTYPE_F32: u8 = 0;

/// A `channels x height x width` grid stored row-major (channel slowest).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "tensor dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &Tensor3) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_dims(&self, other: &Tensor3, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the channel axis.
    pub fn concat(parts: &[&Tensor3]) -> Result<Tensor3> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::shape(format!(
                    "concat spatial dims {}x{} vs {h}x{w}",
                    p.height, p.width
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Tensor3::from_vec(channels, h, w, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.empty_like()
        }
    }

    pub fn zip_map(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        self.ensure_same_dims(other, "elementwise op")?;
        Ok(Tensor3 {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.empty_like()
        })
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        self.map(|v| v * s)
    }

    fn empty_like(&self) -> Tensor3 {
        Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: Vec::new(),
        }
    }

    pub fn write_tsf1(&self, w: impl Write) -> Result<()> {
        write_tsf1(w, &[self.channels, self.height, self.width], &self.data)
    }

    pub fn save_tsf1(&self, path: impl AsRef<Path>) -> Result<()> {
        save_tsf1(path, &[self.channels, self.height, self.width], &self.data)
    }

    /// Read a 3-D TSF1 tensor. A 2-D file is taken as a single channel.
    pub fn read_tsf1(r: impl Read) -> Result<Tensor3> {
        let (dims, data) = read_tsf1(r)?;
        match dims.as_slice() {
            [c, h, w] => Tensor3::from_vec(*c, *h, *w, data),
            [h, w] => Tensor3::from_vec(1, *h, *w, data),
            _ => Err(Error::format("TSF1", format!("expected 3 dims, found {dims:?}"))),
        }
    }

    pub fn load_tsf1(path: impl AsRef<Path>) -> Result<Tensor3> {
        let path = path.as_ref();
        let file = open_existing(path)?;
        Tensor3::read_tsf1(std::io::BufReader::new(file))
    }
}

pub(crate) fn open_existing(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })
}

/// Semantic role of a feature map in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureRole {
    /// Per-view shallow CNN features.
    Image,
    /// Depth-prior features.
    DepthPrior,
    /// Segmentation features.
    Semantic,
    /// Cross-view attended features.
    MultiView,
    AlignedSemantic,
    AlignedDepth,
    AlignedMultiView,
    AggregatedSemantic,
    AggregatedDepth,
    AggregatedMultiView,
    TextFused,
    RefinedDepth,
    RefinedSemantic,
    RefinedCombined,
    Refined,
}

impl FeatureRole {
    /// Short tag used in dump file names.
    pub fn tag(self) -> &'static str {
        match self {
            FeatureRole::Image => "cf",
            FeatureRole::DepthPrior => "df",
            FeatureRole::Semantic => "sf",
            FeatureRole::MultiView => "mf",
            FeatureRole::AlignedSemantic => "sf1",
            FeatureRole::AlignedDepth => "df1",
            FeatureRole::AlignedMultiView => "mf1",
            FeatureRole::AggregatedSemantic => "sf2",
            FeatureRole::AggregatedDepth => "df2",
            FeatureRole::AggregatedMultiView => "mf2",
            FeatureRole::TextFused => "tf",
            FeatureRole::RefinedDepth => "bf_d",
            FeatureRole::RefinedSemantic => "bf_s",
            FeatureRole::RefinedCombined => "bf_c",
            FeatureRole::Refined => "rf",
        }
    }
}

/// A tensor tagged with its role.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub role: FeatureRole,
    pub tensor: Tensor3,
}

impl FeatureMap {
    pub fn new(role: FeatureRole, tensor: Tensor3) -> Self {
        Self { role, tensor }
    }
}

pub fn write_tsf1(mut w: impl Write, dims: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::shape(format!(
            "TSF1 dims {dims:?} do not match payload length {}",
            data.len()
        )));
    }
    let ndim = u8::try_from(dims.len())
        .map_err(|_| Error::format("TSF1", format!("too many dims: {}", dims.len())))?;
    let mut buf = Vec::with_capacity(6 + 4 * dims.len() + 4 * data.len());
    buf.extend_from_slice(TSF1_MAGIC);
    buf.push(DTYPE_F32);
    buf.push(ndim);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::format("TSF1", format!("dim {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tsf1(mut r: impl Read) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)
        .map_err(|e| Error::format("TSF1", format!("truncated header: {e}")))?;
    if &head[..4] != TSF1_MAGIC {
        return Err(Error::format("TSF1", "bad magic"));
    }
    if head[4] != DTYPE_F32 {
        return Err(Error::format("TSF1", format!("unsupported dtype tag {}", head[4])));
    }
    let ndim = head[5] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| Error::format("TSF1", format!("truncated dims: {e}")))?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let count: usize = dims.iter().product();
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload)
        .map_err(|e| Error::format("TSF1", format!("truncated payload: {e}")))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((dims, data))
}

pub fn save_tsf1(path: impl AsRef<Path>, dims: &[usize], data: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    write_tsf1(&mut buf, dims, data)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_tsf1(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let file = open_existing(path.as_ref())?;
    read_tsf1(std::io::BufReader::new(file))
}
