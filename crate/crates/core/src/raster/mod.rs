//! Feature rasters of flattened halves, the four-partition set and augmentations.

mod augment;
mod normalize;
mod rasterize;

use std::io::{Read, Write};
use std::path::Path;

pub use augment::{add_noise, augment_pair, gaussian_blur, rotate_image, AugmentPolicy};
pub use normalize::{normalize_channels, ChannelStats};
pub use rasterize::{
    build_partitions, rasterize, rasterize_channels, FlattenSettings, PartitionCache, RasterPlan,
};

use crate::error::{Error, Result};

const FIMG_MAGIC: &[u8; 4] = b"FIMG";
const FIMG_VERSION: u32 = 1;

/// `C×H×W` row-major raster with a coverage mask; uncovered pixels are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl FeatureImage {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
            mask: vec![false; h * w],
        }
    }

    pub fn from_parts(
        c: usize,
        h: usize,
        w: usize,
        data: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if data.len() != c * h * w || mask.len() != h * w {
            return Err(Error::InvalidArgument(format!(
                "image {c}x{h}x{w} needs {} values and {} mask bits, got {} and {}",
                c * h * w,
                h * w,
                data.len(),
                mask.len()
            )));
        }
        let mut img = Self {
            c,
            h,
            w,
            data,
            mask,
        };
        img.clear_unmasked();
        Ok(img)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.h + i) * self.w + j]
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.w + j]
    }

    /// Fraction of covered pixels.
    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Enforces the zero-outside-mask invariant.
    pub fn clear_unmasked(&mut self) {
        let hw = self.h * self.w;
        for c in 0..self.c {
            for (p, &m) in self.mask.iter().enumerate() {
                if !m {
                    self.data[c * hw + p] = 0.0;
                }
            }
        }
    }

    /// Mirror `j → W − 1 − j`.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::zeros(self.c, self.h, self.w);
        for i in 0..self.h {
            for j in 0..self.w {
                let jj = self.w - 1 - j;
                out.mask[i * self.w + j] = self.mask[i * self.w + jj];
                for c in 0..self.c {
                    out.data[(c * self.h + i) * self.w + j] =
                        self.data[(c * self.h + i) * self.w + jj];
                }
            }
        }
        out
    }

    /// Max absolute difference of data; `None` if shapes or masks differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape() != other.shape() || self.mask != other.mask {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// FIMG: magic, u32 version, u32 C, H, W, f32 data, u8 mask (little endian).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FIMG_MAGIC)?;
        for v in [FIMG_VERSION, self.c as u32, self.h as u32, self.w as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4 + self.mask.len());
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend(self.mask.iter().map(|&m| m as u8));
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FIMG_MAGIC {
            return Err(Error::Format("not a FIMG file".into()));
        }
        let mut u32s = [0u32; 4];
        for v in &mut u32s {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, c, h, w] = u32s.map(|v| v as usize);
        if version != FIMG_VERSION as usize {
            return Err(Error::Format(format!("unsupported FIMG version {version}")));
        }
        let n = c
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| Error::Format("FIMG dimensions overflow".into()))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let mut mbytes = vec![0u8; h * w];
        r.read_exact(&mut mbytes)?;
        let mask = mbytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Format(format!("mask byte {b} is not 0/1"))),
            })
            .collect::<Result<_>>()?;
        Self::from_parts(c, h, w, data, mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    LeftLateral,
    LeftMedial,
    RightLateral,
    RightMedial,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::LeftLateral,
        Partition::LeftMedial,
        Partition::RightLateral,
        Partition::RightMedial,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Partition::LeftLateral => "left-lateral",
            Partition::LeftMedial => "left-medial",
            Partition::RightLateral => "right-lateral",
            Partition::RightMedial => "right-medial",
        }
    }
}

/// The four half rasters in [`Partition::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSet {
    pub images: [FeatureImage; 4],
}

impl PartitionSet {
    pub fn new(images: [FeatureImage; 4]) -> Result<Self> {
        let s = images[0].shape();
        if images.iter().any(|im| im.shape() != s) {
            return Err(Error::InvalidArgument(
                "partition images differ in shape".into(),
            ));
        }
        Ok(Self { images })
    }

    pub fn get(&self, p: Partition) -> &FeatureImage {
        &self.images[p as usize]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.images[0].shape()
    }

    /// Zeroes every channel whose `keep` flag is false.
    pub fn select_channels(&self, keep: &[bool]) -> Self {
        let mut out = self.clone();
        for img in &mut out.images {
            for (c, &k) in keep.iter().enumerate().take(img.channels()) {
                if !k {
                    img.channel_mut(c).fill(0.0);
                }
            }
        }
        out
    }
}
