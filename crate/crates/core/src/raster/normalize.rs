use std::path::Path;

use super::{FeatureImage, PartitionSet};
use crate::error::{Error, Result};
use crate::mesh::FEATURE_CHANNELS;

/// Per-channel masked mean and standard deviation of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn default_names(c: usize) -> Vec<String> {
    if c == FEATURE_CHANNELS.len() {
        FEATURE_CHANNELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..c).map(|i| format!("channel{i}")).collect()
    }
}

impl ChannelStats {
    /// Fits over every masked pixel of every image; all images must share a channel count.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a FeatureImage>) -> Result<Self> {
        let images: Vec<&FeatureImage> = images.into_iter().collect();
        let c = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("no images to normalize".into()))?
            .channels();
        if images.iter().any(|im| im.channels() != c) {
            return Err(Error::InvalidArgument(
                "images differ in channel count".into(),
            ));
        }
        let n: usize = images
            .iter()
            .map(|im| im.mask().iter().filter(|&&m| m).count())
            .sum();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "no masked pixels to normalize".into(),
            ));
        }
        let masked = |k: usize| {
            images.iter().flat_map(move |im| {
                im.channel(k)
                    .iter()
                    .zip(im.mask())
                    .filter(|p| *p.1)
                    .map(|p| *p.0)
            })
        };
        let names = default_names(c);
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for (k, name) in names.iter().enumerate() {
            let m = masked(k).sum::<f64>() / n as f64;
            let var = masked(k).map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            if !(s > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::ZeroVariance(name.clone()));
            }
            mean.push(m);
            std.push(s);
        }
        Ok(Self { names, mean, std })
    }

    pub fn apply(&self, img: &mut FeatureImage) -> Result<()> {
        if img.channels() != self.mean.len() {
            return Err(Error::InvalidArgument(format!(
                "stats have {} channels, image has {}",
                self.mean.len(),
                img.channels()
            )));
        }
        let mask = img.mask().to_vec();
        for k in 0..self.mean.len() {
            let (m, s) = (self.mean[k], self.std[k]);
            for (v, &on) in img.channel_mut(k).iter_mut().zip(&mask) {
                if on {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(())
    }

    pub fn apply_set(&self, set: &mut PartitionSet) -> Result<()> {
        set.images.iter_mut().try_for_each(|img| self.apply(img))
    }

    /// `channel,mean,std` rows.
    pub fn write_to<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["channel", "mean", "std"])?;
        for k in 0..self.mean.len() {
            w.write_record([
                self.names[k].clone(),
                format!("{:?}", self.mean[k]),
                format!("{:?}", self.std[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut out = Self {
            names: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        };
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| {
                        Error::Format(format!("channel stats row {}: bad field {k}", i + 2))
                    })
            };
            let (m, s) = (num(1)?, num(2)?);
            let name = rec.get(0).unwrap_or_default().to_string();
            if !(s > 0.0) {
                return Err(Error::ZeroVariance(name));
            }
            out.names.push(name);
            out.mean.push(m);
            out.std.push(s);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Fits [`ChannelStats`] over all partitions of all scans and z-scores them in place.
pub fn normalize_channels(sets: &mut [PartitionSet]) -> Result<ChannelStats> {
    let stats = ChannelStats::fit(sets.iter().flat_map(|s| s.images.iter()))?;
    for s in sets.iter_mut() {
        stats.apply_set(s)?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(vals: &[f64], mask: &[bool]) -> FeatureImage {
        let n = mask.len();
        let mut data = vals.to_vec();
        data.extend(vals.iter().map(|v| 10.0 - 2.0 * v));
        FeatureImage::from_parts(2, 1, n, data, mask.to_vec()).unwrap()
    }

    #[test]
    fn masked_pixels_get_zero_mean_unit_std() {
        let a = img(&[1.0, 2.0, 99.0, 3.0], &[true, true, false, true]);
        let b = img(&[4.0, 5.0, 6.0, 7.0], &[true, true, true, true]);
        let mut sets = vec![PartitionSet::new([a.clone(), b.clone(), a, b]).unwrap()];
        let stats = normalize_channels(&mut sets).unwrap();
        assert!((stats.mean[0] - 4.0).abs() < 1e-12);
        for k in 0..2 {
            let vals: Vec<f64> = sets[0]
                .images
                .iter()
                .flat_map(|im| {
                    im.channel(k)
                        .iter()
                        .zip(im.mask())
                        .filter(|p| *p.1)
                        .map(|p| *p.0)
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        assert_eq!(sets[0].images[0].get(0, 0, 2), 0.0);
    }

    #[test]
    fn saved_stats_reproduce_normalization() {
        let a = img(&[1.0, 2.0, 3.0], &[true; 3]);
        let stats = ChannelStats::fit([&a]).unwrap();
        let mut buf = Vec::new();
        stats.write_to(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .starts_with("channel,mean,std\n"));
        let back = ChannelStats::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, stats);
        let (mut x, mut y) = (a.clone(), a);
        stats.apply(&mut x).unwrap();
        back.apply(&mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn constant_channel_is_zero_variance() {
        let mut a = img(&[1.0, 2.0, 3.0], &[true; 3]);
        a.channel_mut(1).fill(4.0);
        let err = ChannelStats::fit([&a]).unwrap_err();
        assert!(
            err.to_string().contains("zero variance in channel"),
            "{err}"
        );
    }
}
