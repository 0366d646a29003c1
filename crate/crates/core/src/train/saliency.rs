use crate::error::{Error, Result};
use crate::model::{encode_partition, Model};
use crate::raster::{FeatureImage, PartitionSet};

/// Occlusion sensitivity of one scan against a reference scan of the same subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyReport {
    pub height: usize,
    pub width: usize,
    /// Row-major `H×W` map per partition: distance increase when the patch
    /// covering the pixel is zeroed.
    pub maps: [Vec<f64>; 4],
    /// Unoccluded scan-to-reference distance.
    pub baseline: f64,
    /// Mean excitation channel weight of each partition block.
    pub partition_weights: [f64; 4],
}

impl SaliencyReport {
    /// Header `partition,row,col,saliency`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["partition", "row", "col", "saliency"])?;
        for (p, map) in self.maps.iter().enumerate() {
            for (k, v) in map.iter().enumerate() {
                w.write_record([
                    p.to_string(),
                    (k / self.width).to_string(),
                    (k % self.width).to_string(),
                    format!("{v:?}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn pooled_partition(model: &Model, img: &FeatureImage) -> Result<Vec<f64>> {
    let t = encode_partition(img, &model.params, &model.config.encoder)?;
    let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    Ok((0..c)
        .map(|k| t.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Slides a `patch×patch` zeroing window with stride `patch` over each
/// partition of `scan` and records how much the fingerprint distance to
/// `reference` grows. Only the occluded partition is re-encoded.
pub fn occlusion_saliency(
    model: &Model,
    scan: &PartitionSet,
    reference: &PartitionSet,
    patch: usize,
) -> Result<SaliencyReport> {
    let (_, h, w) = scan.shape();
    if patch == 0 || patch > h || patch > w {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} does not fit a {h}x{w} image"
        )));
    }
    let head = model.head();
    let target = model.fingerprint(reference)?;
    let blocks = scan
        .images
        .iter()
        .map(|img| pooled_partition(model, img))
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<f64> = blocks.concat();
    let baseline = distance(&model.embed_pooled(&pooled, head)?, &target);
    let cf = blocks[0].len();
    let mut maps: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; h * w]);
    for (p, img) in scan.images.iter().enumerate() {
        for i0 in (0..h).step_by(patch) {
            for j0 in (0..w).step_by(patch) {
                let (i1, j1) = ((i0 + patch).min(h), (j0 + patch).min(w));
                let mut occluded = img.clone();
                let mut changed = false;
                for c in 0..img.channels() {
                    let ch = occluded.channel_mut(c);
                    for i in i0..i1 {
                        for v in &mut ch[i * w + j0..i * w + j1] {
                            changed |= *v != 0.0;
                            *v = 0.0;
                        }
                    }
                }
                if !changed {
                    continue;
                }
                let mut x = pooled.clone();
                x[p * cf..(p + 1) * cf].copy_from_slice(&pooled_partition(model, &occluded)?);
                let s = distance(&model.embed_pooled(&x, head)?, &target) - baseline;
                for i in i0..i1 {
                    maps[p][i * w + j0..i * w + j1].fill(s);
                }
            }
        }
    }
    let weights = model.channel_weights(&pooled)?;
    let partition_weights =
        std::array::from_fn(|p| weights[p * cf..(p + 1) * cf].iter().sum::<f64>() / cf as f64);
    Ok(SaliencyReport {
        height: h,
        width: w,
        maps,
        baseline,
        partition_weights,
    })
}
