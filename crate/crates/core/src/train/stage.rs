use morphprint_autodiff::{Gradients, Graph, ParamSet, Sgd, Tensor, Var};

use super::pairs::{batch_order, make_batch, pair_labels, PairSource};
use super::{LossKind, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{
    check_image, head_from_pooled, image_tensor, margin_contrastive_loss, nt_xent_loss,
    pooled_concat, Bindings, Encoder, EncoderConfig, Head, Model, ModelConfig, ENCODER_PREFIX,
};
use crate::raster::PartitionSet;
use crate::seed::derive_seed;

/// Batches whose taped activations are estimated below this size keep their
/// view graphs between the forward and backward pass; larger ones recompute.
const RETAIN_BYTES: usize = 512 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    /// `pretrain`, `finetune` or `fusion`.
    pub phase: &'static str,
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
}

impl TrainHistory {
    pub fn phase<'a>(&'a self, phase: &'a str) -> impl Iterator<Item = &'a EpochLoss> {
        self.epochs.iter().filter(move |e| e.phase == phase)
    }

    /// Header `phase,epoch,mean_loss,batches`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["phase", "epoch", "mean_loss", "batches"])?;
        for e in &self.epochs {
            w.write_record([
                e.phase.to_string(),
                e.epoch.to_string(),
                format!("{:?}", e.mean_loss),
                e.batches.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rough size of one view's tape: im2col patches plus three activation copies per block.
fn view_bytes(cfg: &EncoderConfig) -> usize {
    let (mut c_in, mut h, mut w) = (cfg.in_channels, cfg.height, cfg.width);
    let mut total = 0;
    for &c_out in &cfg.channels {
        total += (9 * c_in + 3 * c_out) * h * w;
        c_in = c_out;
        h /= 2;
        w /= 2;
    }
    4 * 8 * total
}

/// Contrastive loss over the fingerprints `z` of one batch.
pub fn batch_loss(
    g: &mut Graph,
    z: &[Var],
    pairs: &[(usize, usize, u8)],
    cfg: &TrainConfig,
) -> Result<Var> {
    match cfg.loss {
        LossKind::Margin => {
            let mut dist = Vec::with_capacity(pairs.len());
            for &(a, b, _) in pairs {
                dist.push(g.euclidean_distance(z[a], z[b])?);
            }
            let labels: Vec<u8> = pairs.iter().map(|p| p.2).collect();
            margin_contrastive_loss(g, &dist, &labels, cfg.margin)
        }
        LossKind::NtXent => {
            let anchors: Vec<Var> = z.iter().step_by(2).copied().collect();
            let positives: Vec<Var> = z.iter().skip(1).step_by(2).copied().collect();
            nt_xent_loss(g, &anchors, &positives, cfg.tau)
        }
    }
}

fn clip(grads: &mut Gradients, cfg: &TrainConfig) {
    if cfg.grad_clip > 0.0 {
        grads.clip_global_norm(cfg.grad_clip);
    }
}

fn check_finite(value: f64, context: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            value,
            context: context(),
        })
    }
}

/// Taped forward pass of one view through the encoder and `head`.
fn view_graph(
    params: &ParamSet,
    cfg: &ModelConfig,
    set: &PartitionSet,
    head: Head,
) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let mut b = Bindings::new(params);
    let enc = Encoder::bind(&mut g, &mut b, &cfg.encoder)?;
    let mut maps = Vec::with_capacity(4);
    for img in &set.images {
        check_image(img, &cfg.encoder)?;
        let x = g.constant(image_tensor(img));
        maps.push(enc.encode(&mut g, x)?);
    }
    let pooled = pooled_concat(&mut g, &maps)?;
    let z = head_from_pooled(&mut g, &mut b, pooled, head, cfg.weight_scale)?;
    Ok((g, z))
}

/// Loss value and `dL/dz` for every view, with the fingerprints as leaves.
fn loss_grads(
    z: &[Vec<f64>],
    pairs: &[(usize, usize, u8)],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let names: Vec<String> = (0..z.len()).map(|k| format!("z{k}")).collect();
    let mut leaves = ParamSet::new();
    for (name, v) in names.iter().zip(z) {
        leaves.insert(name, Tensor::vector(v.clone()))?;
    }
    let mut g = Graph::new();
    let vars = names
        .iter()
        .map(|n| g.param_from(&leaves, n))
        .collect::<morphprint_autodiff::Result<Vec<_>>>()?;
    let loss = batch_loss(&mut g, &vars, pairs, cfg)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    let dz = names
        .iter()
        .zip(z)
        .map(|(n, v)| {
            grads
                .get(n)
                .map_or_else(|| vec![0.0; v.len()], |t| t.data().to_vec())
        })
        .collect();
    Ok((value, dz))
}

/// One SGD step of the encoder and plain head on a batch of views. Returns the loss.
fn encoder_step(
    model: &mut Model,
    views: &[PartitionSet],
    pairs: &[(usize, usize, u8)],
    cfg: &TrainConfig,
    opt: &mut Sgd,
    retain_bytes: usize,
    context: impl FnOnce() -> String,
) -> Result<f64> {
    let retain = views.len() * view_bytes(&model.config.encoder) <= retain_bytes;
    let mut tapes = Vec::with_capacity(views.len());
    let mut z = Vec::with_capacity(views.len());
    for v in views {
        let (g, out) = view_graph(&model.params, &model.config, v, Head::Plain)?;
        z.push(g.value(out).data().to_vec());
        tapes.push(retain.then_some((g, out)));
    }
    let (loss, dz) = loss_grads(&z, pairs, cfg)?;
    check_finite(loss, context)?;
    let mut total = Gradients::default();
    for ((tape, v), seed) in tapes.into_iter().zip(views).zip(&dz) {
        let (mut g, out) = match tape {
            Some(t) => t,
            None => view_graph(&model.params, &model.config, v, Head::Plain)?,
        };
        total.accumulate(&g.backward_from(out, seed)?)?;
    }
    clip(&mut total, cfg);
    opt.step(&mut model.params, &total)?;
    Ok(loss)
}

fn contrastive_phase(
    model: &mut Model,
    sources: &[PairSource],
    batch_size: usize,
    epochs: usize,
    phase: &'static str,
    cfg: &TrainConfig,
    history: &mut TrainHistory,
) -> Result<()> {
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    for epoch in 0..epochs {
        let seed = derive_seed(cfg.seed, &format!("stage1/{phase}/epoch{epoch}"));
        let order = batch_order(sources.len(), batch_size, seed)?;
        let mut sum = 0.0;
        for (bi, members) in order.iter().enumerate() {
            let batch = make_batch(sources, members, &cfg.augment, cfg.ordered_negatives, seed)?;
            sum += encoder_step(
                model,
                &batch.views,
                &batch.pairs,
                cfg,
                &mut opt,
                RETAIN_BYTES,
                || format!("{phase} epoch {epoch} batch {bi}"),
            )?;
        }
        history.epochs.push(EpochLoss {
            phase,
            epoch,
            mean_loss: sum / order.len() as f64,
            batches: order.len(),
        });
    }
    Ok(())
}

/// Contrastive pre-training on augmented single scans, then fine-tuning on real
/// scan pairs. Only the encoder and the plain head receive gradients.
pub fn train_stage1(
    model: &mut Model,
    singles: &[PartitionSet],
    pairs: &[[PartitionSet; 2]],
    cfg: &TrainConfig,
    history: &mut TrainHistory,
) -> Result<()> {
    cfg.validate()?;
    if cfg.epochs_pretrain > 0 {
        if singles.is_empty() {
            return Err(Error::InvalidArgument(
                "pre-training needs at least one single scan".into(),
            ));
        }
        let sources: Vec<PairSource> = singles.iter().map(PairSource::Single).collect();
        contrastive_phase(
            model,
            &sources,
            cfg.batch_pretrain,
            cfg.epochs_pretrain,
            "pretrain",
            cfg,
            history,
        )?;
    }
    if cfg.epochs_finetune > 0 {
        let sources: Vec<PairSource> = pairs.iter().map(|[a, b]| PairSource::Real(a, b)).collect();
        contrastive_phase(
            model,
            &sources,
            cfg.batch_finetune,
            cfg.epochs_finetune,
            "finetune",
            cfg,
            history,
        )?;
    }
    Ok(())
}

/// Trains the fusion head on frozen-encoder features of augmented real pairs.
/// The encoder's parameter bytes are verified unchanged afterwards.
pub fn train_stage2(
    model: &mut Model,
    pairs: &[[PartitionSet; 2]],
    head: Head,
    cfg: &TrainConfig,
    history: &mut TrainHistory,
) -> Result<()> {
    cfg.validate()?;
    let before = model.encoder_params().checksum();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    for epoch in 0..cfg.epochs_fusion {
        let seed = derive_seed(cfg.seed, &format!("stage2/epoch{epoch}"));
        let pooled = pairs
            .iter()
            .enumerate()
            .map(|(i, [a, b])| {
                let (va, vb) = PairSource::Real(a, b)
                    .views(&cfg.augment, derive_seed(seed, &format!("subject{i}")));
                Ok([model.pooled(&va)?, model.pooled(&vb)?])
            })
            .collect::<Result<Vec<_>>>()?;
        let order = batch_order(pairs.len(), cfg.batch_finetune, seed)?;
        let mut sum = 0.0;
        for (bi, members) in order.iter().enumerate() {
            let labels = pair_labels(members.len(), cfg.ordered_negatives)?;
            let mut g = Graph::new();
            let (loss, grads) = {
                let mut b = Bindings::frozen(&model.params, &[ENCODER_PREFIX]);
                let mut z = Vec::with_capacity(2 * members.len());
                for &m in members {
                    for p in &pooled[m] {
                        let x = g.constant(Tensor::vector(p.clone()));
                        z.push(head_from_pooled(
                            &mut g,
                            &mut b,
                            x,
                            head,
                            model.config.weight_scale,
                        )?);
                    }
                }
                let loss = batch_loss(&mut g, &z, &labels, cfg)?;
                let value = g.value(loss).data()[0];
                check_finite(value, || format!("fusion epoch {epoch} batch {bi}"))?;
                (value, g.backward(loss)?)
            };
            let mut grads = grads;
            clip(&mut grads, cfg);
            opt.step(&mut model.params, &grads)?;
            sum += loss;
        }
        history.epochs.push(EpochLoss {
            phase: "fusion",
            epoch,
            mean_loss: sum / order.len() as f64,
            batches: order.len(),
        });
    }
    if model.encoder_params().checksum() != before {
        return Err(Error::EncoderDrift);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, FusionStrategy, EXCITATION_PREFIX};
    use crate::raster::{AugmentPolicy, FeatureImage};
    use rand::Rng;

    pub(crate) fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                in_channels: 3,
                height: 8,
                width: 8,
                channels: vec![4, 8],
                fingerprint_dim: 6,
            },
            fusion: FusionStrategy::Excitation,
            reduction: 4,
            weight_scale: 1.0,
        };
        Model::new(cfg, seed).unwrap()
    }

    fn scan(rng: &mut impl Rng) -> PartitionSet {
        PartitionSet::new(std::array::from_fn(|_| {
            let data = (0..3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureImage::from_parts(3, 8, 8, data, vec![true; 64]).unwrap()
        }))
        .unwrap()
    }

    fn data() -> (Vec<PartitionSet>, Vec<[PartitionSet; 2]>) {
        let mut rng = crate::seed::rng_for(1, "data");
        let singles = (0..6).map(|_| scan(&mut rng)).collect();
        let pairs = (0..4)
            .map(|_| {
                let a = scan(&mut rng);
                let mut b = a.clone();
                for img in &mut b.images {
                    img.data_mut()
                        .iter_mut()
                        .for_each(|v| *v += rng.random_range(-0.1..0.1));
                }
                [a, b]
            })
            .collect();
        (singles, pairs)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs_pretrain: 2,
            epochs_finetune: 2,
            epochs_fusion: 2,
            batch_pretrain: 4,
            batch_finetune: 3,
            lr: 1e-2,
            augment: AugmentPolicy {
                max_rotation_deg: 10.0,
                ..AugmentPolicy::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let (singles, pairs) = data();
        let mut m = tiny_model(2);
        let before = m.params.clone();
        let c = TrainConfig {
            epochs_pretrain: 0,
            epochs_finetune: 0,
            epochs_fusion: 0,
            ..cfg()
        };
        let mut h = TrainHistory::default();
        train_stage1(&mut m, &singles, &pairs, &c, &mut h).unwrap();
        train_stage2(&mut m, &pairs, Head::Excitation, &c, &mut h).unwrap();
        assert_eq!(m.params, before);
        assert!(h.epochs.is_empty());
    }

    #[test]
    fn stage1_is_deterministic_and_touches_only_encoder_and_head() {
        let (singles, pairs) = data();
        let run = || {
            let mut m = tiny_model(2);
            let mut h = TrainHistory::default();
            train_stage1(&mut m, &singles, &pairs, &cfg(), &mut h).unwrap();
            (m, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_eq!(ha, hb);
        assert_eq!(ha.phase("pretrain").count(), 2);
        assert_eq!(ha.phase("finetune").count(), 2);
        let init = tiny_model(2);
        assert_ne!(a.encoder_params(), init.encoder_params());
        assert_eq!(
            a.params.subset(EXCITATION_PREFIX),
            init.params.subset(EXCITATION_PREFIX)
        );
        assert_eq!(a.params.subset("mlp."), init.params.subset("mlp."));
    }

    #[test]
    fn recomputed_tapes_match_retained_ones() {
        let (singles, _) = data();
        let pairs = pair_labels(2, false).unwrap();
        let mut a = tiny_model(4);
        let mut b = a.clone();
        let la = encoder_step(
            &mut a,
            &singles[..4],
            &pairs,
            &cfg(),
            &mut Sgd::new(0.1, 0.0, 0.0),
            usize::MAX,
            String::new,
        )
        .unwrap();
        let lb = encoder_step(
            &mut b,
            &singles[..4],
            &pairs,
            &cfg(),
            &mut Sgd::new(0.1, 0.0, 0.0),
            0,
            String::new,
        )
        .unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn stage2_freezes_encoder_and_moves_excitation() {
        let (singles, pairs) = data();
        let mut m = tiny_model(3);
        let mut h = TrainHistory::default();
        train_stage1(&mut m, &singles, &pairs, &cfg(), &mut h).unwrap();
        let enc = m.encoder_params();
        let exc = m.params.subset(EXCITATION_PREFIX);
        let c = TrainConfig {
            epochs_fusion: 1,
            ..cfg()
        };
        train_stage2(&mut m, &pairs, Head::Excitation, &c, &mut h).unwrap();
        assert_eq!(m.encoder_params().checksum(), enc.checksum());
        assert!(h.phase("fusion").next().unwrap().mean_loss > 0.0);
        let delta = m
            .params
            .subset(EXCITATION_PREFIX)
            .iter()
            .zip(exc.iter())
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        assert!(delta > 0.0);
    }

    #[test]
    fn nt_xent_trains_too() {
        let (singles, pairs) = data();
        let mut m = tiny_model(5);
        let c = TrainConfig {
            loss: LossKind::NtXent,
            ..cfg()
        };
        let mut h = TrainHistory::default();
        train_stage1(&mut m, &singles, &pairs, &c, &mut h).unwrap();
        train_stage2(&mut m, &pairs, Head::Mlp, &c, &mut h).unwrap();
        assert!(h.epochs.iter().all(|e| e.mean_loss.is_finite()));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let (singles, pairs) = data();
        let mut m = tiny_model(6);
        let w = m.params.get_mut("head.weight").unwrap();
        w.data_mut()[0] = f64::NAN;
        let mut h = TrainHistory::default();
        let err = train_stage1(&mut m, &singles, &pairs, &cfg(), &mut h).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
        assert!(
            err.to_string().contains("pretrain epoch 0 batch 0"),
            "{err}"
        );
    }
}
