use morphprint_autodiff::{grad_check, Graph, ParamSet, Tensor, Var};

use super::{
    head_from_pooled, init_params, pooled_concat, Bindings, Encoder, EncoderConfig, Head,
    ModelConfig,
};
use crate::error::{Error, Result};
use crate::seed::rng_for;

fn check_tau(tau: f64, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "NT-Xent needs at least 2 samples for a nonempty denominator, got {n}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// `L = −(1/N) Σ_i log[ exp(−‖z_i − z⁺_i‖/τ) / Σ_{j≠i} exp(−‖z_i − z⁺_j‖/τ) ]`.
///
/// The denominator runs over the other samples' positives only.
pub fn nt_xent_loss(g: &mut Graph, z: &[Var], z_pos: &[Var], tau: f64) -> Result<Var> {
    let n = z.len();
    if z_pos.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} anchors but {} positives",
            z_pos.len()
        )));
    }
    check_tau(tau, n)?;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let pos = g.euclidean_distance(z[i], z_pos[i])?;
        let pos = g.scalar_mul(pos, 1.0 / tau);
        let mut neg = Vec::with_capacity(n - 1);
        for (j, &zp) in z_pos.iter().enumerate() {
            if j != i {
                let d = g.euclidean_distance(z[i], zp)?;
                neg.push(g.scalar_mul(d, -1.0 / tau));
            }
        }
        let neg = g.stack(&neg)?;
        let lse = g.log_sum_exp(neg)?;
        terms.push(g.add(pos, lse)?);
    }
    let all = g.stack(&terms)?;
    Ok(g.mean(all))
}

/// NT-Xent from a precomputed distance matrix `d[i][j] = ‖z_i − z⁺_j‖`.
pub fn nt_xent_value(d: &[Vec<f64>], tau: f64) -> Result<f64> {
    let n = d.len();
    check_tau(tau, n)?;
    let mut total = 0.0;
    for (i, row) in d.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidArgument(
                "distance matrix must be square".into(),
            ));
        }
        let neg: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| -row[j] / tau).collect();
        let m = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + neg.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += row[i] / tau + lse;
    }
    Ok(total / n as f64)
}

fn check_margin(labels: &[u8], n: usize, m: f64) -> Result<()> {
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} distances but {} labels",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidArgument(format!(
            "label {y} is not 0 (positive) or 1 (negative)"
        )));
    }
    if !(m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin must be positive, got {m}"
        )));
    }
    Ok(())
}

/// `L = Σ_i (1 − y_i)·d_i² + y_i·max(m − d_i, 0)²` with `y = 0` for positive pairs.
pub fn margin_contrastive_loss(g: &mut Graph, dist: &[Var], labels: &[u8], m: f64) -> Result<Var> {
    check_margin(labels, dist.len(), m)?;
    let mut terms = Vec::with_capacity(dist.len());
    for (&d, &y) in dist.iter().zip(labels) {
        terms.push(if y == 0 {
            g.square(d)
        } else {
            let neg = g.scalar_mul(d, -1.0);
            let gap = g.add_scalar(neg, m);
            let gap = g.relu(gap);
            g.square(gap)
        });
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let all = g.stack(&terms)?;
    Ok(g.sum(all))
}

pub fn margin_loss_value(dist: &[f64], labels: &[u8], m: f64) -> Result<f64> {
    check_margin(labels, dist.len(), m)?;
    Ok(dist
        .iter()
        .zip(labels)
        .map(|(&d, &y)| {
            if y == 0 {
                d * d
            } else {
                (m - d).max(0.0).powi(2)
            }
        })
        .sum())
}

fn suite_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            in_channels: 3,
            height: 8,
            width: 8,
            channels: vec![3, 4],
            fingerprint_dim: 6,
        },
        reduction: 4,
        weight_scale: 1.0,
        ..Default::default()
    }
}

/// Gradient checks of both losses through the complete encoder and every
/// fusion head on a tiny configuration. Returns `(case, max relative error)`.
pub fn loss_gradcheck_suite(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    use rand_distr::{Distribution, Normal};
    let cfg = suite_config();
    let mut params = init_params(&cfg, seed)?;
    let mut rng = rng_for(seed, "loss-suite");
    let normal = Normal::new(0.0, 0.5).expect("valid");
    // nonzero excitation output layer so that every weight path is exercised
    for (name, t) in params.clone().iter() {
        if name.starts_with("excitation.fc2") || name.ends_with(".bias") {
            let data = (0..t.len()).map(|_| normal.sample(&mut rng)).collect();
            *params.get_mut(name).expect("present") = Tensor::new(t.shape(), data)?;
        }
    }
    let (c, h, w) = (
        cfg.encoder.in_channels,
        cfg.encoder.height,
        cfg.encoder.width,
    );
    let views: Vec<[Tensor; 4]> = (0..4)
        .map(|_| {
            std::array::from_fn(|_| {
                Tensor::new(
                    &[c, h, w],
                    (0..c * h * w).map(|_| normal.sample(&mut rng)).collect(),
                )
                .expect("shape")
            })
        })
        .collect();
    let embed = |g: &mut Graph, p: &ParamSet, head: Head| -> Result<Vec<Var>> {
        let mut b = Bindings::new(p);
        let enc = Encoder::bind(g, &mut b, &cfg.encoder)?;
        views
            .iter()
            .map(|view| {
                let maps = view
                    .iter()
                    .map(|t| {
                        let x = g.constant(t.clone());
                        enc.encode(g, x)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let pooled = pooled_concat(g, &maps)?;
                head_from_pooled(g, &mut b, pooled, head, cfg.weight_scale)
            })
            .collect()
    };
    // subject k has views 2k and 2k+1; pairs are (anchor, other, label)
    let pairs = [(0, 1, 0u8), (2, 3, 0), (0, 3, 1), (2, 1, 1)];
    let labels: Vec<u8> = pairs.iter().map(|p| p.2).collect();
    let margin = |head: Head| -> Result<_> {
        // a margin well above every distance keeps the clamp active and off its kink
        let mut g = Graph::new();
        let z = embed(&mut g, &params, head)?;
        let mut m: f64 = 0.0;
        for &(a, b, _) in &pairs {
            let d = g.euclidean_distance(z[a], z[b])?;
            m = m.max(g.value(d).data()[0]);
        }
        let m = 4.0 * m + 1.0;
        let labels = labels.clone();
        Ok(
            move |g: &mut Graph, p: &ParamSet| -> morphprint_autodiff::Result<Var> {
                let z = embed(g, p, head).map_err(to_ad)?;
                let mut d = Vec::new();
                for &(a, b, _) in &pairs {
                    d.push(g.euclidean_distance(z[a], z[b])?);
                }
                margin_contrastive_loss(g, &d, &labels, m).map_err(to_ad)
            },
        )
    };
    let ntx = |head: Head| {
        move |g: &mut Graph, p: &ParamSet| -> morphprint_autodiff::Result<Var> {
            let z = embed(g, p, head).map_err(to_ad)?;
            nt_xent_loss(g, &[z[0], z[2]], &[z[1], z[3]], 0.5).map_err(to_ad)
        }
    };
    let cases = [
        ("margin+excitation", "nt_xent+excitation", Head::Excitation),
        ("margin+plain", "nt_xent+plain", Head::Plain),
        ("margin+mlp", "nt_xent+mlp", Head::Mlp),
    ];
    let mut out = Vec::new();
    for (m_name, n_name, head) in cases {
        let sub = relevant(&params, head);
        out.push((m_name, grad_check(margin(head)?, &sub, eps)?.max_rel_error));
        out.push((n_name, grad_check(ntx(head), &sub, eps)?.max_rel_error));
    }
    Ok(out)
}

/// Encoder plus the parameters of one head, so unused pathways are not probed.
fn relevant(params: &ParamSet, head: Head) -> ParamSet {
    let mut p = params.subset("encoder.");
    match head {
        Head::Plain => p.merge(params.subset("head.")),
        Head::Excitation => {
            p.merge(params.subset("head."));
            p.merge(params.subset("excitation."));
        }
        Head::Mlp => p.merge(params.subset("mlp.")),
    }
    p
}

fn to_ad(e: Error) -> morphprint_autodiff::AutodiffError {
    match e {
        Error::Autodiff(a) => a,
        other => morphprint_autodiff::AutodiffError::Format(other.to_string()),
    }
}
