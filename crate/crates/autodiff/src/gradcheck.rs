//! Central-difference validation of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::init::normal;
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords: usize,
}

/// Compares `backward` against `(f(p+eps) − f(p−eps)) / 2eps` for every
/// coordinate of every parameter. Relative error uses the denominator
/// `max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let mut grads = g.backward(loss)?;
    grads.fill_missing(params);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, p)?;
        Ok(g.value(l).data()[0])
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coords: 0,
    };
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let analytic = grads.get(name).expect("filled").data().to_vec();
        for (i, a) in analytic.iter().enumerate().take(t.len()) {
            let orig = t.data()[i];
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.to_string(), i));
                }
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor to a scalar through fixed random weights so every
/// output element receives a distinct upstream gradient.
fn probe_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let m = g.elementwise_mul(out, w)?;
    Ok(g.sum(m))
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    normal(shape, 1.0, rng)
}

/// Moves values at least `margin` away from zero (keeps their sign).
fn off_kink(mut t: Tensor, margin: f64) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin } * 1.5;
        }
    }
    t
}

type Case = (
    &'static str,
    ParamSet,
    Box<dyn Fn(&mut Graph, &ParamSet) -> Result<Var>>,
);

fn one_param(name: &str, t: Tensor) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(name, t).expect("fresh set");
    p
}

/// Runs a gradient check on every forward operator with inputs drawn from `seed`.
/// Returns `(operator, max relative error)` pairs.
pub fn operator_suite(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<Case> = Vec::new();

    {
        let mut p = ParamSet::new();
        p.insert("x", random(&[2, 6, 6], &mut rng))?;
        p.insert("k", random(&[3, 2, 3, 3], &mut rng))?;
        p.insert("b", random(&[3], &mut rng))?;
        let stride = 1 + (rng.random::<u32>() % 2) as usize;
        let w = random(
            &[3, (6 + 2 - 3) / stride + 1, (6 + 2 - 3) / stride + 1],
            &mut rng,
        );
        cases.push((
            "conv2d",
            p,
            Box::new(move |g, p| {
                let x = g.param_from(p, "x")?;
                let k = g.param_from(p, "k")?;
                let b = g.param_from(p, "b")?;
                let y = g.conv2d(x, k, Some(b), stride, 1)?;
                probe_sum(g, y, &w)
            }),
        ));
    }
    {
        let x = off_kink(random(&[12], &mut rng), 1e-2);
        let w = random(&[12], &mut rng);
        cases.push((
            "relu",
            one_param("x", x),
            Box::new(move |g, p| {
                let x = g.param_from(p, "x")?;
                let y = g.relu(x);
                probe_sum(g, y, &w)
            }),
        ));
    }
    {
        let x = random(&[10], &mut rng);
        let w = random(&[10], &mut rng);
        cases.push((
            "sigmoid",
            one_param("x", x),
            Box::new(move |g, p| {
                let x = g.param_from(p, "x")?;
                let y = g.sigmoid(x);
                probe_sum(g, y, &w)
            }),
        ));
    }
    {
        let mut p = ParamSet::new();
        p.insert("w", random(&[4, 5], &mut rng))?;
        p.insert("x", random(&[5], &mut rng))?;
        p.insert("b", random(&[4], &mut rng))?;
        let w = random(&[4], &mut rng);
        cases.push((
            "linear",
            p,
            Box::new(move |g, p| {
                let wt = g.param_from(p, "w")?;
                let x = g.param_from(p, "x")?;
                let b = g.param_from(p, "b")?;
                let y = g.linear(x, wt, Some(b))?;
                probe_sum(g, y, &w)
            }),
        ));
    }
    {
        let x = random(&[2, 6, 5], &mut rng);
        let w = random(&[2, 3, 2], &mut rng);
        cases.push((
            "max_pool",
            one_param("x", x),
            Box::new(move |g, p| {
                let x = g.param_from(p, "x")?;
                let y = g.max_pool2(x)?;
                probe_sum(g, y, &w)
            }),
        ));
    }
    {
        let x = random(&[3, 4, 5], &mut rng);
        let w = random(&[3], &mut rng);
        cases.push((
            "global_avg_pool",
            one_param("x", x),
            Box::new(move |g, p| {
                let x = g.param_from(p, "x")?;
                let y = g.global_avg_pool(x)?;
                probe_sum(g, y, &w)
            }),
        ));
    }
    {
        let mut p = ParamSet::new();
        p.insert("a", random(&[2, 3, 3], &mut rng))?;
        p.insert("b", random(&[1, 3, 3], &mut rng))?;
        let w = random(&[27], &mut rng);
        cases.push((
            "concat+flatten",
            p,
            Box::new(move |g, p| {
                let a = g.param_from(p, "a")?;
                let b = g.param_from(p, "b")?;
                let c = g.concat(&[a, b])?;
                let f = g.flatten(c);
                probe_sum(g, f, &w)
            }),
        ));
    }
    {
        let mut p = ParamSet::new();
        p.insert("a", random(&[6], &mut rng))?;
        p.insert("b", random(&[6], &mut rng))?;
        let w = random(&[6], &mut rng);
        cases.push((
            "add/sub/mul/scalar",
            p,
            Box::new(move |g, p| {
                let a = g.param_from(p, "a")?;
                let b = g.param_from(p, "b")?;
                let s = g.add(a, b)?;
                let d = g.sub(a, b)?;
                let m = g.elementwise_mul(s, d)?;
                let c = g.scalar_mul(m, -0.7);
                let c = g.add_scalar(c, 0.3);
                probe_sum(g, c, &w)
            }),
        ));
    }
    {
        let mut p = ParamSet::new();
        p.insert("x", random(&[5], &mut rng))?;
        let mut s = random(&[1], &mut rng);
        s.data_mut()[0] = s.data()[0].abs() + 0.5;
        p.insert("s", s)?;
        let w = random(&[5], &mut rng);
        cases.push((
            "scale_by/recip/mean",
            p,
            Box::new(move |g, p| {
                let x = g.param_from(p, "x")?;
                let s = g.param_from(p, "s")?;
                let r = g.recip(s);
                let y = g.scale_by(x, r)?;
                let m = g.mean(x);
                let y = g.scale_by(y, m)?;
                probe_sum(g, y, &w)
            }),
        ));
    }
    {
        let mut x = random(&[6], &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.2);
        let w = random(&[6], &mut rng);
        cases.push((
            "exp/ln/square",
            one_param("x", x),
            Box::new(move |g, p| {
                let x = g.param_from(p, "x")?;
                let l = g.ln(x);
                let e = g.exp(l);
                let q = g.square(e);
                let y = g.add(q, l)?;
                probe_sum(g, y, &w)
            }),
        ));
    }
    {
        let mut p = ParamSet::new();
        p.insert("a", random(&[7], &mut rng))?;
        p.insert("b", random(&[7], &mut rng))?;
        cases.push((
            "euclidean_distance",
            p,
            Box::new(move |g, p| {
                let a = g.param_from(p, "a")?;
                let b = g.param_from(p, "b")?;
                let d = g.euclidean_distance(a, b)?;
                Ok(g.scalar_mul(d, 1.3))
            }),
        ));
    }
    {
        let x = random(&[5], &mut rng);
        cases.push((
            "log_sum_exp/stack/select",
            one_param("x", x),
            Box::new(move |g, p| {
                let x = g.param_from(p, "x")?;
                let a = g.select(x, 1)?;
                let b = g.select(x, 3)?;
                let s = g.stack(&[a, b, a])?;
                let l1 = g.log_sum_exp(s)?;
                let l2 = g.log_sum_exp(x)?;
                let t = g.stack(&[l1, l2])?;
                let w = g.constant(Tensor::vector(vec![0.6, -1.1]));
                let m = g.elementwise_mul(t, w)?;
                Ok(g.sum(m))
            }),
        ));
    }
    {
        let x = random(&[6], &mut rng);
        let mut p = one_param("x", x);
        p.insert("w", random(&[6, 6], &mut rng))?;
        cases.push((
            "sigmoid_chain",
            p,
            Box::new(move |g, p| {
                let x = g.param_from(p, "x")?;
                let w = g.param_from(p, "w")?;
                let h = g.sigmoid(x);
                let h = g.linear(h, w, None)?;
                let h = g.sigmoid(h);
                let h = g.linear(h, w, None)?;
                let h = g.sigmoid(h);
                Ok(g.sum(h))
            }),
        ));
    }

    let mut out = Vec::with_capacity(cases.len());
    for (name, params, f) in cases {
        let report = grad_check(|g, p| f(g, p), &params, eps)?;
        out.push((name, report.max_rel_error));
    }
    Ok(out)
}
