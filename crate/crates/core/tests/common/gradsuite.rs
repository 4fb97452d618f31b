//! Finite-difference checks for every differentiable op and for whole
//! encoder losses, in f64. Shared by the gradient tests and the acceptance
//! suite; results are collected rather than asserted.

#![allow(dead_code)]

use codelayers::model::{encode, lm_logits, EncodeOpts, EncoderParams, ModelConfig};
use codelayers::numcore::{
    grad_check_sampled, grad_check_with, sample_coords, GradCheckReport, Graph, NumError, RngStream, Tensor, Var,
};

pub const TOL: f64 = 1e-4;
pub const SAMPLES: usize = 100;

#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Default)]
pub struct Suite {
    pub cases: Vec<Case>,
}

impl Suite {
    fn push(&mut self, name: &str, rep: &GradCheckReport) {
        self.cases.push(Case { name: name.to_string(), max_rel_err: rep.max_rel_err, checked: rep.checked });
    }

    pub fn failures(&self) -> Vec<&Case> {
        self.cases.iter().filter(|c| !(c.max_rel_err < TOL)).collect()
    }
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = RngStream::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| 0.8 * r.normal()).collect()).unwrap()
}

/// Projects a tensor-valued output onto a fixed random direction so every
/// output element contributes to the checked scalar.
fn project(g: &mut Graph<f64>, y: Var) -> Result<Var, NumError> {
    let shape = g.shape(y).to_vec();
    let r = g.constant(random(&shape, 777))?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn check<F>(s: &mut Suite, name: &str, point: Tensor<f64>, f: F)
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, NumError>,
{
    let mut rng = RngStream::new(1).derive(name);
    let rep = grad_check_sampled(
        |g, x| {
            let y = f(g, x)?;
            if g.value(y).len() == 1 {
                Ok(y)
            } else {
                project(g, y)
            }
        },
        &point,
        SAMPLES,
        &mut rng,
    )
    .unwrap_or_else(|e| panic!("{name}: {e}"));
    s.push(name, &rep);
}

pub fn matmul_both_sides(s: &mut Suite) {
    let b = random(&[4, 5], 2);
    check(s, "matmul.a", random(&[3, 4], 1), |g, x| {
        let c = g.constant(b.clone())?;
        g.matmul(x, c)
    });
    let a = random(&[3, 4], 3);
    check(s, "matmul.b", random(&[4, 5], 4), |g, x| {
        let c = g.constant(a.clone())?;
        g.matmul(c, x)
    });
    let bt = random(&[5, 4], 5);
    check(s, "matmul_nt.a", random(&[3, 4], 6), |g, x| {
        let c = g.constant(bt.clone())?;
        g.matmul_nt(x, c)
    });
    check(s, "matmul_nt.b", random(&[5, 4], 7), |g, x| {
        let c = g.constant(a.clone())?;
        g.matmul_nt(c, x)
    });
    check(s, "matmul.self", random(&[4, 4], 8), |g, x| g.matmul(x, x));
}

pub fn elementwise(s: &mut Suite) {
    let o = random(&[3, 4], 10);
    check(s, "add", random(&[3, 4], 11), |g, x| {
        let c = g.constant(o.clone())?;
        g.add(x, c)
    });
    check(s, "sub.a", random(&[3, 4], 12), |g, x| {
        let c = g.constant(o.clone())?;
        g.sub(x, c)
    });
    check(s, "sub.b", random(&[3, 4], 13), |g, x| {
        let c = g.constant(o.clone())?;
        g.sub(c, x)
    });
    check(s, "mul", random(&[3, 4], 14), |g, x| {
        let c = g.constant(o.clone())?;
        g.mul(x, c)
    });
    check(s, "mul.self", random(&[3, 4], 15), |g, x| g.mul(x, x));
    check(s, "scale", random(&[3, 4], 16), |g, x| g.scale(x, -1.7));
    check(s, "gelu", random(&[3, 4], 17), |g, x| g.gelu(x));
    check(s, "tanh", random(&[3, 4], 18), |g, x| g.tanh(x));
    // keep |x| away from the kink at zero
    let away = random(&[3, 4], 19).map(|v| v + 0.3 * v.signum());
    check(s, "abs", away, |g, x| g.abs(x));
}

pub fn row_broadcast_and_reductions(s: &mut Suite) {
    let m = random(&[4, 3], 20);
    check(s, "add_row.x", m.clone(), |g, x| {
        let b = g.constant(random(&[3], 21))?;
        g.add_row(x, b)
    });
    check(s, "add_row.b", random(&[3], 22), |g, x| {
        let c = g.constant(m.clone())?;
        g.add_row(c, x)
    });
    check(s, "mean_rows", random(&[5, 3], 23), |g, x| g.mean_rows(x));
    check(s, "sum", random(&[5, 3], 24), |g, x| g.sum(x));
    check(s, "select_rows", random(&[5, 3], 25), |g, x| g.select_rows(x, &[4, 0, 4, 2]));
}

pub fn softmax_and_norms(s: &mut Suite) {
    check(s, "softmax.0", random(&[4, 5], 30), |g, x| g.softmax(x, 0));
    check(s, "softmax.1", random(&[4, 5], 31), |g, x| g.softmax(x, 1));
    let gain = random(&[6], 32);
    let bias = random(&[6], 33);
    check(s, "layer_norm.x", random(&[3, 6], 34), |g, x| {
        let (a, b) = (g.constant(gain.clone())?, g.constant(bias.clone())?);
        g.layer_norm(x, a, b, 1e-5)
    });
    let xs = random(&[3, 6], 35);
    check(s, "layer_norm.gain", gain.clone(), |g, x| {
        let (c, b) = (g.constant(xs.clone())?, g.constant(bias.clone())?);
        g.layer_norm(c, x, b, 1e-5)
    });
    check(s, "layer_norm.bias", bias.clone(), |g, x| {
        let (c, a) = (g.constant(xs.clone())?, g.constant(gain.clone())?);
        g.layer_norm(c, a, x, 1e-5)
    });
    check(s, "normalize_rows", random(&[4, 5], 36), |g, x| g.normalize_rows(x));
}

pub fn attention_all_inputs(s: &mut Suite) {
    let (q, k, v) = (random(&[5, 8], 40), random(&[5, 8], 41), random(&[5, 8], 42));
    for causal in [false, true] {
        let tag = if causal { "causal" } else { "bidir" };
        check(s, &format!("attention.q.{tag}"), q.clone(), |g, x| {
            let (kk, vv) = (g.constant(k.clone())?, g.constant(v.clone())?);
            g.attention(x, kk, vv, 2, causal)
        });
        check(s, &format!("attention.k.{tag}"), k.clone(), |g, x| {
            let (qq, vv) = (g.constant(q.clone())?, g.constant(v.clone())?);
            g.attention(qq, x, vv, 2, causal)
        });
        check(s, &format!("attention.v.{tag}"), v.clone(), |g, x| {
            let (qq, kk) = (g.constant(q.clone())?, g.constant(k.clone())?);
            g.attention(qq, kk, x, 2, causal)
        });
        check(s, &format!("attention.self.{tag}"), q.clone(), |g, x| g.attention(x, x, x, 4, causal));
    }
}

pub fn concatenation_and_mixing(s: &mut Suite) {
    let o = random(&[3, 2], 50);
    check(s, "concat_cols", random(&[3, 4], 51), |g, x| {
        let c = g.constant(o.clone())?;
        let ax = g.abs(x)?;
        g.concat_cols(&[x, c, ax])
    });
    let o2 = random(&[2, 4], 52);
    check(s, "concat_rows", random(&[3, 4], 53), |g, x| {
        let c = g.constant(o2.clone())?;
        g.concat_rows(&[c, x, x])
    });
    let layers: Vec<Tensor<f64>> = (0..3).map(|i| random(&[2, 4], 54 + i)).collect();
    check(s, "mix.weights", random(&[3], 57), |g, x| {
        let ls: Vec<Var> = layers.iter().map(|t| g.constant(t.clone())).collect::<Result<_, _>>()?;
        let w = g.softmax(x, 0)?;
        g.mix(w, &ls)
    });
    let w = random(&[3], 58);
    check(s, "mix.layers", random(&[2, 4], 59), |g, x| {
        let wv = g.constant(w.clone())?;
        let c0 = g.constant(layers[0].clone())?;
        g.mix(wv, &[c0, x, x])
    });
}

pub fn losses(s: &mut Suite) {
    check(s, "cross_entropy", random(&[4, 6], 60), |g, x| g.cross_entropy(x, &[0, 5, 2, 2]));
    check(s, "bce_with_logits", random(&[6], 61), |g, x| g.bce_with_logits(x, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]));
    check(s, "sup_con", random(&[6, 4], 62), |g, x| {
        let z = g.normalize_rows(x)?;
        g.sup_con(z, &[0, 1, 0, 2, 1, 0], 0.5)
    });
}

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::desk(24);
    c.num_layers = 2;
    c.hidden_dim = 8;
    c.ffn_dim = 16;
    c.num_heads = 2;
    c.max_positions = 12;
    c
}

/// Flattens every parameter into one vector so the checker can perturb any
/// coordinate of the model.
fn flat(p: &EncoderParams<f64>) -> Tensor<f64> {
    Tensor::vector(p.set.iter().flat_map(|q| q.value.data().to_vec()).collect())
}

fn unflatten(template: &EncoderParams<f64>, v: &Tensor<f64>) -> EncoderParams<f64> {
    let mut p = template.clone();
    let mut at = 0;
    for q in p.set.iter_mut() {
        let n = q.value.len();
        q.value.data_mut().copy_from_slice(&v.data()[at..at + n]);
        at += n;
    }
    p
}

fn model_check(s: &mut Suite, name: &str, causal: bool, loss: impl Fn(&mut Graph<f64>, &EncoderParams<f64>, &[Var]) -> Result<Var, NumError>) {
    let mut c = tiny_config();
    if causal {
        c.attention_mode = codelayers::model::AttentionMode::Causal;
    }
    let base = EncoderParams::<f64>::init(&c, &RngStream::new(3)).unwrap();
    // larger-than-default weights so every sublayer contributes visibly
    let point = flat(&base).map(|v| v * 5.0);
    let ids = [2u32, 7, 9, 4, 11, 3];
    let eval = |v: &Tensor<f64>| -> Result<(f64, Tensor<f64>), NumError> {
        let p = unflatten(&base, v);
        let mut g = Graph::new();
        let hs = encode(&mut g, &p, &ids, &EncodeOpts::training(c.attention_mode)).map_err(|e| NumError::Invalid(e.to_string()))?;
        let y = loss(&mut g, &p, &hs)?;
        let grads = g.backward(y)?;
        let mut out = vec![0.0; v.len()];
        let mut at = 0;
        for (i, q) in p.set.iter().enumerate() {
            let n = q.value.len();
            if let Some(t) = grads.param(i) {
                out[at..at + n].copy_from_slice(t.data());
            }
            at += n;
        }
        Ok((g.value(y).item(), Tensor::vector(out)))
    };
    let mut rng = RngStream::new(4).derive(name);
    let coords = sample_coords(point.len(), SAMPLES, &mut rng);
    let rep = grad_check_with(eval, &point, &coords).unwrap();
    assert_eq!(rep.checked, SAMPLES);
    s.push(name, &rep);

    // every encoder layer separately, so no layer hides behind the sample
    let mut at = 0;
    for (i, q) in base.set.iter().enumerate() {
        let n = q.value.len();
        let mut r = RngStream::new(i as u64).derive(name);
        let local: Vec<usize> = sample_coords(n, 4, &mut r).into_iter().map(|j| at + j).collect();
        let rep = grad_check_with(eval, &point, &local).unwrap();
        s.push(&format!("{name}/{}", q.name), &rep);
        at += n;
    }
}

pub fn encoder_masked_lm_loss(s: &mut Suite) {
    model_check(s, "mlm", false, |g, p, hs| {
        let logits = lm_logits(g, p, *hs.last().unwrap(), &[3, 1], true).map_err(|e| NumError::Invalid(e.to_string()))?;
        g.cross_entropy(logits, &[9, 7])
    });
}

pub fn encoder_causal_projection_loss(s: &mut Suite) {
    model_check(s, "causal", true, |g, _p, hs| {
        let y = g.mean_rows(hs[1])?;
        let z = g.mean_rows(hs[2])?;
        let both = g.concat_cols(&[y, z])?;
        project(g, both)
    });
}

/// Every op group, then both encoder losses.
pub fn all() -> Suite {
    let mut s = Suite::default();
    for f in [
        matmul_both_sides,
        elementwise,
        row_broadcast_and_reductions,
        softmax_and_norms,
        attention_all_inputs,
        concatenation_and_mixing,
        losses,
        encoder_masked_lm_loss,
        encoder_causal_projection_loss,
    ] {
        f(&mut s);
    }
    s
}
