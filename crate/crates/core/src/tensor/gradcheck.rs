use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Magnitudes below this are compared absolutely; central differences cannot
/// resolve relative error on near-zero gradients.
pub const REL_FLOOR: f64 = 1e-4;

/// Checks the gradient of scalar `f` at `x` against central differences.
///
/// `f` records its computation on the tape it is given, starting from the
/// leaf it receives, and returns a scalar.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = f(&mut tape, v)?;
        let value = tape.value(y).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("f(x) = {value}")));
        }
        Ok(value)
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let y = f(&mut tape, v)?;
    if !tape.value(y).item().is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {}", tape.value(y).item())));
    }
    let grads = tape.backward(y)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.get(v).unwrap_or(&zeros);

    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: 0,
        checked: x.len(),
        passed: true,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

/// Finite-difference step used by [`primitive_grad_checks`].
pub const SUITE_EPS: f64 = 1e-5;

type Case = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Checks every differentiable primitive in f64. Each case is composed with
/// a random linear read-out so every output element reaches the scalar.
pub fn primitive_grad_checks(tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let g = rand_tensor(&mut rng, &[1, 4]);
    let bias = rand_tensor(&mut rng, &[1, 4]);
    let other = rand_tensor(&mut rng, &[3, 4]);
    let right = rand_tensor(&mut rng, &[4, 2]);
    let left = rand_tensor(&mut rng, &[2, 3]);
    let teacher = rand_tensor(&mut rng, &[3, 4]);

    let c = |t: &Tensor<f64>| t.clone();
    let (o1, o2, o3) = (c(&other), c(&other), c(&other));
    let (g1, b1, g2, b2, x2, x3, b3) = (c(&g), c(&bias), c(&g), c(&bias), c(&x), c(&x), c(&bias));
    let cases: Vec<(&'static str, Case)> = vec![
        ("matmul_lhs", Box::new(move |t, x| { let r = t.constant(right.clone()); t.matmul(x, r) })),
        ("matmul_rhs", Box::new(move |t, x| { let l = t.constant(left.clone()); t.matmul(l, x) })),
        ("matmul_bt", Box::new(|t, x| { let y = t.gelu(x); t.matmul_bt(x, y) })),
        ("add", Box::new(move |t, x| { let o = t.constant(o1.clone()); t.add(x, o) })),
        ("sub", Box::new(move |t, x| { let o = t.constant(o2.clone()); t.sub(o, x) })),
        ("mul", Box::new(|t, x| t.mul(x, x))),
        ("scale", Box::new(|t, x| Ok(t.scale(x, -1.7)))),
        ("add_row", Box::new(move |t, x| { let b = t.constant(b3.clone()); t.add_row(x, b) })),
        ("add_row_bias", Box::new(|t, x| { let m = t.constant(Tensor::full(&[2, 4], 0.5)); let b = t.mean_pool(x, 0)?; t.add_row(m, b) })),
        ("softmax", Box::new(|t, x| Ok(t.softmax(x)))),
        ("layer_norm", Box::new(move |t, x| { let gg = t.constant(g1.clone()); let bb = t.constant(b1.clone()); t.layer_norm(x, gg, bb, 1e-5) })),
        ("layer_norm_gain", Box::new(move |t, x| {
            let xx = t.constant(x2.clone());
            let gg = t.mean_pool(x, 0)?;
            let bb = t.constant(b2.clone());
            t.layer_norm(xx, gg, bb, 1e-5)
        })),
        ("layer_norm_bias", Box::new(move |t, x| {
            let xx = t.constant(x3.clone());
            let gg = t.constant(g2.clone());
            let bb = t.mean_pool(x, 0)?;
            t.layer_norm(xx, gg, bb, 1e-5)
        })),
        ("gelu", Box::new(|t, x| Ok(t.gelu(x)))),
        ("embedding", Box::new(|t, x| t.embedding(x, &[2, 0, 2, 1]))),
        ("concat_rows", Box::new(|t, x| { let y = t.scale(x, 2.0); t.concat_rows(&[x, y]) })),
        ("concat_cols", Box::new(|t, x| { let y = t.gelu(x); t.concat_cols(&[y, x]) })),
        ("slice_rows", Box::new(|t, x| t.slice_rows(x, 1, 2))),
        ("slice_cols", Box::new(|t, x| t.slice_cols(x, 1, 2))),
        ("gather_rows", Box::new(|t, x| t.gather_rows(x, &[2, 2, 0]))),
        ("mean_pool_rows", Box::new(|t, x| t.mean_pool(x, 0))),
        ("mean_pool_cols", Box::new(|t, x| t.mean_pool(x, 1))),
        ("sum", Box::new(|t, x| Ok(t.sum(x)))),
        ("transpose", Box::new(|t, x| Ok(t.transpose(x)))),
        ("l2_normalize", Box::new(|t, x| t.l2_normalize(x))),
        ("cosine_sim", Box::new(move |t, x| { let o = t.constant(o3.clone()); t.cosine_sim_matrix(x, o) })),
        ("cosine_self", Box::new(|t, x| t.cosine_sim_matrix(x, x))),
        ("rope", Box::new(|t, x| t.rope(x, &[0, 3, 7], 10000.0))),
        ("cross_entropy", Box::new(|t, x| Ok(t.cross_entropy(x, &[Some(1), None, Some(3)])?.loss))),
        ("kl_div", Box::new(move |t, x| Ok(t.kl_div(&teacher, x, &[true, false, true])?.loss))),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, f) in cases {
        let f = std::rc::Rc::new(f);
        let shape = {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true);
            let y = f(&mut t, v)?;
            t.value(y).shape().to_vec()
        };
        let w = rand_tensor(&mut rng, &shape);
        let report = grad_check(
            |t, v| {
                let y = f(t, v)?;
                let ww = t.constant(w.clone());
                let y = t.mul(y, ww)?;
                Ok(t.sum(y))
            },
            &x,
            SUITE_EPS,
            tol,
        )?;
        out.push((name, report));
    }
    Ok(out)
}
