use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cg::CgConfig;
use crate::graph::{build_laplacian, fixtures, LaplacianKind};
use crate::matrix::Matrix;
use crate::sparse::CsrMatrix;

use super::{Result, SparseOperator};

use super::{Tape, TensorError, Var};

const STEP_RANGE: (f64, f64) = (1e-7, 1e-3);

/// Compares tape gradients of a scalar program against central differences at
/// `point`. Returns the largest `|a − n| / (|a| + |n| + 1e−12)` over all
/// entries; failures inside the program are reported as `f64::INFINITY`.
pub fn gradcheck<F, E>(f: F, point: &Matrix, step: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> std::result::Result<Var<'t>, E>,
    E: From<TensorError>,
{
    gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)
}

/// [`gradcheck`] over several inputs at once.
pub fn gradcheck_many<F, E>(f: F, points: &[Matrix], step: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> std::result::Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let h = step.clamp(STEP_RANGE.0, STEP_RANGE.1);
    let analytic = match analytic_grads(&f, points) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };
    let eval = |pts: &[Matrix]| -> Option<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&tape, &vars).ok()?;
        let v = out.value();
        (v.shape() == [1, 1]).then(|| v.item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Matrix> = points.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for e in 0..points[k].len() {
            let orig = points[k].data()[e];
            work[k].data_mut()[e] = orig + h;
            let plus = eval(&work);
            work[k].data_mut()[e] = orig - h;
            let minus = eval(&work);
            work[k].data_mut()[e] = orig;
            let (Some(plus), Some(minus)) = (plus, minus) else {
                return f64::INFINITY;
            };
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if !err.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max(err);
        }
    }
    worst
}

fn analytic_grads<F, E>(f: &F, points: &[Matrix]) -> std::result::Result<Vec<Matrix>, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> std::result::Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(points)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
        .collect())
}

pub(crate) fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
}

/// Random weights bounded away from zero so no gradient entry vanishes.
pub(crate) fn probe_weights(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::new(
        r,
        c,
        (0..r * c)
            .map(|_| {
                let m = rng.random_range(0.5..1.5);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect(),
    )
}

pub type Program = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

/// One randomly shaped instance of a primitive: the program, its inputs and
/// the finite-difference step.
pub fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> (Program, Vec<Matrix>, f64) {
    let r = rng.random_range(1..5);
    let c = rng.random_range(1..5);
    let k = rng.random_range(1..5);
    let probe = probe_weights(rng, r, c);
    let smooth = 1e-5;
    macro_rules! unary {
        ($lo:expr, $hi:expr, |$x:ident| $body:expr) => {{
            let x = random_matrix(rng, r, c, $lo, $hi);
            let p = probe.clone();
            let prog: Program = Box::new(move |tape, v| {
                let $x = v[0];
                $body.mul(tape.constant(p.clone())).map(Var::sum)
            });
            (prog, vec![x], smooth)
        }};
    }
    match name {
        "matmul" => {
            let a = random_matrix(rng, r, k, -1.0, 1.0);
            let b = random_matrix(rng, k, c, -1.0, 1.0);
            let prog: Program =
                Box::new(move |tape, v| v[0].matmul(v[1])?.mul(tape.constant(probe.clone())).map(Var::sum));
            (prog, vec![a, b], 1e-3)
        }
        "spmm" => {
            // deliberately non-symmetric so the transpose path is exercised
            let mut trip = Vec::new();
            for i in 0..r {
                for j in 0..k {
                    if rng.random_bool(0.6) {
                        trip.push((i, j, rng.random_range(-2.0..2.0)));
                    }
                }
            }
            let op = SparseOperator::new(CsrMatrix::from_triplets(r, k, &trip));
            let b = random_matrix(rng, k, c, -1.0, 1.0);
            let prog: Program =
                Box::new(move |tape, v| v[0].spmm_left(&op)?.mul(tape.constant(probe.clone())).map(Var::sum));
            (prog, vec![b], 1e-3)
        }
        "add" | "sub" | "mul" => {
            let a = random_matrix(rng, r, c, -1.0, 1.0);
            let b = random_matrix(rng, r, c, 0.5, 1.5);
            let which = name.to_string();
            let prog: Program = Box::new(move |tape, v| {
                let y = match which.as_str() {
                    "add" => v[0].add(v[1])?,
                    "sub" => v[0].sub(v[1])?,
                    _ => v[0].mul(v[1])?,
                };
                y.mul(tape.constant(probe.clone())).map(Var::sum)
            });
            (prog, vec![a, b], 1e-3)
        }
        "add_row" => {
            let a = random_matrix(rng, r, c, -1.0, 1.0);
            let b = random_matrix(rng, 1, c, -1.0, 1.0);
            let prog: Program =
                Box::new(move |tape, v| v[0].add_row(v[1])?.mul(tape.constant(probe.clone())).map(Var::sum));
            (prog, vec![a, b], 1e-3)
        }
        "mul_col" => {
            let a = random_matrix(rng, r, c, 0.5, 1.5);
            let b = random_matrix(rng, r, 1, 0.5, 1.5);
            let prog: Program =
                Box::new(move |tape, v| v[0].mul_col(v[1])?.mul(tape.constant(probe.clone())).map(Var::sum));
            (prog, vec![a, b], 1e-3)
        }
        "scale" => unary!(-1.0, 1.0, |x| x.scale(-2.5).add_scalar(0.3)),
        "concat" => {
            let a = random_matrix(rng, r, c, -1.0, 1.0);
            let b = random_matrix(rng, r, k, -1.0, 1.0);
            let pw = probe_weights(rng, r, c + k);
            let prog: Program = Box::new(move |tape, v| {
                tape.concat(&[v[0], v[1]])?.mul(tape.constant(pw.clone())).map(Var::sum)
            });
            (prog, vec![a, b], 1e-3)
        }
        "select_rows" => {
            let a = random_matrix(rng, r, c, -1.0, 1.0);
            let idx: Vec<usize> = (0..r + 1).map(|_| rng.random_range(0..r)).collect();
            let pw = probe_weights(rng, idx.len(), c);
            let prog: Program = Box::new(move |tape, v| {
                v[0].select_rows(&idx)?.mul(tape.constant(pw.clone())).map(Var::sum)
            });
            (prog, vec![a], 1e-3)
        }
        "slice_cols" => {
            let a = random_matrix(rng, r, c + k, -1.0, 1.0);
            let prog: Program = Box::new(move |tape, v| {
                v[0].slice_cols(k, c)?.mul(tape.constant(probe.clone())).map(Var::sum)
            });
            (prog, vec![a], 1e-3)
        }
        "sum_mean" => {
            let a = random_matrix(rng, r, c, -1.0, 1.0);
            let pw = probe_weights(rng, 1, c);
            let pr = probe_weights(rng, r, 1);
            let prog: Program = Box::new(move |tape, v| {
                let s = v[0].sum().scale(0.7);
                let m = v[0].mean();
                let rows = v[0].sum_cols().mul(tape.constant(pr.clone()))?.sum();
                let cols = v[0].mean_rows().mul(tape.constant(pw.clone()))?.sum();
                s.add(m)?.add(rows)?.add(cols)
            });
            (prog, vec![a], 1e-3)
        }
        "sin" => unary!(-1.0, 1.0, |x| x.sin()),
        "cos" => unary!(0.3, 1.3, |x| x.cos()),
        "tanh" => unary!(-1.5, 1.5, |x| x.tanh()),
        "exp" => unary!(-1.0, 1.0, |x| x.exp()),
        "ln" => unary!(0.5, 2.0, |x| x.ln()),
        "softplus" => unary!(-2.0, 2.0, |x| x.softplus()),
        "sigmoid" => unary!(-2.0, 2.0, |x| x.sigmoid()),
        "gelu" => unary!(0.1, 2.0, |x| x.gelu()),
        "recip" => unary!(0.5, 2.0, |x| x.recip()),
        "powf" => unary!(0.2, 1.0, |x| x.powf(2.5)),
        "clamp" => unary!(0.1, 0.9, |x| x.clamp(1e-12, 1.0)),
        "layer_norm" => {
            let c = c.max(3) + 1;
            let x = random_matrix(rng, r, c, -2.0, 2.0);
            let g = random_matrix(rng, 1, c, 0.5, 1.5);
            let b = random_matrix(rng, 1, c, -0.5, 0.5);
            let pw = probe_weights(rng, r, c);
            let prog: Program = Box::new(move |tape, v| {
                v[0].layer_norm(v[1], v[2], 1e-5)?.mul(tape.constant(pw.clone())).map(Var::sum)
            });
            (prog, vec![x, g, b], smooth)
        }
        "softmax" => unary!(-2.0, 2.0, |x| x.softmax()),
        "dropout" => {
            let x = random_matrix(rng, r, c, -1.0, 1.0);
            let seed = rng.random::<u64>();
            let prog: Program = Box::new(move |tape, v| {
                // the mask is reseeded on every call, so both sides see the same mask
                let mut local = ChaCha8Rng::seed_from_u64(seed);
                v[0].dropout(0.4, true, &mut local)?.add_scalar(0.1).mul(tape.constant(probe.clone())).map(Var::sum)
            });
            (prog, vec![x], 1e-3)
        }
        "nll_gather" => {
            let x = random_matrix(rng, r, c, -1.0, 1.0);
            let pos: Vec<(usize, usize)> = (0..r).map(|i| (i, rng.random_range(0..c))).collect();
            let prog: Program = Box::new(move |_, v| Ok(v[0].softmax().nll_gather(&pos)?.sum()));
            (prog, vec![x], smooth)
        }
        "solve_shifted" => {
            let g = fixtures::path(r + 2);
            let op = SparseOperator::new(build_laplacian(&g, LaplacianKind::Combinatorial));
            let b = random_matrix(rng, r + 2, c, -1.0, 1.0);
            let pw = probe_weights(rng, r + 2, c);
            let cfg = CgConfig { tolerance: 1e-14, max_iter: 200 };
            let prog: Program = Box::new(move |tape, v| {
                v[0].solve_shifted(&op, 0.7, cfg)?.mul(tape.constant(pw.clone())).map(Var::sum)
            });
            (prog, vec![b], 1e-3)
        }
        other => panic!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: &[&str] = &[
    "matmul", "spmm", "add", "sub", "mul", "add_row", "mul_col", "scale", "concat", "select_rows",
    "slice_cols", "sum_mean", "sin", "cos", "tanh", "exp", "ln", "softplus", "sigmoid", "gelu",
    "recip", "powf", "clamp", "layer_norm", "softmax", "dropout", "nll_gather", "solve_shifted",
];


/// Worst relative error per primitive over `draws` random shapes and inputs.
pub fn primitive_gradchecks(draws: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PRIMITIVES
        .iter()
        .map(|&name| {
            let worst = (0..draws)
                .map(|_| {
                    let (prog, points, step) = primitive_case(name, &mut rng);
                    gradcheck_many(prog, &points, step)
                })
                .fold(0.0f64, f64::max);
            (name, worst)
        })
        .collect()
}
