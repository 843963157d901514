//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use super::{EngineError, Matrix, ParamVars, Parameters, Tape, Var};

/// Magnitude below which gradient errors are measured absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked scalars.
    pub max_rel_error: f64,
    /// Parameter and flat index where the largest error occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `(f(x+h) − f(x−h)) / 2h` for a scalar function of one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Compares the tape gradient of `loss_fn` against central differences for
/// every scalar of every parameter. The relative error is
/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`; gradients below the floor are
/// compared absolutely.
pub fn check_gradients<F>(params: &Parameters, h: f64, mut loss_fn: F) -> Result<GradCheckReport, EngineError>
where
    F: FnMut(&mut Tape, &ParamVars) -> Result<Var, EngineError>,
{
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let loss = loss_fn(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: BTreeMap<String, Matrix> = vars.gradients(&tape);

    let mut eval = |p: &Parameters| -> Result<f64, EngineError> {
        let mut t = Tape::new();
        let v = p.register(&mut t);
        let l = loss_fn(&mut t, &v)?;
        Ok(t.scalar(l))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, grad) in &analytic {
        for k in 0..grad.as_slice().len() {
            let original = params.get(name).expect("registered").as_slice()[k];
            probe.get_mut(name).expect("cloned").as_mut_slice()[k] = original + h;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("cloned").as_mut_slice()[k] = original - h;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("cloned").as_mut_slice()[k] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.as_slice()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}

fn random_matrix(rng: &mut super::SeededRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Random matrix in `[−2, 2]` with no entry within `margin` of any kink.
fn away_from(rng: &mut super::SeededRng, rows: usize, cols: usize, kinks: &[f64], margin: f64) -> Matrix {
    let mut m = random_matrix(rng, rows, cols, -2.0, 2.0);
    for v in m.as_mut_slice() {
        for &k in kinks {
            if (*v - k).abs() < margin {
                *v = k + if *v >= k { margin } else { -margin };
            }
        }
    }
    m
}

type OpBuilder = fn(&mut Tape, &[Var], &OpFixtures) -> Result<Var, EngineError>;

struct OpFixtures {
    sparse: std::sync::Arc<super::CsrMatrix>,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

/// Checks every differentiable operator on random inputs in `[−2, 2]`
/// (positive inputs for `log`; relu and clamp inputs kept away from their
/// kinks). Each loss is `sum(op(inputs) ⊙ R)` for a random `R`.
pub fn op_suite(seed: u64, h: f64) -> Result<Vec<(&'static str, GradCheckReport)>, EngineError> {
    let mut rng = super::SeededRng::new(seed);
    let sparse = std::sync::Arc::new(super::CsrMatrix::from_triplets(
        4,
        4,
        [
            (0, 0, 0.5),
            (0, 1, 0.3),
            (1, 0, 0.3),
            (2, 3, -0.7),
            (3, 2, 1.1),
            (3, 3, 0.2),
        ],
    ));
    let fixtures = OpFixtures {
        sparse,
        targets: vec![1.0, 0.0, 1.0, 1.0],
        weights: vec![1.0, 1.0, 0.0, 1.0],
    };
    let cases: Vec<(&'static str, Vec<Matrix>, OpBuilder)> = vec![
        (
            "matmul",
            vec![
                random_matrix(&mut rng, 4, 3, -2.0, 2.0),
                random_matrix(&mut rng, 3, 2, -2.0, 2.0),
            ],
            |t, v, _| t.matmul(v[0], v[1]),
        ),
        ("spmm", vec![random_matrix(&mut rng, 4, 3, -2.0, 2.0)], |t, v, f| {
            t.spmm(f.sparse.clone(), v[0])
        }),
        (
            "add",
            vec![
                random_matrix(&mut rng, 4, 3, -2.0, 2.0),
                random_matrix(&mut rng, 4, 3, -2.0, 2.0),
            ],
            |t, v, _| t.add(v[0], v[1]),
        ),
        (
            "sub",
            vec![
                random_matrix(&mut rng, 4, 3, -2.0, 2.0),
                random_matrix(&mut rng, 4, 3, -2.0, 2.0),
            ],
            |t, v, _| t.sub(v[0], v[1]),
        ),
        (
            "elementwise_mul",
            vec![
                random_matrix(&mut rng, 4, 3, -2.0, 2.0),
                random_matrix(&mut rng, 4, 3, -2.0, 2.0),
            ],
            |t, v, _| t.mul(v[0], v[1]),
        ),
        (
            "add_bias",
            vec![
                random_matrix(&mut rng, 4, 3, -2.0, 2.0),
                random_matrix(&mut rng, 1, 3, -2.0, 2.0),
            ],
            |t, v, _| t.add_bias(v[0], v[1]),
        ),
        ("scale", vec![random_matrix(&mut rng, 4, 3, -2.0, 2.0)], |t, v, _| {
            t.scale(v[0], -1.7)
        }),
        (
            "add_scalar",
            vec![random_matrix(&mut rng, 4, 3, -2.0, 2.0)],
            |t, v, _| t.add_scalar(v[0], 0.3),
        ),
        ("relu", vec![away_from(&mut rng, 4, 3, &[0.0], 1e-2)], |t, v, _| {
            t.relu(v[0])
        }),
        ("tanh", vec![random_matrix(&mut rng, 4, 3, -2.0, 2.0)], |t, v, _| {
            t.tanh(v[0])
        }),
        ("exp", vec![random_matrix(&mut rng, 4, 3, -2.0, 2.0)], |t, v, _| {
            t.exp(v[0])
        }),
        ("log", vec![random_matrix(&mut rng, 4, 3, 0.2, 2.0)], |t, v, _| {
            t.log(v[0])
        }),
        (
            "clamp",
            vec![away_from(&mut rng, 4, 3, &[-1.0, 1.0], 1e-2)],
            |t, v, _| t.clamp(v[0], -1.0, 1.0),
        ),
        (
            "concat_cols",
            vec![
                random_matrix(&mut rng, 4, 2, -2.0, 2.0),
                random_matrix(&mut rng, 4, 3, -2.0, 2.0),
            ],
            |t, v, _| t.concat_cols(v[0], v[1]),
        ),
        (
            "row_cosine_sim_matrix",
            vec![
                random_matrix(&mut rng, 4, 3, -2.0, 2.0),
                random_matrix(&mut rng, 5, 3, -2.0, 2.0),
            ],
            |t, v, _| t.cosine_sim(v[0], v[1]),
        ),
        (
            "row_cosine_sim_matrix(self)",
            vec![random_matrix(&mut rng, 4, 3, -2.0, 2.0)],
            |t, v, _| t.cosine_sim(v[0], v[0]),
        ),
        (
            "softmax_rows",
            vec![random_matrix(&mut rng, 4, 3, -2.0, 2.0)],
            |t, v, _| t.softmax_rows(v[0]),
        ),
        (
            "log_softmax_rows",
            vec![random_matrix(&mut rng, 4, 3, -2.0, 2.0)],
            |t, v, _| t.log_softmax_rows(v[0]),
        ),
        ("diag", vec![random_matrix(&mut rng, 4, 4, -2.0, 2.0)], |t, v, _| {
            t.diag(v[0])
        }),
        ("sum", vec![random_matrix(&mut rng, 4, 3, -2.0, 2.0)], |t, v, _| {
            t.sum(v[0])
        }),
        (
            "reduce_mean",
            vec![random_matrix(&mut rng, 4, 3, -2.0, 2.0)],
            |t, v, _| t.mean(v[0]),
        ),
        (
            "bce_with_logits",
            vec![random_matrix(&mut rng, 4, 1, -2.0, 2.0)],
            |t, v, f| t.bce_with_logits(v[0], &f.targets, &f.weights),
        ),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, build) in cases {
        let mut params = Parameters::new();
        for (k, m) in inputs.into_iter().enumerate() {
            params.insert(format!("in{k}"), m);
        }
        // Output shape fixes the shape of the random projection R.
        let mut probe = Tape::new();
        let probe_vars = params.register(&mut probe);
        let probe_inputs: Vec<Var> = (0..params.len())
            .map(|k| probe_vars.get(&format!("in{k}")))
            .collect::<Result<_, _>>()?;
        let y = build(&mut probe, &probe_inputs, &fixtures)?;
        let (r, c) = probe.shape(y);
        let projection = random_matrix(&mut rng, r, c, -1.0, 1.0);
        let report = check_gradients(&params, h, |tape, vars| {
            let inputs: Vec<Var> = (0..params.len())
                .map(|k| vars.get(&format!("in{k}")))
                .collect::<Result<_, _>>()?;
            let y = build(tape, &inputs, &fixtures)?;
            let p = tape.constant(projection.clone());
            let weighted = tape.mul(y, p)?;
            tape.sum(weighted)
        })?;
        out.push((name, report));
    }
    Ok(out)
}
