//! Gradient-check cases shared by the gradient tests and the acceptance run.
//! Each returns the labeled worst relative errors it measured.

use pldr::attention::{
    energy_curvature, metric_learner, plga_mha, swiglu_ffn, AttentionConfig, AttentionWeights, MetricLearnerWeights,
    SeqShape, SwiGluWeights,
};
use pldr::gradcheck::grad_check;
use pldr::graph::{Graph, Var};
use pldr::model::{Model, ModelConfig, ModelInput};
use pldr::params::{ParamRegistry, ParamStore};
use pldr::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

pub type Errors = Vec<(String, f64)>;

fn wavy(shape: &[usize], phase: f64, amp: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| amp * ((i as f64 + phase) * 0.917).sin())
}

/// Binds every array in `store` as a constant except `replace`, which takes `v`.
fn bind_with(g: &mut Graph<f64>, store: &ParamStore<f64>, replace: Option<(usize, Var)>) -> Vec<Var> {
    store
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| match replace {
            Some((j, v)) if i == j => v,
            _ => g.constant(t.clone()),
        })
        .collect()
}

pub fn dag_loss_case() -> Errors {
    let m = wavy(&[8, 8], 0.3, 0.4);
    let stacked = wavy(&[3, 4, 4], 1.1, 0.6);
    vec![
        ("dag_loss 8x8".into(), grad_check(&m, STEP, |g, v| Ok(g.dag_loss(v)?.0)).unwrap()),
        ("dag_loss stacked".into(), grad_check(&stacked, STEP, |g, v| Ok(g.dag_loss(v)?.0)).unwrap()),
    ]
}

pub fn expm_trace_case() -> Errors {
    let m = wavy(&[5, 5], 0.0, 1.5);
    vec![("expm_trace".into(), grad_check(&m, STEP, |g, v| Ok(g.expm_trace(v)?.0)).unwrap())]
}

pub fn iswiglu_case() -> Errors {
    let x = wavy(&[4, 5], 0.2, 3.0);
    let err = grad_check(&x, STEP, |g, v| {
        let y = g.iswiglu(v);
        Ok(g.sum(y))
    })
    .unwrap();
    vec![("iswiglu".into(), err)]
}

pub fn swiglu_case() -> Errors {
    let mut reg = ParamRegistry::default();
    let w = SwiGluWeights::register(&mut reg, "f", 4, 6, 3, 0.5);
    let store = ParamStore::<f64>::initialize(&reg.into_specs(), 11);
    let x = wavy(&[2, 4], 0.5, 1.0);
    let mut out = Errors::new();
    let err = grad_check(&x, STEP, |g, v| {
        let vars = bind_with(g, &store, None);
        let y = swiglu_ffn(g, v, &w.bind(&vars))?;
        let y2 = g.mul(y, y)?;
        Ok(g.sum(y2))
    })
    .unwrap();
    out.push(("swiglu input".into(), err));
    for p in 0..store.len() {
        let err = grad_check(&store.tensors()[p], STEP, |g, v| {
            let xv = g.constant(x.clone());
            let vars = bind_with(g, &store, Some((p, v)));
            let y = swiglu_ffn(g, xv, &w.bind(&vars))?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        })
        .unwrap();
        out.push((format!("swiglu {}", store.names()[p]), err));
    }
    out
}

pub fn metric_learner_case(cfg: &AttentionConfig) -> Errors {
    let mut reg = ParamRegistry::default();
    let w = MetricLearnerWeights::register(&mut reg, "m", cfg, 0.4);
    let store = ParamStore::<f64>::initialize(&reg.into_specs(), 5);
    let q = wavy(&[2, 3, cfg.d_k], 0.1, 1.2);
    let weights = wavy(&[2, 3, cfg.d_k, cfg.d_k], 2.0, 1.0);
    let objective = |g: &mut Graph<f64>, a: Var| -> pldr::Result<Var> {
        let c = g.constant(weights.clone());
        let y = g.mul(a, c)?;
        Ok(g.sum(y))
    };
    let mut out = Errors::new();
    let err = grad_check(&q, STEP, |g, v| {
        let vars = bind_with(g, &store, None);
        let a = metric_learner(g, v, &w.bind(&vars))?;
        objective(g, a)
    })
    .unwrap();
    out.push(("metric_learner input".into(), err));
    for p in 0..store.len() {
        let err = grad_check(&store.tensors()[p], STEP, |g, v| {
            let qv = g.constant(q.clone());
            let vars = bind_with(g, &store, Some((p, v)));
            let a = metric_learner(g, qv, &w.bind(&vars))?;
            objective(g, a)
        })
        .unwrap();
        out.push((format!("metric_learner {}", store.names()[p]), err));
    }
    out
}

pub fn energy_curvature_case() -> Errors {
    let a = wavy(&[1, 2, 3, 4, 4], 0.0, 1.0);
    let w_g = wavy(&[2, 4, 4], 1.0, 0.7);
    let b_g = wavy(&[2, 4], 2.0, 0.7);
    let coef = wavy(&[1, 2, 3, 4, 4], 3.0, 1.0);
    let obj = |g: &mut Graph<f64>, a: Var, w: Var, b: Var| -> pldr::Result<Var> {
        let y = energy_curvature(g, a, w, b, 2, 3)?;
        let c = g.constant(coef.clone());
        let y = g.mul(y, c)?;
        Ok(g.sum(y))
    };
    let e1 = grad_check(&a, STEP, |g, v| {
        let (w, b) = (g.constant(w_g.clone()), g.constant(b_g.clone()));
        obj(g, v, w, b)
    })
    .unwrap();
    let e2 = grad_check(&w_g, STEP, |g, v| {
        let (x, b) = (g.constant(a.clone()), g.constant(b_g.clone()));
        obj(g, x, v, b)
    })
    .unwrap();
    let e3 = grad_check(&b_g, STEP, |g, v| {
        let (x, w) = (g.constant(a.clone()), g.constant(w_g.clone()));
        obj(g, x, w, v)
    })
    .unwrap();
    vec![("energy_curvature A_P".into(), e1), ("energy_curvature W_G".into(), e2), ("energy_curvature b_G".into(), e3)]
}

pub fn plga_case() -> Errors {
    let cfg = AttentionConfig { residual_units: 1, ..AttentionConfig::v5(2, 4) };
    let mut reg = ParamRegistry::default();
    let w = AttentionWeights::register(&mut reg, "attn", &cfg, 0.3);
    let mut store = ParamStore::<f64>::initialize(&reg.into_specs(), 9);
    // move P, W_G and b_G away from their symmetric starting values
    for name in ["attn.power", "attn.w_g", "attn.b_g"] {
        let t = store.get_mut(name).unwrap();
        let n = t.numel();
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x += 0.2 * ((i as f64 * 1.7) + n as f64).sin();
        }
    }
    let last = [2usize, 1];
    let x = wavy(&[2 * 3, cfg.d_model], 0.4, 1.0);
    let coef = wavy(&[2 * 3, cfg.d_model], 1.3, 1.0);
    let dcoef = wavy(&[2, 2, 4, 4], 2.3, 1.0);
    let objective = |g: &mut Graph<f64>, x: Var, vars: &[Var]| -> pldr::Result<Var> {
        let shape = SeqShape { batch: 2, seq: 3, last: &last };
        let (y, ded) = plga_mha(g, &cfg, &w.bind(vars), x, shape)?;
        let c = g.constant(coef.clone());
        let y = g.mul(y, c)?;
        let s = g.sum(y);
        let dc = g.constant(dcoef.clone());
        let gl = g.mul(ded.g_lm, dc)?;
        let gs = g.sum(gl);
        let (dl, _) = g.dag_loss(ded.a_lm)?;
        let t = g.add(s, gs)?;
        g.add(t, dl)
    };
    let mut out = Errors::new();
    let err = grad_check(&x, STEP, |g, v| {
        let vars = bind_with(g, &store, None);
        objective(g, v, &vars)
    })
    .unwrap();
    out.push(("plga_mha input".into(), err));
    for p in 0..store.len() {
        let err = grad_check(&store.tensors()[p], STEP, |g, v| {
            let xv = g.constant(x.clone());
            let vars = bind_with(g, &store, Some((p, v)));
            objective(g, xv, &vars)
        })
        .unwrap();
        out.push((format!("plga_mha {}", store.names()[p]), err));
    }
    out
}

/// CE plus 0.1·DL(A_LM) of a one-layer model, checked at a spread of
/// entries of every parameter array.
pub fn full_model_case() -> Errors {
    let cfg = ModelConfig { vocab_size: 9, residual_units: 1, context_length: 8, ..ModelConfig::v5(1, 2, 8) };
    let mut model = Model::<f64>::new(cfg, 4).unwrap();
    let input = ModelInput { ids: vec![1, 2, 3, 4, 5, 0], batch: 2, seq: 3, last: vec![2, 1] };
    let targets = vec![2, 3, 4, 5, 0, 0];
    let keep = vec![true, true, true, true, false, false];
    let loss = |m: &Model<f64>, grad: bool| {
        let mut g = Graph::new();
        let fv = m.forward_graph(&mut g, &input, grad).unwrap();
        let ce = g.cross_entropy(fv.logits, &targets, &keep).unwrap();
        let (dl, _) = g.dag_loss(fv.deductive[0].a_lm).unwrap();
        let dl = g.scale(dl, 0.1);
        let total = g.add(ce, dl).unwrap();
        (g, total, fv.params)
    };
    let (g, total, pvars) = loss(&model, true);
    let grads = g.backward(total).unwrap();
    let analytic: Vec<Tensor<f64>> = pvars.iter().map(|&v| grads.wrt(v)).collect();
    let mut out = Errors::new();
    for p in 0..model.params().len() {
        let n = model.params().tensors()[p].numel();
        let mut worst = 0.0f64;
        for k in [0, n / 3, n / 2, n - 1] {
            let orig = model.params().tensors()[p].data()[k];
            model.params_mut().tensors_mut()[p].data_mut()[k] = orig + STEP;
            let up = {
                let (g, t, _) = loss(&model, false);
                g.value(t).item()
            };
            model.params_mut().tensors_mut()[p].data_mut()[k] = orig - STEP;
            let down = {
                let (g, t, _) = loss(&model, false);
                g.value(t).item()
            };
            model.params_mut().tensors_mut()[p].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * STEP);
            worst = worst.max((fd - analytic[p].data()[k]).abs() / fd.abs().max(1.0));
        }
        out.push((format!("model {}", model.params().names()[p]), worst));
    }
    out
}
