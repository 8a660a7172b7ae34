//! Finite-difference checks over random small instances of every layer and
//! loss, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{mse_logit_loss, soft_target_loss};
use crate::error::Result;
use crate::layers::{BatchNormLayer, Conv2Plus1dLayer, Conv2dLayer, Conv3dLayer, Linear, Mode};
use crate::tensor::gradcheck::{check, project, GradCheckReport, DEFAULT_EPS};
use crate::tensor::{ParamStore, Tensor};

/// Names of the checked cases, in suite order.
pub const CASES: [&str; 12] = [
    "conv2d",
    "conv3d",
    "conv2plus1d",
    "batchnorm-train",
    "batchnorm-eval",
    "linear",
    "relu",
    "global-avg-pool",
    "softmax-temperature",
    "cross-entropy",
    "soft-target-loss",
    "mse-logit-loss",
];

/// Worst result of one case over all its instances.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Instance index and entry label of the worst entry.
    pub worst: Option<(usize, String, usize)>,
}

impl CaseResult {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values with magnitude in `[0.1, 1]`, away from the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn distribution_rows(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor<f64> {
    let mut y = Vec::with_capacity(b * k);
    for _ in 0..b {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        y.extend(raw.iter().map(|v| v / s));
    }
    Tensor::new([b, k], y).expect("sized")
}

fn randomize_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let p = store.get_mut(&n).expect("listed");
        let var = n.ends_with("running_var");
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = if var { rng.random_range(0.5..1.5) } else { rng.random_range(-1.0..1.0) });
    }
}

/// One random instance of case `name`.
pub fn check_instance(name: &str, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let eps = DEFAULT_EPS;
    let mut store = ParamStore::<f64>::new();
    match name {
        "conv2d" => {
            let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let k = [rng.random_range(1..=3), rng.random_range(1..=3)];
            let stride = [rng.random_range(1..=2), rng.random_range(1..=2)];
            let pad = [rng.random_range(0..=1), rng.random_range(0..=1)];
            let layer = Conv2dLayer::new("c", ci, co, k, stride, pad).with_bias();
            layer.init(&mut store, rng);
            randomize_params(&mut store, rng);
            let shape = [rng.random_range(1..=2), ci, rng.random_range(3..=5), rng.random_range(3..=5)];
            let x = normal(rng, &shape);
            let probe = output_probe(rng, &store, &x, |g, s, v| layer.forward(g, s, v))?;
            check(&store, &[x], eps, |g, s, v| {
                let y = layer.forward(g, s, v[0])?;
                project(g, y, &probe)
            })
        }
        "conv3d" => {
            let (ci, co) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let k = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
            let stride = [rng.random_range(1..=2), 1, rng.random_range(1..=2)];
            let pad = [rng.random_range(0..=1), rng.random_range(0..=1), 0];
            let layer = Conv3dLayer::new("c", ci, co, k, stride, pad).with_bias();
            layer.init(&mut store, rng);
            randomize_params(&mut store, rng);
            let shape = [1, ci, rng.random_range(3..=4), 3, rng.random_range(3..=4)];
            let x = normal(rng, &shape);
            let probe = output_probe(rng, &store, &x, |g, s, v| layer.forward(g, s, v))?;
            check(&store, &[x], eps, |g, s, v| {
                let y = layer.forward(g, s, v[0])?;
                project(g, y, &probe)
            })
        }
        "conv2plus1d" => {
            let (ci, co) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let kt = rng.random_range(1..=3);
            let layer = Conv2Plus1dLayer::new("b", ci, co, [kt, 3, 3], [1, rng.random_range(1..=2), 1], [kt / 2, 1, 1]);
            layer.init(&mut store, rng);
            randomize_params(&mut store, rng);
            let x = normal(rng, &[2, ci, 3, 3, 3]);
            let probe = output_probe(rng, &store, &x, |g, s, v| layer.forward(g, s, v, Mode::Train))?;
            check(&store, &[x], eps, |g, s, v| {
                let y = layer.forward(g, s, v[0], Mode::Train)?;
                project(g, y, &probe)
            })
        }
        "batchnorm-train" | "batchnorm-eval" => {
            let mode = if name == "batchnorm-train" { Mode::Train } else { Mode::Eval };
            let c = rng.random_range(1..=3);
            let layer = BatchNormLayer::new("bn", c);
            layer.init(&mut store, rng);
            randomize_params(&mut store, rng);
            let shape = if rng.random_bool(0.5) { vec![2, c, 2, 3] } else { vec![2, c, 2, 2, 2] };
            let x = normal(rng, &shape);
            let probe = output_probe(rng, &store, &x, |g, s, v| layer.forward(g, s, v, mode))?;
            check(&store, &[x], eps, |g, s, v| {
                let y = layer.forward(g, s, v[0], mode)?;
                project(g, y, &probe)
            })
        }
        "linear" => {
            let (i, o) = (rng.random_range(1..=5), rng.random_range(1..=4));
            let layer = Linear::new("fc", i, o);
            layer.init(&mut store, rng);
            randomize_params(&mut store, rng);
            let shape = [rng.random_range(1..=3), i];
            let x = normal(rng, &shape);
            let probe = output_probe(rng, &store, &x, |g, s, v| layer.forward(g, s, v))?;
            check(&store, &[x], eps, |g, s, v| {
                let y = layer.forward(g, s, v[0])?;
                project(g, y, &probe)
            })
        }
        "relu" => {
            let shape = [rng.random_range(1..=3), rng.random_range(1..=6)];
            let x = off_kink(rng, &shape);
            let probe = normal(rng, x.shape());
            check(&store, &[x], eps, |g, _, v| {
                let y = g.relu(v[0]);
                project(g, y, &probe)
            })
        }
        "global-avg-pool" => {
            let shape = if rng.random_bool(0.5) { vec![2, 3, 2, 3] } else { vec![2, 2, 2, 2, 3] };
            let x = normal(rng, &shape);
            let probe = normal(rng, &shape[..2]);
            check(&store, &[x], eps, |g, _, v| {
                let y = g.global_avg_pool(v[0])?;
                project(g, y, &probe)
            })
        }
        "softmax-temperature" => {
            let (b, k) = (rng.random_range(1..=3), rng.random_range(2..=6));
            let tau = rng.random_range(0.5..4.0);
            let z = normal(rng, &[b, k]).map(|v| 3.0 * v);
            let probe = normal(rng, &[b, k]);
            check(&store, &[z], eps, |g, _, v| {
                let y = g.softmax(v[0], tau)?;
                project(g, y, &probe)
            })
        }
        "cross-entropy" => {
            let (b, k) = (rng.random_range(1..=4), rng.random_range(2..=6));
            let z = normal(rng, &[b, k]).map(|v| 3.0 * v);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            check(&store, &[z], eps, |g, _, v| g.cross_entropy(v[0], &labels))
        }
        "soft-target-loss" | "mse-logit-loss" => {
            let (b, k) = (rng.random_range(1..=4), rng.random_range(2..=6));
            let z = normal(rng, &[b, k]).map(|v| 3.0 * v);
            // one sample dropped by the entropy filter, when there are several
            let w: Vec<f64> = (0..b).map(|i| if b > 1 && i == 0 { 0.0 } else { 1.0 }).collect();
            if name == "soft-target-loss" {
                let y = distribution_rows(rng, b, k);
                check(&store, &[z], eps, |g, _, v| soft_target_loss(g, v[0], &y, Some(&w)))
            } else {
                let t = normal(rng, &[b, k]).map(|v| 2.0 * v);
                check(&store, &[z], eps, |g, _, v| mse_logit_loss(g, v[0], &t, Some(&w)))
            }
        }
        other => Err(crate::error::Error::invalid("gradsuite", format!("unknown case `{other}`"))),
    }
}

/// Random projection weights shaped like the layer's output on `x`.
fn output_probe<F>(rng: &mut ChaCha8Rng, store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Result<Tensor<f64>>
where
    F: Fn(&mut crate::tensor::Graph<f64>, &mut ParamStore<f64>, crate::tensor::Var) -> Result<crate::tensor::Var>,
{
    let mut g = crate::tensor::Graph::inference();
    let mut s = store.clone();
    let v = g.constant(x.clone());
    let y = f(&mut g, &mut s, v)?;
    Ok(normal(rng, g.shape(y)))
}

/// Runs `instances` random instances of every case.
pub fn run(instances: usize, seed: u64) -> Result<Vec<CaseResult>> {
    CASES
        .iter()
        .enumerate()
        .map(|(ci, &name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ci as u64);
            let mut out = CaseResult { name, instances, checked: 0, max_rel_error: 0.0, worst: None };
            for i in 0..instances {
                let r = check_instance(name, &mut rng)?;
                out.checked += r.checked;
                if out.worst.is_none() || r.max_rel_error > out.max_rel_error {
                    out.max_rel_error = r.max_rel_error;
                    out.worst = r.worst.map(|(n, j)| (i, n, j));
                }
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::DEFAULT_TOLERANCE;

    #[test]
    fn every_case_passes_on_twenty_instances() {
        for case in run(20, 11).unwrap() {
            assert!(case.passes(DEFAULT_TOLERANCE), "{case:?}");
            assert!(case.checked > 0, "{}", case.name);
        }
    }

    #[test]
    fn unknown_case_rejected() {
        assert!(check_instance("conv4d", &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
