//! Layers, parameter storage, SGD with momentum/weight-decay, and the
//! cosine-annealing schedule, plus the concrete teacher/student/generator
//! architectures.
//!
//! Networks are fully-connected stacks with 1-D batch normalization. A
//! forward pass records itself on an [`ad::Graph`]; parameters are bound
//! either as constants (frozen nets, scoring) or as graph variables
//! (training). BN running statistics live in the same named store as the
//! weights so checkpoints carry them transparently.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Graph, Var};
use crate::error::{Error, Result};

/// One named flat tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named parameter store. BTreeMap keeps iteration order deterministic,
/// which both the optimizer and the checkpoint writer rely on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Invariant(format!("duplicate parameter name {name}")));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::ShapeMismatch {
                op: "param_insert",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        self.entries.insert(name.to_string(), Param { shape, values });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Invariant(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Invariant(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub enum LayerSpec {
    Dense {
        name: String,
        in_dim: usize,
        out_dim: usize,
    },
    BatchNorm {
        name: String,
        features: usize,
    },
    Relu,
    Tanh,
    /// Fixed output scaling, e.g. mapping tanh output onto the data range.
    Scale(f64),
}

/// Batch statistics observed at one BN layer during a forward pass, kept as
/// graph nodes so losses over them stay differentiable w.r.t. the input.
pub struct BnObservation {
    pub layer: String,
    pub batch_mean: Var,
    pub batch_var: Var,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Maps trainable parameter names to their graph variables for one pass.
pub type Binding = BTreeMap<String, Var>;

#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    pub params: ParamStore,
    pub mode: Mode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Deferred running-stat update produced by a train-mode BN forward.
struct BnUpdate {
    layer: String,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

struct PassOutput {
    out: Var,
    observations: Vec<BnObservation>,
    updates: Vec<BnUpdate>,
}

impl Network {
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }

    /// Number of trainable parameter values (running stats excluded).
    pub fn trainable_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(_, p)| p.values.len())
            .sum()
    }

    /// Forward pass with parameters bound as constants. In train mode BN
    /// layers use batch statistics and fold them into the running estimates.
    pub fn forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let binding = self.bind(g, false)?;
        let pass = self.run_layers(g, x, &binding, self.mode == Mode::Train, false)?;
        self.apply_bn_updates(pass.updates);
        Ok(pass.out)
    }

    /// Forward pass with parameters bound as graph variables, for training.
    /// Returns the binding so gradients can be read back per name.
    pub fn forward_trainable(&mut self, g: &mut Graph, x: Var) -> Result<(Var, Binding)> {
        let binding = self.bind(g, true)?;
        let pass = self.run_layers(g, x, &binding, self.mode == Mode::Train, false)?;
        self.apply_bn_updates(pass.updates);
        let trainable: Binding = binding
            .into_iter()
            .filter(|(n, _)| !is_running_stat(n))
            .collect();
        Ok((pass.out, trainable))
    }

    /// Frozen-network forward that additionally records, per BN layer, the
    /// batch mean/variance of the layer input as differentiable graph nodes.
    /// Normalization itself uses the running statistics; the network state
    /// is left untouched.
    pub fn forward_observed(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<BnObservation>)> {
        let binding = self.bind(g, false)?;
        let pass = self.run_layers(g, x, &binding, false, true)?;
        Ok((pass.out, pass.observations))
    }

    /// Eval-mode logits for a flat row-major batch, on a throwaway graph.
    pub fn eval_logits(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        if batch == 0 || x.len() != batch * self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "eval_logits",
                lhs: vec![batch, self.in_dim],
                rhs: vec![x.len()],
            });
        }
        let mut g = Graph::new();
        let xv = g.constant(x.to_vec(), &[batch, self.in_dim])?;
        let binding = self.bind(&mut g, false)?;
        let pass = self.run_layers(&mut g, xv, &binding, false, false)?;
        Ok(g.value(pass.out).to_vec())
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Binding> {
        let mut binding = Binding::new();
        for (name, p) in self.params.iter() {
            let var = if trainable && !is_running_stat(name) {
                g.var(p.values.clone(), &p.shape)?
            } else {
                g.constant(p.values.clone(), &p.shape)?
            };
            binding.insert(name.clone(), var);
        }
        Ok(binding)
    }

    fn apply_bn_updates(&mut self, updates: Vec<BnUpdate>) {
        let momentum = self.bn_momentum;
        for u in updates {
            for (suffix, batch) in [("running_mean", u.batch_mean), ("running_var", u.batch_var)] {
                let p = self
                    .params
                    .get_mut(&format!("{}.{suffix}", u.layer))
                    .expect("bn layer has running stats");
                for (r, b) in p.values.iter_mut().zip(batch.iter()) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }

    fn run_layers(
        &self,
        g: &mut Graph,
        x: Var,
        binding: &Binding,
        batch_stats_normalize: bool,
        observe: bool,
    ) -> Result<PassOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape,
                rhs: vec![self.in_dim],
            });
        }
        let batch = shape[0];
        let mut cur = x;
        let mut observations = Vec::new();
        let mut updates = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense { name, out_dim, .. } => {
                    let w = binding[&format!("{name}.weight")];
                    let b = binding[&format!("{name}.bias")];
                    let prod = g.matmul(cur, w)?;
                    let bias = g.broadcast(b, &[batch, *out_dim])?;
                    cur = g.add(prod, bias)?;
                }
                LayerSpec::BatchNorm { name, features } => {
                    if batch_stats_normalize && batch < 2 {
                        return Err(Error::Usage(format!(
                            "batch norm layer {name}: train-mode batch of {batch} has undefined variance"
                        )));
                    }
                    let gamma = binding[&format!("{name}.gamma")];
                    let beta = binding[&format!("{name}.beta")];
                    let target = [batch, *features];

                    let (mean_v, var_v) = if batch_stats_normalize || observe {
                        let m = g.mean_axis(cur, 0)?;
                        let v = g.var_axis(cur, 0)?;
                        (Some(m), Some(v))
                    } else {
                        (None, None)
                    };

                    if observe {
                        observations.push(BnObservation {
                            layer: name.clone(),
                            batch_mean: mean_v.unwrap(),
                            batch_var: var_v.unwrap(),
                            running_mean: self
                                .params
                                .get(&format!("{name}.running_mean"))?
                                .values
                                .clone(),
                            running_var: self
                                .params
                                .get(&format!("{name}.running_var"))?
                                .values
                                .clone(),
                        });
                    }

                    let (norm_mean, norm_var) = if batch_stats_normalize {
                        updates.push(BnUpdate {
                            layer: name.clone(),
                            batch_mean: g.value(mean_v.unwrap()).to_vec(),
                            batch_var: g.value(var_v.unwrap()).to_vec(),
                        });
                        (mean_v.unwrap(), var_v.unwrap())
                    } else {
                        let rm = binding[&format!("{name}.running_mean")];
                        let rv = binding[&format!("{name}.running_var")];
                        (rm, rv)
                    };

                    let mean_b = g.broadcast(norm_mean, &target)?;
                    let centered = g.sub(cur, mean_b)?;
                    let shifted = g.add_scalar(norm_var, self.bn_eps)?;
                    let inv_std = g.pow(shifted, -0.5)?;
                    let inv_std_b = g.broadcast(inv_std, &target)?;
                    let normed = g.mul(centered, inv_std_b)?;
                    let gamma_b = g.broadcast(gamma, &target)?;
                    let beta_b = g.broadcast(beta, &target)?;
                    let scaled = g.mul(normed, gamma_b)?;
                    cur = g.add(scaled, beta_b)?;
                }
                LayerSpec::Relu => cur = g.relu(cur)?,
                LayerSpec::Tanh => cur = g.tanh(cur)?,
                LayerSpec::Scale(c) => cur = g.scale(cur, *c)?,
            }
        }
        Ok(PassOutput {
            out: cur,
            observations,
            updates,
        })
    }
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

// ----- architectures -----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassifierArch {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorArch {
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
    /// Tanh output is multiplied by this to span the normalized data range.
    pub output_scale: f64,
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// MLP classifier: `[dense -> BN -> relu] x hidden_layers -> dense`.
/// Serves as both the teacher and the student, at different widths.
pub fn build_classifier(arch: &ClassifierArch, rng: &mut ChaCha8Rng) -> Result<Network> {
    if arch.input_dim == 0 || arch.hidden_width == 0 || arch.hidden_layers == 0 || arch.classes == 0
    {
        return Err(Error::Config(format!(
            "classifier architecture has a zero extent: {arch:?}"
        )));
    }
    let mut layers = Vec::new();
    let mut params = ParamStore::new();
    let mut prev = arch.input_dim;
    for l in 0..arch.hidden_layers {
        let dense = format!("fc{l}");
        init_dense(&mut params, &dense, prev, arch.hidden_width, rng)?;
        layers.push(LayerSpec::Dense {
            name: dense,
            in_dim: prev,
            out_dim: arch.hidden_width,
        });
        let bn = format!("bn{l}");
        init_batch_norm(&mut params, &bn, arch.hidden_width)?;
        layers.push(LayerSpec::BatchNorm {
            name: bn,
            features: arch.hidden_width,
        });
        layers.push(LayerSpec::Relu);
        prev = arch.hidden_width;
    }
    init_dense(&mut params, "head", prev, arch.classes, rng)?;
    layers.push(LayerSpec::Dense {
        name: "head".into(),
        in_dim: prev,
        out_dim: arch.classes,
    });
    Ok(Network {
        layers,
        params,
        mode: Mode::Train,
        bn_momentum: BN_MOMENTUM,
        bn_eps: BN_EPS,
        in_dim: arch.input_dim,
        out_dim: arch.classes,
    })
}

/// Generator: `z -> dense -> BN -> relu -> dense -> tanh -> scale`.
pub fn build_generator(arch: &GeneratorArch, rng: &mut ChaCha8Rng) -> Result<Network> {
    if arch.latent_dim == 0 || arch.hidden_width == 0 || arch.output_dim == 0 {
        return Err(Error::Config(format!(
            "generator architecture has a zero extent: {arch:?}"
        )));
    }
    let mut layers = Vec::new();
    let mut params = ParamStore::new();
    init_dense(&mut params, "fc0", arch.latent_dim, arch.hidden_width, rng)?;
    layers.push(LayerSpec::Dense {
        name: "fc0".into(),
        in_dim: arch.latent_dim,
        out_dim: arch.hidden_width,
    });
    init_batch_norm(&mut params, "bn0", arch.hidden_width)?;
    layers.push(LayerSpec::BatchNorm {
        name: "bn0".into(),
        features: arch.hidden_width,
    });
    layers.push(LayerSpec::Relu);
    init_dense(&mut params, "head", arch.hidden_width, arch.output_dim, rng)?;
    layers.push(LayerSpec::Dense {
        name: "head".into(),
        in_dim: arch.hidden_width,
        out_dim: arch.output_dim,
    });
    layers.push(LayerSpec::Tanh);
    layers.push(LayerSpec::Scale(arch.output_scale));
    Ok(Network {
        layers,
        params,
        mode: Mode::Train,
        bn_momentum: BN_MOMENTUM,
        bn_eps: BN_EPS,
        in_dim: arch.latent_dim,
        out_dim: arch.output_dim,
    })
}

/// Kaiming-uniform weight init, zero bias.
fn init_dense(
    params: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = (6.0 / in_dim as f64).sqrt();
    let weights: Vec<f64> = (0..in_dim * out_dim)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    params.insert(&format!("{name}.weight"), vec![in_dim, out_dim], weights)?;
    params.insert(&format!("{name}.bias"), vec![out_dim], vec![0.0; out_dim])?;
    Ok(())
}

fn init_batch_norm(params: &mut ParamStore, name: &str, features: usize) -> Result<()> {
    params.insert(&format!("{name}.gamma"), vec![features], vec![1.0; features])?;
    params.insert(&format!("{name}.beta"), vec![features], vec![0.0; features])?;
    params.insert(
        &format!("{name}.running_mean"),
        vec![features],
        vec![0.0; features],
    )?;
    params.insert(
        &format!("{name}.running_var"),
        vec![features],
        vec![1.0; features],
    )?;
    Ok(())
}

// ----- optimizer & schedule -----

/// `eta_min + (lr0 - eta_min) * (1 + cos(pi t / t_max)) / 2`, clamped to
/// `eta_min` past `t_max`.
pub fn cosine_lr(t: usize, t_max: usize, lr0: f64, eta_min: f64) -> f64 {
    if t_max == 0 {
        return if t == 0 { lr0 } else { eta_min };
    }
    if t >= t_max {
        return eta_min;
    }
    eta_min + (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * t as f64 / t_max as f64).cos()) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine { t_max: usize, eta_min: f64 },
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    /// Linear ramp from lr0/warmup to lr0 over the first `warmup` steps.
    pub warmup_steps: usize,
    velocity: BTreeMap<String, Vec<f64>>,
    pub step_count: usize,
}

impl Sgd {
    pub fn new(lr0: f64, weight_decay: f64, momentum: f64, schedule: LrSchedule) -> Self {
        Sgd {
            lr0,
            weight_decay,
            momentum,
            schedule,
            warmup_steps: 0,
            velocity: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        let t = self.step_count;
        if t < self.warmup_steps {
            return self.lr0 * (t + 1) as f64 / self.warmup_steps as f64;
        }
        let t = t - self.warmup_steps;
        match self.schedule {
            LrSchedule::Constant => self.lr0,
            LrSchedule::Cosine { t_max, eta_min } => cosine_lr(t, t_max, self.lr0, eta_min),
        }
    }

    /// `v <- momentum*v + grad + wd*param; param <- param - lr(t)*v`.
    /// A NaN in any gradient aborts the whole step before mutating anything.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| v.is_nan()) {
                return Err(Error::Numerical(format!(
                    "NaN gradient for parameter {name} at optimizer step {}",
                    self.step_count
                )));
            }
            let p = params.get(name)?;
            if p.values.len() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
        }
        let lr = self.current_lr();
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                v[i] = self.momentum * v[i] + g[i] + self.weight_decay * p.values[i];
                p.values[i] -= lr * v[i];
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Gradients of a binding, read back from the graph after `backward`.
pub fn collect_grads(g: &Graph, binding: &Binding) -> BTreeMap<String, Vec<f64>> {
    binding
        .iter()
        .map(|(name, &var)| (name.clone(), g.grad(var).to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_classifier(seed: u64) -> Network {
        build_classifier(
            &ClassifierArch {
                input_dim: 4,
                hidden_width: 6,
                hidden_layers: 2,
                classes: 3,
            },
            &mut rng(seed),
        )
        .unwrap()
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut net = small_classifier(3);
        net.set_mode(Mode::Eval);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
        let a = net.eval_logits(&x, 2).unwrap();
        let b = net.eval_logits(&x, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dense_identity_passthrough() {
        let mut params = ParamStore::new();
        params
            .insert(
                "fc.weight",
                vec![3, 3],
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap();
        params.insert("fc.bias", vec![3], vec![0.0; 3]).unwrap();
        let net = Network {
            layers: vec![LayerSpec::Dense {
                name: "fc".into(),
                in_dim: 3,
                out_dim: 3,
            }],
            params,
            mode: Mode::Eval,
            bn_momentum: BN_MOMENTUM,
            bn_eps: BN_EPS,
            in_dim: 3,
            out_dim: 3,
        };
        let x = vec![0.5, -1.0, 2.0, 3.0, 4.0, -5.0];
        assert_eq!(net.eval_logits(&x, 2).unwrap(), x);
    }

    #[test]
    fn bn_train_matches_eval_when_stats_agree() {
        let mut net = small_classifier(11);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        // fold the batch stats fully into the running stats, then train-mode
        // and eval-mode normalization must coincide on that batch
        net.bn_momentum = 1.0;
        net.set_mode(Mode::Train);
        let mut g = Graph::new();
        let xv = g.constant(x.clone(), &[4, 4]).unwrap();
        let train_out = net.forward(&mut g, xv).unwrap();
        let train_logits = g.value(train_out).to_vec();

        net.set_mode(Mode::Eval);
        let eval_logits = net.eval_logits(&x, 4).unwrap();
        for (a, b) in train_logits.iter().zip(eval_logits.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn bn_train_rejects_batch_of_one() {
        let mut net = small_classifier(5);
        net.set_mode(Mode::Train);
        let mut g = Graph::new();
        let xv = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        assert!(matches!(net.forward(&mut g, xv), Err(Error::Usage(_))));
    }

    #[test]
    fn bn_running_stats_converge_geometrically() {
        let mut net = small_classifier(17);
        net.set_mode(Mode::Train);
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 1.3).cos() * 2.0).collect();
        for _ in 0..200 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone(), &[8, 4]).unwrap();
            net.forward(&mut g, xv).unwrap();
        }
        // momentum 0.1, 200 repeats of the same batch: residual ~ 0.9^200
        let mut g = Graph::new();
        let xv = g.constant(x.clone(), &[8, 4]).unwrap();
        let (_, obs) = net.forward_observed(&mut g, xv).unwrap();
        assert!(!obs.is_empty());
        for o in &obs {
            let bm = g.value(o.batch_mean);
            let bv = g.value(o.batch_var);
            for (r, b) in o.running_mean.iter().zip(bm.iter()) {
                assert!((r - b).abs() < 1e-6, "mean {r} vs {b}");
            }
            for (r, b) in o.running_var.iter().zip(bv.iter()) {
                assert!((r - b).abs() < 1e-6, "var {r} vs {b}");
            }
        }
    }

    #[test]
    fn observed_forward_differs_from_train_stats_only_in_normalization() {
        // the second BN layer sees different inputs in the two modes; the
        // first observes the same dense output either way
        let net = small_classifier(23);
        let x: Vec<f64> = (0..16).map(|i| (i as f64).sqrt()).collect();
        let mut g = Graph::new();
        let xv = g.constant(x, &[4, 4]).unwrap();
        let (_, obs) = net.forward_observed(&mut g, xv).unwrap();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].layer, "bn0");
        assert_eq!(g.value(obs[0].batch_mean).len(), 6);
    }

    #[test]
    fn plain_gradient_step() {
        let mut params = ParamStore::new();
        params.insert("w", vec![1], vec![0.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0, 0.0, LrSchedule::Constant);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap().values, vec![-0.1]);
    }

    #[test]
    fn zero_grad_zero_wd_leaves_params_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", vec![2], vec![1.5, -2.5]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0, 0.9, LrSchedule::Constant);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap().values, vec![1.5, -2.5]);
    }

    #[test]
    fn momentum_unrolls_by_hand_with_cosine_lr() {
        let (lr0, eta_min, t_max) = (0.1, 2e-4, 10);
        let grad = 0.7;
        let mut params = ParamStore::new();
        params.insert("w", vec![1], vec![0.0]).unwrap();
        let mut opt = Sgd::new(lr0, 0.0, 0.9, LrSchedule::Cosine { t_max, eta_min });
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![grad]);
        opt.step(&mut params, &grads).unwrap();
        opt.step(&mut params, &grads).unwrap();
        // v1 = g, v2 = 0.9 g + g = 1.9 g
        let expected = -(cosine_lr(0, t_max, lr0, eta_min) * grad
            + cosine_lr(1, t_max, lr0, eta_min) * 1.9 * grad);
        let got = params.get("w").unwrap().values[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut params = ParamStore::new();
        params.insert("w", vec![1], vec![1.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0, 0.0, LrSchedule::Constant);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![f64::NAN]);
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(Error::Numerical(_))
        ));
        assert_eq!(params.get("w").unwrap().values, vec![1.0]);
    }

    #[test]
    fn weight_decay_shrinks_norm_monotonically() {
        let mut params = ParamStore::new();
        params.insert("w", vec![2], vec![3.0, -4.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.05, 0.0, LrSchedule::Constant);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        let mut prev = 5.0f64;
        for _ in 0..50 {
            opt.step(&mut params, &grads).unwrap();
            let vs = &params.get("w").unwrap().values;
            let norm = (vs[0] * vs[0] + vs[1] * vs[1]).sqrt();
            assert!(norm < prev, "{norm} not < {prev}");
            prev = norm;
        }
    }

    #[test]
    fn cosine_lr_endpoints_and_midpoint() {
        let (lr0, eta_min, t_max) = (0.1, 2e-4, 200);
        assert_eq!(cosine_lr(0, t_max, lr0, eta_min), lr0);
        assert_eq!(cosine_lr(t_max, t_max, lr0, eta_min), eta_min);
        let mid = cosine_lr(t_max / 2, t_max, lr0, eta_min);
        assert!((mid - (lr0 + eta_min) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(t_max + 50, t_max, lr0, eta_min), eta_min);
    }

    #[test]
    fn cosine_lr_is_monotone_non_increasing() {
        let (lr0, eta_min, t_max) = (0.3, 1e-3, 97);
        let mut prev = f64::INFINITY;
        for t in 0..=t_max {
            let lr = cosine_lr(t, t_max, lr0, eta_min);
            assert!(lr <= prev + 1e-18);
            assert!((eta_min..=lr0).contains(&lr));
            prev = lr;
        }
    }

    #[test]
    fn classifier_param_count_matches_formula() {
        let arch = ClassifierArch {
            input_dim: 8,
            hidden_width: 128,
            hidden_layers: 2,
            classes: 8,
        };
        let net = build_classifier(&arch, &mut rng(1)).unwrap();
        // sum(in*out + out) over dense layers + 2*features per BN layer
        let dense = 8 * 128 + 128 + 128 * 128 + 128 + 128 * 8 + 8;
        let bn = 2 * 128 * 2;
        assert_eq!(net.trainable_param_count(), dense + bn);
    }

    #[test]
    fn student_is_strictly_smaller_than_teacher() {
        let teacher = build_classifier(
            &ClassifierArch {
                input_dim: 8,
                hidden_width: 128,
                hidden_layers: 2,
                classes: 8,
            },
            &mut rng(1),
        )
        .unwrap();
        let student = build_classifier(
            &ClassifierArch {
                input_dim: 8,
                hidden_width: 32,
                hidden_layers: 2,
                classes: 8,
            },
            &mut rng(2),
        )
        .unwrap();
        assert!(student.trainable_param_count() < teacher.trainable_param_count());
    }

    #[test]
    fn generator_output_stays_in_tanh_range() {
        let arch = GeneratorArch {
            latent_dim: 4,
            hidden_width: 16,
            output_dim: 6,
            output_scale: 3.0,
        };
        let mut net = build_generator(&arch, &mut rng(9)).unwrap();
        net.set_mode(Mode::Train);
        let mut r = rng(10);
        let z: Vec<f64> = (0..5 * 4).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut g = Graph::new();
        let zv = g.constant(z, &[5, 4]).unwrap();
        let out = net.forward(&mut g, zv).unwrap();
        for &v in g.value(out) {
            assert!(v.abs() <= arch.output_scale);
        }
    }

    #[test]
    fn zero_width_is_config_error() {
        let bad = ClassifierArch {
            input_dim: 0,
            hidden_width: 4,
            hidden_layers: 1,
            classes: 2,
        };
        assert!(matches!(
            build_classifier(&bad, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }
}
