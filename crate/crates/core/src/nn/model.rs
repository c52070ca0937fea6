use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{Layer, NetworkSpec, Role};
use crate::cost::{count_flops, FlopMeter, Pass};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

/// A network spec plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    params: Vec<Param>,
    frozen: bool,
    /// Free-form label stored in checkpoints, e.g. a base setup or an
    /// augmentation name.
    pub tag: Option<String>,
}

/// Parameter leaves of one forward pass, in parameter order.
pub struct ParamVars(pub Vec<Var>);

impl Model {
    /// Fan-scaled uniform weights, zero biases, drawn from `seed`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let (Some((ws, bs)), Some((fan_in, fan_out))) = (layer.param_shapes(), layer.fans()) else {
                continue;
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = ws.iter().product();
            let w = (0..n).map(|_| rng.gen_range(-a..=a) as f32).collect();
            params.push(Param {
                name: format!("{i}.weight"),
                value: Tensor::new(ws, w)?,
            });
            params.push(Param {
                name: format!("{i}.bias"),
                value: Tensor::zeros(bs),
            });
        }
        Ok(Self {
            spec,
            params,
            frozen: false,
            tag: None,
        })
    }

    /// Every parameter zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let mut m = Self::init(spec, 0)?;
        for p in &mut m.params {
            p.value.data_mut().fill(0.0);
        }
        Ok(m)
    }

    /// Rebuilds a model from named parameters, checking names and shapes
    /// against the spec.
    pub fn from_params(spec: NetworkSpec, params: Vec<Param>) -> Result<Self> {
        let template = Self::zeros(spec)?;
        if template.params.len() != params.len() {
            return Err(Error::dim(format!(
                "spec needs {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.value.shape() != p.value.shape() {
                return Err(Error::dim(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn param_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.params.iter().map(|p| p.value.shape())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn role(&self) -> Role {
        self.spec.role
    }

    /// Records the network on `tape` from input node `x`. Parameters become
    /// gradient leaves unless the model is frozen.
    pub fn forward_on_tape<'a>(&'a self, tape: &mut Tape<'a, f32>, x: Var) -> Result<(Var, ParamVars)> {
        self.record(tape, x, !self.frozen)
    }

    fn record<'a>(&'a self, tape: &mut Tape<'a, f32>, x: Var, trainable: bool) -> Result<(Var, ParamVars)> {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut leaf = |tape: &mut Tape<'a, f32>, p: &'a Param| {
            let v = if !trainable {
                tape.leaf_ref(&p.value)
            } else {
                tape.param_ref(&p.value)
            };
            vars.push(v);
            v
        };
        let mut h = x;
        let mut params = self.params.iter();
        for layer in &self.spec.layers {
            h = match *layer {
                Layer::Conv { stride, padding, .. } => {
                    let (w, b) = (params.next().expect("weight"), params.next().expect("bias"));
                    let (w, b) = (leaf(tape, w), leaf(tape, b));
                    tape.conv2d(h, w, b, stride, padding)?
                }
                Layer::Affine { .. } => {
                    let (w, b) = (params.next().expect("weight"), params.next().expect("bias"));
                    let (w, b) = (leaf(tape, w), leaf(tape, b));
                    tape.affine(h, w, b)?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::MaxPool2 => tape.maxpool2x2(h)?,
                Layer::Flatten => {
                    if tape.value(h).rank() == 4 {
                        tape.flatten(h)?
                    } else {
                        let n = tape.value(h).len();
                        tape.reshape(h, vec![n])?
                    }
                }
            };
        }
        Ok((h, ParamVars(vars)))
    }

    /// Number of samples in `x`: 1 for a single input of the spec's shape,
    /// `N` for a batched `[N, ...]` input.
    pub fn batch_of(&self, x: &Tensor<f32>) -> Result<usize> {
        let s = x.shape();
        let want = &self.spec.input_shape;
        if s == want.as_slice() {
            Ok(1)
        } else if s.len() == want.len() + 1 && &s[1..] == want.as_slice() {
            Ok(s[0])
        } else {
            Err(Error::dim(format!(
                "{} expects input {:?} or [N, ..], got {:?}",
                self.spec.role.name(),
                want,
                s
            )))
        }
    }

    /// Inference on a single input or a batch.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.batch_of(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf_ref(x);
        let (out, _) = self.record(&mut tape, xv, false)?;
        Ok(tape.value(out).clone())
    }

    /// Forward FLOPs for `x`, i.e. the batch size times the per-sample count.
    pub fn flops(&self, x: &Tensor<f32>, pass: Pass) -> Result<u64> {
        Ok(self.batch_of(x)? as u64 * count_flops(&self.spec, pass)?)
    }

    /// SGD update from gradients of the leaves returned by
    /// [`Model::forward_on_tape`].
    pub fn apply_gradients(&mut self, opt: &mut Sgd<f32>, grads: &Gradients<f32>, vars: &ParamVars) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(format!("{} model is frozen", self.spec.role.name())));
        }
        let gs: Vec<Option<&Tensor<f32>>> = vars.0.iter().map(|&v| grads.get(v)).collect();
        let mut ps: Vec<&mut Tensor<f32>> = self.params.iter_mut().map(|p| &mut p.value).collect();
        opt.step(&mut ps, &gs)
    }

    /// Concatenation of `parts`, run back to back as one network.
    pub fn compose(parts: &[&Model]) -> Result<Model> {
        let specs: Vec<&NetworkSpec> = parts.iter().map(|m| &m.spec).collect();
        let spec = NetworkSpec::concat(&specs)?;
        let mut params = Vec::new();
        let mut offset = 0;
        for m in parts {
            for p in &m.params {
                let (idx, kind) = p.name.split_once('.').expect("layer-indexed name");
                let idx: usize = idx.parse().expect("layer index");
                params.push(Param {
                    name: format!("{}.{kind}", idx + offset),
                    value: p.value.clone(),
                });
            }
            offset += m.spec.layers.len();
        }
        Model::from_params(spec, params)
    }
}

/// `z = Φ(x)`, metering Φ.
pub fn forward_embedding(phi: &Model, image: &Tensor<f32>, meter: Option<&mut FlopMeter>) -> Result<Tensor<f32>> {
    let z = phi.forward(image)?;
    if let Some(m) = meter {
        m.phi += phi.flops(image, Pass::Forward)?;
    }
    Ok(z)
}

/// Logits `Ψ(z)`, metering the Ψ forward pass.
pub fn forward_classify(psi: &Model, z: &Tensor<f32>, meter: Option<&mut FlopMeter>) -> Result<Tensor<f32>> {
    let y = psi.forward(z)?;
    if let Some(m) = meter {
        m.psi_fwd += psi.flops(z, Pass::Forward)?;
    }
    Ok(y)
}

/// Predicted class per row of logits, lowest index on ties.
pub fn predict(logits: &Tensor<f32>) -> Vec<usize> {
    let classes = *logits.shape().last().expect("non-empty shape");
    logits.data().chunks(classes).map(crate::ops::argmax).collect()
}
