//! Network instances: parameters, forward pass with caches, reverse pass.

use crate::error::{Error, Result};
use crate::nn::batchnorm::{BatchNorm, BnCache, Mode};
use crate::nn::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::nn::dense::Dense;
use crate::nn::pool::{maxpool_backward, maxpool_forward, PoolGeometry};
use crate::nn::spec::{LayerSpec, NetworkSpec};
use crate::spp::{spp_backward, spp_forward, PyramidSpec, SppIndices};
use crate::tensor::{Scalar, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv { geometry: ConvGeometry, in_channels: usize, weight: Vec<T>, bias: Vec<T> },
    MaxPool(PoolGeometry),
    Spp(PyramidSpec),
    Fc(Dense<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
}

/// Borrowed view of one learnable parameter block.
pub struct Param<'a, T> {
    pub name: String,
    pub values: &'a [T],
    /// Whether L2 weight decay applies (weights yes; biases and BN no).
    pub decay: bool,
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub values: &'a mut Vec<T>,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
    user_head: Dense<T>,
    forgery_head: Option<Dense<T>>,
}

enum Cache<T> {
    Input(Tensor4<T>),
    Pool { argmax: Vec<u32>, dims: [usize; 4] },
    Spp(SppIndices),
    Bn(BnCache<T>),
    Relu(Tensor4<T>),
}

/// Result of a forward pass. Training-mode passes also carry the
/// intermediates needed by [`Model::backward`].
pub struct Forward<T> {
    pub features: Tensor4<T>,
    pub user_logits: Tensor4<T>,
    pub forgery_logits: Option<Tensor4<T>>,
    caches: Option<Vec<Cache<T>>>,
    input_dims: [usize; 4],
}

impl<T> Forward<T> {
    pub fn is_trainable(&self) -> bool {
        self.caches.is_some()
    }
}

/// Parameter gradients, in [`Model::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub blocks: Vec<Vec<T>>,
    pub input: Option<Tensor4<T>>,
}

impl<T: Scalar> Model<T> {
    /// Allocates a model with all weights zero, BN at identity and unit
    /// running variance. Shapes follow from the spec alone.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let (h, w) = spec.reference_input();
        let mut shape = [spec.input_channels, h, w];
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let next = ls.output_shape(shape)?;
            layers.push(match ls {
                LayerSpec::Conv { kernel, filters, stride, padding } => {
                    let geometry =
                        ConvGeometry { kernel: *kernel, filters: *filters, stride: *stride, padding: *padding };
                    Layer::Conv {
                        geometry,
                        in_channels: shape[0],
                        weight: vec![T::ZERO; geometry.weight_len(shape[0])],
                        bias: vec![T::ZERO; *filters],
                    }
                }
                LayerSpec::MaxPool { size, stride, padding } => {
                    Layer::MaxPool(PoolGeometry { size: *size, stride: *stride, padding: *padding })
                }
                LayerSpec::Spp(p) => Layer::Spp(p.clone()),
                LayerSpec::Fc { units } => Layer::Fc(Dense::zeros(shape.iter().product(), *units)),
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(shape[0])),
                LayerSpec::Relu => Layer::Relu,
            });
            shape = next;
        }
        let features: usize = shape.iter().product();
        Ok(Model {
            user_head: Dense::zeros(features, spec.users),
            forgery_head: spec.forgery_head.then(|| Dense::zeros(features, 1)),
            spec,
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn user_head(&self) -> &Dense<T> {
        &self.user_head
    }

    pub fn forgery_head(&self) -> Option<&Dense<T>> {
        self.forgery_head.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        self.user_head.inputs
    }

    pub fn users(&self) -> usize {
        self.user_head.units
    }

    /// Replaces the user head (fine-tuning to a new writer set).
    pub fn replace_user_head(&mut self, head: Dense<T>) -> Result<()> {
        if head.inputs != self.feature_dim() {
            return Err(Error::shape(
                "user head",
                format!("head expects {} inputs, features have {}", head.inputs, self.feature_dim()),
            ));
        }
        self.spec.users = head.units;
        self.user_head = head;
        Ok(())
    }

    /// Every stored array (parameters and BN running statistics) with its
    /// shape, in serialization order.
    pub fn state_blocks(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { geometry, in_channels, weight, bias } => {
                    let k = geometry.kernel;
                    out.push((format!("{i}.weight"), vec![geometry.filters, *in_channels, k, k], weight));
                    out.push((format!("{i}.bias"), vec![geometry.filters], bias));
                }
                Layer::Fc(d) => {
                    out.push((format!("{i}.weight"), vec![d.inputs, d.units], &d.weight));
                    out.push((format!("{i}.bias"), vec![d.units], &d.bias));
                }
                Layer::BatchNorm(bn) => {
                    let c = vec![bn.channels()];
                    out.push((format!("{i}.gamma"), c.clone(), &bn.gamma));
                    out.push((format!("{i}.beta"), c.clone(), &bn.beta));
                    out.push((format!("{i}.running_mean"), c.clone(), &bn.running_mean));
                    out.push((format!("{i}.running_var"), c, &bn.running_var));
                }
                _ => {}
            }
        }
        let u = &self.user_head;
        out.push(("user_head.weight".into(), vec![u.inputs, u.units], &u.weight));
        out.push(("user_head.bias".into(), vec![u.units], &u.bias));
        if let Some(f) = &self.forgery_head {
            out.push(("forgery_head.weight".into(), vec![f.inputs, f.units], &f.weight));
            out.push(("forgery_head.bias".into(), vec![f.units], &f.bias));
        }
        out
    }

    pub(crate) fn state_blocks_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Conv { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::Fc(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                    out.push(&mut bn.running_mean);
                    out.push(&mut bn.running_var);
                }
                _ => {}
            }
        }
        out.push(&mut self.user_head.weight);
        out.push(&mut self.user_head.bias);
        if let Some(f) = &mut self.forgery_head {
            out.push(&mut f.weight);
            out.push(&mut f.bias);
        }
        out
    }

    pub fn params(&self) -> Vec<Param<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let tag = &self.spec.layers[i];
            match layer {
                Layer::Conv { weight, bias, .. } => {
                    out.push(Param { name: format!("{i}.{tag}.weight"), values: weight, decay: true });
                    out.push(Param { name: format!("{i}.{tag}.bias"), values: bias, decay: false });
                }
                Layer::Fc(d) => {
                    out.push(Param { name: format!("{i}.{tag}.weight"), values: &d.weight, decay: true });
                    out.push(Param { name: format!("{i}.{tag}.bias"), values: &d.bias, decay: false });
                }
                Layer::BatchNorm(bn) => {
                    out.push(Param { name: format!("{i}.bn.gamma"), values: &bn.gamma, decay: false });
                    out.push(Param { name: format!("{i}.bn.beta"), values: &bn.beta, decay: false });
                }
                _ => {}
            }
        }
        out.push(Param { name: "user_head.weight".into(), values: &self.user_head.weight, decay: true });
        out.push(Param { name: "user_head.bias".into(), values: &self.user_head.bias, decay: false });
        if let Some(f) = &self.forgery_head {
            out.push(Param { name: "forgery_head.weight".into(), values: &f.weight, decay: true });
            out.push(Param { name: "forgery_head.bias".into(), values: &f.bias, decay: false });
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let tag = &self.spec.layers[i];
            match layer {
                Layer::Conv { weight, bias, .. } => {
                    out.push(ParamMut { name: format!("{i}.{tag}.weight"), values: weight, decay: true });
                    out.push(ParamMut { name: format!("{i}.{tag}.bias"), values: bias, decay: false });
                }
                Layer::Fc(d) => {
                    out.push(ParamMut { name: format!("{i}.{tag}.weight"), values: &mut d.weight, decay: true });
                    out.push(ParamMut { name: format!("{i}.{tag}.bias"), values: &mut d.bias, decay: false });
                }
                Layer::BatchNorm(bn) => {
                    out.push(ParamMut { name: format!("{i}.bn.gamma"), values: &mut bn.gamma, decay: false });
                    out.push(ParamMut { name: format!("{i}.bn.beta"), values: &mut bn.beta, decay: false });
                }
                _ => {}
            }
        }
        out.push(ParamMut { name: "user_head.weight".into(), values: &mut self.user_head.weight, decay: true });
        out.push(ParamMut { name: "user_head.bias".into(), values: &mut self.user_head.bias, decay: false });
        if let Some(f) = &mut self.forgery_head {
            out.push(ParamMut { name: "forgery_head.weight".into(), values: &mut f.weight, decay: true });
            out.push(ParamMut { name: "forgery_head.bias".into(), values: &mut f.bias, decay: false });
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.values.len()).collect()
    }

    pub fn forward(&self, input: &Tensor4<T>, mode: Mode) -> Result<Forward<T>> {
        if input.channels() != self.spec.input_channels {
            return Err(Error::shape(
                "input",
                format!("expected {} channels, got {}", self.spec.input_channels, input.channels()),
            ));
        }
        let train = mode == Mode::Train;
        let mut caches = Vec::with_capacity(if train { self.layers.len() } else { 0 });
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let name = || format!("layer {i} ({})", self.spec.layers[i]);
            let (y, cache) = match layer {
                Layer::Conv { geometry, weight, bias, .. } => {
                    let y = conv2d_forward(&x, geometry, weight, bias).map_err(|e| relabel(e, name()))?;
                    (y, train.then_some(Cache::Input(x)))
                }
                Layer::MaxPool(geo) => {
                    let (y, argmax) = maxpool_forward(&x, geo).map_err(|e| relabel(e, name()))?;
                    let dims = x.dims();
                    (y, train.then_some(Cache::Pool { argmax, dims }))
                }
                Layer::Spp(p) => {
                    let (y, idx) = spp_forward(&x, p).map_err(|e| relabel(e, name()))?;
                    (y, train.then_some(Cache::Spp(idx)))
                }
                Layer::Fc(d) => {
                    let y = d.forward(&x, &name())?;
                    (y, train.then_some(Cache::Input(x)))
                }
                Layer::BatchNorm(bn) => {
                    let (y, c) = bn.forward(&x, mode).map_err(|e| relabel(e, name()))?;
                    (y, c.map(Cache::Bn))
                }
                Layer::Relu => {
                    let y = x.map(|v| if v > T::ZERO { v } else { T::ZERO });
                    let c = train.then(|| Cache::Relu(y.clone()));
                    (y, c)
                }
            };
            if let Some(c) = cache {
                caches.push(c);
            }
            x = y;
        }
        let user_logits = self.user_head.forward(&x, "user head")?;
        let forgery_logits = match &self.forgery_head {
            Some(h) => Some(h.forward(&x, "forgery head")?),
            None => None,
        };
        Ok(Forward {
            features: x,
            user_logits,
            forgery_logits,
            caches: train.then_some(caches),
            input_dims: input.dims(),
        })
    }

    /// Eval-mode representation from the last hidden layer, `[batch, D, 1, 1]`.
    pub fn features(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.forward(input, Mode::Eval)?.features)
    }

    /// Folds the batch statistics of a training pass into the BN running averages.
    pub fn update_running_stats(&mut self, fwd: &Forward<T>) -> Result<()> {
        let caches = fwd
            .caches
            .as_ref()
            .ok_or_else(|| Error::State("running statistics need a training-mode forward pass".into()))?;
        let mut bn_caches = caches.iter().filter_map(|c| match c {
            Cache::Bn(b) => Some(b),
            _ => None,
        });
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                let cache = bn_caches.next().ok_or_else(|| Error::State("forward pass does not match model".into()))?;
                bn.update_running(cache);
            }
        }
        Ok(())
    }

    /// Reverse pass from head-logit gradients to every parameter.
    pub fn backward(
        &self,
        fwd: &Forward<T>,
        d_user: &Tensor4<T>,
        d_forgery: Option<&Tensor4<T>>,
        want_input_grad: bool,
    ) -> Result<Gradients<T>> {
        let caches = fwd
            .caches
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a training-mode forward pass".into()))?;
        if caches.len() != self.layers.len() {
            return Err(Error::State(format!(
                "forward trace has {} entries, model has {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        if d_user.dims() != fwd.user_logits.dims() {
            return Err(Error::State(format!(
                "user-head gradient {:?} does not match logits {:?}",
                d_user.dims(),
                fwd.user_logits.dims()
            )));
        }
        let feats = &fwd.features;
        let mut head_grads = Vec::new();
        let (dx, dw, db) = self.user_head.backward(feats, d_user, true)?;
        let mut grad = dx.expect("requested");
        head_grads.push(dw);
        head_grads.push(db);
        match (&self.forgery_head, d_forgery) {
            (Some(h), Some(df)) => {
                let (dx, dw, db) = h.backward(feats, df, true)?;
                let dx = dx.expect("requested");
                grad.data_mut().iter_mut().zip(dx.data()).for_each(|(a, &b)| *a += b);
                head_grads.push(dw);
                head_grads.push(db);
            }
            (Some(h), None) => {
                head_grads.push(vec![T::ZERO; h.weight.len()]);
                head_grads.push(vec![T::ZERO; h.bias.len()]);
            }
            (None, Some(_)) => return Err(Error::State("forgery gradient given but model has no forgery head".into())),
            (None, None) => {}
        }

        let mut layer_grads: Vec<Vec<Vec<T>>> = Vec::with_capacity(self.layers.len());
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let need_dx = i > 0 || want_input_grad;
            let mut blocks = Vec::new();
            grad = match (layer, cache) {
                (Layer::Conv { geometry, weight, .. }, Cache::Input(x)) => {
                    let g = conv2d_backward(x, geometry, weight, &grad, need_dx)?;
                    blocks.push(g.weight);
                    blocks.push(g.bias);
                    g.input.unwrap_or_else(|| Tensor4::zeros([0, 0, 0, 0]))
                }
                (Layer::Fc(d), Cache::Input(x)) => {
                    let (dx, dw, db) = d.backward(x, &grad, need_dx)?;
                    blocks.push(dw);
                    blocks.push(db);
                    dx.unwrap_or_else(|| Tensor4::zeros([0, 0, 0, 0]))
                }
                (Layer::MaxPool(_), Cache::Pool { argmax, dims }) => maxpool_backward(&grad, argmax, *dims)?,
                (Layer::Spp(_), Cache::Spp(idx)) => spp_backward(&grad, idx, idx.input_dims())?,
                (Layer::BatchNorm(bn), Cache::Bn(c)) => {
                    let (dx, dg, dbeta) = bn.backward(&grad, c)?;
                    blocks.push(dg);
                    blocks.push(dbeta);
                    dx
                }
                (Layer::Relu, Cache::Relu(out)) => {
                    if out.dims() != grad.dims() {
                        return Err(Error::State(format!("relu at layer {i}: stale trace")));
                    }
                    let mut g = grad;
                    g.data_mut().iter_mut().zip(out.data()).for_each(|(d, &o)| {
                        if o <= T::ZERO {
                            *d = T::ZERO
                        }
                    });
                    g
                }
                _ => {
                    return Err(Error::State(format!(
                        "forward trace does not match layer {i} ({})",
                        self.spec.layers[i]
                    )))
                }
            };
            layer_grads.push(blocks);
        }
        layer_grads.reverse();
        let mut blocks: Vec<Vec<T>> = layer_grads.into_iter().flatten().collect();
        blocks.extend(head_grads);
        let input = if want_input_grad {
            if grad.dims() != fwd.input_dims {
                return Err(Error::State("input gradient shape mismatch".into()));
            }
            Some(grad)
        } else {
            None
        };
        Ok(Gradients { blocks, input })
    }

    /// Element-type conversion of all parameters and statistics.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect::<Vec<U>>();
        let dense =
            |d: &Dense<T>| Dense { inputs: d.inputs, units: d.units, weight: conv(&d.weight), bias: conv(&d.bias) };
        Model {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv { geometry, in_channels, weight, bias } => Layer::Conv {
                        geometry: *geometry,
                        in_channels: *in_channels,
                        weight: conv(weight),
                        bias: conv(bias),
                    },
                    Layer::MaxPool(g) => Layer::MaxPool(*g),
                    Layer::Spp(p) => Layer::Spp(p.clone()),
                    Layer::Fc(d) => Layer::Fc(dense(d)),
                    Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                        gamma: conv(&bn.gamma),
                        beta: conv(&bn.beta),
                        running_mean: conv(&bn.running_mean),
                        running_var: conv(&bn.running_var),
                    }),
                    Layer::Relu => Layer::Relu,
                })
                .collect(),
            user_head: dense(&self.user_head),
            forgery_head: self.forgery_head.as_ref().map(dense),
        }
    }
}

fn relabel(e: Error, layer: String) -> Error {
    match e {
        Error::Shape { message, .. } => Error::Shape { layer, message },
        other => other,
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Gradients { blocks: model.params().iter().map(|p| vec![T::ZERO; p.values.len()]).collect(), input: None }
    }

    pub fn all_zero(&self) -> bool {
        self.blocks.iter().flatten().all(|&v| v == T::ZERO)
    }
}
