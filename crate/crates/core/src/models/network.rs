use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::profile::ModelProfile;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Discriminator,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub is_bias: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One step of a network program. Parameterized layers refer to the index of
/// their weight; the bias follows immediately.
#[derive(Clone, Debug)]
enum Layer {
    Conv {
        param: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        param: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    },
    InstanceNorm,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Residual(Vec<Layer>),
    Flatten,
    Linear {
        param: usize,
    },
    Dropout(f64),
    Softmax,
}

/// Layer program plus parameter shapes; building one allocates nothing.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub role: Role,
    layers: Vec<Layer>,
    pub params: Vec<ParamSpec>,
    /// Per-example output shape (without the batch axis).
    pub output_shape: Vec<usize>,
}

struct Builder {
    params: Vec<ParamSpec>,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> usize {
        let idx = self.params.len();
        self.params.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            is_bias: false,
        });
        self.params.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            is_bias: true,
        });
        idx
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> usize {
        let idx = self.params.len();
        self.params.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cin, cout, k, k],
            is_bias: false,
        });
        self.params.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            is_bias: true,
        });
        idx
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> usize {
        let idx = self.params.len();
        self.params.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![fout, fin],
            is_bias: false,
        });
        self.params.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![fout],
            is_bias: true,
        });
        idx
    }
}

impl Architecture {
    /// Residual translation network: 7x7 stem, two stride-2 downsampling
    /// convolutions, residual blocks, two fractionally-strided upsampling
    /// convolutions and a 7x7 tanh output layer.
    pub fn generator(profile: &ModelProfile) -> Result<Self> {
        profile.validate()?;
        let (c, f) = (profile.channels, profile.generator_filters);
        let mut b = Builder { params: Vec::new() };
        let mut layers = vec![
            Layer::Conv {
                param: b.conv("stem", c, f, 7),
                stride: 1,
                pad: 3,
            },
            Layer::InstanceNorm,
            Layer::Relu,
        ];
        let mut width = f;
        for i in 0..2 {
            layers.push(Layer::Conv {
                param: b.conv(&format!("down{i}"), width, width * 2, 3),
                stride: 2,
                pad: 1,
            });
            layers.push(Layer::InstanceNorm);
            layers.push(Layer::Relu);
            width *= 2;
        }
        for i in 0..profile.generator_residual_blocks {
            let body = vec![
                Layer::Conv {
                    param: b.conv(&format!("res{i}.conv0"), width, width, 3),
                    stride: 1,
                    pad: 1,
                },
                Layer::InstanceNorm,
                Layer::Relu,
                Layer::Conv {
                    param: b.conv(&format!("res{i}.conv1"), width, width, 3),
                    stride: 1,
                    pad: 1,
                },
                Layer::InstanceNorm,
            ];
            layers.push(Layer::Residual(body));
        }
        for i in 0..2 {
            layers.push(Layer::ConvTranspose {
                param: b.conv_t(&format!("up{i}"), width, width / 2, 3),
                stride: 2,
                pad: 1,
                output_pad: 1,
            });
            layers.push(Layer::InstanceNorm);
            layers.push(Layer::Relu);
            width /= 2;
        }
        layers.push(Layer::Conv {
            param: b.conv("head", width, c, 7),
            stride: 1,
            pad: 3,
        });
        layers.push(Layer::Tanh);
        let s = profile.image_size;
        Ok(Self {
            role: Role::Generator,
            layers,
            params: b.params,
            output_shape: vec![c, s, s],
        })
    }

    fn discriminator_trunk(profile: &ModelProfile, b: &mut Builder) -> (Vec<Layer>, usize) {
        let mut layers = Vec::new();
        let mut cin = profile.channels;
        let strided = profile.discriminator_strided_layers();
        for i in 0..=strided {
            let cout = profile.discriminator_width(i);
            let stride = if i < strided { 2 } else { 1 };
            layers.push(Layer::Conv {
                param: b.conv(&format!("trunk{i}"), cin, cout, 4),
                stride,
                pad: 1,
            });
            if i > 0 {
                layers.push(Layer::InstanceNorm);
            }
            layers.push(Layer::LeakyRelu);
            cin = cout;
        }
        (layers, cin)
    }

    /// PatchGAN discriminator emitting a grid of per-patch probabilities.
    pub fn discriminator(profile: &ModelProfile) -> Result<Self> {
        profile.validate()?;
        let mut b = Builder { params: Vec::new() };
        let (mut layers, width) = Self::discriminator_trunk(profile, &mut b);
        layers.push(Layer::Conv {
            param: b.conv("score", width, 1, 4),
            stride: 1,
            pad: 1,
        });
        layers.push(Layer::Sigmoid);
        let grid = profile.discriminator_grid().expect("validated profile");
        Ok(Self {
            role: Role::Discriminator,
            layers,
            params: b.params,
            output_shape: vec![1, grid, grid],
        })
    }

    /// Discriminator trunk, two hidden fully-connected layers (dropout on the
    /// second) and a two-way softmax head.
    pub fn classifier(profile: &ModelProfile) -> Result<Self> {
        profile.validate()?;
        let mut b = Builder { params: Vec::new() };
        let (mut layers, width) = Self::discriminator_trunk(profile, &mut b);
        let side = profile.discriminator_trunk_side().expect("validated profile");
        let features = width * side * side;
        let (h1, h2) = profile.classifier_fc_sizes;
        layers.push(Layer::Flatten);
        layers.push(Layer::Linear {
            param: b.linear("fc0", features, h1),
        });
        layers.push(Layer::Relu);
        layers.push(Layer::Linear {
            param: b.linear("fc1", h1, h2),
        });
        layers.push(Layer::Relu);
        layers.push(Layer::Dropout(profile.dropout_rate));
        layers.push(Layer::Linear {
            param: b.linear("out", h2, 2),
        });
        layers.push(Layer::Softmax);
        Ok(Self {
            role: Role::Classifier,
            layers,
            params: b.params,
            output_shape: vec![2],
        })
    }

    pub fn for_role(role: Role, profile: &ModelProfile) -> Result<Self> {
        match role {
            Role::Generator => Self::generator(profile),
            Role::Discriminator => Self::discriminator(profile),
            Role::Classifier => Self::classifier(profile),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    /// Number of residual blocks and strided (transposed) convolutions, for topology checks.
    pub fn topology(&self) -> Topology {
        let mut t = Topology::default();
        for l in &self.layers {
            match l {
                Layer::Conv { stride: 2, .. } => t.downsampling += 1,
                Layer::ConvTranspose { stride: 2, .. } => t.upsampling += 1,
                Layer::Residual(_) => t.residual_blocks += 1,
                Layer::Linear { .. } => t.linear_layers += 1,
                Layer::Dropout(_) => t.dropout_layers += 1,
                _ => {}
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Topology {
    pub downsampling: usize,
    pub upsampling: usize,
    pub residual_blocks: usize,
    pub linear_layers: usize,
    pub dropout_layers: usize,
}

/// Forward-pass mode. Dropout samples its mask from the supplied generator in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Parameter leaves of one network inside a [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// A network's architecture together with its parameter values.
#[derive(Clone, Debug)]
pub struct Network<T> {
    arch: Architecture,
    profile: ModelProfile,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with all parameters zero; call [`Network::init_weights`] next.
    pub fn zeros(role: Role, profile: &ModelProfile) -> Result<Self> {
        let arch = Architecture::for_role(role, profile)?;
        let params = arch.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Ok(Self {
            arch,
            profile: profile.clone(),
            params,
        })
    }

    /// Builds and initializes: weights from N(0, init_std), biases zero.
    pub fn new(role: Role, profile: &ModelProfile, seed: u64) -> Result<Self> {
        let mut n = Self::zeros(role, profile)?;
        n.init_weights(seed);
        Ok(n)
    }

    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.profile.init_std).expect("validated init_std");
        for (spec, t) in self.arch.params.iter().zip(&mut self.params) {
            for v in t.data_mut() {
                *v = if spec.is_bias {
                    T::zero()
                } else {
                    T::lit(normal.sample(&mut rng))
                };
            }
        }
    }

    pub fn role(&self) -> Role {
        self.arch.role
    }

    pub fn profile(&self) -> &ModelProfile {
        &self.profile
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.arch.params
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub(crate) fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.arch.params)
                .any(|(t, s)| t.shape() != s.shape.as_slice())
        {
            return Err(Error::Format(format!(
                "parameter layout does not match the {:?} architecture",
                self.arch.role
            )));
        }
        self.params = params;
        Ok(())
    }

    /// All parameters concatenated in declaration order.
    pub fn flat_params(&self) -> Vec<T> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// SHA-256 over the little-endian parameter bytes; equal digests mean bit-identical weights.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.params {
            h.update(T::to_le_bytes_vec(t.data()));
        }
        hex(&h.finalize())
    }

    /// Inserts parameters as graph leaves; frozen networks bind with `trainable = false`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.clone(), trainable))
                .collect(),
        }
    }

    /// Parameter gradients after `g.backward`, zeros where nothing flowed.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound.vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, input: Var, mode: &mut Mode<'_>) -> Var {
        let s = g.value(input).shape().to_vec();
        let expected = [self.profile.channels, self.profile.image_size, self.profile.image_size];
        assert!(
            s.len() == 4 && s[1..] == expected,
            "{:?} expects [N, {}, {}, {}] input, got {s:?}",
            self.arch.role,
            expected[0],
            expected[1],
            expected[2]
        );
        run_layers(&self.arch.layers, g, &bound.vars, input, mode)
    }

    /// Classifier probability of the minority class, `z(x)`, as an `[N]` node.
    pub fn forward_z(&self, g: &mut Graph<T>, bound: &Bound, input: Var, mode: &mut Mode<'_>) -> Var {
        assert_eq!(self.arch.role, Role::Classifier, "forward_z requires a classifier");
        let p = self.forward(g, bound, input, mode);
        g.column(p, 1)
    }

    /// Evaluation-mode forward pass in chunks of `chunk` examples.
    pub fn infer(&self, input: &Tensor<T>, chunk: usize) -> Tensor<T> {
        let n = input.batch();
        let mut outs = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = input.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(
                shape,
                input.data()[start * input.item_len()..end * input.item_len()].to_vec(),
            );
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let x = g.constant(part);
            let y = self.forward(&mut g, &bound, x, &mut Mode::Eval);
            outs.push(g.value(y).clone());
            start = end;
        }
        if outs.is_empty() {
            let mut shape = vec![0];
            shape.extend(&self.arch.output_shape);
            return Tensor::zeros(&shape);
        }
        Tensor::concat(&outs.iter().collect::<Vec<_>>())
    }

    /// Evaluation-mode `z(x)` for every example.
    pub fn predict_z(&self, input: &Tensor<T>) -> Vec<T> {
        assert_eq!(self.arch.role, Role::Classifier);
        let p = self.infer(input, 64);
        p.data().iter().skip(1).step_by(2).copied().collect()
    }
}

fn run_layers<T: Scalar>(
    layers: &[Layer],
    g: &mut Graph<T>,
    vars: &[Var],
    mut x: Var,
    mode: &mut Mode<'_>,
) -> Var {
    for layer in layers {
        x = match layer {
            Layer::Conv { param, stride, pad } => {
                g.conv2d(x, vars[*param], Some(vars[param + 1]), *stride, *pad)
            }
            Layer::ConvTranspose {
                param,
                stride,
                pad,
                output_pad,
            } => g.conv_transpose2d(
                x,
                vars[*param],
                Some(vars[param + 1]),
                *stride,
                *pad,
                *output_pad,
            ),
            Layer::InstanceNorm => g.instance_norm(x),
            Layer::Relu => g.relu(x),
            Layer::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Layer::Tanh => g.tanh(x),
            Layer::Sigmoid => g.sigmoid(x),
            Layer::Residual(body) => {
                let y = run_layers(body, g, vars, x, mode);
                g.add(x, y)
            }
            Layer::Flatten => g.flatten(x),
            Layer::Linear { param } => g.linear(x, vars[*param], Some(vars[param + 1])),
            Layer::Dropout(rate) => match mode {
                Mode::Eval => x,
                Mode::Train(rng) => {
                    use rand::Rng;
                    let n = g.value(x).len();
                    let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= *rate).collect();
                    g.dropout(x, &keep, *rate)
                }
            },
            Layer::Softmax => g.softmax(x),
        };
    }
    x
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The two translation networks and their discriminators.
#[derive(Clone, Debug)]
pub struct GanPair<T> {
    pub g_ab: Network<T>,
    pub g_ba: Network<T>,
    pub d_a: Network<T>,
    pub d_b: Network<T>,
}

impl<T: Scalar> GanPair<T> {
    /// Builds all four networks with independent initialization streams derived from `seed`.
    pub fn new(profile: &ModelProfile, seed: u64) -> Result<Self> {
        use crate::seed::derive_seed;
        Ok(Self {
            g_ab: Network::new(Role::Generator, profile, derive_seed(seed, "g_ab"))?,
            g_ba: Network::new(Role::Generator, profile, derive_seed(seed, "g_ba"))?,
            d_a: Network::new(Role::Discriminator, profile, derive_seed(seed, "d_a"))?,
            d_b: Network::new(Role::Discriminator, profile, derive_seed(seed, "d_b"))?,
        })
    }

    pub fn profile(&self) -> &ModelProfile {
        self.g_ab.profile()
    }

    pub fn networks(&self) -> [(&'static str, &Network<T>); 4] {
        [
            ("g_ab", &self.g_ab),
            ("g_ba", &self.g_ba),
            ("d_a", &self.d_a),
            ("d_b", &self.d_b),
        ]
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, n) in self.networks() {
            h.update(n.digest().as_bytes());
        }
        hex(&h.finalize())
    }
}
