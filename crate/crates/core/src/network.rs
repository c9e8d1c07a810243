//! Actor and critic networks assembled from [`crate::nn`] layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Dense, LayerNorm, LayerNormCache, ParamAlloc};
use crate::obsmap::{feature_len, FOV_LEN, FOV_SIDE, FPR_LEN};
use crate::seed::SimRng;
use crate::world::N_ACTIONS;

pub const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
pub const ACTOR_HEAD_SCALE: f64 = 0.01;

/// Widths of the convolutional variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnDims {
    pub conv1: usize,
    pub conv2: usize,
    pub fov_embed: usize,
    pub fpr_embed: usize,
    pub net_embed: usize,
    pub trunk: usize,
}

impl Default for CnnDims {
    fn default() -> Self {
        Self { conv1: 8, conv2: 16, fov_embed: 64, fpr_embed: 32, net_embed: 16, trunk: 128 }
    }
}

impl CnnDims {
    fn embed_len(&self) -> usize {
        self.fov_embed + self.fpr_embed + self.net_embed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Mlp { hidden: Vec<usize> },
    Cnn(CnnDims),
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp { hidden: vec![2400, 300] }
    }
}

impl Architecture {
    pub fn mlp(hidden: &[usize]) -> Self {
        Architecture::Mlp { hidden: hidden.to_vec() }
    }

    pub fn cnn() -> Self {
        Architecture::Cnn(CnnDims::default())
    }

    pub fn tag(&self) -> String {
        match self {
            Architecture::Mlp { hidden } => {
                let widths: Vec<String> = hidden.iter().map(ToString::to_string).collect();
                format!("mlp[{}]", widths.join(","))
            }
            Architecture::Cnn(d) => format!(
                "cnn[{},{};{},{},{};{}]",
                d.conv1, d.conv2, d.fov_embed, d.fpr_embed, d.net_embed, d.trunk
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp { hidden } if hidden.is_empty() || hidden.contains(&0) => Err(Error::InvalidConfig(
                "mlp needs at least one hidden layer of nonzero width".into(),
            )),
            Architecture::Cnn(d)
                if [d.conv1, d.conv2, d.fov_embed, d.fpr_embed, d.net_embed, d.trunk].contains(&0) =>
            {
                Err(Error::InvalidConfig("cnn widths must be nonzero".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Actor,
    Critic,
}

/// Everything needed to rebuild a network's layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub role: Role,
    pub architecture: Architecture,
    pub n_agents: usize,
}

impl NetworkSpec {
    pub fn actor(architecture: Architecture, n_agents: usize) -> Self {
        Self { role: Role::Actor, architecture, n_agents }
    }

    pub fn critic(architecture: Architecture, n_agents: usize) -> Self {
        Self { role: Role::Critic, architecture, n_agents }
    }

    /// Per-agent feature length.
    pub fn obs_len(&self) -> usize {
        feature_len(self.n_agents)
    }

    pub fn input_len(&self) -> usize {
        match self.role {
            Role::Actor => self.obs_len(),
            Role::Critic => self.n_agents * self.obs_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self.role {
            Role::Actor => N_ACTIONS,
            Role::Critic => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Branch {
    conv1: Conv2d,
    conv2: Conv2d,
    fov_fc: Dense,
    fpr_fc: Dense,
    net_fc: Dense,
}

#[derive(Debug, Clone)]
enum Body {
    Mlp { layers: Vec<Dense>, norm: LayerNorm },
    Cnn { branch: Box<Branch>, trunk: Dense },
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    body: Body,
    head: Dense,
    shapes: Vec<(String, Vec<usize>)>,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct BranchTape {
    fov: Vec<f64>,
    fpr: Vec<f64>,
    net: Vec<f64>,
    c1z: Vec<f64>,
    c1a: Vec<f64>,
    c2z: Vec<f64>,
    c2a: Vec<f64>,
    ez: Vec<f64>,
    pz: Vec<f64>,
    nz: Vec<f64>,
}

/// Activations recorded by [`Network::forward_train`].
#[derive(Debug, Clone)]
pub struct Tape {
    inner: TapeInner,
    head_in: Vec<f64>,
}

#[derive(Debug, Clone)]
enum TapeInner {
    Mlp { inputs: Vec<Vec<f64>>, pre: Vec<Vec<f64>>, norm: LayerNormCache },
    Cnn { branches: Vec<BranchTape>, trunk_in: Vec<f64>, trunk_pre: Vec<f64> },
}

impl Network {
    /// Zero-initialized network; layer norm gains are 1.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.architecture.validate()?;
        if spec.n_agents == 0 {
            return Err(Error::InvalidConfig("network needs at least one agent".into()));
        }
        let mut alloc = ParamAlloc::default();
        let input = spec.input_len();
        let (body, head_in) = match &spec.architecture {
            Architecture::Mlp { hidden } => {
                let mut layers = Vec::with_capacity(hidden.len());
                let mut width = input;
                let mut norm = None;
                for (k, &h) in hidden.iter().enumerate() {
                    layers.push(Dense::new(&mut alloc, &format!("hidden{k}"), width, h));
                    if k == 0 {
                        norm = Some(LayerNorm::new(&mut alloc, "norm0", h));
                    }
                    width = h;
                }
                (Body::Mlp { layers, norm: norm.expect("at least one hidden layer") }, width)
            }
            Architecture::Cnn(d) => {
                let branch = Branch {
                    conv1: Conv2d::new(&mut alloc, "conv1", 1, d.conv1, 3, FOV_SIDE, FOV_SIDE),
                    conv2: Conv2d::new(&mut alloc, "conv2", d.conv1, d.conv2, 3, FOV_SIDE, FOV_SIDE),
                    fov_fc: Dense::new(&mut alloc, "fov_fc", d.conv2 * FOV_LEN, d.fov_embed),
                    fpr_fc: Dense::new(&mut alloc, "fpr_fc", FPR_LEN, d.fpr_embed),
                    net_fc: Dense::new(&mut alloc, "net_fc", spec.n_agents, d.net_embed),
                };
                let branches = match spec.role {
                    Role::Actor => 1,
                    Role::Critic => spec.n_agents,
                };
                let trunk = Dense::new(&mut alloc, "trunk", branches * d.embed_len(), d.trunk);
                (Body::Cnn { branch: Box::new(branch), trunk }, d.trunk)
            }
        };
        let head = Dense::new(&mut alloc, "head", head_in, spec.output_len());
        let mut net = Self { spec, body, head, params: vec![0.0; alloc.len()], shapes: alloc.shapes };
        if let Body::Mlp { norm, .. } = &net.body {
            norm.init(&mut net.params);
        }
        Ok(net)
    }

    /// Orthogonal hidden layers, small-uniform actor head, orthogonal critic head.
    pub fn new(spec: NetworkSpec, rng: &mut SimRng) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let p = &mut net.params;
        match &net.body {
            Body::Mlp { layers, .. } => {
                for l in layers {
                    l.init_orthogonal(p, HIDDEN_GAIN, rng);
                }
            }
            Body::Cnn { branch, trunk } => {
                branch.conv1.init_orthogonal(p, HIDDEN_GAIN, rng);
                branch.conv2.init_orthogonal(p, HIDDEN_GAIN, rng);
                for l in [&branch.fov_fc, &branch.fpr_fc, &branch.net_fc, trunk] {
                    l.init_orthogonal(p, HIDDEN_GAIN, rng);
                }
            }
        }
        match net.spec.role {
            Role::Actor => net.head.init_uniform(p, ACTOR_HEAD_SCALE, rng),
            Role::Critic => net.head.init_orthogonal(p, 1.0, rng),
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_len()
    }

    pub fn output_len(&self) -> usize {
        self.spec.output_len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named parameter blocks in storage order.
    pub fn shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }

    /// Mutable view of one named parameter block, e.g. `"head.bias"`.
    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let mut off = 0;
        for (n, dims) in &self.shapes {
            let len: usize = dims.iter().product();
            if n == name {
                return Some(&mut self.params[off..off + len]);
            }
            off += len;
        }
        None
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "{} expects {} inputs, got {}",
                self.spec.architecture.tag(),
                self.input_len(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(x)?;
        let p = &self.params;
        let (inner, head_in) = match &self.body {
            Body::Mlp { layers, norm } => {
                let mut inputs = Vec::with_capacity(layers.len());
                let mut pre = Vec::with_capacity(layers.len());
                let mut h = x.to_vec();
                let mut cache = LayerNormCache::default();
                for (k, l) in layers.iter().enumerate() {
                    let z = l.forward(p, &h);
                    let a = nn::relu(&z);
                    inputs.push(std::mem::replace(&mut h, a));
                    pre.push(z);
                    if k == 0 {
                        let (y, c) = norm.forward(p, &h);
                        h = y;
                        cache = c;
                    }
                }
                (TapeInner::Mlp { inputs, pre, norm: cache }, h)
            }
            Body::Cnn { branch, trunk } => {
                let obs_len = self.spec.obs_len();
                let mut branches = Vec::new();
                let mut trunk_in = Vec::with_capacity(trunk.input);
                for f in x.chunks_exact(obs_len) {
                    let (emb, t) = branch.forward(p, f);
                    trunk_in.extend_from_slice(&emb);
                    branches.push(t);
                }
                let trunk_pre = trunk.forward(p, &trunk_in);
                let h = nn::relu(&trunk_pre);
                (TapeInner::Cnn { branches, trunk_in, trunk_pre }, h)
            }
        };
        let out = self.head.forward(p, &head_in);
        Ok((out, Tape { inner, head_in }))
    }

    /// Accumulates `dout · ∂out/∂θ` into `grad`.
    pub fn backward(&self, tape: &Tape, dout: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        assert_eq!(dout.len(), self.output_len(), "output gradient size");
        let p = &self.params;
        let mut d = self.head.backward(p, &tape.head_in, dout, grad, true);
        match (&self.body, &tape.inner) {
            (Body::Mlp { layers, norm }, TapeInner::Mlp { inputs, pre, norm: cache }) => {
                for k in (0..layers.len()).rev() {
                    if k == 0 {
                        d = norm.backward(p, cache, &d, grad);
                    }
                    d = nn::relu_backward(&pre[k], &d);
                    d = layers[k].backward(p, &inputs[k], &d, grad, k > 0);
                }
            }
            (Body::Cnn { branch, trunk }, TapeInner::Cnn { branches, trunk_in, trunk_pre }) => {
                let dz = nn::relu_backward(trunk_pre, &d);
                let demb = trunk.backward(p, trunk_in, &dz, grad, true);
                let width = demb.len() / branches.len();
                for (t, de) in branches.iter().zip(demb.chunks_exact(width)) {
                    branch.backward(p, t, de, grad);
                }
            }
            _ => unreachable!("tape recorded by a different network"),
        }
    }

    pub fn same_layout(&self, other: &Network) -> bool {
        self.spec == other.spec && self.params.len() == other.params.len()
    }
}

impl Branch {
    fn forward(&self, p: &[f64], f: &[f64]) -> (Vec<f64>, BranchTape) {
        let fov = f[..FOV_LEN].to_vec();
        let fpr = f[FOV_LEN..FOV_LEN + FPR_LEN].to_vec();
        let net = f[FOV_LEN + FPR_LEN..].to_vec();
        let c1z = self.conv1.forward(p, &fov);
        let c1a = nn::relu(&c1z);
        let c2z = self.conv2.forward(p, &c1a);
        let c2a = nn::relu(&c2z);
        let ez = self.fov_fc.forward(p, &c2a);
        let pz = self.fpr_fc.forward(p, &fpr);
        let nz = self.net_fc.forward(p, &net);
        let mut emb = nn::relu(&ez);
        emb.extend(nn::relu(&pz));
        emb.extend(nn::relu(&nz));
        (emb, BranchTape { fov, fpr, net, c1z, c1a, c2z, c2a, ez, pz, nz })
    }

    fn backward(&self, p: &[f64], t: &BranchTape, demb: &[f64], grad: &mut [f64]) {
        let (de, rest) = demb.split_at(self.fov_fc.output);
        let (dp, dn) = rest.split_at(self.fpr_fc.output);
        let d = nn::relu_backward(&t.ez, de);
        let d = self.fov_fc.backward(p, &t.c2a, &d, grad, true);
        let d = nn::relu_backward(&t.c2z, &d);
        let d = self.conv2.backward(p, &t.c1a, &d, grad, true);
        let d = nn::relu_backward(&t.c1z, &d);
        self.conv1.backward(p, &t.fov, &d, grad, false);
        let d = nn::relu_backward(&t.pz, dp);
        self.fpr_fc.backward(p, &t.fpr, &d, grad, false);
        let d = nn::relu_backward(&t.nz, dn);
        self.net_fc.backward(p, &t.net, &d, grad, false);
    }
}
