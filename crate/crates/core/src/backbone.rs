//! The feed-forward networks that refinement wraps: an MLP classifier and a
//! small pre-norm transformer encoder classifier.
//!
//! Both expose the same layer interface: `f^(1)` maps the input to the first
//! hidden state, `f^(l)` for `2 ≤ l ≤ L` maps width `d_h` to `d_h`, and the
//! head `f^(L+1)` maps the last hidden state to the output. MLP hidden states
//! are `batch × d_h` matrices; transformer hidden states are `tokens × d_h`.

use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::graph::{Activation, NodeId};
use crate::model::{Input, Session};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub d_x: usize,
    pub d_h: usize,
    pub d_y: usize,
    pub layers: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    pub vocab: usize,
    pub max_len: usize,
    pub d_h: usize,
    pub d_y: usize,
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_heads() -> usize {
    2
}

fn default_mlp_ratio() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    Mlp(MlpSpec),
    Transformer(TransformerSpec),
}

/// Widths shared by every backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Input width (`d_x`) for the MLP; vocabulary size for the transformer.
    pub d_in: usize,
    pub d_h: usize,
    pub d_y: usize,
    pub layers: usize,
}

impl BackboneSpec {
    pub fn dims(&self) -> Dims {
        match self {
            BackboneSpec::Mlp(s) => Dims {
                d_in: s.d_x,
                d_h: s.d_h,
                d_y: s.d_y,
                layers: s.layers,
            },
            BackboneSpec::Transformer(s) => Dims {
                d_in: s.vocab,
                d_h: s.d_h,
                d_y: s.d_y,
                layers: s.layers,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if d.d_in == 0 || d.d_h == 0 || d.d_y == 0 {
            return Err(CflError::Config("backbone widths must be positive".into()));
        }
        if d.layers == 0 {
            return Err(CflError::Config("backbone needs at least one hidden layer".into()));
        }
        if let BackboneSpec::Transformer(t) = self {
            if t.max_len == 0 || t.heads == 0 || t.mlp_ratio == 0 {
                return Err(CflError::Config("transformer max_len, heads, mlp_ratio must be positive".into()));
            }
            if t.d_h % t.heads != 0 {
                return Err(CflError::Config(format!(
                    "d_h = {} is not divisible by heads = {}",
                    t.d_h, t.heads
                )));
            }
        }
        Ok(())
    }
}

/// Affine map `x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    fn new(params: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = params.add(format!("{name}.weight"), init.glorot(d_in, d_out), ParamGroup::Backbone);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), ParamGroup::Backbone);
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = s.param(self.weight)?;
        let b = s.param(self.bias)?;
        let xw = s.graph.matmul(x, w)?;
        s.graph.add(xw, b)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    /// `layers[l - 1]` is `f^(l)`.
    pub layers: Vec<Dense>,
    pub head: Dense,
}

#[derive(Clone, Debug)]
pub struct LayerNormAffine {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormAffine {
    fn new(params: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.gain"), Tensor::ones(&[d]), ParamGroup::Backbone),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[d]), ParamGroup::Backbone),
        }
    }

    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        let n = s.graph.layer_norm_rows(x, LN_EPS)?;
        let g = s.param(self.gain)?;
        let b = s.param(self.bias)?;
        let scaled = s.graph.mul(n, g)?;
        s.graph.add(scaled, b)
    }
}

pub const LN_EPS: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNormAffine,
    pub heads: Vec<AttentionHead>,
    pub out: Dense,
    pub ln2: LayerNormAffine,
    pub up: Dense,
    pub down: Dense,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub spec: TransformerSpec,
    pub embed: ParamId,
    pub position: ParamId,
    pub blocks: Vec<Block>,
    pub head: Dense,
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Mlp(Mlp),
    Transformer(Transformer),
}

impl Backbone {
    pub fn build(spec: &BackboneSpec, params: &mut ParamStore, init: &mut Init) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            BackboneSpec::Mlp(s) => {
                let mut layers = Vec::with_capacity(s.layers);
                for l in 1..=s.layers {
                    let d_in = if l == 1 { s.d_x } else { s.d_h };
                    layers.push(Dense::new(params, init, &format!("mlp.f{l}"), d_in, s.d_h));
                }
                let head = Dense::new(params, init, "mlp.head", s.d_h, s.d_y);
                Backbone::Mlp(Mlp {
                    spec: s.clone(),
                    layers,
                    head,
                })
            }
            BackboneSpec::Transformer(s) => {
                let embed = params.add("tf.embed", init.normal(&[s.vocab, s.d_h], 0.5), ParamGroup::Backbone);
                let position = params.add("tf.position", init.normal(&[s.max_len, s.d_h], 0.1), ParamGroup::Backbone);
                let d_k = s.d_h / s.heads;
                let mut blocks = Vec::with_capacity(s.layers);
                for l in 1..=s.layers {
                    let name = format!("tf.block{l}");
                    let ln1 = LayerNormAffine::new(params, &format!("{name}.ln1"), s.d_h);
                    let heads = (0..s.heads)
                        .map(|h| AttentionHead {
                            query: params.add(format!("{name}.head{h}.query"), init.glorot(s.d_h, d_k), ParamGroup::Backbone),
                            key: params.add(format!("{name}.head{h}.key"), init.glorot(s.d_h, d_k), ParamGroup::Backbone),
                            value: params.add(format!("{name}.head{h}.value"), init.glorot(s.d_h, d_k), ParamGroup::Backbone),
                        })
                        .collect();
                    let out = Dense::new(params, init, &format!("{name}.out"), s.d_h, s.d_h);
                    let ln2 = LayerNormAffine::new(params, &format!("{name}.ln2"), s.d_h);
                    let up = Dense::new(params, init, &format!("{name}.up"), s.d_h, s.d_h * s.mlp_ratio);
                    let down = Dense::new(params, init, &format!("{name}.down"), s.d_h * s.mlp_ratio, s.d_h);
                    blocks.push(Block {
                        ln1,
                        heads,
                        out,
                        ln2,
                        up,
                        down,
                    });
                }
                let head = Dense::new(params, init, "tf.head", s.d_h, s.d_y);
                Backbone::Transformer(Transformer {
                    spec: s.clone(),
                    embed,
                    position,
                    blocks,
                    head,
                })
            }
        })
    }

    pub fn dims(&self) -> Dims {
        match self {
            Backbone::Mlp(m) => BackboneSpec::Mlp(m.spec.clone()).dims(),
            Backbone::Transformer(t) => BackboneSpec::Transformer(t.spec.clone()).dims(),
        }
    }

    pub fn layers(&self) -> usize {
        self.dims().layers
    }

    /// `f^(1)`: input to the first hidden state.
    pub fn first_layer<T: Real>(&self, s: &mut Session<'_, T>, x: Input<'_>) -> Result<NodeId> {
        match (self, x) {
            (Backbone::Mlp(m), Input::Dense(x)) => {
                let (_, w) = x.dims2()?;
                if w != m.spec.d_x {
                    return Err(CflError::Shape(format!("input width {w}, expected d_x = {}", m.spec.d_x)));
                }
                let xn = s.graph.constant(x.cast())?;
                let pre = m.layers[0].forward(s, xn)?;
                s.graph.activation(m.spec.activation, pre)
            }
            (Backbone::Transformer(t), Input::Tokens(tokens)) => {
                if tokens.is_empty() || tokens.len() > t.spec.max_len {
                    return Err(CflError::Shape(format!(
                        "sequence length {} outside 1..={}",
                        tokens.len(),
                        t.spec.max_len
                    )));
                }
                if let Some(&bad) = tokens.iter().find(|&&tok| tok >= t.spec.vocab) {
                    return Err(CflError::Shape(format!("token {bad} outside vocabulary of {}", t.spec.vocab)));
                }
                let table = s.param(t.embed)?;
                let emb = s.graph.gather_rows(table, tokens)?;
                let pos_table = s.param(t.position)?;
                let positions: Vec<usize> = (0..tokens.len()).collect();
                let pos = s.graph.gather_rows(pos_table, &positions)?;
                let h0 = s.graph.add(emb, pos)?;
                t.block(s, 0, h0)
            }
            (Backbone::Mlp(_), Input::Tokens(_)) => Err(CflError::Shape("MLP backbone expects dense input".into())),
            (Backbone::Transformer(_), Input::Dense(_)) => {
                Err(CflError::Shape("transformer backbone expects a token sequence".into()))
            }
        }
    }

    /// `f^(l)` for `2 ≤ l ≤ L`.
    pub fn layer<T: Real>(&self, s: &mut Session<'_, T>, l: usize, h: NodeId) -> Result<NodeId> {
        let layers = self.layers();
        if l < 2 || l > layers {
            return Err(CflError::LayerIndex { index: l, layers });
        }
        match self {
            Backbone::Mlp(m) => {
                let pre = m.layers[l - 1].forward(s, h)?;
                s.graph.activation(m.spec.activation, pre)
            }
            Backbone::Transformer(t) => t.block(s, l - 1, h),
        }
    }

    /// `f^(L+1)`: last hidden state to output logits.
    pub fn head<T: Real>(&self, s: &mut Session<'_, T>, h: NodeId) -> Result<NodeId> {
        match self {
            Backbone::Mlp(m) => m.head.forward(s, h),
            Backbone::Transformer(t) => {
                let pooled = s.graph.mean_rows(h)?;
                t.head.forward(s, pooled)
            }
        }
    }

    /// Plain forward pass: all `L` hidden states and `y^(0)`.
    pub fn forward_full<T: Real>(&self, s: &mut Session<'_, T>, x: Input<'_>) -> Result<(Vec<NodeId>, NodeId)> {
        let mut hiddens = Vec::with_capacity(self.layers());
        let mut h = self.first_layer(s, x)?;
        hiddens.push(h);
        for l in 2..=self.layers() {
            h = self.layer(s, l, h)?;
            hiddens.push(h);
        }
        let y = self.head(s, h)?;
        Ok((hiddens, y))
    }

    /// Recomputes hidden states `l+1..=L` and the output from a supplied
    /// `h^(l)`.
    pub fn forward_from<T: Real>(&self, s: &mut Session<'_, T>, l: usize, h: NodeId) -> Result<(Vec<NodeId>, NodeId)> {
        let layers = self.layers();
        if l < 1 || l > layers {
            return Err(CflError::LayerIndex { index: l, layers });
        }
        let width = s.graph.value(h).dims2()?.1;
        if width != self.dims().d_h {
            return Err(CflError::Shape(format!("hidden width {width}, expected {}", self.dims().d_h)));
        }
        let mut out = Vec::with_capacity(layers - l);
        let mut cur = h;
        for k in l + 1..=layers {
            cur = self.layer(s, k, cur)?;
            out.push(cur);
        }
        let y = self.head(s, cur)?;
        Ok((out, y))
    }
}

impl Transformer {
    fn attention<T: Real>(&self, s: &mut Session<'_, T>, block: usize, a: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let b = &self.blocks[block];
        let d_k = self.spec.d_h / self.spec.heads;
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut outs: Option<NodeId> = None;
        let mut maps = Vec::with_capacity(b.heads.len());
        for head in &b.heads {
            let wq = s.param(head.query)?;
            let wk = s.param(head.key)?;
            let wv = s.param(head.value)?;
            let q = s.graph.matmul(a, wq)?;
            let k = s.graph.matmul(a, wk)?;
            let v = s.graph.matmul(a, wv)?;
            let kt = s.graph.transpose(k)?;
            let scores = s.graph.matmul(q, kt)?;
            let scores = s.graph.scale(scores, scale)?;
            let p = s.graph.softmax_rows(scores)?;
            maps.push(p);
            let o = s.graph.matmul(p, v)?;
            outs = Some(match outs {
                None => o,
                Some(prev) => s.graph.concat(prev, o, 1)?,
            });
        }
        Ok((outs.expect("at least one head"), maps))
    }

    fn block<T: Real>(&self, s: &mut Session<'_, T>, index: usize, h: NodeId) -> Result<NodeId> {
        let b = &self.blocks[index];
        let a = b.ln1.forward(s, h)?;
        let (attn, _) = self.attention(s, index, a)?;
        let proj = b.out.forward(s, attn)?;
        let h = s.graph.add(h, proj)?;
        let a2 = b.ln2.forward(s, h)?;
        let up = b.up.forward(s, a2)?;
        let up = s.graph.gelu(up)?;
        let down = b.down.forward(s, up)?;
        s.graph.add(h, down)
    }

    /// Attention probability maps of block `l` (1-based) given its input.
    pub fn attention_maps<T: Real>(&self, s: &mut Session<'_, T>, l: usize, h: NodeId) -> Result<Vec<NodeId>> {
        if l < 1 || l > self.blocks.len() {
            return Err(CflError::LayerIndex {
                index: l,
                layers: self.blocks.len(),
            });
        }
        let a = self.blocks[l - 1].ln1.forward(s, h)?;
        Ok(self.attention(s, l - 1, a)?.1)
    }
}
