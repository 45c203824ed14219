//! Iterative Salience Decoder.
//!
//! Subject and object salience queries pass through `L` layers of
//! geometry-enhanced self-attention (G-ESA), predicate-enhanced
//! cross-attention (P-ECA) and a feed-forward block. After each layer the
//! salience matrix is refined in logit space from the query dot products.
//!
//! Every reduction over the entity axis (attention softmax and the weighted
//! value sum) is correctly rounded, so the decoder is exactly equivariant
//! under entity permutations.

use rand::Rng;
use thiserror::Error;

use crate::scene::DetectedEntities;
use crate::tensor::{inverse_sigmoid, BoundParams, ParamStore, Result, Tape, Var, INVERSE_SIGMOID_EPS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsdConfigError {
    #[error("model dimension {d} is not divisible by {heads} heads")]
    Heads { d: usize, heads: usize },
    #[error("the decoder needs at least one layer")]
    NoLayers,
}

/// Salience probability the decoder starts from.
pub const SALIENCE_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IsdConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub bias_hidden: usize,
    pub num_classes: usize,
    pub num_predicates: usize,
    pub gesa: bool,
    pub peca: bool,
    pub iterative: bool,
}

impl IsdConfig {
    pub fn new(d: usize, num_classes: usize, num_predicates: usize) -> Self {
        Self {
            d,
            heads: 2,
            layers: 4,
            bias_hidden: 16,
            num_classes,
            num_predicates,
            gesa: true,
            peca: true,
            iterative: true,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), IsdConfigError> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(IsdConfigError::Heads {
                d: self.d,
                heads: self.heads,
            });
        }
        if self.layers == 0 {
            return Err(IsdConfigError::NoLayers);
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Sub,
    Obj,
}

impl Branch {
    fn name(self) -> &'static str {
        match self {
            Branch::Sub => "sub",
            Branch::Obj => "obj",
        }
    }
}

/// Salience queries `(Q_sub, Q_obj)`, each `[N, d]`.
#[derive(Debug, Clone, Copy)]
pub struct SalienceQueries<'t> {
    pub sub: Var<'t>,
    pub obj: Var<'t>,
}

/// Salience matrices `M_1 ..= M_L`; the last one is the prediction.
#[derive(Debug, Clone)]
pub struct IsdOutput<'t> {
    pub per_layer: Vec<Var<'t>>,
    /// Pre-sigmoid logits of each `M_l`.
    pub logits: Vec<Var<'t>>,
}

impl<'t> IsdOutput<'t> {
    pub fn final_m(&self) -> Var<'t> {
        *self.per_layer.last().expect("at least one layer")
    }
}

/// `M_{l+1} = sigmoid(inverse_sigmoid(M_l) + Q_sub · Q_objᵀ / √d)`.
pub fn refine<'t>(m: Var<'t>, q_sub: Var<'t>, q_obj: Var<'t>) -> Result<Var<'t>> {
    refine_logits(m, q_sub, q_obj)?.sigmoid()
}

/// The logits of [`refine`].
pub fn refine_logits<'t>(m: Var<'t>, q_sub: Var<'t>, q_obj: Var<'t>) -> Result<Var<'t>> {
    let fused = fused_scores(q_sub, q_obj)?;
    m.inverse_sigmoid(INVERSE_SIGMOID_EPS)?.add(fused)
}

pub fn fused_scores<'t>(q_sub: Var<'t>, q_obj: Var<'t>) -> Result<Var<'t>> {
    let d = q_sub.shape()[1] as f64;
    q_sub.matmul(q_obj.transpose()?)?.scale(1.0 / d.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Isd {
    pub cfg: IsdConfig,
}

impl Isd {
    pub fn new(cfg: IsdConfig) -> std::result::Result<Self, IsdConfigError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn prefix(layer: usize, branch: Branch) -> String {
        format!("isd.{layer}.{}", branch.name())
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let c = &self.cfg;
        let linear = |store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut _| -> Result<()> {
            store.insert_xavier(&format!("{name}.w"), i, o, rng)?;
            store.insert_zeros(&format!("{name}.b"), &[o])
        };
        // Residual branches start at zero, so every layer begins as the
        // identity and the queries keep their scale through the stack.
        let zero_linear = |store: &mut ParamStore, name: &str, i: usize, o: usize| -> Result<()> {
            store.insert_zeros(&format!("{name}.w"), &[i, o])?;
            store.insert_zeros(&format!("{name}.b"), &[o])
        };
        linear(store, "isd.init.class", c.num_classes, c.d, rng)?;
        linear(store, "isd.init.sub", c.d, c.d, rng)?;
        linear(store, "isd.init.obj", c.d, c.d, rng)?;
        let (sub_bias, obj_bias) = self.prior_biases();
        for (name, v) in [("isd.init.sub.b", sub_bias), ("isd.init.obj.b", obj_bias)] {
            store.get_mut(name).expect("just inserted").data_mut().fill(v);
        }
        for l in 0..c.layers {
            for b in [Branch::Sub, Branch::Obj] {
                let pre = Self::prefix(l, b);
                for att in ["sa", "ca"] {
                    for proj in ["q", "k", "v"] {
                        linear(store, &format!("{pre}.{att}.{proj}"), c.d, c.d, rng)?;
                    }
                    zero_linear(store, &format!("{pre}.{att}.o"), c.d, c.d)?;
                }
                if c.gesa {
                    linear(store, &format!("{pre}.geo.1"), 1, c.bias_hidden, rng)?;
                    linear(store, &format!("{pre}.geo.2"), c.bias_hidden, c.heads, rng)?;
                }
                if c.peca {
                    linear(store, &format!("{pre}.pb.1"), c.num_predicates, c.bias_hidden, rng)?;
                    linear(store, &format!("{pre}.pb.2"), c.bias_hidden, c.heads, rng)?;
                }
                linear(store, &format!("{pre}.ffn.1"), c.d, 2 * c.d, rng)?;
                zero_linear(store, &format!("{pre}.ffn.2"), 2 * c.d, c.d)?;
            }
        }
        Ok(())
    }

    /// Constant query biases `(c_s, c_o)` that start the final salience near
    /// [`SALIENCE_PRIOR`]: each layer's fused score is then about
    /// `c_s · c_o · √d`, and only the iterative mode has to climb out of the
    /// clamped logit of `M_0 = 0`.
    pub fn prior_biases(&self) -> (f64, f64) {
        let c = &self.cfg;
        let target = inverse_sigmoid(SALIENCE_PRIOR, INVERSE_SIGMOID_EPS);
        let per_layer = if c.iterative {
            (target - inverse_sigmoid(0.0, INVERSE_SIGMOID_EPS)) / c.layers as f64
        } else {
            target
        };
        let mag = (per_layer.abs() / (c.d as f64).sqrt()).sqrt();
        (mag, mag * per_layer.signum())
    }

    fn apply<'t>(p: &BoundParams<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p.get(&format!("{name}.w")), Some(p.get(&format!("{name}.b"))))
    }

    /// `Q_ent = Q + proj(C)`, then separate subject and object projections.
    pub fn init_queries<'t>(&self, p: &BoundParams<'t>, tape: &'t Tape, det: &DetectedEntities) -> Result<SalienceQueries<'t>> {
        let n = det.len();
        let q = tape.constant([n, det.feature_dim()], det.features.concat())?;
        let c = tape.constant([n, det.num_classes()], det.class_probs.concat())?;
        let q_ent = q.add(Self::apply(p, "isd.init.class", c)?)?;
        Ok(SalienceQueries {
            sub: Self::apply(p, "isd.init.sub", q_ent)?,
            obj: Self::apply(p, "isd.init.obj", q_ent)?,
        })
    }

    /// Two-layer bias MLP with a final relu, `[N, N, in] -> [N, N, H]`.
    fn bias_mlp<'t>(p: &BoundParams<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let h = Self::apply(p, &format!("{name}.1"), x)?.relu()?;
        Self::apply(p, &format!("{name}.2"), h)?.relu()
    }

    /// Multi-head attention from `queries` to `keys` with an optional
    /// head-wise additive logit bias `[N, N, H]`, plus the residual.
    fn attention<'t>(&self, p: &BoundParams<'t>, name: &str, queries: Var<'t>, keys: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (heads, dh) = (self.cfg.heads, self.cfg.head_dim());
        let n = queries.shape()[0];
        let q = Self::apply(p, &format!("{name}.q"), queries)?;
        let k = Self::apply(p, &format!("{name}.k"), keys)?;
        let v = Self::apply(p, &format!("{name}.v"), keys)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.narrow(1, h * dh, dh)?;
            let kh = k.narrow(1, h * dh, dh)?;
            let vh = v.narrow(1, h * dh, dh)?;
            let mut logits = qh.matmul(kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt())?;
            if let Some(b) = bias {
                logits = b.narrow(2, h, 1)?.reshape([n, n])?.add(logits)?;
            }
            outs.push(logits.softmax(1)?.matmul_exact(vh)?);
        }
        let merged = Var::concat(&outs, 1)?;
        queries.add(Self::apply(p, &format!("{name}.o"), merged)?)
    }

    /// Self-attention with logit bias `relu(MLP(U))` from the pairwise IoU `U`.
    pub fn gesa<'t>(&self, p: &BoundParams<'t>, layer: usize, branch: Branch, x: Var<'t>, iou: Var<'t>) -> Result<Var<'t>> {
        let pre = Self::prefix(layer, branch);
        let bias = if self.cfg.gesa {
            let n = x.shape()[0];
            Some(Self::bias_mlp(p, &format!("{pre}.geo"), iou.reshape([n, n, 1])?)?)
        } else {
            None
        };
        self.attention(p, &format!("{pre}.sa"), x, x, bias)
    }

    /// Cross-attention from `from` to `to` with logit bias `relu(MLP(G))`.
    /// The object branch expects `G` already transposed.
    pub fn peca<'t>(&self, p: &BoundParams<'t>, layer: usize, branch: Branch, from: Var<'t>, to: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
        let pre = Self::prefix(layer, branch);
        let bias = if self.cfg.peca {
            Some(Self::bias_mlp(p, &format!("{pre}.pb"), g)?)
        } else {
            None
        };
        self.attention(p, &format!("{pre}.ca"), from, to, bias)
    }

    pub fn ffn<'t>(&self, p: &BoundParams<'t>, layer: usize, branch: Branch, x: Var<'t>) -> Result<Var<'t>> {
        let pre = Self::prefix(layer, branch);
        let h = Self::apply(p, &format!("{pre}.ffn.1"), x)?.relu()?;
        x.add(Self::apply(p, &format!("{pre}.ffn.2"), h)?)
    }

    /// One decoder layer on both branches.
    pub fn layer<'t>(
        &self,
        p: &BoundParams<'t>,
        l: usize,
        q: SalienceQueries<'t>,
        iou: Var<'t>,
        g: Var<'t>,
        g_t: Var<'t>,
    ) -> Result<SalienceQueries<'t>> {
        let sub = self.gesa(p, l, Branch::Sub, q.sub, iou)?;
        let obj = self.gesa(p, l, Branch::Obj, q.obj, iou)?;
        let sub2 = self.peca(p, l, Branch::Sub, sub, obj, g)?;
        let obj2 = self.peca(p, l, Branch::Obj, obj, sub, g_t)?;
        Ok(SalienceQueries {
            sub: self.ffn(p, l, Branch::Sub, sub2)?,
            obj: self.ffn(p, l, Branch::Obj, obj2)?,
        })
    }

    /// Runs all layers. `iou` is the `[N, N]` detected-box IoU matrix and
    /// `g` the `[N, N, N_p]` predicate logits.
    pub fn forward<'t>(
        &self,
        p: &BoundParams<'t>,
        tape: &'t Tape,
        det: &DetectedEntities,
        iou: Var<'t>,
        g: Var<'t>,
    ) -> Result<IsdOutput<'t>> {
        let n = det.len();
        let g_t = g.permute(&[1, 0, 2])?;
        let mut q = self.init_queries(p, tape, det)?;
        let mut m = tape.zeros([n, n]);
        let mut per_layer = Vec::with_capacity(self.cfg.layers);
        let mut logits = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            q = self.layer(p, l, q, iou, g, g_t)?;
            let z = if self.cfg.iterative {
                refine_logits(m, q.sub, q.obj)?
            } else {
                fused_scores(q.sub, q.obj)?
            };
            m = z.sigmoid()?;
            per_layer.push(m);
            logits.push(z);
        }
        Ok(IsdOutput { per_layer, logits })
    }
}
