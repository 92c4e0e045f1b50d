use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{EvalGraph, Gradients, Graph, ParamId, ParamStore, Tape};
use crate::error::{param_err, Error, Result};
use crate::memmamba::blocks::{g_attend, g_fuse, g_score, FuseVars};
use crate::memmamba::pool::{InsertOutcome, Scored, StatePool};
use crate::memmamba::{FusionMethod, ModelConfig, Pooling};
use crate::seed;
use crate::ssm::{make_stable_a, SsmParams};
use crate::tensor::Tensor;

/// Decay rates at initialization span this range across state channels.
const INIT_DECAY_RANGE: (f64, f64) = (0.5, 0.99);

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Clone, Debug)]
enum FuseIds {
    Weighted { tok: ParamId, lay: ParamId },
    Residual,
    Gated { w: ParamId, b: ParamId },
    Conv1d { tok: ParamId, lay: ParamId },
    Elementwise,
}

#[derive(Clone, Debug)]
struct LayerIds {
    a_raw: ParamId,
    b: ParamId,
    c: ParamId,
    note_w: ParamId,
    note_b: ParamId,
    state_w: ParamId,
    state_b: ParamId,
    proj: ParamId,
    tok: AttnIds,
    lay: Option<AttnIds>,
    fuse: FuseIds,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    out: ParamId,
    layers: Vec<LayerIds>,
}

/// Every parameter name with its shape, in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, ds, dsum, da, v) = (cfg.d_model, cfg.d_state, cfg.d_sum, cfg.d_attn, cfg.vocab);
    let mut out = vec![("embed".to_string(), vec![v, d])];
    for l in 1..=cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.push((p("ssm.a_raw"), vec![ds]));
        out.push((p("ssm.b"), vec![ds, d]));
        out.push((p("ssm.c"), vec![d, ds]));
        out.push((p("note.w"), vec![d]));
        out.push((p("note.b"), vec![1]));
        out.push((p("state.w"), vec![d]));
        out.push((p("state.b"), vec![1]));
        out.push((p("note.proj"), vec![dsum, d]));
        out.push((p("tok.wq"), vec![da, d]));
        out.push((p("tok.wk"), vec![da, dsum]));
        out.push((p("tok.wv"), vec![d, dsum]));
        if cfg.has_layer_attention(l) {
            out.push((p("lay.wq"), vec![da, d]));
            out.push((p("lay.wk"), vec![da, dsum]));
            out.push((p("lay.wv"), vec![d, dsum]));
        }
        match cfg.fusion {
            FusionMethod::Weighted => {
                out.push((p("fuse.alpha_tok"), vec![1]));
                out.push((p("fuse.alpha_lay"), vec![1]));
            }
            FusionMethod::Gated => {
                out.push((p("fuse.gate_w"), vec![d, d]));
                out.push((p("fuse.gate_b"), vec![d]));
            }
            FusionMethod::Conv1d => {
                out.push((p("fuse.k_tok"), vec![d]));
                out.push((p("fuse.k_lay"), vec![d]));
            }
            FusionMethod::Residual | FusionMethod::Elementwise => {}
        }
    }
    out.push(("out".to_string(), vec![v, d]));
    out
}

impl Layout {
    fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let expected = param_shapes(cfg);
        if expected.len() != store.len() {
            return Err(param_err(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, shape) in &expected {
            let t = store
                .by_name(name)
                .ok_or_else(|| param_err(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(param_err(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let id = |n: String| store.id(&n).expect("checked above");
        let layers = (1..=cfg.layers)
            .map(|l| {
                let p = |s: &str| id(format!("layer{l}.{s}"));
                let attn = |pre: &str| AttnIds {
                    wq: p(&format!("{pre}.wq")),
                    wk: p(&format!("{pre}.wk")),
                    wv: p(&format!("{pre}.wv")),
                };
                LayerIds {
                    a_raw: p("ssm.a_raw"),
                    b: p("ssm.b"),
                    c: p("ssm.c"),
                    note_w: p("note.w"),
                    note_b: p("note.b"),
                    state_w: p("state.w"),
                    state_b: p("state.b"),
                    proj: p("note.proj"),
                    tok: attn("tok"),
                    lay: cfg.has_layer_attention(l).then(|| attn("lay")),
                    fuse: match cfg.fusion {
                        FusionMethod::Weighted => FuseIds::Weighted {
                            tok: p("fuse.alpha_tok"),
                            lay: p("fuse.alpha_lay"),
                        },
                        FusionMethod::Gated => FuseIds::Gated {
                            w: p("fuse.gate_w"),
                            b: p("fuse.gate_b"),
                        },
                        FusionMethod::Conv1d => FuseIds::Conv1d {
                            tok: p("fuse.k_tok"),
                            lay: p("fuse.k_lay"),
                        },
                        FusionMethod::Residual => FuseIds::Residual,
                        FusionMethod::Elementwise => FuseIds::Elementwise,
                    },
                }
            })
            .collect();
        Ok(Layout {
            embed: id("embed".into()),
            out: id("out".into()),
            layers,
        })
    }
}

/// Raw decay parameters spreading `exp(−softplus(raw))` log-uniformly over
/// [`INIT_DECAY_RANGE`].
fn init_a_raw(ds: usize) -> Vec<f64> {
    let (lo, hi) = INIT_DECAY_RANGE;
    let (s_min, s_max) = (-(hi.ln()), -(lo.ln()));
    (0..ds)
        .map(|i| {
            let frac = if ds == 1 { 0.0 } else { i as f64 / (ds - 1) as f64 };
            let s = (s_min.ln() + frac * (s_max.ln() - s_min.ln())).exp();
            s.exp_m1().ln()
        })
        .collect()
}

fn init_tensor(root: u64, name: &str, shape: &[usize], cfg: &ModelConfig) -> Tensor {
    let mut rng = seed::rng(root, name);
    let mut uniform = |shape: &[usize], std: f64| {
        let half = std * 3f64.sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-half..half)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape from layout")
    };
    let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
    let field = name.split_once('.').map_or(name, |(_, f)| f);
    match field {
        "embed" => uniform(shape, 1.0),
        "out" => uniform(shape, inv_sqrt(cfg.d_model)),
        "ssm.a_raw" => Tensor::vector(init_a_raw(cfg.d_state)),
        "ssm.b" => {
            // Row i is scaled by sqrt(1 − a_i²) so each state channel has
            // roughly unit stationary variance.
            let mut b = uniform(shape, inv_sqrt(cfg.d_model));
            let a = make_stable_a(&Tensor::vector(init_a_raw(cfg.d_state)));
            for (i, &ai) in a.data().iter().enumerate() {
                let s = (1.0 - ai * ai).sqrt();
                b.row_mut(i).iter_mut().for_each(|v| *v *= s);
            }
            b
        }
        "ssm.c" => uniform(shape, inv_sqrt(cfg.d_state)),
        "note.b" | "state.b" | "fuse.gate_w" | "fuse.gate_b" => Tensor::zeros(shape),
        "note.w" | "state.w" | "note.proj" | "tok.wq" | "lay.wq" => uniform(shape, inv_sqrt(cfg.d_model)),
        "tok.wk" | "tok.wv" | "lay.wk" | "lay.wv" => uniform(shape, inv_sqrt(cfg.d_sum)),
        "fuse.alpha_tok" | "fuse.alpha_lay" | "fuse.k_tok" | "fuse.k_lay" => Tensor::filled(shape, cfg.alpha),
        other => unreachable!("no initializer for `{other}`"),
    }
}

/// One insert/attend decision of one layer at one step, plus what the pool
/// did with the insertion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub insert: bool,
    pub outcome: Option<InsertOutcome>,
    pub attend: bool,
}

/// Gate decisions of a whole forward pass, step-major.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub layers: usize,
    pub decisions: Vec<GateDecision>,
}

impl GateRecord {
    pub fn get(&self, t: usize, layer: usize) -> &GateDecision {
        &self.decisions[t * self.layers + (layer - 1)]
    }
}

/// Per-layer, per-step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub layer: usize,
    pub token_score: f64,
    pub state_score: f64,
    pub inserted: bool,
    pub pool_len: usize,
    pub token_attention: bool,
    pub layer_attention: bool,
    pub c_token_norm: f64,
    pub c_layer_norm: f64,
    pub token_weight_sum: Option<f64>,
    pub layer_weight_sum: Option<f64>,
}

/// Hidden states (`L × n × d`, the output of each layer at each step) and
/// step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub tokens: Vec<usize>,
    pub hidden: Tensor,
    pub steps: Vec<StepRecord>,
}

impl LayerTrace {
    pub fn layers(&self) -> usize {
        self.hidden.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.hidden.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.hidden.shape()[2]
    }

    /// Output of layer `l` (1-based) at step `t`.
    pub fn h(&self, l: usize, t: usize) -> &[f64] {
        let (n, d) = (self.seq_len(), self.width());
        let start = ((l - 1) * n + t) * d;
        &self.hidden.data()[start..start + d]
    }

    /// All steps of layer `l` as an `n × d` matrix.
    pub fn layer(&self, l: usize) -> Tensor {
        let (n, d) = (self.seq_len(), self.width());
        let start = (l - 1) * n * d;
        Tensor::matrix(n, d, self.hidden.data()[start..start + n * d].to_vec()).expect("layer slice")
    }

    pub fn step(&self, t: usize, layer: usize) -> &StepRecord {
        &self.steps[t * self.layers() + (layer - 1)]
    }
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub trace: LayerTrace,
    pub record: GateRecord,
}

struct LayerVars<V> {
    a: V,
    b: V,
    c: V,
    note_w: V,
    note_b: V,
    state_w: V,
    state_b: V,
    proj: V,
    tok: (V, V, V),
    lay: Option<(V, V, V)>,
    fuse: FuseVars<V>,
}

struct PoolItem<V> {
    score: f64,
    k_tok: V,
    v_tok: V,
    /// Keys and values prepared for each downstream layer that reads this
    /// pool through cross-layer attention.
    cross: Vec<(usize, V, V)>,
}

impl<V> Scored for PoolItem<V> {
    fn score(&self) -> f64 {
        self.score
    }
}

struct LayerRun<V> {
    h: V,
    y_prev: V,
    window: VecDeque<V>,
    pool: StatePool<PoolItem<V>>,
}

/// Recurrent state of the whole stack, advanced one token at a time.
struct Runner<'m, V> {
    cfg: &'m ModelConfig,
    embed: V,
    out: V,
    vars: Vec<LayerVars<V>>,
    runs: Vec<LayerRun<V>>,
    t: usize,
    record: GateRecord,
    steps: Vec<StepRecord>,
    hidden: Vec<Vec<f64>>,
}

impl<'m, V: Clone> Runner<'m, V> {
    fn new<G: Graph<Var = V>>(g: &mut G, model: &'m MemMamba) -> Self {
        let cfg = &model.config;
        let lay = &model.layout;
        let vars = lay
            .layers
            .iter()
            .map(|ids| {
                let a_raw = g.param(ids.a_raw);
                let attn = |g: &mut G, a: &AttnIds| (g.param(a.wq), g.param(a.wk), g.param(a.wv));
                LayerVars {
                    a: g.decay(&a_raw),
                    b: g.param(ids.b),
                    c: g.param(ids.c),
                    note_w: g.param(ids.note_w),
                    note_b: g.param(ids.note_b),
                    state_w: g.param(ids.state_w),
                    state_b: g.param(ids.state_b),
                    proj: g.param(ids.proj),
                    tok: attn(g, &ids.tok),
                    lay: ids.lay.as_ref().map(|a| attn(g, a)),
                    fuse: match &ids.fuse {
                        FuseIds::Weighted { tok, lay } => FuseVars::Weighted {
                            tok: g.param(*tok),
                            lay: g.param(*lay),
                        },
                        FuseIds::Residual => FuseVars::Residual,
                        FuseIds::Gated { w, b } => FuseVars::Gated {
                            w: g.param(*w),
                            b: g.param(*b),
                        },
                        FuseIds::Conv1d { tok, lay } => FuseVars::Conv1d {
                            tok: g.param(*tok),
                            lay: g.param(*lay),
                        },
                        FuseIds::Elementwise => FuseVars::Elementwise,
                    },
                }
            })
            .collect();
        let runs = (0..cfg.layers)
            .map(|_| LayerRun {
                h: g.input(Tensor::zeros(&[cfg.d_state])),
                y_prev: g.input(Tensor::zeros(&[cfg.d_model])),
                window: VecDeque::with_capacity(cfg.window),
                pool: StatePool::new(cfg.pool_capacity, cfg.pool_policy),
            })
            .collect();
        Runner {
            cfg,
            embed: g.param(lay.embed),
            out: g.param(lay.out),
            vars,
            runs,
            t: 0,
            record: GateRecord {
                layers: cfg.layers,
                decisions: Vec::new(),
            },
            steps: Vec::new(),
            hidden: vec![Vec::new(); cfg.layers],
        }
    }

    /// Advances every layer by one token and returns the top layer output.
    fn step<G: Graph<Var = V>>(&mut self, g: &mut G, token: usize, replay: Option<&GateRecord>) -> Result<V> {
        if token >= self.cfg.vocab {
            return Err(Error::Input(format!(
                "token {token} outside vocabulary of {}",
                self.cfg.vocab
            )));
        }
        let mut x = g.row(&self.embed, token);
        for l in 1..=self.cfg.layers {
            let forced = match replay {
                Some(r) => Some(*r.decisions.get(self.t * r.layers + (l - 1)).ok_or_else(|| {
                    Error::Input(format!("gate record has no decision for step {} layer {l}", self.t))
                })?),
                None => None,
            };
            x = self.layer_forward(g, l, x, forced)?;
            self.hidden[l - 1].extend_from_slice(g.value(&x).data());
        }
        self.t += 1;
        Ok(x)
    }

    /// One MemMamba block: note taking, cross-token and cross-layer
    /// attention over the pools as they stood before this step's insertion,
    /// fusion, then the SSM update.
    fn layer_forward<G: Graph<Var = V>>(
        &mut self,
        g: &mut G,
        l: usize,
        x: V,
        forced: Option<GateDecision>,
    ) -> Result<V> {
        let cfg = self.cfg;
        let li = l - 1;
        let lv = &self.vars[li];

        {
            let w = &mut self.runs[li].window;
            if w.len() == cfg.window {
                w.pop_front();
            }
            w.push_back(x.clone());
        }

        let tok_score_v = g_score(g, &lv.note_w, &lv.note_b, &x);
        let tok_score = g.value(&tok_score_v).data()[0];
        let state_score_v = g_score(g, &lv.state_w, &lv.state_b, &self.runs[li].y_prev);
        let state_score = g.value(&state_score_v).data()[0];
        let (insert, attend) = match forced {
            Some(f) => (f.insert, f.attend),
            None => (tok_score > cfg.tau1, state_score > cfg.tau2),
        };

        let mut c_tok = None;
        let mut token_weight_sum = None;
        let pool = &self.runs[li].pool;
        if attend && !pool.is_empty() {
            let keys: Vec<V> = pool.entries().iter().map(|e| e.k_tok.clone()).collect();
            let values: Vec<V> = pool.entries().iter().map(|e| e.v_tok.clone()).collect();
            let (att, w) = g_attend(g, &x, &lv.tok.0, &keys, &values);
            token_weight_sum = Some(w.iter().sum());
            c_tok = Some(g.scale(&att, &state_score_v));
        }

        let mut c_lay = None;
        let mut layer_weight_sum = None;
        if let Some((wq, _, _)) = &lv.lay {
            let mut keys = Vec::new();
            let mut values = Vec::new();
            for src in cfg.lookback_layers(l) {
                for e in self.runs[src - 1].pool.entries() {
                    for (consumer, k, v) in &e.cross {
                        if *consumer == l {
                            keys.push(k.clone());
                            values.push(v.clone());
                        }
                    }
                }
            }
            if !keys.is_empty() {
                let (att, w) = g_attend(g, &x, wq, &keys, &values);
                layer_weight_sum = Some(w.iter().sum());
                c_lay = Some(att);
            }
        }

        let mut outcome = None;
        if insert {
            let window: Vec<V> = self.runs[li].window.iter().cloned().collect();
            let pooled = if window.len() == 1 {
                x.clone()
            } else {
                match cfg.pooling {
                    Pooling::Max => g.max_pool(&window),
                    Pooling::Mean => g.mean_pool(&window),
                }
            };
            let raw = g.matvec(&lv.proj, &pooled);
            let s = g.scale(&raw, &tok_score_v);
            let k_tok = g.matvec(&lv.tok.1, &s);
            let v_tok = g.matvec(&lv.tok.2, &s);
            let mut cross = Vec::new();
            for consumer in (l + 1)..=cfg.layers {
                if let Some((_, wk, wv)) = &self.vars[consumer - 1].lay {
                    if cfg.lookback_layers(consumer).contains(&l) {
                        cross.push((consumer, g.matvec(wk, &s), g.matvec(wv, &s)));
                    }
                }
            }
            let item = PoolItem {
                score: tok_score,
                k_tok,
                v_tok,
                cross,
            };
            let pool = &mut self.runs[li].pool;
            let oc = match forced.and_then(|f| f.outcome) {
                Some(oc) => oc,
                None => pool.plan(tok_score),
            };
            pool.apply(item, oc);
            outcome = Some(oc);
        }

        let lv = &self.vars[li];
        let xbar = g_fuse(g, &lv.fuse, &x, c_tok.as_ref(), c_lay.as_ref());
        let bx = g.matvec(&lv.b, &xbar);
        let ah = g.mul(&lv.a, &self.runs[li].h);
        let h = g.add(&ah, &bx);
        let y = g.matvec(&lv.c, &h);

        let norm = |g: &G, v: &Option<V>| v.as_ref().map_or(0.0, |v| g.value(v).norm());
        self.steps.push(StepRecord {
            t: self.t,
            layer: l,
            token_score: tok_score,
            state_score,
            inserted: matches!(outcome, Some(InsertOutcome::Appended | InsertOutcome::Evicted(_))),
            pool_len: self.runs[li].pool.len(),
            token_attention: c_tok.is_some(),
            layer_attention: c_lay.is_some(),
            c_token_norm: norm(g, &c_tok),
            c_layer_norm: norm(g, &c_lay),
            token_weight_sum,
            layer_weight_sum,
        });
        self.record.decisions.push(GateDecision { insert, outcome, attend });

        let run = &mut self.runs[li];
        run.h = h;
        run.y_prev = y.clone();
        Ok(y)
    }

    fn logits<G: Graph<Var = V>>(&self, g: &mut G, y: &V) -> V {
        g.matvec(&self.out, y)
    }

    /// Floats held by the recurrent state: SSM states, previous outputs,
    /// note windows and pooled keys and values.
    fn state_floats<G: Graph<Var = V>>(&self, g: &G) -> usize {
        let len = |v: &V| g.value(v).len();
        self.runs
            .iter()
            .map(|r| {
                let pool: usize = r
                    .pool
                    .entries()
                    .iter()
                    .map(|e| len(&e.k_tok) + len(&e.v_tok) + e.cross.iter().map(|(_, k, v)| len(k) + len(v)).sum::<usize>())
                    .sum();
                len(&r.h) + len(&r.y_prev) + r.window.iter().map(len).sum::<usize>() + pool
            })
            .sum()
    }

    fn into_trace(self, tokens: &[usize]) -> (LayerTrace, GateRecord) {
        let (n, d) = (tokens.len(), self.cfg.d_model);
        let data: Vec<f64> = self.hidden.into_iter().flatten().collect();
        let hidden = Tensor::new(vec![self.cfg.layers, n, d], data).expect("trace shape");
        (
            LayerTrace {
                tokens: tokens.to_vec(),
                hidden,
                steps: self.steps,
            },
            self.record,
        )
    }
}

/// Which outputs a pass produces.
enum Readout<'a> {
    Logits(&'a [usize]),
    Loss(&'a [(usize, usize)]),
}

struct Pass<V> {
    logits: Vec<V>,
    loss: Option<V>,
    trace: LayerTrace,
    record: GateRecord,
}

/// A stacked MemMamba language model.
#[derive(Clone, Debug)]
pub struct MemMamba {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl MemMamba {
    /// Fresh model. Every tensor is drawn from its own stream derived from
    /// the config seed and the tensor name, so a config and its ablation
    /// share all common weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let root = seed::derive(config.seed, "init");
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&config) {
            let t = init_tensor(root, &name, &shape, &config);
            params.insert(name, t);
        }
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameter data; names and shapes stay fixed.
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        self.params.tensors_mut()
    }

    pub fn embedding(&self) -> &Tensor {
        self.params.get(self.layout.embed)
    }

    pub fn w_out(&self) -> &Tensor {
        self.params.get(self.layout.out)
    }

    /// The SSM of layer `l` (1-based) with decays already mapped into (0, 1).
    pub fn layer_ssm(&self, l: usize) -> Result<SsmParams> {
        let ids = self
            .layout
            .layers
            .get(l.wrapping_sub(1))
            .ok_or_else(|| param_err(format!("no layer {l}")))?;
        SsmParams::new(
            make_stable_a(self.params.get(ids.a_raw)),
            self.params.get(ids.b).clone(),
            self.params.get(ids.c).clone(),
        )
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Input(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    fn pass<G: Graph>(&self, g: &mut G, tokens: &[usize], readout: Readout<'_>, replay: Option<&GateRecord>) -> Result<Pass<G::Var>> {
        self.check_tokens(tokens)?;
        if let Some(r) = replay {
            if r.layers != self.config.layers || r.decisions.len() != tokens.len() * r.layers {
                return Err(Error::Input("gate record does not match this model and sequence".into()));
            }
        }
        let (positions, targets): (Vec<usize>, Vec<usize>) = match readout {
            Readout::Logits(p) => (p.to_vec(), Vec::new()),
            Readout::Loss(t) => t.iter().copied().unzip(),
        };
        if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
            return Err(Error::Input(format!("readout position {p} beyond sequence end")));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Input(format!("target {t} outside vocabulary")));
        }
        let mut want = vec![Vec::new(); tokens.len()];
        for (i, &p) in positions.iter().enumerate() {
            want[p].push(i);
        }
        let mut runner = Runner::new(g, self);
        let mut logits: Vec<Option<G::Var>> = vec![None; positions.len()];
        for (t, &tok) in tokens.iter().enumerate() {
            let y = runner.step(g, tok, replay)?;
            if !want[t].is_empty() {
                let lg = runner.logits(g, &y);
                for &i in &want[t] {
                    logits[i] = Some(lg.clone());
                }
            }
        }
        let logits: Vec<G::Var> = logits.into_iter().map(|v| v.expect("every position visited")).collect();
        let loss = if targets.is_empty() {
            None
        } else {
            let ces: Vec<G::Var> = logits.iter().zip(&targets).map(|(lg, &t)| g.cross_entropy(lg, t)).collect();
            Some(g.mean(&ces))
        };
        let (trace, record) = runner.into_trace(tokens);
        Ok(Pass {
            logits,
            loss,
            trace,
            record,
        })
    }

    /// Logits for every position (`n × vocab`) and the layer trace.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, LayerTrace)> {
        let out = self.forward_with(tokens, None)?;
        Ok((out.logits, out.trace))
    }

    /// Forward pass, optionally replaying recorded gate decisions.
    pub fn forward_with(&self, tokens: &[usize], replay: Option<&GateRecord>) -> Result<ForwardOutput> {
        let mut g = EvalGraph::new(&self.params);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pass = self.pass(&mut g, tokens, Readout::Logits(&positions), replay)?;
        let mut data = Vec::with_capacity(tokens.len() * self.config.vocab);
        for lg in &pass.logits {
            data.extend_from_slice(g.value(lg).data());
        }
        let logits = Tensor::matrix(tokens.len(), self.config.vocab, data)?;
        Ok(ForwardOutput {
            logits,
            trace: pass.trace,
            record: pass.record,
        })
    }

    /// Logits at selected positions only.
    pub fn logits_at(&self, tokens: &[usize], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = EvalGraph::new(&self.params);
        let pass = self.pass(&mut g, tokens, Readout::Logits(positions), None)?;
        Ok(pass.logits.iter().map(|v| g.value(v).data().to_vec()).collect())
    }

    /// Mean cross-entropy over `(position, target)` pairs.
    pub fn loss(&self, tokens: &[usize], targets: &[(usize, usize)], replay: Option<&GateRecord>) -> Result<(f64, GateRecord)> {
        if targets.is_empty() {
            return Err(Error::Input("no loss targets".into()));
        }
        let mut g = EvalGraph::new(&self.params);
        let pass = self.pass(&mut g, tokens, Readout::Loss(targets), replay)?;
        let loss = g.value(pass.loss.as_ref().expect("targets given")).data()[0];
        Ok((loss, pass.record))
    }

    /// Loss and its gradient for every parameter. Threshold gates are held
    /// at their forward decisions.
    pub fn loss_and_grad(
        &self,
        tokens: &[usize],
        targets: &[(usize, usize)],
        replay: Option<&GateRecord>,
    ) -> Result<(f64, Gradients, GateRecord)> {
        if targets.is_empty() {
            return Err(Error::Input("no loss targets".into()));
        }
        let mut tape = Tape::new(&self.params);
        let pass = self.pass(&mut tape, tokens, Readout::Loss(targets), replay)?;
        let loss_v = pass.loss.expect("targets given");
        let loss = tape.value(&loss_v).data()[0];
        let grads = tape.backward(loss_v)?;
        Ok((loss, grads, pass.record))
    }

    /// Incremental inference, one token at a time.
    pub fn session(&self) -> Session<'_> {
        Session::new(self)
    }
}

/// Streaming evaluation that keeps only the recurrent state.
pub struct Session<'m> {
    graph: EvalGraph<'m>,
    runner: Runner<'m, crate::autodiff::EvalVar<'m>>,
    peak_state_floats: usize,
}

impl<'m> Session<'m> {
    fn new(model: &'m MemMamba) -> Self {
        let mut graph = EvalGraph::new(&model.params);
        let runner = Runner::new(&mut graph, model);
        Session {
            graph,
            runner,
            peak_state_floats: 0,
        }
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let y = self.runner.step(&mut self.graph, token, None)?;
        self.runner.hidden.iter_mut().for_each(Vec::clear);
        self.runner.steps.clear();
        self.runner.record.decisions.clear();
        let floats = self.runner.state_floats(&self.graph);
        self.peak_state_floats = self.peak_state_floats.max(floats);
        let lg = self.runner.logits(&mut self.graph, &y);
        Ok(self.graph.value(&lg).data().to_vec())
    }

    pub fn steps_taken(&self) -> usize {
        self.runner.t
    }

    /// Largest recurrent state seen so far, in bytes.
    pub fn peak_state_bytes(&self) -> usize {
        self.peak_state_floats * std::mem::size_of::<f64>()
    }
}
