//! Speech connector: frame downsampling, a softmax router and GELU FFN
//! experts that project speech frames into the LM embedding space.
//!
//! Two routing regimes exist. Dense routing mixes every expert output with
//! its router probability. Language-specific routing hard-assigns whole
//! monolingual utterances to the expert tagged with their language and
//! sends each frame of a code-switched utterance to its top-1 expert.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::UttLang;
use crate::numerics::tensor::softmax_into;
use crate::numerics::{Graph, ParamGroup, Parameters, Tape, Tensor, Var};

/// `t × d` acoustic frames, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    dim: usize,
    values: Vec<f64>,
}

impl FrameMatrix {
    pub fn new(dim: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || frames == 0 {
            return Err(Error::EmptyInput(format!("frame matrix {frames}x{dim}")));
        }
        if values.len() != dim * frames {
            return Err(Error::Dimension(format!(
                "{frames} frames of width {dim} need {} values, got {}",
                dim * frames,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frames".into()));
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.frames(), self.dim, self.values.clone()).expect("validated extents")
    }
}

/// Concatenates each group of `factor` consecutive frames. A partial final
/// group is zero-padded.
pub fn downsample(x: &FrameMatrix, factor: usize) -> Result<FrameMatrix> {
    if factor == 0 {
        return Err(Error::Config("downsample factor must be >= 1".into()));
    }
    let t = x.frames();
    let groups = t.div_ceil(factor);
    let mut values = x.values.clone();
    values.resize(groups * factor * x.dim, 0.0);
    FrameMatrix::new(x.dim * factor, groups, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectorKind {
    Moe,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectorConfig {
    pub kind: ConnectorKind,
    pub d_feat: usize,
    pub downsample: usize,
    pub hidden: usize,
    pub n_experts: usize,
    /// Standard deviation scale of the output projection at init.
    pub out_init: f64,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            kind: ConnectorKind::Moe,
            d_feat: 16,
            downsample: 5,
            hidden: 64,
            n_experts: 2,
            out_init: 1.0,
        }
    }
}

impl ConnectorConfig {
    pub fn full_scale() -> Self {
        Self {
            hidden: 2048,
            ..Self::default()
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_feat * self.downsample
    }

    /// Hidden width of the single-FFN connector whose parameter count is
    /// closest to the mixture connector with the same settings.
    pub fn linear_hidden(&self, d_model: usize) -> usize {
        let (d_in, h, n) = (self.d_in(), self.hidden, self.n_experts.max(1));
        let moe = n * (d_in * h + h + h * d_model + d_model) + n * d_in + n;
        let per_unit = d_in + 1 + d_model;
        ((moe - d_model) as f64 / per_unit as f64).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_feat == 0 || self.downsample == 0 || self.hidden == 0 {
            return Err(Error::Config("connector extents must be >= 1".into()));
        }
        if self.kind == ConnectorKind::Moe && self.n_experts == 0 {
            return Err(Error::Config("a mixture connector needs at least one expert".into()));
        }
        Ok(())
    }
}

/// Linear softmax gate over experts.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    /// `n × d_in`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Router {
    pub fn n_experts(&self) -> usize {
        self.bias.len()
    }
}

/// Routing probabilities for one downsampled frame.
pub fn route_probs(x: &[f64], router: &Router) -> Result<Vec<f64>> {
    let d = router.weight.cols();
    if x.len() != d {
        return Err(Error::Dimension(format!("router expects width {d}, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("router input".into()));
    }
    let logits: Vec<f64> = (0..router.n_experts())
        .map(|j| {
            router.weight.row(j).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + router.bias.data()[j]
        })
        .collect();
    let mut p = vec![0.0; logits.len()];
    softmax_into(&logits, &mut p);
    Ok(p)
}

/// Index of the largest probability; ties go to the lower index.
pub fn top1(p: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = j;
        }
    }
    best
}

/// Two-layer GELU feed-forward projector.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub tag: Option<UttLang>,
}

impl Expert {
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, out_init: f64, rng: &mut R) -> Self {
        Self {
            w1: Tensor::randn(&[hidden, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[d_out, hidden], out_init / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d_out]),
            tag: None,
        }
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, idx: usize, x: Var) -> Result<Var> {
        let w1 = g.param(ParamGroup::Connector, &self.w1, || format!("connector.experts.{idx}.w1"));
        let b1 = g.param(ParamGroup::Connector, &self.b1, || format!("connector.experts.{idx}.b1"));
        let w2 = g.param(ParamGroup::Connector, &self.w2, || format!("connector.experts.{idx}.w2"));
        let b2 = g.param(ParamGroup::Connector, &self.b2, || format!("connector.experts.{idx}.b2"));
        let t = &mut g.tape;
        let h = t.matmul_nt(x, w1)?;
        let h = t.add_row(h, b1)?;
        let h = t.gelu(h)?;
        let o = t.matmul_nt(h, w2)?;
        t.add_row(o, b2)
    }
}

/// How frames are assigned to experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    /// Probability-weighted sum of all experts.
    Dense,
    /// Language-specific: monolingual utterances go to their tagged expert,
    /// code-switched frames to their top-1 expert.
    Lse,
    /// Every frame goes to its top-1 expert.
    Top1,
}

/// `Σ_j P[:, j] ⊙ E_j`, recorded on the tape.
pub fn mix_dense(tape: &mut Tape<'_>, outputs: &[Var], probs: Var) -> Result<Var> {
    let n = tape.value(probs).cols();
    if outputs.len() != n {
        return Err(Error::Dimension(format!("{} expert outputs for {n} probabilities", outputs.len())));
    }
    let mut parts = Vec::with_capacity(n);
    for (j, &o) in outputs.iter().enumerate() {
        let pj = tape.slice_cols(probs, j, 1)?;
        parts.push(tape.mul_col(o, pj)?);
    }
    tape.sum(&parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Connector {
    pub config: ConnectorConfig,
    pub router: Option<Router>,
    pub experts: Vec<Expert>,
}

/// Result of a connector pass.
pub struct ConnectorOutput {
    /// `t' × d_model` projected frames.
    pub h: Var,
    /// `t' × n` router probabilities when a router exists.
    pub probs: Option<Var>,
    /// Expert chosen for each output frame under hard routing.
    pub assignment: Option<Vec<usize>>,
}

impl Connector {
    pub fn init<R: Rng + ?Sized>(config: &ConnectorConfig, d_model: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d_in = config.d_in();
        let (router, experts) = match config.kind {
            ConnectorKind::Linear => (
                None,
                vec![Expert::init(d_in, config.linear_hidden(d_model), d_model, config.out_init, rng)],
            ),
            ConnectorKind::Moe => {
                let router = Router {
                    weight: Tensor::randn(&[config.n_experts, d_in], 0.01, rng),
                    bias: Tensor::zeros(&[config.n_experts]),
                };
                let mut experts: Vec<Expert> = (0..config.n_experts)
                    .map(|_| Expert::init(d_in, config.hidden, d_model, config.out_init, rng))
                    .collect();
                if experts.len() >= 2 {
                    experts[0].tag = Some(UttLang::Zh);
                    experts[1].tag = Some(UttLang::En);
                }
                (Some(router), experts)
            }
        };
        Ok(Self {
            config: config.clone(),
            router,
            experts,
        })
    }

    fn tagged(&self, lang: UttLang) -> Result<usize> {
        self.experts
            .iter()
            .position(|e| e.tag == Some(lang))
            .ok_or_else(|| Error::Config(format!("no expert is tagged {lang}")))
    }

    /// Downsamples frames and puts them on the tape as a constant.
    pub fn input<'a>(&self, g: &mut Graph<'a>, frames: &FrameMatrix) -> Result<Var> {
        if frames.dim() != self.config.d_feat {
            return Err(Error::Dimension(format!(
                "connector expects frame width {}, got {}",
                self.config.d_feat,
                frames.dim()
            )));
        }
        let x = downsample(frames, self.config.downsample)?;
        Ok(g.tape.constant(x.to_tensor()))
    }

    fn router_probs<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Option<Var>> {
        let Some(r) = &self.router else { return Ok(None) };
        let w = g.param(ParamGroup::Connector, &r.weight, || "connector.router.weight".into());
        let b = g.param(ParamGroup::Connector, &r.bias, || "connector.router.bias".into());
        let logits = g.tape.matmul_nt(x, w)?;
        let logits = g.tape.add_row(logits, b)?;
        Ok(Some(g.tape.softmax(logits)?))
    }

    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        frames: &FrameMatrix,
        mode: RoutingMode,
        lang: UttLang,
    ) -> Result<ConnectorOutput> {
        let x = self.input(g, frames)?;
        if self.router.is_none() {
            let h = self.experts[0].forward(g, 0, x)?;
            return Ok(ConnectorOutput {
                h,
                probs: None,
                assignment: None,
            });
        }
        match mode {
            RoutingMode::Dense => self.forward_dense(g, x),
            RoutingMode::Lse => match lang {
                UttLang::Zh | UttLang::En => {
                    self.tagged(UttLang::Zh)?;
                    self.tagged(UttLang::En)?;
                    let j = self.tagged(lang)?;
                    let h = self.experts[j].forward(g, j, x)?;
                    let rows = g.tape.value(h).rows();
                    Ok(ConnectorOutput {
                        h,
                        probs: None,
                        assignment: Some(vec![j; rows]),
                    })
                }
                UttLang::Cs => {
                    self.tagged(UttLang::Zh)?;
                    self.tagged(UttLang::En)?;
                    self.forward_top1(g, x)
                }
            },
            RoutingMode::Top1 => self.forward_top1(g, x),
        }
    }

    fn forward_dense<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<ConnectorOutput> {
        let probs = self.router_probs(g, x)?.expect("router present");
        let outs = self
            .experts
            .iter()
            .enumerate()
            .map(|(j, e)| e.forward(g, j, x))
            .collect::<Result<Vec<_>>>()?;
        let h = mix_dense(&mut g.tape, &outs, probs)?;
        Ok(ConnectorOutput {
            h,
            probs: Some(probs),
            assignment: None,
        })
    }

    /// Hard top-1 routing. Selection is not differentiable and selected
    /// outputs are not weighted by their probability.
    fn forward_top1<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<ConnectorOutput> {
        let probs = self.router_probs(g, x)?.expect("router present");
        let p = g.tape.value(probs);
        let assignment: Vec<usize> = (0..p.rows()).map(|i| top1(p.row(i))).collect();
        let mut pieces = Vec::new();
        let mut order = Vec::new();
        for (j, e) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == j).collect();
            if rows.is_empty() {
                continue;
            }
            let xj = g.tape.gather_rows(x, &rows)?;
            pieces.push(e.forward(g, j, xj)?);
            order.extend(rows);
        }
        let stacked = if pieces.len() == 1 {
            pieces[0]
        } else {
            g.tape.concat_rows(&pieces)?
        };
        let h = if order.iter().enumerate().all(|(k, &i)| k == i) {
            stacked
        } else {
            let mut inverse = vec![0; order.len()];
            for (k, &i) in order.iter().enumerate() {
                inverse[i] = k;
            }
            g.tape.gather_rows(stacked, &inverse)?
        };
        Ok(ConnectorOutput {
            h,
            probs: Some(probs),
            assignment: Some(assignment),
        })
    }

    /// Router probabilities for every downsampled frame, without a tape.
    pub fn frame_probs(&self, frames: &FrameMatrix) -> Result<Vec<Vec<f64>>> {
        let router = self
            .router
            .as_ref()
            .ok_or_else(|| Error::Config("linear connector has no router".into()))?;
        let x = downsample(frames, self.config.downsample)?;
        (0..x.frames()).map(|i| route_probs(x.frame(i), router)).collect()
    }
}

impl Parameters for Connector {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(String, &'s Tensor)) {
        if let Some(r) = &self.router {
            f("connector.router.weight".into(), &r.weight);
            f("connector.router.bias".into(), &r.bias);
        }
        for (j, e) in self.experts.iter().enumerate() {
            f(format!("connector.experts.{j}.w1"), &e.w1);
            f(format!("connector.experts.{j}.b1"), &e.b1);
            f(format!("connector.experts.{j}.w2"), &e.w2);
            f(format!("connector.experts.{j}.b2"), &e.b2);
        }
    }

    fn visit_mut<'s>(&'s mut self, f: &mut dyn FnMut(String, &'s mut Tensor)) {
        if let Some(r) = &mut self.router {
            f("connector.router.weight".into(), &mut r.weight);
            f("connector.router.bias".into(), &mut r.bias);
        }
        for (j, e) in self.experts.iter_mut().enumerate() {
            f(format!("connector.experts.{j}.w1"), &mut e.w1);
            f(format!("connector.experts.{j}.b1"), &mut e.b1);
            f(format!("connector.experts.{j}.w2"), &mut e.w2);
            f(format!("connector.experts.{j}.b2"), &mut e.b2);
        }
    }
}
