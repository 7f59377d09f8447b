//! Self-supervised objectives on projection matrices: NT-Xent, VICReg and
//! SimSiam, and their composition into trajectory-level, per-timestep and
//! combined losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, NORM_EPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    NtXent,
    Vicreg,
    Simsiam,
}

impl LossFamily {
    /// Smallest batch the family is defined on.
    pub fn min_batch(self) -> usize {
        match self {
            LossFamily::NtXent | LossFamily::Simsiam => 1,
            LossFamily::Vicreg => 2,
        }
    }

    /// Whether projections are L2-normalised before the loss.
    pub fn normalizes(self) -> bool {
        self == LossFamily::NtXent
    }
}

impl std::str::FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nt_xent" => Ok(LossFamily::NtXent),
            "vicreg" => Ok(LossFamily::Vicreg),
            "simsiam" => Ok(LossFamily::Simsiam),
            other => Err(Error::Config(format!("unknown loss family '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VicregWeights {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    /// Stabiliser inside the variance hinge's square root.
    pub eps: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 1.0,
            nu: 1.0,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub family: LossFamily,
    /// NT-Xent temperature.
    pub temperature: f64,
    #[serde(default)]
    pub vicreg: VicregWeights,
    /// Global (trajectory) loss weight.
    pub alpha: f64,
    /// Component (per-timestep) loss weight.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            family: LossFamily::NtXent,
            temperature: 0.1,
            vicreg: VicregWeights::default(),
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        let v = &self.vicreg;
        if !(v.lambda >= 0.0 && v.mu >= 0.0 && v.nu >= 0.0 && v.eps > 0.0) {
            return Err(Error::Config("VICReg weights must be non-negative and eps positive".into()));
        }
        Ok(())
    }
}

/// Paired projections of one batch, plus predictor outputs for SimSiam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionPair {
    pub first: Var,
    pub second: Var,
    pub predicted: Option<(Var, Var)>,
}

impl ProjectionPair {
    pub fn new(first: Var, second: Var) -> Self {
        Self {
            first,
            second,
            predicted: None,
        }
    }

    pub fn with_predictions(first: Var, second: Var, pred_first: Var, pred_second: Var) -> Self {
        Self {
            first,
            second,
            predicted: Some((pred_first, pred_second)),
        }
    }
}

/// Shapes of the logit matrices NT-Xent evaluated, one entry per call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LogitTrace {
    pub shapes: Vec<[usize; 2]>,
}

fn pair_dims(g: &Graph, a: Var, b: Var) -> Result<(usize, usize)> {
    let (r, d) = g.value(a).dims2()?;
    if g.shape(b) != [r, d] {
        return Err(Error::Shape(format!("projection pair {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok((r, d))
}

fn check_unit_rows(g: &Graph, v: Var) -> Result<()> {
    let (_, d) = g.value(v).dims2()?;
    for row in g.value(v).data().chunks(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("NT-Xent rows must be unit-norm, found norm {n}")));
        }
    }
    Ok(())
}

/// NT-Xent over the `2B` rows of both views. Each anchor's logits cover
/// every other row; its positive is the same row of the other view.
pub fn nt_xent(g: &mut Graph, a: Var, b: Var, temperature: f64) -> Result<Var> {
    nt_xent_traced(g, a, b, temperature, None)
}

pub fn nt_xent_traced(
    g: &mut Graph,
    a: Var,
    b: Var,
    temperature: f64,
    trace: Option<&mut LogitTrace>,
) -> Result<Var> {
    let (batch, _) = pair_dims(g, a, b)?;
    check_unit_rows(g, a)?;
    check_unit_rows(g, b)?;
    let z = g.concat_rows(&[a, b])?;
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, 1.0 / temperature)?;
    let logits = g.off_diagonal(sim)?;
    if let Some(t) = trace {
        let (r, c) = g.value(logits).dims2()?;
        t.shapes.push([r, c]);
    }
    let logp = g.log_softmax_rows(logits)?;
    let pos: Vec<usize> = (0..2 * batch).map(|i| if i < batch { i + batch - 1 } else { i - batch }).collect();
    let picked = g.pick_per_row(logp, &pos)?;
    let m = g.mean(picked)?;
    g.neg(m)
}

fn centered(g: &mut Graph, x: Var) -> Result<Var> {
    let mu = g.mean_rows(x)?;
    let neg = g.neg(mu)?;
    g.add_bias(x, neg)
}

fn variance_hinge(g: &mut Graph, xc: Var, batch: usize, eps: f64) -> Result<Var> {
    let sq = g.square(xc)?;
    let s = g.sum_rows(sq)?;
    let var = g.scale(s, 1.0 / (batch - 1) as f64)?;
    let var = g.add_scalar(var, eps)?;
    let sd = g.sqrt(var)?;
    let neg = g.neg(sd)?;
    let gap = g.add_scalar(neg, 1.0)?;
    let h = g.relu(gap)?;
    g.mean(h)
}

fn covariance_penalty(g: &mut Graph, xc: Var, batch: usize, dim: usize) -> Result<Option<Var>> {
    if dim < 2 {
        return Ok(None);
    }
    let xt = g.transpose(xc)?;
    let cov = g.matmul(xt, xc)?;
    let cov = g.scale(cov, 1.0 / (batch - 1) as f64)?;
    let off = g.off_diagonal(cov)?;
    let sq = g.square(off)?;
    let s = g.sum(sq)?;
    Ok(Some(g.scale(s, 1.0 / dim as f64)?))
}

/// VICReg terms, unweighted.
#[derive(Clone, Copy, Debug)]
pub struct VicregTerms {
    pub invariance: Var,
    pub variance: Var,
    /// `None` for one-dimensional projections.
    pub covariance: Option<Var>,
}

/// Invariance (MSE), variance hinge and covariance penalty, the last two
/// computed per branch and averaged.
pub fn vicreg_terms(g: &mut Graph, a: Var, b: Var, eps: f64) -> Result<VicregTerms> {
    let (batch, dim) = pair_dims(g, a, b)?;
    if batch < 2 {
        return Err(Error::DegenerateBatch(format!("VICReg needs at least 2 rows, got {batch}")));
    }
    let diff = g.sub(a, b)?;
    let sq = g.square(diff)?;
    let invariance = g.mean(sq)?;
    let (ac, bc) = (centered(g, a)?, centered(g, b)?);
    let va = variance_hinge(g, ac, batch, eps)?;
    let vb = variance_hinge(g, bc, batch, eps)?;
    let v = g.add(va, vb)?;
    let variance = g.scale(v, 0.5)?;
    let covariance = match (covariance_penalty(g, ac, batch, dim)?, covariance_penalty(g, bc, batch, dim)?) {
        (Some(ca), Some(cb)) => {
            let c = g.add(ca, cb)?;
            Some(g.scale(c, 0.5)?)
        }
        _ => None,
    };
    Ok(VicregTerms {
        invariance,
        variance,
        covariance,
    })
}

pub fn vicreg(g: &mut Graph, a: Var, b: Var, w: &VicregWeights) -> Result<Var> {
    let t = vicreg_terms(g, a, b, w.eps)?;
    let i = g.scale(t.invariance, w.lambda)?;
    let v = g.scale(t.variance, w.mu)?;
    let mut out = g.add(i, v)?;
    if let Some(c) = t.covariance {
        let c = g.scale(c, w.nu)?;
        out = g.add(out, c)?;
    }
    Ok(out)
}

/// Symmetrised negative cosine between each predictor output and the
/// stop-gradient projection of the other view.
pub fn simsiam(g: &mut Graph, pred_a: Var, pred_b: Var, proj_a: Var, proj_b: Var) -> Result<Var> {
    pair_dims(g, pred_a, proj_b)?;
    pair_dims(g, pred_b, proj_a)?;
    let (sa, sb) = (g.detach(proj_a), g.detach(proj_b));
    let ca = g.cosine_sim(pred_a, sb, NORM_EPS)?;
    let cb = g.cosine_sim(pred_b, sa, NORM_EPS)?;
    let ma = g.mean(ca)?;
    let mb = g.mean(cb)?;
    let s = g.add(ma, mb)?;
    g.scale(s, -0.5)
}

fn family_loss(g: &mut Graph, p: &ProjectionPair, cfg: &LossConfig, trace: Option<&mut LogitTrace>) -> Result<Var> {
    match (cfg.family, p.predicted) {
        (LossFamily::NtXent, None) => nt_xent_traced(g, p.first, p.second, cfg.temperature, trace),
        (LossFamily::Vicreg, None) => vicreg(g, p.first, p.second, &cfg.vicreg),
        (LossFamily::Simsiam, Some((pa, pb))) => simsiam(g, pa, pb, p.first, p.second),
        (LossFamily::Simsiam, None) => Err(Error::Contract("SimSiam needs predictor outputs".into())),
        (f, Some(_)) => Err(Error::Contract(format!("{f:?} does not take predictor outputs"))),
    }
}

/// Trajectory-level loss on the `B x D` projections of both views.
pub fn global_loss(g: &mut Graph, p: &ProjectionPair, cfg: &LossConfig) -> Result<Var> {
    family_loss(g, p, cfg, None)
}

/// One timestep's projections with the batch rows that have a signal.
#[derive(Clone, Debug, PartialEq)]
pub struct StepProjections {
    pub pair: ProjectionPair,
    /// Rows to keep; `None` keeps all.
    pub rows: Option<Vec<usize>>,
}

fn select_rows(g: &mut Graph, v: Var, rows: &Option<Vec<usize>>) -> Result<Var> {
    match rows {
        None => Ok(v),
        Some(idx) => g.gather_rows(v, idx),
    }
}

/// Mean over timesteps of the family loss at each timestep, so that
/// negatives only come from the same timestep. Timesteps left with fewer
/// rows than the family needs are skipped and the mean renormalised.
pub fn component_loss(g: &mut Graph, steps: &[StepProjections], cfg: &LossConfig) -> Result<Var> {
    component_loss_traced(g, steps, cfg, None)
}

pub fn component_loss_traced(
    g: &mut Graph,
    steps: &[StepProjections],
    cfg: &LossConfig,
    mut trace: Option<&mut LogitTrace>,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(steps.len());
    for s in steps {
        let n = match &s.rows {
            Some(r) => r.len(),
            None => g.value(s.pair.first).dims2()?.0,
        };
        if n < cfg.family.min_batch() {
            continue;
        }
        let pair = ProjectionPair {
            first: select_rows(g, s.pair.first, &s.rows)?,
            second: select_rows(g, s.pair.second, &s.rows)?,
            predicted: match s.pair.predicted {
                Some((a, b)) => Some((select_rows(g, a, &s.rows)?, select_rows(g, b, &s.rows)?)),
                None => None,
            },
        };
        terms.push(family_loss(g, &pair, cfg, trace.as_deref_mut())?);
    }
    if terms.is_empty() {
        return Err(Error::DegenerateBatch("every timestep was skipped in the component loss".into()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.scale(total, 1.0 / terms.len() as f64)
}

/// `alpha * global + beta * component`. A term whose weight is zero is left
/// out of the graph, so nothing upstream of it receives gradient.
pub fn combined_loss(g: &mut Graph, global: Option<Var>, component: Option<Var>, alpha: f64, beta: f64) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    if alpha != 0.0 {
        let l = global.ok_or_else(|| Error::Contract("alpha > 0 needs a global loss".into()))?;
        parts.push(g.scale(l, alpha)?);
    }
    if beta != 0.0 {
        let l = component.ok_or_else(|| Error::Contract("beta > 0 needs a component loss".into()))?;
        parts.push(g.scale(l, beta)?);
    }
    match parts[..] {
        [] => Err(Error::Contract("alpha and beta cannot both be zero".into())),
        [one] => Ok(one),
        [a, b] => g.add(a, b),
        _ => unreachable!(),
    }
}
