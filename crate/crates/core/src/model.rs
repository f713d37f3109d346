//! Concept-residual bottleneck models and semi-independent training.
//!
//! Architecture: a shared relu backbone feeds a linear concept head (k
//! logits) and, unless the model is a pure bottleneck, a linear residual
//! head (m units). The task head consumes the concept signal concatenated
//! with the residual and produces class logits.
//!
//! Semi-independent training: the task head always consumes ground-truth
//! concepts during training, passed through a stop-gradient, so the task
//! loss cannot shape the concept head; concepts are trained only by their
//! own BCE loss. The enum of concept feeds enforces this structurally: a
//! train-phase forward accepts nothing but ground truth.
//!
//! Method-specific pressure on the residual enters the same step: a
//! cross-correlation penalty, train-mode whitening of the residual, or a
//! contrastive MI estimate whose variational network is refreshed on the
//! batch right before the model update.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::club::{Club, ClubConfig};
use crate::decorr::{decorr_loss_tape, DecorrPolicy};
use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::rng::{permutation, stream_rng, Stream};
use crate::synth::{Dataset, Split};
use crate::tape::{Tape, Var};
use crate::whiten::{iternorm_eval_tape, iternorm_train_tape, WhitenConfig, WhitenState};

pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bottleneck,
    Latent,
    Decorr,
    Iternorm,
    Mi,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bottleneck => "bottleneck",
            Method::Latent => "latent",
            Method::Decorr => "decorr",
            Method::Iternorm => "iternorm",
            Method::Mi => "mi",
        }
    }

    pub const ALL: [Method; 5] = [
        Method::Bottleneck,
        Method::Latent,
        Method::Decorr,
        Method::Iternorm,
        Method::Mi,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub concept_dim: usize,
    pub residual_dim: usize,
    pub task_hidden: Vec<usize>,
    pub n_classes: usize,
}

impl Arch {
    pub fn validate(&self, method: Method) -> Result<()> {
        let fail = |msg: String| Err(CoreError::InvalidConfig(msg));
        if self.input_dim == 0 || self.concept_dim == 0 || self.n_classes < 2 {
            return fail(format!(
                "arch needs input_dim > 0, concept_dim > 0, n_classes >= 2; got {}, {}, {}",
                self.input_dim, self.concept_dim, self.n_classes
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) || self.task_hidden.iter().any(|&h| h == 0) {
            return fail("hidden layer widths must be positive".into());
        }
        match (method, self.residual_dim) {
            (Method::Bottleneck, 0) => Ok(()),
            (Method::Bottleneck, m) => fail(format!("bottleneck models take residual_dim = 0, got {m}")),
            (_, 0) => fail(format!("method {} needs residual_dim >= 1", method.as_str())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Matrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub arch: Arch,
    pub method: Method,
    pub params: Vec<NamedParam>,
    pub whiten: Option<WhitenState>,
    pub club: Option<Club>,
}

/// How evaluation feeds the model's own concepts to the task head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptMode {
    /// Threshold at 0.5 so f sees the {0,1} vectors it was trained on.
    #[default]
    Hard,
    Soft,
}

impl ConceptMode {
    pub fn source(self) -> EvalSource {
        match self {
            ConceptMode::Hard => EvalSource::PredictedHard,
            ConceptMode::Soft => EvalSource::PredictedSoft,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub lambda_concept: f64,
    /// Weight on the method loss (decorr or MI); ignored otherwise.
    pub beta: f64,
    pub decorr_policy: DecorrPolicy,
    pub whiten: WhitenConfig,
    pub club: ClubConfig,
    /// q-network refits per model step. The estimator must track the moving
    /// residual distribution closely: at 1 the minimization reliably runs
    /// away (residual norms explode chasing a stale q); 5 is stable on every
    /// bundled task.
    pub club_updates_per_step: usize,
    pub eval_concept_mode: ConceptMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 128,
            adam: AdamConfig::default(),
            lambda_concept: 1.0,
            beta: 1.0,
            decorr_policy: DecorrPolicy::CrossBlock,
            whiten: WhitenConfig::default(),
            club: ClubConfig::default(),
            club_updates_per_step: 5,
            eval_concept_mode: ConceptMode::Hard,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::InvalidConfig(msg));
        if self.batch < 2 {
            return fail(format!("batch = {} must be >= 2", self.batch));
        }
        if self.lambda_concept < 0.0 || !self.lambda_concept.is_finite() {
            return fail(format!("lambda_concept = {}", self.lambda_concept));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return fail(format!("beta = {}", self.beta));
        }
        if self.whiten.iterations == 0 {
            return fail("whitening needs at least one iteration".into());
        }
        if !(0.0..1.0).contains(&self.whiten.momentum) {
            return fail(format!("whitening momentum = {} outside [0, 1)", self.whiten.momentum));
        }
        if self.club_updates_per_step == 0 {
            return fail("club_updates_per_step must be >= 1".into());
        }
        if self.adam.lr <= 0.0 || !self.adam.lr.is_finite() {
            return fail(format!("lr = {}", self.adam.lr));
        }
        Ok(())
    }
}

/// Shapes and canonical order of every trainable tensor.
fn param_layout(arch: &Arch) -> Vec<(String, usize, usize)> {
    let mut layout = Vec::new();
    let mut prev = arch.input_dim;
    for (l, &h) in arch.hidden.iter().enumerate() {
        layout.push((format!("backbone.{l}.w"), prev, h));
        layout.push((format!("backbone.{l}.b"), 1, h));
        prev = h;
    }
    layout.push(("concept.w".into(), prev, arch.concept_dim));
    layout.push(("concept.b".into(), 1, arch.concept_dim));
    if arch.residual_dim > 0 {
        layout.push(("residual.w".into(), prev, arch.residual_dim));
        layout.push(("residual.b".into(), 1, arch.residual_dim));
    }
    let mut tprev = arch.concept_dim + arch.residual_dim;
    for (l, &h) in arch.task_hidden.iter().enumerate() {
        layout.push((format!("task.{l}.w"), tprev, h));
        layout.push((format!("task.{l}.b"), 1, h));
        tprev = h;
    }
    layout.push(("task.out.w".into(), tprev, arch.n_classes));
    layout.push(("task.out.b".into(), 1, arch.n_classes));
    layout
}

/// What the task head consumes in place of concept activations.
pub enum ConceptFeed<'a> {
    /// Observed concepts from the dataset; the only feed allowed in training.
    GroundTruth(&'a Matrix),
    /// Arbitrary replacement values (interventions).
    Override(&'a Matrix),
    /// Thresholded own predictions: logit >= 0 maps to 1.
    PredictedHard,
    /// Sigmoid of own logits.
    PredictedSoft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

enum WhitenPass<'a> {
    Off,
    Train(&'a mut WhitenState),
    Eval(&'a WhitenState),
}

pub struct Forward {
    pub concept_logits: Var,
    /// The stop-gradiented signal the task head consumed (b x k).
    pub concept_input: Var,
    /// Raw residual head output, before any whitening.
    pub residual_raw: Option<Var>,
    /// What the task head actually consumed: [concept_input | residual],
    /// whitened jointly when the method whitens.
    pub task_input: Var,
    pub task_logits: Var,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    tape.add_row_broadcast(z, b)
}

fn forward_graph(
    arch: &Arch,
    tape: &mut Tape,
    vars: &[Var],
    x: &Matrix,
    feed: &ConceptFeed<'_>,
    residual_override: Option<&Matrix>,
    phase: Phase,
    whiten: WhitenPass<'_>,
) -> Result<Forward> {
    if x.cols() != arch.input_dim {
        return Err(CoreError::ShapeMismatch {
            op: "forward",
            detail: format!("input has {} features, arch expects {}", x.cols(), arch.input_dim),
        });
    }
    if phase == Phase::Train && !matches!(feed, ConceptFeed::GroundTruth(_)) {
        return Err(CoreError::InvalidConfig(
            "training forwards take ground-truth concepts only".into(),
        ));
    }
    let b = x.rows();
    let mut vi = 0;
    let mut next = || {
        let v = vars[vi];
        vi += 2;
        (v, vars[vi - 1])
    };

    let mut h = tape.constant(x.clone());
    for _ in 0..arch.hidden.len() {
        let (w, bias) = next();
        let z = linear(tape, h, w, bias)?;
        h = tape.relu(z)?;
    }
    let (cw, cb) = next();
    let concept_logits = linear(tape, h, cw, cb)?;

    let residual_raw = if arch.residual_dim > 0 {
        let (rw, rb) = next();
        let r = linear(tape, h, rw, rb)?;
        Some(r)
    } else {
        None
    };

    let feed_node = match feed {
        ConceptFeed::GroundTruth(c) | ConceptFeed::Override(c) => {
            if c.shape() != (b, arch.concept_dim) {
                return Err(CoreError::ShapeMismatch {
                    op: "concept_feed",
                    detail: format!("{:?} vs batch {}x{}", c.shape(), b, arch.concept_dim),
                });
            }
            tape.constant((*c).clone())
        }
        ConceptFeed::PredictedHard => {
            let hard = tape
                .value(concept_logits)
                .map(|z| if z >= 0.0 { 1.0 } else { 0.0 });
            tape.constant(hard)
        }
        ConceptFeed::PredictedSoft => tape.sigmoid(concept_logits)?,
    };
    let concept_input = tape.stop_gradient(feed_node);

    // Replacement happens before concatenation and whitening, so eval-mode
    // whitening is applied to donor residuals exactly as to own ones.
    let residual_fed = match (residual_raw, residual_override) {
        (Some(_), Some(values)) => {
            if values.shape() != (b, arch.residual_dim) {
                return Err(CoreError::ShapeMismatch {
                    op: "residual_override",
                    detail: format!("{:?} vs batch {}x{}", values.shape(), b, arch.residual_dim),
                });
            }
            Some(tape.constant(values.clone()))
        }
        (r, _) => r,
    };
    let joint = match residual_fed {
        Some(r) => tape.concat_cols(concept_input, r)?,
        None => concept_input,
    };
    // Whitening acts on the whole concept-residual block the task head sees;
    // that is what removes the cross-covariance between the two.
    let task_input = match whiten {
        WhitenPass::Off => joint,
        WhitenPass::Train(state) => iternorm_train_tape(tape, joint, state)?,
        WhitenPass::Eval(state) => iternorm_eval_tape(tape, joint, state)?,
    };

    let mut t = task_input;
    for _ in 0..arch.task_hidden.len() {
        let (w, bias) = next();
        let z = linear(tape, t, w, bias)?;
        t = tape.relu(z)?;
    }
    let (tw, tb) = next();
    let task_logits = linear(tape, t, tw, tb)?;

    debug_assert_eq!(vi, vars.len());
    Ok(Forward {
        concept_logits,
        concept_input,
        residual_raw,
        task_input,
        task_logits,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub total: f64,
    pub task: f64,
    pub concept: f64,
    pub method: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub task_loss: f64,
    pub concept_loss: f64,
    pub method_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSource {
    PredictedHard,
    PredictedSoft,
    GroundTruth,
}

impl Model {
    pub fn new(arch: Arch, method: Method, cfg: &TrainConfig) -> Result<Model> {
        arch.validate(method)?;
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, Stream::ModelInit);
        let params = param_layout(&arch)
            .into_iter()
            .map(|(name, rows, cols)| {
                let value = if name.ends_with(".b") {
                    Matrix::zeros(rows, cols)
                } else {
                    let bound = 1.0 / (rows as f64).sqrt();
                    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
                };
                NamedParam { name, value }
            })
            .collect();
        let whiten = if method == Method::Iternorm {
            Some(WhitenState::new(arch.concept_dim + arch.residual_dim, cfg.whiten))
        } else {
            None
        };
        let club = if method == Method::Mi {
            Some(Club::new(arch.concept_dim, arch.residual_dim, cfg.club.clone(), &mut rng)?)
        } else {
            None
        };
        Ok(Model {
            arch,
            method,
            params,
            whiten,
            club,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate(self.method)?;
        let layout = param_layout(&self.arch);
        if layout.len() != self.params.len() {
            return Err(CoreError::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.params.len()
            )));
        }
        for ((name, rows, cols), p) in layout.iter().zip(&self.params) {
            if &p.name != name || p.value.shape() != (*rows, *cols) {
                return Err(CoreError::Checkpoint(format!(
                    "tensor {} with shape {:?}, expected {} with shape ({}, {})",
                    p.name,
                    p.value.shape(),
                    name,
                    rows,
                    cols
                )));
            }
            p.value.check_finite("checkpoint")?;
        }
        match self.method {
            Method::Iternorm => {
                let w = self.whiten.as_ref().ok_or_else(|| {
                    CoreError::Checkpoint("whitening state missing for iternorm model".into())
                })?;
                let joint = self.arch.concept_dim + self.arch.residual_dim;
                if w.dim() != joint {
                    return Err(CoreError::Checkpoint(format!(
                        "whitening tracks {} dims, concept+residual is {}",
                        w.dim(),
                        joint
                    )));
                }
            }
            Method::Mi => {
                let club = self.club.as_ref().ok_or_else(|| {
                    CoreError::Checkpoint("club estimator missing for mi model".into())
                })?;
                if club.concept_dim != self.arch.concept_dim || club.residual_dim != self.arch.residual_dim {
                    return Err(CoreError::Checkpoint("club dims disagree with arch".into()));
                }
            }
            _ => {
                if self.whiten.is_some() || self.club.is_some() {
                    return Err(CoreError::Checkpoint(
                        "unexpected whitening or club state for this method".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn param_values(&self) -> Vec<Matrix> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    fn insert_params(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// One semi-independent training step on a batch. With the MI method the
    /// variational network is updated first, on this same batch.
    pub fn train_step(
        &mut self,
        x: &Matrix,
        c: &Matrix,
        y: &[usize],
        cfg: &TrainConfig,
        adam: &mut AdamState,
        perm_rng: &mut ChaCha12Rng,
    ) -> Result<StepLosses> {
        if self.method == Method::Mi {
            let residuals = self.residuals(x)?;
            let club = self.club.as_mut().expect("mi model carries a club");
            for _ in 0..cfg.club_updates_per_step.max(1) {
                club.update(c, &residuals)?;
            }
        }
        let perm = if self.method == Method::Mi {
            Some(permutation(x.rows(), perm_rng))
        } else {
            None
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let whiten_pass = match self.whiten.as_mut() {
            Some(state) => WhitenPass::Train(state),
            None => WhitenPass::Off,
        };
        let fwd = forward_graph(
            &self.arch,
            &mut tape,
            &vars,
            x,
            &ConceptFeed::GroundTruth(c),
            None,
            Phase::Train,
            whiten_pass,
        )?;

        let task_loss = tape.softmax_cross_entropy(fwd.task_logits, y)?;
        let targets = tape.constant(c.clone());
        let concept_loss = tape.bce_with_logits(fwd.concept_logits, targets)?;

        let method_loss = match self.method {
            Method::Decorr => {
                let r = fwd.residual_raw.expect("decorr model has a residual");
                Some(decorr_loss_tape(&mut tape, fwd.concept_input, r, cfg.decorr_policy)?)
            }
            Method::Mi => {
                let club = self.club.as_ref().expect("mi model carries a club");
                let club_vars = club.insert_params(&mut tape, false);
                let r = fwd.residual_raw.expect("mi model has a residual");
                let perm = perm.as_ref().expect("permutation drawn above");
                Some(club.mi_tape(&mut tape, &club_vars, fwd.concept_input, r, perm)?)
            }
            _ => None,
        };

        let weighted_concept = tape.mul_scalar(concept_loss, cfg.lambda_concept)?;
        let mut total = tape.add(task_loss, weighted_concept)?;
        if let Some(ml) = method_loss {
            let weighted = tape.mul_scalar(ml, cfg.beta)?;
            total = tape.add(total, weighted)?;
        }

        let losses = StepLosses {
            total: tape.value(total)[(0, 0)],
            task: tape.value(task_loss)[(0, 0)],
            concept: tape.value(concept_loss)[(0, 0)],
            method: method_loss.map_or(0.0, |ml| tape.value(ml)[(0, 0)]),
        };

        let mut grads = tape.backward(total)?;
        let grad_list: Vec<Option<Matrix>> = vars.iter().map(|&v| grads.take(v)).collect();
        let mut values = self.param_values();
        adam.step(&mut values, &grad_list)?;
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(losses)
    }

    /// Gradients of the *task loss alone* for every parameter, by name.
    /// Exposes what semi-independent training guarantees: the concept head
    /// entries come back `None` (exactly zero), never merely small.
    pub fn task_only_gradients(
        &self,
        x: &Matrix,
        c: &Matrix,
        y: &[usize],
    ) -> Result<Vec<(String, Option<Matrix>)>> {
        let mut tape = Tape::new();
        let vars = self.insert_params(&mut tape, true);
        let mut whiten_scratch = self.whiten.clone();
        let pass = match whiten_scratch.as_mut() {
            Some(state) => WhitenPass::Train(state),
            None => WhitenPass::Off,
        };
        let fwd = forward_graph(
            &self.arch,
            &mut tape,
            &vars,
            x,
            &ConceptFeed::GroundTruth(c),
            None,
            Phase::Train,
            pass,
        )?;
        let task_loss = tape.softmax_cross_entropy(fwd.task_logits, y)?;
        let mut grads = tape.backward(task_loss)?;
        Ok(self
            .params
            .iter()
            .zip(&vars)
            .map(|(p, &v)| (p.name.clone(), grads.take(v)))
            .collect())
    }

    /// Raw residual head values for a whole table of inputs, batched.
    pub fn residuals(&self, x: &Matrix) -> Result<Matrix> {
        if self.arch.residual_dim == 0 {
            return Err(CoreError::InvalidConfig(
                "bottleneck models have no residual".into(),
            ));
        }
        let mut out = Matrix::zeros(x.rows(), self.arch.residual_dim);
        let mut row = 0;
        for chunk_start in (0..x.rows()).step_by(EVAL_BATCH) {
            let hi = (chunk_start + EVAL_BATCH).min(x.rows());
            let idx: Vec<usize> = (chunk_start..hi).collect();
            let xb = x.gather_rows(&idx)?;
            let mut tape = Tape::new();
            let vars = self.insert_params(&mut tape, false);
            let pass = match &self.whiten {
                Some(state) => WhitenPass::Eval(state),
                None => WhitenPass::Off,
            };
            let fwd = forward_graph(
                &self.arch,
                &mut tape,
                &vars,
                &xb,
                &ConceptFeed::PredictedHard,
                None,
                Phase::Eval,
                pass,
            )?;
            let r = fwd.residual_raw.expect("residual_dim > 0");
            for i in 0..xb.rows() {
                let src = tape.value(r).row(i).to_vec();
                out.row_mut(row).copy_from_slice(&src);
                row += 1;
            }
        }
        Ok(out)
    }

    /// Hard {0, 1} concept predictions for a whole table of inputs.
    pub fn concept_hard(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), self.arch.concept_dim);
        let mut row = 0;
        for chunk_start in (0..x.rows()).step_by(EVAL_BATCH) {
            let hi = (chunk_start + EVAL_BATCH).min(x.rows());
            let idx: Vec<usize> = (chunk_start..hi).collect();
            let xb = x.gather_rows(&idx)?;
            let mut tape = Tape::new();
            let vars = self.insert_params(&mut tape, false);
            let pass = match &self.whiten {
                Some(state) => WhitenPass::Eval(state),
                None => WhitenPass::Off,
            };
            let fwd = forward_graph(
                &self.arch,
                &mut tape,
                &vars,
                &xb,
                &ConceptFeed::PredictedHard,
                None,
                Phase::Eval,
                pass,
            )?;
            let logits = tape.value(fwd.concept_logits);
            for i in 0..xb.rows() {
                for j in 0..self.arch.concept_dim {
                    out.set(row, j, if logits[(i, j)] >= 0.0 { 1.0 } else { 0.0 });
                }
                row += 1;
            }
        }
        Ok(out)
    }

    /// Classification accuracy over a table, with optional concept or
    /// residual replacement. Residual overrides are ignored by bottleneck
    /// models (their logits cannot depend on a residual).
    pub fn accuracy_on(
        &self,
        x: &Matrix,
        c: &Matrix,
        y: &[usize],
        source: EvalSource,
        concept_override: Option<&Matrix>,
        residual_override: Option<&Matrix>,
    ) -> Result<f64> {
        if x.rows() != y.len() {
            return Err(CoreError::ShapeMismatch {
                op: "accuracy",
                detail: format!("{} inputs vs {} labels", x.rows(), y.len()),
            });
        }
        if x.rows() == 0 {
            return Err(CoreError::InvalidConfig("empty evaluation set".into()));
        }
        let mut hits = 0usize;
        for chunk_start in (0..x.rows()).step_by(EVAL_BATCH) {
            let hi = (chunk_start + EVAL_BATCH).min(x.rows());
            let idx: Vec<usize> = (chunk_start..hi).collect();
            let xb = x.gather_rows(&idx)?;
            let cb = c.gather_rows(&idx)?;
            let ov = concept_override.map(|m| m.gather_rows(&idx)).transpose()?;
            let rv = if self.arch.residual_dim > 0 {
                residual_override.map(|m| m.gather_rows(&idx)).transpose()?
            } else {
                None
            };
            let feed = match (&ov, source) {
                (Some(o), _) => ConceptFeed::Override(o),
                (None, EvalSource::GroundTruth) => ConceptFeed::GroundTruth(&cb),
                (None, EvalSource::PredictedHard) => ConceptFeed::PredictedHard,
                (None, EvalSource::PredictedSoft) => ConceptFeed::PredictedSoft,
            };
            let mut tape = Tape::new();
            let vars = self.insert_params(&mut tape, false);
            let pass = match &self.whiten {
                Some(state) => WhitenPass::Eval(state),
                None => WhitenPass::Off,
            };
            let fwd = forward_graph(
                &self.arch,
                &mut tape,
                &vars,
                &xb,
                &feed,
                rv.as_ref(),
                Phase::Eval,
                pass,
            )?;
            let logits = tape.value(fwd.task_logits);
            for (i, &label) in y[chunk_start..hi].iter().enumerate() {
                hits += (argmax_row(logits.row(i)) == label) as usize;
            }
        }
        Ok(hits as f64 / x.rows() as f64)
    }

    /// Accuracy on one dataset split with the model's own concepts.
    pub fn split_accuracy(&self, ds: &Dataset, split: Split, source: EvalSource) -> Result<f64> {
        let (x, c, y) = ds.part(split)?;
        self.accuracy_on(&x, &c, &y, source, None, None)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| CoreError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let model: Model =
            serde_json::from_str(text).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Model> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Model::from_json(&text)
    }
}

/// Lowest index wins ties.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Full training run: semi-independent steps over shuffled minibatches with
/// validation-accuracy checkpointing (ties keep the earlier epoch). The model
/// is left at the best-validation snapshot. Non-finite numerics surface as a
/// `Divergence` error tagged with epoch and step.
pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let train_idx = ds.indices(Split::Train);
    if train_idx.len() < 2 {
        return Err(CoreError::InvalidConfig("need at least 2 training rows".into()));
    }
    let has_val = !ds.indices(Split::Val).is_empty();
    let values = model.param_values();
    let mut adam = AdamState::new(&values, cfg.adam);
    let mut batch_rng = stream_rng(cfg.seed, Stream::Batching);
    let mut perm_rng = stream_rng(cfg.seed, Stream::ClubPermutation);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Model)> = None;
    for epoch in 0..cfg.epochs {
        let order = {
            let shuffled = permutation(train_idx.len(), &mut batch_rng);
            shuffled.into_iter().map(|i| train_idx[i]).collect::<Vec<_>>()
        };
        let mut sums = StepLosses::default();
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch.max(2)).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let xb = ds.x.gather_rows(chunk)?;
            let cb = ds.c.gather_rows(chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| ds.y[i]).collect();
            let losses = model
                .train_step(&xb, &cb, &yb, cfg, &mut adam, &mut perm_rng)
                .map_err(|e| CoreError::Divergence {
                    epoch,
                    step,
                    source: Box::new(e),
                })?;
            sums.total += losses.total;
            sums.task += losses.task;
            sums.concept += losses.concept;
            sums.method += losses.method;
            steps += 1;
        }
        let denom = steps.max(1) as f64;
        let val_accuracy = if has_val {
            model.split_accuracy(ds, Split::Val, cfg.eval_concept_mode.source())?
        } else {
            f64::NAN
        };
        history.push(EpochStats {
            epoch,
            task_loss: sums.task / denom,
            concept_loss: sums.concept / denom,
            method_loss: sums.method / denom,
            val_accuracy,
        });
        if has_val {
            let better = match &best {
                None => true,
                Some((acc, _)) => val_accuracy > *acc,
            };
            if better {
                best = Some((val_accuracy, model.clone()));
            }
        }
    }
    if let Some((_, snapshot)) = best {
        *model = snapshot;
    }
    Ok(history)
}
