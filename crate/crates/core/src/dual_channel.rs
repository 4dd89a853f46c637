//! Joint training of a shared feature extractor by an auxiliary-task head and
//! a current-task head under `λ·L_aux + L_cur` (hard parameter sharing).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sgd_step, Bound, Graph, ParamSet, Tensor, Var};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the auxiliary loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_width: usize,
    pub feature_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            learning_rate: 0.001,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            hidden_width: 64,
            feature_width: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.feature_width == 0 || self.hidden_width == 0 {
            return Err(Error::Config("batch size and layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Shared extractor plus the two single-layer task heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `l1` and `l2`, each followed by a ReLU.
    pub extractor: ParamSet,
    pub aux_head: ParamSet,
    pub cur_head: ParamSet,
}

pub const EXTRACTOR: &str = "extractor";
pub const AUX_HEAD: &str = "aux_head";
pub const CUR_HEAD: &str = "cur_head";

impl ModelParams {
    pub fn init(input_dim: usize, n_aux: usize, n_cur: usize, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(3);
        let mut extractor = ParamSet::new();
        extractor.push_dense("l1", input_dim, cfg.hidden_width, &mut rng);
        extractor.push_dense("l2", cfg.hidden_width, cfg.feature_width, &mut rng);
        let mut aux_head = ParamSet::new();
        aux_head.push_dense("out", cfg.feature_width, n_aux.max(1), &mut rng);
        let mut cur_head = ParamSet::new();
        cur_head.push_dense("out", cfg.feature_width, n_cur, &mut rng);
        ModelParams {
            extractor,
            aux_head,
            cur_head,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.value("l1.w").shape()[1]
    }

    pub fn feature_width(&self) -> usize {
        self.extractor.value("l2.w").shape()[0]
    }

    /// Replace a head with a freshly initialized one for `n_classes`.
    pub fn reset_head(params: &mut ParamSet, width: usize, n_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        *params = ParamSet::new();
        params.push_dense("out", width, n_classes, &mut rng);
    }

    pub fn zero_grad(&mut self) {
        self.extractor.zero_grad();
        self.aux_head.zero_grad();
        self.cur_head.zero_grad();
    }
}

/// Record the extractor on `g` for input `x`.
pub fn extractor_graph(g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
    let h = g.affine(x, bound.get("l1.w"), bound.get("l1.b"))?;
    let h = g.relu(h);
    let v = g.affine(h, bound.get("l2.w"), bound.get("l2.b"))?;
    Ok(g.relu(v))
}

/// Features `ν = f_F(x)` for a batch.
pub fn extract(extractor: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = extractor.bind(&mut g);
    let xv = g.input(x.clone());
    let v = extractor_graph(&mut g, &bound, xv)?;
    Ok(g.value(v).clone())
}

/// Mean cross-entropy of `head ∘ extractor` on one batch, recorded on `g`.
fn channel_loss(
    g: &mut Graph,
    extractor: &Bound,
    head: &Bound,
    x: &Tensor,
    y: &[usize],
) -> Result<Var> {
    let xv = g.input(x.clone());
    let v = extractor_graph(g, extractor, xv)?;
    let logits = g.affine(v, head.get("out.w"), head.get("out.b"))?;
    g.softmax_cross_entropy(logits, y)
}

/// Borrowed minibatch.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub y: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_aux: f64,
    pub loss_cur: f64,
    pub loss_total: f64,
}

/// Accumulate the gradient of `λ·L_aux + L_cur` into all three parameter
/// sets without updating them. Either channel may be absent, in which case
/// its loss is reported as 0 and contributes nothing.
pub fn accumulate_gradients(
    m: &mut ModelParams,
    aux: Option<Batch<'_>>,
    cur: Option<Batch<'_>>,
    lambda: f64,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let fb = m.extractor.bind(&mut g);
    let ab = m.aux_head.bind(&mut g);
    let cb = m.cur_head.bind(&mut g);
    let aux_loss = aux.map(|b| channel_loss(&mut g, &fb, &ab, b.x, b.y)).transpose()?;
    let cur_loss = cur.map(|b| channel_loss(&mut g, &fb, &cb, b.x, b.y)).transpose()?;
    let la = aux_loss.map_or(0.0, |v| g.value(v).item());
    let lc = cur_loss.map_or(0.0, |v| g.value(v).item());
    if !la.is_finite() || !lc.is_finite() {
        return Err(Error::Divergence(format!("loss is not finite (aux {la}, cur {lc})")));
    }
    let total = match (aux_loss, cur_loss) {
        (Some(a), Some(c)) => {
            let weighted = g.scale(a, lambda);
            Some(g.add(weighted, c)?)
        }
        (Some(a), None) => Some(g.scale(a, lambda)),
        (None, Some(c)) => Some(c),
        (None, None) => None,
    };
    if let Some(total) = total {
        let grads = g.backward(total);
        m.extractor.accumulate(&fb, &grads);
        if aux_loss.is_some() {
            m.aux_head.accumulate(&ab, &grads);
        }
        if cur_loss.is_some() {
            m.cur_head.accumulate(&cb, &grads);
        }
    }
    Ok((la, lc))
}

/// One joint update of extractor and both heads on a pair of batches.
pub fn joint_step(
    m: &mut ModelParams,
    aux: Batch<'_>,
    cur: Batch<'_>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepRecord> {
    if aux.y.is_empty() || cur.y.is_empty() {
        return Err(Error::Precondition("joint step needs two non-empty batches".into()));
    }
    m.zero_grad();
    let (la, lc) = accumulate_gradients(m, Some(aux), Some(cur), cfg.lambda)?;
    apply_step(m, cfg.learning_rate)?;
    Ok(StepRecord {
        step,
        loss_aux: la,
        loss_cur: lc,
        loss_total: cfg.lambda * la + lc,
    })
}

fn apply_step(m: &mut ModelParams, lr: f64) -> Result<()> {
    if !(m.extractor.grads_finite() && m.aux_head.grads_finite() && m.cur_head.grads_finite()) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    sgd_step(&mut m.extractor, lr)?;
    sgd_step(&mut m.aux_head, lr)?;
    sgd_step(&mut m.cur_head, lr)
}

/// Per-step losses of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tloss_aux\tloss_cur\tloss_total\n");
        for r in &self.steps {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.step, r.loss_aux, r.loss_cur, r.loss_total));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Parse {
                line: i + 1,
                message: "expected `step loss_aux loss_cur loss_total`".into(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
            steps.push(StepRecord {
                step: cols[0].parse().map_err(|_| bad())?,
                loss_aux: f(cols[1])?,
                loss_cur: f(cols[2])?,
                loss_total: f(cols[3])?,
            });
        }
        Ok(TrainHistory { steps })
    }
}

/// Epoch-wise shuffled minibatch schedule for one channel. Each channel owns
/// its own random stream so the current-task schedule does not depend on
/// whether an auxiliary channel is present.
struct Schedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    batch_size: usize,
}

impl Schedule {
    fn new(n: usize, batch_size: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Schedule {
            rng,
            order: (0..n).collect(),
            batch_size,
        }
    }

    fn shuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
    }

    fn n_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Batch `i` of the current epoch, modulo the number of batches.
    fn batch(&self, data: &Dataset, i: usize) -> (Tensor, Vec<usize>) {
        let i = i % self.n_batches();
        let idx = &self.order[i * self.batch_size..((i + 1) * self.batch_size).min(self.order.len())];
        let sub = data.subset(idx);
        (sub.features, sub.labels)
    }
}

const CUR_STREAM: u64 = 11;
const AUX_STREAM: u64 = 12;

fn check_widths(m: &ModelParams, sets: &[&Dataset]) -> Result<()> {
    for d in sets {
        if d.is_empty() {
            return Err(Error::Precondition("training set is empty".into()));
        }
        if d.width() != m.input_dim() {
            return Err(Error::Shape {
                op: "extractor input",
                left: vec![m.input_dim()],
                right: d.features.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Dual-channel training: every step pairs one auxiliary and one current
/// batch; the shorter channel restarts from its first batch within an epoch.
pub fn train_dual(m: &mut ModelParams, aux: &Dataset, cur: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    check_widths(m, &[aux, cur])?;
    let mut history = TrainHistory::default();
    let mut cur_sched = Schedule::new(cur.len(), cfg.batch_size, cfg.seed, CUR_STREAM);
    let mut aux_sched = Schedule::new(aux.len(), cfg.batch_size, cfg.seed, AUX_STREAM);
    for _ in 0..cfg.epochs {
        cur_sched.shuffle();
        aux_sched.shuffle();
        let steps = cur_sched.n_batches().max(aux_sched.n_batches());
        for i in 0..steps {
            let (xa, ya) = aux_sched.batch(aux, i);
            let (xc, yc) = cur_sched.batch(cur, i);
            let rec = joint_step(
                m,
                Batch { x: &xa, y: &ya },
                Batch { x: &xc, y: &yc },
                cfg,
                history.steps.len(),
            )?;
            history.steps.push(rec);
        }
    }
    Ok(history)
}

/// Fine-tuning on the current task alone.
pub fn train_baseline(m: &mut ModelParams, cur: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_single(m, cur, cfg, CUR_STREAM)
}

/// Plain supervised training of extractor and current head, used for the
/// pre-training stage on a pretext task.
pub fn pretrain(m: &mut ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_single(m, data, cfg, 13)
}

fn train_single(m: &mut ModelParams, cur: &Dataset, cfg: &TrainConfig, stream: u64) -> Result<TrainHistory> {
    cfg.validate()?;
    check_widths(m, &[cur])?;
    let mut history = TrainHistory::default();
    let mut sched = Schedule::new(cur.len(), cfg.batch_size, cfg.seed, stream);
    for _ in 0..cfg.epochs {
        sched.shuffle();
        for i in 0..sched.n_batches() {
            let (x, y) = sched.batch(cur, i);
            m.zero_grad();
            let (_, lc) = accumulate_gradients(m, None, Some(Batch { x: &x, y: &y }), 0.0)?;
            apply_step(m, cfg.learning_rate)?;
            history.steps.push(StepRecord {
                step: history.steps.len(),
                loss_aux: 0.0,
                loss_cur: lc,
                loss_total: lc,
            });
        }
    }
    Ok(history)
}
