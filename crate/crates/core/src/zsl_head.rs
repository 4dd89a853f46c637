//! Cross-aligned variational embedding for generalized zero-shot learning.
//!
//! Two variational autoencoders, one over visual features and one over class
//! attribute vectors, share a latent space. Training combines
//!
//! ```text
//! L = recon_v + recon_s + β·(KL_v + KL_s) + γ·(cross_v + cross_s) + δ·align
//! ```
//!
//! where the cross terms decode each modality from the other's latent and
//! `align` compares per-class latent means and standard deviations of the
//! two encoders. A linear softmax classifier is then trained on latents of
//! seen features and of unseen-class attributes, and test features are
//! classified through the visual encoder's mean.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{sgd_step, softmax_rows, Bound, Graph, ParamSet, Tensor, Var};
use crate::dataset::{Dataset, SemanticTable};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub latent_width: usize,
    pub hidden_width: usize,
    /// KL weight.
    pub beta: f64,
    /// Cross-reconstruction weight.
    pub gamma: f64,
    /// Distribution-alignment weight.
    pub delta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_width: 16,
            hidden_width: 32,
            beta: 0.5,
            gamma: 1.0,
            delta: 1.0,
            learning_rate: 0.001,
            epochs: 600,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub visual_encoder: ParamSet,
    pub visual_decoder: ParamSet,
    pub semantic_encoder: ParamSet,
    pub semantic_decoder: ParamSet,
    pub latent_width: usize,
}

impl VaeParams {
    pub fn init(feature_width: usize, attr_width: usize, cfg: &VaeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(21);
        let (h, l) = (cfg.hidden_width, cfg.latent_width);
        let encoder = |inp: usize, rng: &mut ChaCha8Rng| {
            let mut p = ParamSet::new();
            p.push_dense("hidden", inp, h, rng);
            p.push_dense("mu", h, l, rng);
            p.push_dense("logvar", h, l, rng);
            p
        };
        let visual_encoder = encoder(feature_width, &mut rng);
        let semantic_encoder = encoder(attr_width, &mut rng);
        let decoder = |out: usize, rng: &mut ChaCha8Rng| {
            let mut p = ParamSet::new();
            p.push_dense("hidden", l, h, rng);
            p.push_dense("out", h, out, rng);
            p
        };
        let visual_decoder = decoder(feature_width, &mut rng);
        let semantic_decoder = decoder(attr_width, &mut rng);
        VaeParams {
            visual_encoder,
            visual_decoder,
            semantic_encoder,
            semantic_decoder,
            latent_width: l,
        }
    }

    pub fn sets(&self) -> [&ParamSet; 4] {
        [
            &self.visual_encoder,
            &self.visual_decoder,
            &self.semantic_encoder,
            &self.semantic_decoder,
        ]
    }

    pub fn sets_mut(&mut self) -> [&mut ParamSet; 4] {
        [
            &mut self.visual_encoder,
            &mut self.visual_decoder,
            &mut self.semantic_encoder,
            &mut self.semantic_decoder,
        ]
    }

    pub fn zero_grad(&mut self) {
        for s in self.sets_mut() {
            s.zero_grad();
        }
    }
}

/// Encoder output for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

fn encoder_graph(g: &mut Graph, b: &Bound, x: Var) -> Result<(Var, Var)> {
    let h = g.affine(x, b.get("hidden.w"), b.get("hidden.b"))?;
    let h = g.relu(h);
    let mu = g.affine(h, b.get("mu.w"), b.get("mu.b"))?;
    let logvar = g.affine(h, b.get("logvar.w"), b.get("logvar.b"))?;
    Ok((mu, logvar))
}

fn decoder_graph(g: &mut Graph, b: &Bound, z: Var) -> Result<Var> {
    let h = g.affine(z, b.get("hidden.w"), b.get("hidden.b"))?;
    let h = g.relu(h);
    g.affine(h, b.get("out.w"), b.get("out.b"))
}

/// `z = μ + exp(½·logvar) ⊙ ε`.
fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, noise: Var) -> Result<(Var, Var)> {
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let spread = g.mul(std, noise)?;
    Ok((g.add(mu, spread)?, std))
}

/// Encode a batch with externally supplied standard-normal noise.
pub fn encode(encoder: &ParamSet, v: &Tensor, noise: &Tensor) -> Result<LatentCode> {
    let mut g = Graph::new();
    let b = encoder.bind(&mut g);
    let x = g.input(v.clone());
    let (mu, logvar) = encoder_graph(&mut g, &b, x)?;
    let eps = g.input(noise.clone());
    let (z, _) = reparameterize(&mut g, mu, logvar, eps)?;
    Ok(LatentCode {
        mu: g.value(mu).clone(),
        logvar: g.value(logvar).clone(),
        z: g.value(z).clone(),
    })
}

/// Encoder means only.
pub fn encode_mean(encoder: &ParamSet, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = encoder.bind(&mut g);
    let x = g.input(v.clone());
    let (mu, _) = encoder_graph(&mut g, &b, x)?;
    Ok(g.value(mu).clone())
}

/// `Σ ½(exp(logvar) + μ² − 1 − logvar) / n`: KL to a standard normal,
/// summed over latent dimensions and averaged over the batch.
fn kl_graph(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let n = g.value(mu).rows() as f64;
    let var = g.exp(logvar);
    let mu2 = g.mul(mu, mu)?;
    let t = g.add(var, mu2)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -1.0);
    let s = g.sum(t);
    Ok(g.scale(s, 0.5 / n))
}

fn sq_error_graph(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let n = g.value(pred).rows() as f64;
    let d = g.sub(pred, target)?;
    let s = g.sum_squares(d)?;
    Ok(g.scale(s, 1.0 / n))
}

/// Component losses of one VAE step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VaeLoss {
    pub recon_visual: f64,
    pub recon_semantic: f64,
    pub kl: f64,
    pub cross: f64,
    pub align: f64,
    pub total: f64,
}

impl VaeLoss {
    pub fn is_finite(&self) -> bool {
        [self.recon_visual, self.recon_semantic, self.kl, self.cross, self.align, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Inputs of one VAE step. `attrs` holds the class attribute vector of each
/// visual row, `groups` a compact class index per row, and the noise tensors
/// one standard-normal draw per latent coordinate.
pub struct VaeBatch<'a> {
    pub features: &'a Tensor,
    pub attrs: &'a Tensor,
    pub groups: &'a [usize],
    pub n_groups: usize,
    pub noise_visual: &'a Tensor,
    pub noise_semantic: &'a Tensor,
}

/// Record the full loss and accumulate its gradient into all four networks.
pub fn vae_accumulate(p: &mut VaeParams, batch: &VaeBatch<'_>, cfg: &VaeConfig) -> Result<VaeLoss> {
    if batch.features.rows() != batch.attrs.rows() || batch.groups.len() != batch.features.rows() {
        return Err(Error::Shape {
            op: "vae batch",
            left: batch.features.shape().to_vec(),
            right: batch.attrs.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let bounds: Vec<Bound> = p.sets().iter().map(|s| s.bind(&mut g)).collect();
    let (ve, vd, se, sd) = (&bounds[0], &bounds[1], &bounds[2], &bounds[3]);
    let x = g.input(batch.features.clone());
    let a = g.input(batch.attrs.clone());
    let ev = g.input(batch.noise_visual.clone());
    let es = g.input(batch.noise_semantic.clone());

    let (mu_v, lv_v) = encoder_graph(&mut g, ve, x)?;
    let (mu_s, lv_s) = encoder_graph(&mut g, se, a)?;
    let (z_v, std_v) = reparameterize(&mut g, mu_v, lv_v, ev)?;
    let (z_s, std_s) = reparameterize(&mut g, mu_s, lv_s, es)?;

    let x_from_v = decoder_graph(&mut g, vd, z_v)?;
    let a_from_s = decoder_graph(&mut g, sd, z_s)?;
    let recon_v = sq_error_graph(&mut g, x_from_v, x)?;
    let recon_s = sq_error_graph(&mut g, a_from_s, a)?;

    let kl_v = kl_graph(&mut g, mu_v, lv_v)?;
    let kl_s = kl_graph(&mut g, mu_s, lv_s)?;
    let kl = g.add(kl_v, kl_s)?;

    let x_from_s = decoder_graph(&mut g, vd, z_s)?;
    let a_from_v = decoder_graph(&mut g, sd, z_v)?;
    let cross_v = sq_error_graph(&mut g, x_from_s, x)?;
    let cross_s = sq_error_graph(&mut g, a_from_v, a)?;
    let cross = g.add(cross_v, cross_s)?;

    let align = {
        let mv = g.segment_mean(mu_v, batch.groups, batch.n_groups)?;
        let ms = g.segment_mean(mu_s, batch.groups, batch.n_groups)?;
        let sv = g.segment_mean(std_v, batch.groups, batch.n_groups)?;
        let ss = g.segment_mean(std_s, batch.groups, batch.n_groups)?;
        let dm = g.sub(mv, ms)?;
        let ds = g.sub(sv, ss)?;
        let a1 = g.sum_squares(dm)?;
        let a2 = g.sum_squares(ds)?;
        let both = g.add(a1, a2)?;
        g.scale(both, 1.0 / batch.n_groups as f64)
    };

    let recon = g.add(recon_v, recon_s)?;
    let kl_w = g.scale(kl, cfg.beta);
    let cross_w = g.scale(cross, cfg.gamma);
    let align_w = g.scale(align, cfg.delta);
    let total = g.add(recon, kl_w)?;
    let total = g.add(total, cross_w)?;
    let total = g.add(total, align_w)?;

    let loss = VaeLoss {
        recon_visual: g.value(recon_v).item(),
        recon_semantic: g.value(recon_s).item(),
        kl: g.value(kl).item(),
        cross: g.value(cross).item(),
        align: g.value(align).item(),
        total: g.value(total).item(),
    };
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("VAE loss is not finite: {loss:?}")));
    }
    let grads = g.backward(total);
    for (set, b) in p.sets_mut().into_iter().zip(&bounds) {
        set.accumulate(b, &grads);
    }
    Ok(loss)
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("noise shape")
}

/// Compact the labels of a batch to `0..n_groups` in order of first appearance.
fn compact_groups(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut seen: Vec<usize> = Vec::new();
    let groups = labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(i) => i,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect();
    (groups, seen.len())
}

/// One SGD step on all four networks. `class_attrs` holds one attribute row
/// per class index used in `labels`.
pub fn vae_train_step(
    p: &mut VaeParams,
    features: &Tensor,
    labels: &[usize],
    class_attrs: &Tensor,
    cfg: &VaeConfig,
    rng: &mut impl Rng,
) -> Result<VaeLoss> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_attrs.rows()) {
        return Err(Error::Coverage(format!("class {bad} has no semantic vector")));
    }
    let attrs = class_attrs.select_rows(labels);
    let (groups, n_groups) = compact_groups(labels);
    let n = labels.len();
    let noise_visual = normal_tensor(rng, n, p.latent_width);
    let noise_semantic = normal_tensor(rng, n, p.latent_width);
    p.zero_grad();
    let loss = vae_accumulate(
        p,
        &VaeBatch {
            features,
            attrs: &attrs,
            groups: &groups,
            n_groups,
            noise_visual: &noise_visual,
            noise_semantic: &noise_semantic,
        },
        cfg,
    )?;
    for set in p.sets_mut() {
        sgd_step(set, cfg.learning_rate)?;
    }
    Ok(loss)
}

/// Train on seen-class features; returns the epoch-mean losses.
pub fn train_vae(p: &mut VaeParams, seen: &Dataset, class_attrs: &Tensor, cfg: &VaeConfig) -> Result<Vec<VaeLoss>> {
    if seen.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Precondition("VAE training needs data and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(22);
    let mut order: Vec<usize> = (0..seen.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = VaeLoss::default();
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = seen.subset(chunk);
            let l = vae_train_step(p, &b.features, &b.labels, class_attrs, cfg, &mut rng)?;
            sum.recon_visual += l.recon_visual;
            sum.recon_semantic += l.recon_semantic;
            sum.kl += l.kl;
            sum.cross += l.cross;
            sum.align += l.align;
            sum.total += l.total;
            batches += 1.0;
        }
        epochs.push(VaeLoss {
            recon_visual: sum.recon_visual / batches,
            recon_semantic: sum.recon_semantic / batches,
            kl: sum.kl / batches,
            cross: sum.cross / batches,
            align: sum.align / batches,
            total: sum.total / batches,
        });
    }
    Ok(epochs)
}

/// Mean over classes of `‖μ̄_v − μ_s‖² + ‖σ̄_v − σ_s‖²`, where the visual
/// statistics are averaged over that class's features.
pub fn alignment_distance(p: &VaeParams, features: &Dataset, class_attrs: &Tensor) -> Result<f64> {
    let zeros_v = Tensor::zeros(&[features.len(), p.latent_width]);
    let vis = encode(&p.visual_encoder, &features.features, &zeros_v)?;
    let zeros_s = Tensor::zeros(&[class_attrs.rows(), p.latent_width]);
    let sem = encode(&p.semantic_encoder, class_attrs, &zeros_s)?;
    let l = p.latent_width;
    let counts = features.class_counts();
    let mut mean_mu = vec![0.0; features.n_classes * l];
    let mut mean_sd = vec![0.0; features.n_classes * l];
    for (i, &c) in features.labels.iter().enumerate() {
        for j in 0..l {
            mean_mu[c * l + j] += vis.mu.get(i, j) / counts[c] as f64;
            mean_sd[c * l + j] += (0.5 * vis.logvar.get(i, j)).exp() / counts[c] as f64;
        }
    }
    let mut total = 0.0;
    let mut classes = 0.0;
    for c in (0..features.n_classes).filter(|&c| counts[c] > 0) {
        for j in 0..l {
            total += (mean_mu[c * l + j] - sem.mu.get(c, j)).powi(2);
            total += (mean_sd[c * l + j] - (0.5 * sem.logvar.get(c, j)).exp()).powi(2);
        }
        classes += 1.0;
    }
    Ok(total / classes)
}

/// Number of latent samples drawn per seen feature and per unseen class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentDraws {
    pub per_seen_feature: usize,
    pub per_unseen_class: usize,
}

impl LatentDraws {
    pub fn uniform(n: usize) -> Self {
        LatentDraws {
            per_seen_feature: n,
            per_unseen_class: n,
        }
    }
}

/// Labeled latents for the final classifier. Seen classes keep their labels
/// `0..seen.n_classes`; unseen class `i` of `unseen_ids` gets label
/// `seen.n_classes + i`.
pub fn build_latent_trainset(
    p: &VaeParams,
    seen: &Dataset,
    semantics: &SemanticTable,
    unseen_ids: &[String],
    draws: LatentDraws,
    seed: u64,
) -> Result<Dataset> {
    if draws.per_seen_feature == 0 || draws.per_unseen_class == 0 {
        return Err(Error::Precondition("at least one draw per item is required".into()));
    }
    let unseen_attrs = semantics.gather(unseen_ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(23);
    let l = p.latent_width;
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();

    let seen_rep: Vec<usize> = (0..seen.len()).flat_map(|i| std::iter::repeat_n(i, draws.per_seen_feature)).collect();
    if !seen_rep.is_empty() {
        let x = seen.features.select_rows(&seen_rep);
        let noise = normal_tensor(&mut rng, x.rows(), l);
        let code = encode(&p.visual_encoder, &x, &noise)?;
        rows.extend_from_slice(code.z.data());
        labels.extend(seen_rep.iter().map(|&i| seen.labels[i]));
    }
    let unseen_rep: Vec<usize> = (0..unseen_ids.len())
        .flat_map(|i| std::iter::repeat_n(i, draws.per_unseen_class))
        .collect();
    if !unseen_rep.is_empty() {
        let a = unseen_attrs.select_rows(&unseen_rep);
        let noise = normal_tensor(&mut rng, a.rows(), l);
        let code = encode(&p.semantic_encoder, &a, &noise)?;
        rows.extend_from_slice(code.z.data());
        labels.extend(unseen_rep.iter().map(|&i| seen.n_classes + i));
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, l], rows)?, labels, seen.n_classes + unseen_ids.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            learning_rate: 0.1,
            epochs: 300,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Softmax regression over all seen and unseen classes. Returns the
/// classifier and its epoch-mean training losses.
pub fn train_latent_classifier(latents: &Dataset, cfg: &ClassifierConfig) -> Result<(ParamSet, Vec<f64>)> {
    if let Some(c) = latents.class_counts().iter().position(|&n| n == 0) {
        return Err(Error::Coverage(format!("class {c} has no latent samples")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(24);
    let mut clf = ParamSet::new();
    clf.push_dense("out", latents.width(), latents.n_classes, &mut rng);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = latents.subset(chunk);
            let mut g = Graph::new();
            let bound = clf.bind(&mut g);
            let x = g.input(b.features);
            let logits = g.affine(x, bound.get("out.w"), bound.get("out.b"))?;
            let loss = g.softmax_cross_entropy(logits, &b.labels)?;
            let l = g.value(loss).item();
            if !l.is_finite() {
                return Err(Error::Divergence(format!("classifier loss is {l}")));
            }
            let grads = g.backward(loss);
            clf.accumulate(&bound, &grads);
            sgd_step(&mut clf, cfg.learning_rate)?;
            sum += l;
            batches += 1.0;
        }
        losses.push(sum / batches);
    }
    Ok((clf, losses))
}

/// Logits of the latent classifier.
pub fn classifier_logits(clf: &ParamSet, latents: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = clf.bind(&mut g);
    let x = g.input(latents.clone());
    let logits = g.affine(x, b.get("out.w"), b.get("out.b"))?;
    Ok(g.value(logits).clone())
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Classify features through the visual encoder mean and the classifier.
pub fn predict(p: &VaeParams, clf: &ParamSet, features: &Tensor) -> Result<Vec<usize>> {
    let mu = encode_mean(&p.visual_encoder, features)?;
    Ok(argmax_rows(&classifier_logits(clf, &mu)?))
}

/// Class posteriors for features, for diagnostics.
pub fn predict_proba(p: &VaeParams, clf: &ParamSet, features: &Tensor) -> Result<Tensor> {
    let mu = encode_mean(&p.visual_encoder, features)?;
    Ok(softmax_rows(&classifier_logits(clf, &mu)?))
}
