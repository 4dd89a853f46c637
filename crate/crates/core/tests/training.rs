use dualzsl::autodiff::{ParamSet, Tensor};
use dualzsl::datagen::{generate, GenConfig, SyntheticBenchmark};
use dualzsl::dataset::Dataset;
use dualzsl::dual_channel::{train_baseline, ModelParams, TrainConfig};
use dualzsl::zsl_head::{
    alignment_distance, build_latent_trainset, predict, train_latent_classifier, train_vae, ClassifierConfig,
    LatentDraws, VaeConfig, VaeParams,
};

fn bench() -> SyntheticBenchmark {
    generate(&GenConfig::default()).unwrap()
}

fn unit_rms(mut d: Dataset) -> Dataset {
    let ms = d.features.data().iter().map(|v| v * v).sum::<f64>() / d.features.len() as f64;
    let s = ms.sqrt();
    d.features.data_mut().iter_mut().for_each(|v| *v /= s);
    d
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn fine_tuning_loss_falls_epoch_over_epoch() {
    let b = bench();
    let seen = b.samples.dataset_for(&b.split.seen).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 20,
        ..TrainConfig::default()
    };
    let mut m = ModelParams::init(b.feature_dim(), 1, seen.n_classes, &cfg);
    let h = train_baseline(&mut m, &seen, &cfg).unwrap();
    let per_epoch = seen.len().div_ceil(cfg.batch_size);
    assert_eq!(h.steps.len(), per_epoch * cfg.epochs);
    let epoch_means: Vec<f64> = h
        .steps
        .chunks(per_epoch)
        .map(|c| c.iter().map(|s| s.loss_cur).sum::<f64>() / c.len() as f64)
        .collect();
    // smoothed over three epochs, the loss never climbs
    let smooth: Vec<f64> = epoch_means.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{smooth:?}");
    assert!(epoch_means[cfg.epochs - 1] < 0.8 * epoch_means[0]);
}

#[test]
fn training_pulls_the_latent_distributions_together() {
    let b = bench();
    let seen = unit_rms(b.samples.dataset_for(&b.split.seen).unwrap());
    let attrs = b.semantics.gather(&b.split.seen).unwrap();
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let cfg = VaeConfig {
            epochs: 60,
            seed,
            ..VaeConfig::default()
        };
        let mut p = VaeParams::init(seen.width(), attrs.cols(), &cfg);
        before.push(alignment_distance(&p, &seen, &attrs).unwrap());
        train_vae(&mut p, &seen, &attrs, &cfg).unwrap();
        after.push(alignment_distance(&p, &seen, &attrs).unwrap());
    }
    assert!(median(after.clone()) < median(before.clone()), "{before:?} -> {after:?}");
}

fn dense(set: &ParamSet, layer: &str, x: &[f64]) -> Vec<f64> {
    let w = set.value(&format!("{layer}.w"));
    let b = set.value(&format!("{layer}.b"));
    (0..w.rows())
        .map(|o| b.data()[o] + (0..w.cols()).map(|i| w.get(o, i) * x[i]).sum::<f64>())
        .collect()
}

#[test]
fn predictions_match_a_hand_rolled_forward_pass() {
    let b = bench();
    let seen = unit_rms(b.samples.dataset_for(&b.split.seen[..6]).unwrap());
    let attrs = b.semantics.gather(&b.split.seen[..6]).unwrap();
    let vcfg = VaeConfig {
        epochs: 15,
        ..VaeConfig::default()
    };
    let mut vae = VaeParams::init(seen.width(), attrs.cols(), &vcfg);
    train_vae(&mut vae, &seen, &attrs, &vcfg).unwrap();
    let unseen = &b.split.unseen[..2];
    let seen_ids = b.split.seen[..6].to_vec();
    let semantics = dualzsl::dataset::SemanticTable {
        vectors: b.semantics.gather(&[seen_ids.clone(), unseen.to_vec()].concat()).unwrap(),
        class_ids: [seen_ids, unseen.to_vec()].concat(),
    };
    let latents = build_latent_trainset(&vae, &seen, &semantics, unseen, LatentDraws::uniform(4), 2).unwrap();
    let ccfg = ClassifierConfig {
        epochs: 10,
        ..ClassifierConfig::default()
    };
    let (clf, _) = train_latent_classifier(&latents, &ccfg).unwrap();

    let x = Tensor::from_rows(&(0..40).map(|i| seen.features.row(i * 5).to_vec()).collect::<Vec<_>>()).unwrap();
    let got = predict(&vae, &clf, &x).unwrap();
    let mut classes_hit = std::collections::HashSet::new();
    for (r, &g) in got.iter().enumerate() {
        let h: Vec<f64> = dense(&vae.visual_encoder, "hidden", x.row(r)).into_iter().map(|v| v.max(0.0)).collect();
        let mu = dense(&vae.visual_encoder, "mu", &h);
        let logits = dense(&clf, "out", &mu);
        let best = (0..logits.len()).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
        assert_eq!(g, best, "row {r}");
        classes_hit.insert(g);
    }
    assert!(classes_hit.len() > 1);
}
