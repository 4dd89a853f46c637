//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each, and exits nonzero if any failed.

use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use dualzsl::autodiff::checkpoint::{read_tensors, write_tensors};
use dualzsl::autodiff::{grad_check, ParamSet, Tensor};
use dualzsl::datagen::{export_benchmark, generate, import_benchmark};
use dualzsl::dataset::Dataset;
use dualzsl::dual_channel::{accumulate_gradients, joint_step, Batch, ModelParams, TrainConfig};
use dualzsl::eval::{harmonic_mean, improvement_rate};
use dualzsl::taxonomy::{select_auxiliary, Lineage, Rank, RelevanceLevel, Taxonomy};
use dualzsl::zsl_head::{vae_accumulate, VaeBatch, VaeConfig, VaeParams};
use dualzsl_cli::config::RunConfig;
use dualzsl_cli::pipeline::{run_regime, Regime, CHECKPOINT_FILE, HISTORY_FILE, REPORT_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// (label, As, Au, printed H)
const OWN_ROWS: [(&str, f64, f64, f64); 12] = [
    ("CUB fine-tuning", 68.4, 58.5, 63.1),
    ("AWA2 fine-tuning", 83.4, 52.0, 64.1),
    ("APY fine-tuning", 50.0, 31.8, 38.9),
    ("CUB low", 65.0, 59.9, 62.3),
    ("AWA2 low", 81.4, 55.1, 65.7),
    ("APY low", 47.8, 31.7, 38.1),
    ("CUB middle", 68.4, 60.6, 64.3),
    ("AWA2 middle", 84.2, 54.3, 66.0),
    ("APY middle", 52.9, 30.2, 38.4),
    ("CUB high", 64.0, 65.2, 64.6),
    ("AWA2 high", 79.8, 57.9, 67.1),
    ("APY high", 54.3, 32.3, 40.5),
];

// Rows quoted from other methods. Several were computed upstream from
// unrounded accuracies, so they are reported but do not gate.
const CITED_ROWS: [(&str, f64, f64, f64); 21] = [
    ("CMT CUB", 49.8, 7.2, 12.6),
    ("CMT AWA2", 90.0, 0.5, 1.0),
    ("CMT APY", 85.2, 1.4, 2.8),
    ("SJE CUB", 59.2, 23.5, 33.6),
    ("SJE AWA2", 73.9, 8.0, 14.4),
    ("SJE APY", 55.7, 3.7, 6.9),
    ("LATEM CUB", 57.3, 15.2, 24.0),
    ("LATEM AWA2", 77.3, 11.5, 20.0),
    ("LATEM APY", 73.0, 0.1, 0.2),
    ("ALE CUB", 62.8, 23.7, 34.4),
    ("ALE AWA2", 81.8, 14.0, 23.9),
    ("ALE APY", 73.7, 4.6, 8.7),
    ("GAZSL CUB", 61.3, 31.7, 41.8),
    ("GAZSL AWA2", 86.9, 35.4, 50.3),
    ("GAZSL APY", 78.6, 14.2, 24.0),
    ("f-CLSWGAN CUB", 57.7, 43.7, 49.7),
    ("f-CLSWGAN AWA2", 68.9, 52.1, 59.4),
    ("TCN CUB", 52.0, 52.6, 52.3),
    ("TCN AWA2", 65.8, 61.2, 63.4),
    ("TCN APY", 64.0, 24.1, 35.1),
    ("CADA-VAE CUB", 53.5, 51.6, 52.4),
];

fn table_arithmetic() -> Outcome {
    let misses: Vec<String> = OWN_ROWS
        .iter()
        .filter_map(|&(label, a, u, h)| {
            let got = harmonic_mean(a, u).unwrap();
            ((got - h).abs() > 0.05).then(|| format!("{label}: {got:.3} vs {h}"))
        })
        .collect();
    let cited_off: Vec<String> = CITED_ROWS
        .iter()
        .chain(&[("CADA-VAE AWA2", 75.0, 55.8, 63.9)])
        .filter_map(|&(label, a, u, h)| {
            let got = harmonic_mean(a, u).unwrap();
            ((got - h).abs() > 0.05).then(|| format!("{label} {got:.2}/{h}"))
        })
        .collect();
    println!("      info: cited rows off by more than 0.05: {}", cited_off.join(", "));
    outcome(
        misses.is_empty(),
        format!("{}/12 rows within ±0.05 {}", 12 - misses.len(), misses.join("; ")),
    )
}

fn improvement_fixtures() -> Outcome {
    let cases = [(64.6, 63.1, 2.4), (67.1, 64.1, 4.7), (40.5, 38.9, 4.1), (64.6, 52.4, 23.3), (67.1, 63.9, 5.0)];
    let got: Vec<f64> = cases.iter().map(|&(n, b, _)| improvement_rate(n, b).unwrap()).collect();
    let ok = cases.iter().zip(&got).all(|(c, g)| (g - c.2).abs() <= 0.05);
    let shown: Vec<String> = got.iter().map(|g| format!("{g:.1}")).collect();
    outcome(ok, format!("rates {}", shown.join(", ")))
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

// Nonzero biases keep hidden units away from the relu kink.
fn jitter_biases(sets: &mut [&mut ParamSet], rng: &mut ChaCha8Rng) {
    for s in sets.iter_mut() {
        for p in s.iter_mut().filter(|p| p.name.ends_with(".b")) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.2..0.8));
        }
    }
}

fn tiny_model(rng: &mut ChaCha8Rng) -> (ModelParams, Dataset, Dataset, TrainConfig) {
    let cfg = TrainConfig {
        hidden_width: 6,
        feature_width: 5,
        batch_size: 4,
        seed: 11,
        lambda: 0.7,
        ..TrainConfig::default()
    };
    let mut m = ModelParams::init(8, 3, 4, &cfg);
    jitter_biases(&mut [&mut m.extractor, &mut m.aux_head, &mut m.cur_head], rng);
    let aux = Dataset::new(gaussian(rng, 4, 8), vec![0, 1, 2, 1], 3).unwrap();
    let cur = Dataset::new(gaussian(rng, 4, 8), vec![3, 0, 2, 1], 4).unwrap();
    (m, aux, cur, cfg)
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (m, aux, cur, cfg) = tiny_model(&mut rng);
    let mut sets = [m.extractor.clone(), m.aux_head.clone(), m.cur_head.clone()];
    let dual = grad_check(&mut sets, 1e-6, |s| {
        let mut mm = ModelParams {
            extractor: s[0].clone(),
            aux_head: s[1].clone(),
            cur_head: s[2].clone(),
        };
        let (la, lc) = accumulate_gradients(
            &mut mm,
            Some(Batch { x: &aux.features, y: &aux.labels }),
            Some(Batch { x: &cur.features, y: &cur.labels }),
            cfg.lambda,
        )?;
        for (dst, src) in s.iter_mut().zip([&mm.extractor, &mm.aux_head, &mm.cur_head]) {
            *dst = src.clone();
        }
        Ok(cfg.lambda * la + lc)
    })
    .unwrap();

    let vcfg = VaeConfig {
        latent_width: 3,
        hidden_width: 6,
        ..VaeConfig::default()
    };
    let mut vae = VaeParams::init(8, 5, &vcfg);
    {
        let [a, b, c, d] = vae.sets_mut();
        jitter_biases(&mut [a, b, c, d], &mut rng);
    }
    let features = gaussian(&mut rng, 4, 8);
    let attrs = gaussian(&mut rng, 4, 5);
    let (nv, ns) = (gaussian(&mut rng, 4, 3), gaussian(&mut rng, 4, 3));
    let groups = [0, 1, 0, 1];
    let mut vsets: Vec<ParamSet> = vae.sets().into_iter().cloned().collect();
    let full = grad_check(&mut vsets, 1e-6, |s| {
        let mut p = vae.clone();
        for (dst, src) in p.sets_mut().into_iter().zip(s.iter()) {
            *dst = src.clone();
        }
        let batch = VaeBatch {
            features: &features,
            attrs: &attrs,
            groups: &groups,
            n_groups: 2,
            noise_visual: &nv,
            noise_semantic: &ns,
        };
        let loss = vae_accumulate(&mut p, &batch, &vcfg)?;
        for (dst, src) in s.iter_mut().zip(p.sets()) {
            *dst = src.clone();
        }
        Ok(loss.total)
    })
    .unwrap();
    outcome(
        dual < 1e-4 && full < 1e-4,
        format!("max relative error: dual-channel {dual:.2e}, VAE {full:.2e}"),
    )
}

fn additivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (m, aux, cur, cfg) = tiny_model(&mut rng);
    let (ab, cb) = (
        Batch { x: &aux.features, y: &aux.labels },
        Batch { x: &cur.features, y: &cur.labels },
    );
    let grad_alone = |aux: Option<Batch>, cur: Option<Batch>| {
        let mut mm = m.clone();
        mm.zero_grad();
        accumulate_gradients(&mut mm, aux, cur, 1.0).unwrap();
        mm.extractor.flat_grads()
    };
    let g_aux = grad_alone(Some(ab), None);
    let g_cur = grad_alone(None, Some(cb));
    // With a unit step, the update taken by joint_step is the gradient.
    let mut stepped = m.clone();
    let unit = TrainConfig {
        learning_rate: 1.0,
        ..cfg.clone()
    };
    joint_step(&mut stepped, ab, cb, &unit, 0).unwrap();
    let before = m.extractor.flat_values();
    let after = stepped.extractor.flat_values();
    let dev = (0..before.len())
        .map(|i| ((before[i] - after[i]) - (cfg.lambda * g_aux[i] + g_cur[i])).abs())
        .fold(0.0, f64::max);
    outcome(dev < 1e-10, format!("max |Δ| = {dev:.2e} over {} extractor scalars", before.len()))
}

fn forest(paths: &[[u8; 7]]) -> Taxonomy {
    let lineages = paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let names = std::array::from_fn(|r| {
                let prefix: Vec<String> = p[..7 - r].iter().map(u8::to_string).collect();
                format!("{}:{}", Rank::ALL[r].name(), prefix.join("."))
            });
            Lineage::new(format!("t{i}"), names).unwrap()
        })
        .collect();
    Taxonomy::from_lineages(lineages).unwrap()
}

fn taxonomy_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    let mut pairs = 0;
    while pairs < 1000 {
        let n = rng.random_range(4..50);
        let ps: Vec<[u8; 7]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0..3))).collect();
        let t = forest(&ps);
        for _ in 0..100 {
            let (a, b) = (format!("t{}", rng.random_range(0..n)), format!("t{}", rng.random_range(0..n)));
            let (la, lb) = (t.get(&a).unwrap(), t.get(&b).unwrap());
            let brute = Rank::ALL.into_iter().find(|&r| la.name(r) == lb.name(r));
            if t.kinship_rank(&a, &b).unwrap() != brute {
                mismatches += 1;
            }
            pairs += 1;
        }
    }
    let b = generate(&RunConfig::default().gen).unwrap();
    let mut checked = 0;
    let mut wrong = 0;
    for level in RelevanceLevel::ALL {
        let pool = b.pool_counts(level);
        let sel = select_auxiliary(&b.taxonomy, &b.split.seen, &pool, level, pool.len(), 1, 5).unwrap();
        for id in sel.ids() {
            checked += 1;
            if b.taxonomy.relevance_of(&b.split.seen, id).unwrap() != level {
                wrong += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && wrong == 0 && checked > 0,
        format!("{mismatches} mismatches over {pairs} pairs; {wrong} wrong levels over {checked} selected classes"),
    )
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn round_trips(tmp: &Path, checkpoint: &Path) -> Outcome {
    let b = generate(&RunConfig::default().gen).unwrap();
    let dir = tmp.join("roundtrip");
    export_benchmark(&b, &dir).unwrap();
    let back = import_benchmark(&dir).unwrap();
    let bench_ok = bits(&back.samples.features) == bits(&b.samples.features)
        && bits(&back.semantics.vectors) == bits(&b.semantics.vectors)
        && bits(&back.prototypes.vectors) == bits(&b.prototypes.vectors)
        && back.samples.labels == b.samples.labels
        && back.taxonomy == b.taxonomy
        && back.split == b.split;

    let Ok(bytes) = fs::read(checkpoint) else {
        return outcome(false, format!("no checkpoint at {}", checkpoint.display()));
    };
    let tensors = read_tensors(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    write_tensors(&mut again, &tensors).unwrap();
    let reread = read_tensors(again.as_slice()).unwrap();
    let ckpt_ok = again == bytes
        && reread.len() == tensors.len()
        && reread.iter().zip(&tensors).all(|(a, b)| a.0 == b.0 && a.1.shape() == b.1.shape() && bits(&a.1) == bits(&b.1));
    outcome(
        bench_ok && ckpt_ok,
        format!(
            "benchmark {} ({} samples), checkpoint {} ({} tensors)",
            if bench_ok { "exact" } else { "differs" },
            b.samples.labels.len(),
            if ckpt_ok { "exact" } else { "differs" },
            tensors.len()
        ),
    )
}

fn cli(tmp: &Path, args: &[&str]) -> bool {
    let status = Command::new(env!("CARGO_BIN_EXE_dualzsl"))
        .current_dir(tmp)
        .env("RUST_LOG", "warn")
        .env_remove("DUALZSL_CONFIG")
        .args(args)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    status.success()
}

fn determinism(tmp: &Path) -> Outcome {
    let t0 = Instant::now();
    if !cli(tmp, &["gen"]) {
        return outcome(false, "gen failed");
    }
    for out in ["rep-a", "rep-b"] {
        if !cli(tmp, &["run", "--regime", "high", "--seed", "3", "--out", out]) {
            return outcome(false, format!("run into {out} failed"));
        }
    }
    let same = |name: &str| fs::read(tmp.join("rep-a").join(name)).unwrap() == fs::read(tmp.join("rep-b").join(name)).unwrap();
    let ok = same(REPORT_FILE) && same(HISTORY_FILE) && same(CHECKPOINT_FILE);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        ok && secs < 120.0,
        format!("report, history and checkpoint {} across repeats, {secs:.0} s", if ok { "identical" } else { "differ" }),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn trends() -> (Outcome, Outcome) {
    let cfg = RunConfig::default();
    let b = generate(&cfg.gen).unwrap();
    let t0 = Instant::now();
    let mut h = vec![Vec::new(); 4];
    let mut fisher = vec![Vec::new(); 4];
    for &seed in &cfg.seeds {
        for (i, regime) in Regime::ALL.into_iter().enumerate() {
            let out = run_regime(&b, &cfg, regime, seed).unwrap();
            h[i].push(out.report.harmonic_mean);
            fisher[i].push(out.separability());
        }
        println!(
            "      seed {seed}: H {:.1} {:.1} {:.1} {:.1}  Fisher {:.3} {:.3} {:.3}",
            h[0].last().unwrap(),
            h[1].last().unwrap(),
            h[2].last().unwrap(),
            h[3].last().unwrap(),
            fisher[1].last().unwrap(),
            fisher[2].last().unwrap(),
            fisher[3].last().unwrap()
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    let m: Vec<f64> = h.iter().map(|v| median(v.clone())).collect();
    let (base, low, mid, high) = (m[0], m[1], m[2], m[3]);
    let trend_ok = base < high && low <= mid && mid <= high && high - base >= 2.0 && secs < 600.0 && cfg.seeds.len() >= 5;
    let n = cfg.seeds.len();
    let mono = (0..n).filter(|&k| fisher[1][k] < fisher[2][k] && fisher[2][k] < fisher[3][k]).count();
    (
        outcome(
            trend_ok,
            format!(
                "median H baseline {base:.1}, low {low:.1}, middle {mid:.1}, high {high:.1} over {n} seeds; gap {:.1}; {secs:.0} s",
                high - base
            ),
        ),
        outcome(mono * 5 >= 4 * n, format!("low < middle < high Fisher ratio in {mono} of {n} seeds")),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("{} {n}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "published table arithmetic", table_arithmetic());
    report(2, "improvement-rate fixtures", improvement_fixtures());
    report(3, "gradient correctness", gradient_checks());
    report(4, "gradient additivity", additivity());
    report(7, "taxonomy oracle equivalence", taxonomy_oracle());
    report(8, "determinism", determinism(tmp.path()));
    report(9, "format round-trips", round_trips(tmp.path(), &tmp.path().join("rep-a").join(CHECKPOINT_FILE)));
    let (trend, separation) = trends();
    report(5, "trend reproduction", trend);
    report(6, "separability trend", separation);

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
