//! Synthetic taxonomy-structured zero-shot benchmarks.
//!
//! A seven-rank tree is grown from a virtual root. Every node draws its
//! prototype as its parent's prototype plus a Gaussian drift of expected
//! squared norm `scale(rank)²`, confined to a low-dimensional subspace owned
//! by the parent. Child subspaces are perturbed copies of the parent's, so
//! close relatives vary along similar directions while different kingdoms
//! vary along unrelated ones. Leaves are classes; class attributes are a
//! fixed random linear image of the prototype plus independent noise, and
//! samples are the prototype plus isotropic noise.
//!
//! The zero-shot task lives inside one class-rank node: seen, unseen and the
//! high-relevance pool are leaves of that node, the middle pool comes from
//! other class-rank nodes of the same kingdom and the low pool from other
//! kingdoms.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::dataset::{Dataset, SemanticTable};
use crate::error::{Error, Result};
use crate::taxonomy::{load_taxonomy, Lineage, Rank, RelevanceLevel, Taxonomy};

/// Generator settings. Per-rank arrays are indexed by [`Rank::index`]
/// (species first).
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Children per node at each rank; the kingdom entry is the number of kingdoms.
    pub branching: [usize; 7],
    pub feature_dim: usize,
    pub attr_dim: usize,
    /// Expected norm of the prototype drift a node takes from its parent.
    pub diffusion_scales: [f64; 7],
    /// Dimension of each node's drift subspace.
    pub subspace_dim: usize,
    /// How far a child's drift subspace tilts away from its parent's.
    pub subspace_tilt: [f64; 7],
    /// Within-class standard deviation per feature coordinate.
    pub sample_noise: f64,
    /// Standard deviation of the class attribute noise per coordinate.
    pub attr_noise: f64,
    pub samples_per_class: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    /// Candidates in each auxiliary pool.
    pub n_aux: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            //          S  G  F  O  C  P  K
            branching: [2, 4, 4, 4, 2, 2, 2],
            feature_dim: 64,
            attr_dim: 24,
            diffusion_scales: [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0],
            subspace_dim: 8,
            subspace_tilt: [0.0, 0.2, 0.2, 0.4, 0.4, 0.4, 0.0],
            sample_noise: 1.0,
            attr_noise: 0.05,
            samples_per_class: 40,
            n_seen: 20,
            n_unseen: 5,
            n_aux: 50,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 || self.attr_dim < 2 {
            return Err(Error::Config("feature_dim and attr_dim must be at least 2".into()));
        }
        if self.subspace_dim == 0 || self.subspace_dim > self.feature_dim {
            return Err(Error::Config(format!(
                "subspace_dim must lie in 1..={}",
                self.feature_dim
            )));
        }
        if self.branching.contains(&0) {
            return Err(Error::Capacity("every rank needs at least one child per node".into()));
        }
        let finite_nonneg = |v: &f64| v.is_finite() && *v >= 0.0;
        if !self.diffusion_scales.iter().all(finite_nonneg) || !self.subspace_tilt.iter().all(finite_nonneg) {
            return Err(Error::Config("diffusion scales and tilts must be finite and nonnegative".into()));
        }
        if !(self.sample_noise > 0.0 && self.sample_noise.is_finite()) || !finite_nonneg(&self.attr_noise) {
            return Err(Error::Config("sample_noise must be positive and attr_noise nonnegative".into()));
        }
        if self.samples_per_class == 0 || self.n_seen == 0 || self.n_unseen == 0 {
            return Err(Error::Config("samples_per_class, n_seen and n_unseen must be positive".into()));
        }
        Ok(())
    }
}

/// Disjoint class sets of a benchmark.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub aux_low: Vec<String>,
    pub aux_middle: Vec<String>,
    pub aux_high: Vec<String>,
}

const SECTIONS: [&str; 5] = ["seen", "unseen", "aux_low", "aux_middle", "aux_high"];

impl Split {
    fn sections(&self) -> [&Vec<String>; 5] {
        [&self.seen, &self.unseen, &self.aux_low, &self.aux_middle, &self.aux_high]
    }

    fn sections_mut(&mut self) -> [&mut Vec<String>; 5] {
        [
            &mut self.seen,
            &mut self.unseen,
            &mut self.aux_low,
            &mut self.aux_middle,
            &mut self.aux_high,
        ]
    }

    pub fn aux_pool(&self, level: RelevanceLevel) -> &[String] {
        match level {
            RelevanceLevel::Low => &self.aux_low,
            RelevanceLevel::Middle => &self.aux_middle,
            RelevanceLevel::High => &self.aux_high,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.sections().into_iter().flatten()
    }

    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for (name, ids) in SECTIONS.iter().zip(self.sections()) {
            out.push_str(&format!("[{name}]\n"));
            for id in ids {
                out.push_str(id);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Split> {
        let mut split = Split::default();
        let mut current: Option<usize> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(SECTIONS.iter().position(|s| *s == name).ok_or_else(|| Error::Parse {
                    line: i + 1,
                    message: format!("unknown section `{name}`"),
                })?);
                continue;
            }
            let Some(sec) = current else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "class id before any section header".into(),
                });
            };
            split.sections_mut()[sec].push(line.to_string());
        }
        Ok(split)
    }

    /// Pairwise disjointness of the five sets.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for (name, ids) in SECTIONS.iter().zip(self.sections()) {
            for id in ids {
                if let Some(prev) = owner.insert(id, name) {
                    return Err(Error::Precondition(format!(
                        "class `{id}` appears in both [{prev}] and [{name}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Labeled feature rows keyed by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub labels: Vec<String>,
    pub features: Tensor,
}

impl Samples {
    pub fn rows_of<'a>(&'a self, class_id: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.labels.iter().enumerate().filter(move |(_, l)| *l == class_id).map(|(i, _)| i)
    }

    /// Rows of `classes`, relabeled by position in `classes`.
    pub fn dataset_for(&self, classes: &[String]) -> Result<Dataset> {
        let lookup: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(&k) = lookup.get(l.as_str()) {
                rows.push(i);
                labels.push(k);
            }
        }
        Dataset::new(self.features.select_rows(&rows), labels, classes.len())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\t{}\n", self.labels.len(), self.features.cols());
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(l);
            for v in self.features.row(i) {
                out.push_str(&format!("\t{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Samples> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(path, "empty samples file"))?;
        let (n, d) = header
            .split_once('\t')
            .and_then(|(n, d)| Some((n.parse::<usize>().ok()?, d.parse::<usize>().ok()?)))
            .ok_or_else(|| Error::format(path, "header must be `n<TAB>feature_dim`"))?;
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            labels.push(cols.next().unwrap_or_default().to_string());
            let before = data.len();
            for c in cols {
                data.push(
                    c.parse::<f64>()
                        .map_err(|_| Error::format(path, format!("line {}: bad number `{c}`", i + 2)))?,
                );
            }
            if data.len() - before != d {
                return Err(Error::format(
                    path,
                    format!("line {}: expected {d} features, found {}", i + 2, data.len() - before),
                ));
            }
        }
        if labels.len() != n {
            return Err(Error::format(path, format!("header promises {n} rows, found {}", labels.len())));
        }
        Ok(Samples {
            labels,
            features: Tensor::new(vec![n, d], data)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBenchmark {
    pub taxonomy: Taxonomy,
    /// Class mean in feature space, one row per taxonomy lineage.
    pub prototypes: SemanticTable,
    pub semantics: SemanticTable,
    pub split: Split,
    pub samples: Samples,
}

impl SyntheticBenchmark {
    pub fn feature_dim(&self) -> usize {
        self.samples.features.cols()
    }

    /// (class id, sample count) for every class of an auxiliary pool.
    pub fn pool_counts(&self, level: RelevanceLevel) -> Vec<(String, usize)> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for l in &self.samples.labels {
            *counts.entry(l).or_default() += 1;
        }
        self.split
            .aux_pool(level)
            .iter()
            .map(|c| (c.clone(), counts.get(c.as_str()).copied().unwrap_or(0)))
            .collect()
    }

    fn validate(&self, dir: &Path) -> Result<()> {
        self.split.check_disjoint()?;
        let members: HashSet<&str> = self.split.all().map(String::as_str).collect();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for l in &self.samples.labels {
            if !members.contains(l.as_str()) {
                return Err(Error::format(
                    dir.join(SAMPLES_FILE),
                    format!("sample label `{l}` is not in the split manifest"),
                ));
            }
            *counts.entry(l).or_default() += 1;
        }
        for id in self.split.all() {
            if !counts.contains_key(id.as_str()) {
                return Err(Error::Coverage(format!("class `{id}` has no samples")));
            }
            if self.semantics.row_of(id).is_none() {
                return Err(Error::Coverage(format!("class `{id}` has no semantic vector")));
            }
        }
        for id in self.split.seen.iter().chain(&self.split.unseen) {
            if !self.taxonomy.contains(id) {
                return Err(Error::Coverage(format!("class `{id}` is missing from the taxonomy")));
            }
        }
        Ok(())
    }
}

pub const TAXONOMY_FILE: &str = "taxonomy.tsv";
pub const SAMPLES_FILE: &str = "samples.tsv";
pub const ATTRIBUTES_FILE: &str = "attributes.tsv";
pub const PROTOTYPES_FILE: &str = "prototypes.tsv";
pub const SPLIT_FILE: &str = "split.txt";

struct Node {
    path: Vec<usize>,
    proto: Vec<f64>,
    basis: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

// Modified Gram-Schmidt; columns that collapse are replaced by fresh draws.
fn orthonormalize(mut cols: Vec<Vec<f64>>, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let dim = cols.first().map_or(0, Vec::len);
    for i in 0..cols.len() {
        loop {
            for j in 0..i {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let prev = cols[j].clone();
                for (a, b) in cols[i].iter_mut().zip(&prev) {
                    *a -= dot * b;
                }
            }
            let norm = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[i].iter_mut().for_each(|v| *v /= norm);
                break;
            }
            cols[i] = gaussian_vec(rng, dim, 1.0);
        }
    }
    cols
}

fn node_name(path: &[usize]) -> String {
    const LETTERS: [char; 7] = ['K', 'P', 'C', 'O', 'F', 'G', 'S'];
    path.iter().zip(LETTERS).map(|(i, c)| format!("{c}{i}")).collect()
}

/// Generate a benchmark. Deterministic in `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let k = cfg.subspace_dim;
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s);
        rng
    };

    // Grow the tree top-down; rank index 6 (kingdom) first.
    let mut tree_rng = stream(0);
    let identity: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut level = vec![Node {
        path: Vec::new(),
        proto: vec![0.0; d],
        basis: identity,
    }];
    let mut ancestors: Vec<Vec<Node>> = Vec::new();
    for rank in Rank::ALL.iter().rev() {
        let r = rank.index();
        let scale = cfg.diffusion_scales[r];
        let tilt = cfg.subspace_tilt[r];
        let mut next = Vec::new();
        for parent in &level {
            let per_axis = scale / (parent.basis.len() as f64).sqrt();
            for c in 0..cfg.branching[r] {
                let coeffs = gaussian_vec(&mut tree_rng, parent.basis.len(), per_axis);
                let mut proto = parent.proto.clone();
                for (b, g) in parent.basis.iter().zip(&coeffs) {
                    for (p, v) in proto.iter_mut().zip(b) {
                        *p += g * v;
                    }
                }
                let basis = if *rank == Rank::Species {
                    Vec::new()
                } else if *rank == Rank::Kingdom {
                    orthonormalize((0..k).map(|_| gaussian_vec(&mut tree_rng, d, 1.0)).collect(), &mut tree_rng)
                } else {
                    let tilted = parent
                        .basis
                        .iter()
                        .map(|b| {
                            let noise = gaussian_vec(&mut tree_rng, d, tilt / (d as f64).sqrt());
                            b.iter().zip(noise).map(|(x, n)| x + n).collect()
                        })
                        .collect();
                    orthonormalize(tilted, &mut tree_rng)
                };
                let mut path = parent.path.clone();
                path.push(c);
                next.push(Node { path, proto, basis });
            }
        }
        ancestors.push(std::mem::replace(&mut level, next));
    }
    let leaves = level;

    // Choose the task's class-rank node and the five class sets.
    let mut split_rng = stream(1);
    let class_depth = Rank::ALL.len() - Rank::Class.index(); // path prefix length of a class node
    let mut by_class: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
    for (i, leaf) in leaves.iter().enumerate() {
        by_class.entry(leaf.path[..class_depth].to_vec()).or_default().push(i);
    }
    let mut class_nodes: Vec<Vec<usize>> = by_class.keys().cloned().collect();
    class_nodes.sort();
    let target_need = cfg.n_seen + cfg.n_unseen + cfg.n_aux;
    let feasible: Vec<&Vec<usize>> = class_nodes
        .iter()
        .filter(|node| {
            let same_kingdom = leaves
                .iter()
                .filter(|l| l.path[0] == node[0] && l.path[..class_depth] != node[..])
                .count();
            let other_kingdom = leaves.iter().filter(|l| l.path[0] != node[0]).count();
            by_class[*node].len() >= target_need && same_kingdom >= cfg.n_aux && other_kingdom >= cfg.n_aux
        })
        .collect();
    let Some(&target) = feasible.choose(&mut split_rng) else {
        return Err(Error::Capacity(format!(
            "no class-rank node has {target_need} leaves with {} same-kingdom and {} other-kingdom leaves to spare",
            cfg.n_aux, cfg.n_aux
        )));
    };
    let mut inside = by_class[target].clone();
    inside.shuffle(&mut split_rng);
    let mut middle: Vec<usize> = (0..leaves.len())
        .filter(|&i| leaves[i].path[0] == target[0] && leaves[i].path[..class_depth] != target[..])
        .collect();
    middle.shuffle(&mut split_rng);
    let mut low: Vec<usize> = (0..leaves.len()).filter(|&i| leaves[i].path[0] != target[0]).collect();
    low.shuffle(&mut split_rng);

    let seen_idx = &inside[..cfg.n_seen];
    let unseen_idx = &inside[cfg.n_seen..cfg.n_seen + cfg.n_unseen];
    let high_idx = &inside[cfg.n_seen + cfg.n_unseen..target_need];
    let middle_idx = &middle[..cfg.n_aux];
    let low_idx = &low[..cfg.n_aux];

    let mut used: Vec<usize> = [seen_idx, unseen_idx, low_idx, middle_idx, high_idx].concat();
    used.sort_unstable();
    let id_of = |i: usize| format!("t{i:04}");
    let ids = |idx: &[usize]| idx.iter().map(|&i| id_of(i)).collect::<Vec<_>>();
    let split = Split {
        seen: ids(seen_idx),
        unseen: ids(unseen_idx),
        aux_low: ids(low_idx),
        aux_middle: ids(middle_idx),
        aux_high: ids(high_idx),
    };

    let lineages = used
        .iter()
        .map(|&i| {
            let path = &leaves[i].path;
            // names[rank] is the name of the path prefix ending at that rank
            let names: [String; 7] = std::array::from_fn(|r| node_name(&path[..Rank::ALL.len() - r]));
            Lineage::new(id_of(i), names)
        })
        .collect::<Result<Vec<_>>>()?;
    let taxonomy = Taxonomy::from_lineages(lineages)?;

    // Attributes: fixed random linear image of the prototype plus noise.
    let mut attr_rng = stream(2);
    let projection: Vec<Vec<f64>> = (0..cfg.attr_dim)
        .map(|_| gaussian_vec(&mut attr_rng, d, 1.0 / (cfg.attr_dim as f64).sqrt()))
        .collect();
    let class_ids: Vec<String> = used.iter().map(|&i| id_of(i)).collect();
    let proto_rows: Vec<Vec<f64>> = used.iter().map(|&i| leaves[i].proto.clone()).collect();
    let attr_rows: Vec<Vec<f64>> = proto_rows
        .iter()
        .map(|p| {
            projection
                .iter()
                .map(|row| {
                    let dot: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                    dot + cfg.attr_noise * attr_rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        })
        .collect();

    // Samples: one substream per class so classes are independent of order.
    let mut labels = Vec::with_capacity(used.len() * cfg.samples_per_class);
    let mut data = Vec::with_capacity(used.len() * cfg.samples_per_class * d);
    for (&leaf, (id, proto)) in used.iter().zip(class_ids.iter().zip(&proto_rows)) {
        let mut rng = stream(1000 + leaf as u64);
        for _ in 0..cfg.samples_per_class {
            labels.push(id.clone());
            data.extend(proto.iter().map(|p| p + cfg.sample_noise * rng.sample::<f64, _>(StandardNormal)));
        }
    }
    let n = labels.len();

    Ok(SyntheticBenchmark {
        taxonomy,
        prototypes: SemanticTable {
            class_ids: class_ids.clone(),
            vectors: Tensor::from_rows(&proto_rows)?,
        },
        semantics: SemanticTable {
            class_ids,
            vectors: Tensor::from_rows(&attr_rows)?,
        },
        split,
        samples: Samples {
            labels,
            features: Tensor::new(vec![n, d], data)?,
        },
    })
}

pub fn export_benchmark(b: &SyntheticBenchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TAXONOMY_FILE), b.taxonomy.to_tsv())?;
    fs::write(dir.join(SAMPLES_FILE), b.samples.to_tsv())?;
    fs::write(dir.join(ATTRIBUTES_FILE), b.semantics.to_tsv())?;
    fs::write(dir.join(PROTOTYPES_FILE), b.prototypes.to_tsv())?;
    fs::write(dir.join(SPLIT_FILE), b.split.to_manifest())?;
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| Error::format(&path, e.to_string()))
}

fn in_file<T>(dir: &Path, name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ (Error::Format { .. } | Error::Coverage(_)) => e,
        other => Error::format(dir.join(name), other.to_string()),
    })
}

pub fn import_benchmark(dir: &Path) -> Result<SyntheticBenchmark> {
    let taxonomy = in_file(dir, TAXONOMY_FILE, load_taxonomy(&read(dir, TAXONOMY_FILE)?))?;
    let samples = Samples::from_tsv(&read(dir, SAMPLES_FILE)?, &dir.join(SAMPLES_FILE))?;
    let semantics = in_file(dir, ATTRIBUTES_FILE, SemanticTable::from_tsv(&read(dir, ATTRIBUTES_FILE)?))?;
    let prototypes = in_file(dir, PROTOTYPES_FILE, SemanticTable::from_tsv(&read(dir, PROTOTYPES_FILE)?))?;
    let split = in_file(dir, SPLIT_FILE, Split::from_manifest(&read(dir, SPLIT_FILE)?))?;
    let b = SyntheticBenchmark {
        taxonomy,
        prototypes,
        semantics,
        split,
        samples,
    };
    in_file(dir, SPLIT_FILE, b.validate(dir))?;
    Ok(b)
}

/// A generic classification task standing in for large-scale pre-training:
/// isotropic Gaussian class means of expected norm `spread` and
/// per-coordinate noise `noise`.
pub fn pretext_dataset(
    feature_dim: usize,
    n_classes: usize,
    samples_per_class: usize,
    spread: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| gaussian_vec(&mut rng, feature_dim, spread / (feature_dim as f64).sqrt()))
        .collect();
    let mut data = Vec::with_capacity(n_classes * samples_per_class * feature_dim);
    let mut labels = Vec::with_capacity(n_classes * samples_per_class);
    for (c, m) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            labels.push(c);
            data.extend(m.iter().map(|v| v + noise * rng.sample::<f64, _>(StandardNormal)));
        }
    }
    Dataset::new(Tensor::new(vec![labels.len(), feature_dim], data)?, labels, n_classes)
}
