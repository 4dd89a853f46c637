//! Seven-rank biological lineages, kinship queries and relevance-graded
//! auxiliary class selection.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Taxonomic rank, ordered from most specific to most general.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rank {
    Species,
    Genus,
    Family,
    Order,
    Class,
    Phylum,
    Kingdom,
}

impl Rank {
    pub const ALL: [Rank; 7] = [
        Rank::Species,
        Rank::Genus,
        Rank::Family,
        Rank::Order,
        Rank::Class,
        Rank::Phylum,
        Rank::Kingdom,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Rank> {
        Rank::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Rank::Species => "species",
            Rank::Genus => "genus",
            Rank::Family => "family",
            Rank::Order => "order",
            Rank::Class => "class",
            Rank::Phylum => "phylum",
            Rank::Kingdom => "kingdom",
        }
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How closely an auxiliary class is related to the seen classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelevanceLevel {
    Low,
    Middle,
    High,
}

impl RelevanceLevel {
    pub const ALL: [RelevanceLevel; 3] = [RelevanceLevel::Low, RelevanceLevel::Middle, RelevanceLevel::High];

    pub fn name(self) -> &'static str {
        match self {
            RelevanceLevel::Low => "low",
            RelevanceLevel::Middle => "middle",
            RelevanceLevel::High => "high",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "low" => Some(RelevanceLevel::Low),
            "middle" => Some(RelevanceLevel::Middle),
            "high" => Some(RelevanceLevel::High),
            _ => None,
        }
    }
}

impl fmt::Display for RelevanceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One organism's names from species up to kingdom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lineage {
    pub taxon_id: String,
    names: [String; 7],
}

impl Lineage {
    /// `names` is indexed by [`Rank::index`], species first.
    pub fn new(taxon_id: impl Into<String>, names: [String; 7]) -> Result<Self> {
        let taxon_id = taxon_id.into();
        if taxon_id.is_empty() {
            return Err(Error::Precondition("empty taxon id".into()));
        }
        if let Some(r) = names.iter().position(String::is_empty) {
            return Err(Error::Precondition(format!(
                "lineage `{taxon_id}` has an empty {} name",
                Rank::ALL[r]
            )));
        }
        Ok(Lineage { taxon_id, names })
    }

    pub fn name(&self, rank: Rank) -> &str {
        &self.names[rank.index()]
    }

    pub fn names(&self) -> &[String; 7] {
        &self.names
    }
}

pub const TAXONOMY_HEADER: &str = "taxon_id\tspecies\tgenus\tfamily\torder\tclass\tphylum\tkingdom";

/// An immutable forest of lineages.
#[derive(Clone, Debug, Default)]
pub struct Taxonomy {
    lineages: Vec<Lineage>,
    index: HashMap<String, usize>,
    // node[i][r]: interned id of lineage i's name at rank r
    nodes: Vec<[u32; 7]>,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.lineages == other.lineages
    }
}

impl Taxonomy {
    /// Build a taxonomy, checking id uniqueness and the forest property.
    pub fn from_lineages(lineages: Vec<Lineage>) -> Result<Self> {
        let mut index = HashMap::with_capacity(lineages.len());
        for (i, l) in lineages.iter().enumerate() {
            if index.insert(l.taxon_id.clone(), i).is_some() {
                return Err(Error::Duplicate(l.taxon_id.clone()));
            }
        }
        let mut interned: [HashMap<&str, (u32, usize)>; 7] = Default::default();
        let mut nodes = Vec::with_capacity(lineages.len());
        for (i, l) in lineages.iter().enumerate() {
            let mut ids = [0u32; 7];
            for rank in Rank::ALL {
                let table = &mut interned[rank.index()];
                let next = table.len() as u32;
                let (id, first) = *table.entry(l.name(rank)).or_insert((next, i));
                if first != i {
                    let other = &lineages[first];
                    let conflict = Rank::ALL[rank.index() + 1..]
                        .iter()
                        .any(|&above| other.name(above) != l.name(above));
                    if conflict {
                        return Err(Error::Consistency {
                            first: other.taxon_id.clone(),
                            second: l.taxon_id.clone(),
                            rank: rank.to_string(),
                            name: l.name(rank).to_string(),
                        });
                    }
                }
                ids[rank.index()] = id;
            }
            nodes.push(ids);
        }
        Ok(Taxonomy { lineages, index, nodes })
    }

    pub fn len(&self) -> usize {
        self.lineages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lineages.is_empty()
    }

    pub fn lineages(&self) -> &[Lineage] {
        &self.lineages
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&Lineage> {
        self.index.get(id).map(|&i| &self.lineages[i])
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownTaxon(id.to_string()))
    }

    /// Serialize as the tab-separated lineage table.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TAXONOMY_HEADER);
        out.push('\n');
        for l in &self.lineages {
            out.push_str(&l.taxon_id);
            for n in &l.names {
                out.push('\t');
                out.push_str(n);
            }
            out.push('\n');
        }
        out
    }

    /// Rank of the lowest common ancestor of `a` and `b`, or `None` when the
    /// two lineages differ even at kingdom.
    pub fn kinship_rank(&self, a: &str, b: &str) -> Result<Option<Rank>> {
        let (ia, ib) = (self.position(a)?, self.position(b)?);
        Ok(self.kinship_by_position(ia, ib))
    }

    // Sharing a node at rank r implies sharing every rank above it, so the
    // predicate is monotone in rank and can be bisected.
    fn kinship_by_position(&self, ia: usize, ib: usize) -> Option<Rank> {
        let (na, nb) = (&self.nodes[ia], &self.nodes[ib]);
        if na[Rank::Kingdom.index()] != nb[Rank::Kingdom.index()] {
            return None;
        }
        let (mut lo, mut hi) = (0usize, Rank::Kingdom.index());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if na[mid] == nb[mid] {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Rank::from_index(lo)
    }

    /// Relevance of `candidate` to the seen classes, judged by the closest
    /// kinship to any of them. Ids absent from the taxonomy (non-biological
    /// classes) are always [`RelevanceLevel::Low`].
    pub fn relevance_of<S: AsRef<str>>(&self, seen: &[S], candidate: &str) -> Result<RelevanceLevel> {
        if seen.iter().any(|s| s.as_ref() == candidate) {
            return Err(Error::Precondition(format!(
                "auxiliary candidate `{candidate}` is one of the seen classes"
            )));
        }
        let seen_pos = seen
            .iter()
            .map(|s| self.position(s.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let Some(&ic) = self.index.get(candidate) else {
            return Ok(RelevanceLevel::Low);
        };
        let nearest = seen_pos.iter().filter_map(|&is| self.kinship_by_position(ic, is)).min();
        Ok(match nearest {
            Some(r) if r <= Rank::Class => RelevanceLevel::High,
            Some(_) => RelevanceLevel::Middle,
            None => RelevanceLevel::Low,
        })
    }
}

/// Parse the tab-separated lineage table.
pub fn load_taxonomy(source: &str) -> Result<Taxonomy> {
    let mut lines = source.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r') == TAXONOMY_HEADER => {}
        Some(_) => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{TAXONOMY_HEADER}`"),
            })
        }
        None => return Ok(Taxonomy::default()),
    }
    let mut lineages = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 8 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 8 columns, found {}", cols.len()),
            });
        }
        let names: [String; 7] = std::array::from_fn(|r| cols[r + 1].to_string());
        let lineage = Lineage::new(cols[0], names).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        lineages.push(lineage);
    }
    Taxonomy::from_lineages(lineages)
}

/// Classes picked for one auxiliary data set, with a per-class sample quota.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuxiliarySelection {
    pub entries: Vec<(String, usize)>,
}

impl AuxiliarySelection {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("taxon_id\tquota\n");
        for (id, q) in &self.entries {
            out.push_str(&format!("{id}\t{q}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let (id, q) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `taxon_id<TAB>quota`".into(),
            })?;
            let q = q.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad quota `{q}`"),
            })?;
            entries.push((id.to_string(), q));
        }
        Ok(AuxiliarySelection { entries })
    }
}

/// Draw `n_classes` distinct pool classes at the requested relevance level,
/// uniformly without replacement, each with quota `n_per_class`.
pub fn select_auxiliary<S: AsRef<str>>(
    taxonomy: &Taxonomy,
    seen: &[S],
    pool: &[(String, usize)],
    level: RelevanceLevel,
    n_classes: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<AuxiliarySelection> {
    if n_classes == 0 {
        return Ok(AuxiliarySelection { entries: Vec::new() });
    }
    let mut taken = HashSet::new();
    let mut qualifying = Vec::new();
    for (id, count) in pool {
        if *count < n_per_class || !taken.insert(id.as_str()) {
            continue;
        }
        if taxonomy.relevance_of(seen, id)? == level {
            qualifying.push(id.clone());
        }
    }
    if qualifying.len() < n_classes {
        return Err(Error::Selection {
            qualified: qualifying.len(),
            requested: n_classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = index::sample(&mut rng, qualifying.len(), n_classes)
        .into_iter()
        .map(|i| (qualifying[i].clone(), n_per_class))
        .collect();
    Ok(AuxiliarySelection { entries })
}
