use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{TokenId, Vocabulary};
use crate::oracle::{Conditioning, EnumerationOracle, ExplicitDistribution};
use crate::vocabplan::{build_planning_set, default_static_list, PlanningSet};

pub const MASK: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;

const STRUCTURAL: [&str; 12] = [":", "=", "+", ".", ",", "(", ")", "return", "if", "def", "for", "in"];
const CAPITALIZED: [&str; 8] = ["Therefore", "So", "Thus", "Step", "Let", "First", "Then", "Finally"];
const CONTENT: [&str; 12] = [
    "cat", "dog", "sun", "red", "box", "car", "pen", "cup", "fox", "key", "hat", "egg",
];

/// The 45-token vocabulary used by every generated corpus.
pub fn desk_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = vec!["[MASK]".into(), "<|endoftext|>".into(), "<pad>".into()];
    tokens.extend(STRUCTURAL.iter().map(|s| s.to_string()));
    tokens.extend(CAPITALIZED.iter().map(|s| s.to_string()));
    tokens.extend(CONTENT.iter().map(|s| s.to_string()));
    tokens.extend((0..10).map(|d| d.to_string()));
    Vocabulary::new(tokens, MASK, EOS, PAD).expect("desk vocabulary is valid")
}

pub fn desk_planning_set() -> PlanningSet {
    build_planning_set(&desk_vocabulary(), &default_static_list())
}

/// Planning tokens other than the end-of-sequence token.
fn anchor_ids() -> Vec<TokenId> {
    (3..3 + (STRUCTURAL.len() + CAPITALIZED.len()) as TokenId).collect()
}

/// Content words and digits.
fn content_ids() -> Vec<TokenId> {
    let start = 3 + (STRUCTURAL.len() + CAPITALIZED.len()) as TokenId;
    (start..start + (CONTENT.len() + 10) as TokenId).collect()
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SpecError {
    #[error("template length must be in 1..=16, got {0}")]
    Length(usize),
    #[error("position {0} is out of range or listed twice")]
    Position(usize),
    #[error("position {0} is neither scaffold nor content")]
    Uncovered(usize),
    #[error("weights: {0}")]
    Weights(String),
    #[error("cannot build {0} distinct templates")]
    NotDistinct(usize),
    #[error("{0}")]
    Other(String),
}

/// Templates sharing planning tokens at `scaffold_positions` and differing
/// at `content_positions`. With `eos_at`, that position holds the end token
/// and everything after it is padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredCorpusSpec {
    pub num_templates: usize,
    pub template_length: usize,
    pub scaffold_positions: Vec<usize>,
    pub content_positions: Vec<usize>,
    pub weights: Vec<f64>,
    pub rng_seed: u64,
    #[serde(default)]
    pub eos_at: Option<usize>,
}

/// A generated distribution together with its exact-match target.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub prompt: Vec<TokenId>,
    pub distribution: ExplicitDistribution<f64>,
    /// Mode of the distribution.
    pub target: Vec<TokenId>,
}

impl Corpus {
    pub fn gen_length(&self) -> usize {
        self.distribution.gen_length()
    }

    pub fn mode_weight(&self) -> f64 {
        self.distribution.support().iter().map(|s| s.1).fold(0.0, f64::max)
    }

    pub fn oracle(&self) -> EnumerationOracle<f64> {
        EnumerationOracle::new(self.distribution.clone())
    }

    pub fn oracle_with(&self, conditioning: Conditioning) -> EnumerationOracle<f64> {
        EnumerationOracle::new(self.distribution.clone()).with_conditioning(conditioning)
    }

    pub fn to_file(&self) -> CorpusFile {
        CorpusFile {
            name: self.name.clone(),
            vocab_size: self.distribution.vocab_size(),
            mask_id: self.distribution.mask_id(),
            prompt: self.prompt.clone(),
            support: self
                .distribution
                .support()
                .iter()
                .map(|(seq, w)| SupportEntry {
                    seq: seq.clone(),
                    weight: *w,
                })
                .collect(),
            target: Some(self.target.clone()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file()).expect("corpus serializes");
        std::fs::write(path, text + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| SpecError::Other(e.to_string()))?;
        let file: CorpusFile = serde_json::from_str(&text).map_err(|e| SpecError::Other(e.to_string()))?;
        file.into_corpus()
    }
}

/// On-disk corpus: JSON with the support listed explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub name: String,
    pub vocab_size: usize,
    pub mask_id: TokenId,
    #[serde(default)]
    pub prompt: Vec<TokenId>,
    pub support: Vec<SupportEntry>,
    /// Defaults to the mode.
    #[serde(default)]
    pub target: Option<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub seq: Vec<TokenId>,
    pub weight: f64,
}

impl CorpusFile {
    pub fn into_corpus(self) -> Result<Corpus, SpecError> {
        let dist = ExplicitDistribution::new(
            self.vocab_size,
            self.mask_id,
            self.support.into_iter().map(|e| (e.seq, e.weight)).collect(),
        )
        .map_err(|e| SpecError::Other(e.to_string()))?;
        let target = self.target.unwrap_or_else(|| dist.mode().to_vec());
        Ok(Corpus {
            name: self.name,
            prompt: self.prompt,
            distribution: dist,
            target,
        })
    }
}

fn check_positions(length: usize, eos_at: Option<usize>, groups: &[&[usize]]) -> Result<(), SpecError> {
    if length == 0 || length > 16 {
        return Err(SpecError::Length(length));
    }
    let limit = match eos_at {
        Some(e) if e >= length => return Err(SpecError::Position(e)),
        Some(e) => e,
        None => length,
    };
    let mut seen = BTreeSet::new();
    for &p in groups.iter().flat_map(|g| g.iter()) {
        if p >= limit || !seen.insert(p) {
            return Err(SpecError::Position(p));
        }
    }
    if let Some(p) = (0..limit).find(|p| !seen.contains(p)) {
        return Err(SpecError::Uncovered(p));
    }
    Ok(())
}

fn check_weights(weights: &[f64], n: usize) -> Result<(), SpecError> {
    if weights.len() != n {
        return Err(SpecError::Weights(format!("{} weights for {n} entries", weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(SpecError::Weights("weights must be positive and finite".into()));
    }
    Ok(())
}

/// Builds the distribution described by `spec`, deterministically.
pub fn gen_structured_corpus(spec: &StructuredCorpusSpec) -> Result<Corpus, SpecError> {
    let l = spec.template_length;
    check_positions(l, spec.eos_at, &[&spec.scaffold_positions, &spec.content_positions])?;
    check_weights(&spec.weights, spec.num_templates)?;
    if spec.num_templates == 0 {
        return Err(SpecError::Weights("need at least one template".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let anchors = anchor_ids();
    let content = content_ids();
    let mut skeleton = vec![PAD; l];
    for &p in &spec.scaffold_positions {
        skeleton[p] = *anchors.choose(&mut rng).expect("non-empty");
    }
    if let Some(e) = spec.eos_at {
        skeleton[e] = EOS;
    }
    let mut templates: Vec<Vec<TokenId>> = Vec::with_capacity(spec.num_templates);
    let mut attempts = 0;
    while templates.len() < spec.num_templates {
        attempts += 1;
        if attempts > 1000 {
            return Err(SpecError::NotDistinct(spec.num_templates));
        }
        let mut t = skeleton.clone();
        for &p in &spec.content_positions {
            t[p] = *content.choose(&mut rng).expect("non-empty");
        }
        if !templates.contains(&t) {
            templates.push(t);
        }
    }
    let support = templates.into_iter().zip(spec.weights.iter().copied()).collect();
    let dist = ExplicitDistribution::new(desk_vocabulary().len(), MASK, support)
        .map_err(|e| SpecError::Other(e.to_string()))?;
    Ok(Corpus {
        name: format!("structured-{}", spec.rng_seed),
        prompt: vec![],
        target: dist.mode().to_vec(),
        distribution: dist,
    })
}

/// Templates with a branch structure: every position in `branch_positions`
/// holds a planning token chosen by the branch, so resolving any one of them
/// settles the rest. `content_positions` vary independently of the branch
/// and of each other, each drawing among `content_weights.len()` choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchedCorpusSpec {
    pub template_length: usize,
    pub branch_weights: Vec<f64>,
    pub branch_positions: Vec<usize>,
    pub scaffold_positions: Vec<usize>,
    pub content_positions: Vec<usize>,
    pub content_weights: Vec<f64>,
    pub rng_seed: u64,
    #[serde(default)]
    pub eos_at: Option<usize>,
}

pub fn gen_branched_corpus(spec: &BranchedCorpusSpec) -> Result<Corpus, SpecError> {
    let l = spec.template_length;
    check_positions(
        l,
        spec.eos_at,
        &[
            &spec.branch_positions,
            &spec.scaffold_positions,
            &spec.content_positions,
        ],
    )?;
    let nb = spec.branch_weights.len();
    let nc = spec.content_weights.len();
    check_weights(&spec.branch_weights, nb)?;
    check_weights(&spec.content_weights, nc)?;
    let anchors = anchor_ids();
    let content = content_ids();
    if nb == 0 || nc == 0 || nb > anchors.len() || nc > content.len() {
        return Err(SpecError::Weights("branch and content counts out of range".into()));
    }
    let combos = nc
        .checked_pow(spec.content_positions.len() as u32)
        .unwrap_or(usize::MAX);
    if combos.saturating_mul(nb) > 4096 {
        return Err(SpecError::Other("support would exceed 4096 sequences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut skeleton = vec![PAD; l];
    for &p in &spec.scaffold_positions {
        skeleton[p] = *anchors.choose(&mut rng).expect("non-empty");
    }
    if let Some(e) = spec.eos_at {
        skeleton[e] = EOS;
    }
    // per branch position, distinct planning tokens across branches
    let branch_tokens: Vec<Vec<TokenId>> = spec
        .branch_positions
        .iter()
        .map(|_| anchors.choose_multiple(&mut rng, nb).copied().collect())
        .collect();
    let content_tokens: Vec<Vec<TokenId>> = spec
        .content_positions
        .iter()
        .map(|_| content.choose_multiple(&mut rng, nc).copied().collect())
        .collect();
    let mut support = Vec::with_capacity(nb * combos);
    for (b, &bw) in spec.branch_weights.iter().enumerate() {
        for combo in 0..combos {
            let mut seq = skeleton.clone();
            for (j, &p) in spec.branch_positions.iter().enumerate() {
                seq[p] = branch_tokens[j][b];
            }
            let mut w = bw;
            let mut rest = combo;
            for (j, &p) in spec.content_positions.iter().enumerate() {
                let choice = rest % nc;
                rest /= nc;
                seq[p] = content_tokens[j][choice];
                w *= spec.content_weights[choice];
            }
            support.push((seq, w));
        }
    }
    let dist = ExplicitDistribution::new(desk_vocabulary().len(), MASK, support)
        .map_err(|e| SpecError::Other(e.to_string()))?;
    Ok(Corpus {
        name: format!("branched-{}", spec.rng_seed),
        prompt: vec![],
        target: dist.mode().to_vec(),
        distribution: dist,
    })
}

fn split_positions(rng: &mut ChaCha8Rng, positions: Vec<usize>, scaffold_share: f64) -> (Vec<usize>, Vec<usize>) {
    let mut scaffold = Vec::new();
    let mut content = Vec::new();
    for p in positions {
        if rng.gen_bool(scaffold_share) {
            scaffold.push(p);
        } else {
            content.push(p);
        }
    }
    (scaffold, content)
}

/// Mode-dominant structured corpora at `L = 16`: one template carries
/// weight in `[0.9, 0.97]` and the rest share the remainder. A third of them
/// end early with an end token.
pub fn default_suite(count: usize, seed: u64) -> Vec<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let idx = out.len();
        let eos_at = (idx % 3 == 2).then(|| rng.gen_range(10..16));
        let limit = eos_at.unwrap_or(16);
        let (mut scaffold, mut content) = split_positions(&mut rng, (0..limit).collect(), 0.5);
        if content.is_empty() {
            content.push(scaffold.pop().expect("some position"));
        }
        scaffold.sort_unstable();
        content.sort_unstable();
        let n = rng.gen_range(1..=5usize);
        let mode = rng.gen_range(0.9..0.97);
        let mut weights = vec![mode];
        if n > 1 {
            let raw: Vec<f64> = (1..n).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            weights.extend(raw.iter().map(|w| (1.0 - mode) * w / total));
        }
        let spec = StructuredCorpusSpec {
            num_templates: n,
            template_length: 16,
            scaffold_positions: scaffold,
            content_positions: content,
            weights,
            rng_seed: seed.wrapping_mul(1000).wrapping_add(idx as u64),
            eos_at,
        };
        let mut corpus = gen_structured_corpus(&spec).expect("suite specs are valid");
        corpus.name = format!("default-{idx:03}");
        if idx % 4 == 1 {
            corpus.prompt = vec![anchor_ids()[idx % 12], content_ids()[idx % 22]];
        }
        out.push(corpus);
    }
    out
}

/// Branched corpora at `L = 16` with a split branch and independent content
/// positions, so many positions sit well below the high-confidence
/// threshold. Used for the ablation and for exercising every decoder route.
pub fn branched_suite(count: usize, seed: u64) -> Vec<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let idx = out.len();
        let eos_at = (idx % 4 == 3).then(|| rng.gen_range(12..16));
        let limit = eos_at.unwrap_or(16);
        let mut positions: Vec<usize> = (0..limit).collect();
        positions.shuffle(&mut rng);
        let n_branch = rng.gen_range(3..=5usize);
        let n_content = rng.gen_range(3..=4usize);
        let mut branch: Vec<usize> = positions[..n_branch].to_vec();
        let mut content: Vec<usize> = positions[n_branch..n_branch + n_content].to_vec();
        let mut scaffold: Vec<usize> = positions[n_branch + n_content..].to_vec();
        branch.sort_unstable();
        content.sort_unstable();
        scaffold.sort_unstable();
        let b0 = rng.gen_range(0.5..0.6);
        let c0 = rng.gen_range(0.5..0.6);
        let spec = BranchedCorpusSpec {
            template_length: 16,
            branch_weights: vec![b0, 1.0 - b0],
            branch_positions: branch,
            scaffold_positions: scaffold,
            content_positions: content,
            content_weights: vec![c0, 1.0 - c0],
            rng_seed: seed.wrapping_mul(1000).wrapping_add(idx as u64),
            eos_at,
        };
        let mut corpus = gen_branched_corpus(&spec).expect("suite specs are valid");
        corpus.name = format!("branched-{idx:03}");
        out.push(corpus);
    }
    out
}
