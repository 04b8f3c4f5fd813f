//! Behavior policies, rollout collection, coverage analysis and dataset files.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{sample_index, FiniteMdp, MdpError, PolicyTable, Tolerances};
use crate::occupancy::conditional_occupancy;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("noise level {0} outside [0, 1]")]
    NoiseLevel(f64),
    #[error("dataset or trajectory is empty")]
    Empty,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One step `(s, a, r, s')` of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    /// `s_next` is a terminal state; targets do not bootstrap through it.
    pub terminal: bool,
    pub t: usize,
}

/// Ordered transitions with episode boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    /// Start index of each episode; the first entry is 0.
    pub episode_offsets: Vec<usize>,
    pub noise_level: f64,
    pub seed: u64,
}

impl Dataset {
    /// Wraps transitions that form a single episode.
    pub fn single_episode(transitions: Vec<Transition>) -> Self {
        let episode_offsets = if transitions.is_empty() { vec![] } else { vec![0] };
        Self {
            transitions,
            episode_offsets,
            noise_level: 0.0,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn num_episodes(&self) -> usize {
        self.episode_offsets.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &[Transition]> {
        let ends = self
            .episode_offsets
            .iter()
            .skip(1)
            .copied()
            .chain(std::iter::once(self.transitions.len()));
        self.episode_offsets
            .iter()
            .zip(ends)
            .map(move |(&lo, hi)| &self.transitions[lo..hi])
    }

    /// Distinct `(s, a)` pairs in the dataset.
    pub fn unique_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.transitions.iter().map(|t| (t.s, t.a)).collect()
    }

    /// Drops every transition taken from one of `pairs`, keeping episode structure.
    pub fn without_pairs(&self, pairs: &BTreeSet<(usize, usize)>) -> Self {
        let mut transitions = Vec::new();
        let mut episode_offsets = Vec::new();
        for ep in self.episodes() {
            let start = transitions.len();
            transitions.extend(ep.iter().filter(|t| !pairs.contains(&(t.s, t.a))));
            if transitions.len() > start {
                episode_offsets.push(start);
            }
        }
        Self {
            transitions,
            episode_offsets,
            noise_level: self.noise_level,
            seed: self.seed,
        }
    }

    /// Checks index bounds against `mdp` and that offsets partition the sequence.
    pub fn check_against(&self, mdp: &FiniteMdp) -> Result<(), DataError> {
        for (i, t) in self.transitions.iter().enumerate() {
            if t.s >= mdp.num_states || t.s_next >= mdp.num_states || t.a >= mdp.num_actions {
                return Err(DataError::Invalid(format!("transition {i} is out of MDP bounds")));
            }
        }
        let ok = match self.episode_offsets.first() {
            None => self.transitions.is_empty(),
            Some(&first) => {
                first == 0
                    && self.episode_offsets.windows(2).all(|w| w[0] < w[1])
                    && *self.episode_offsets.last().unwrap() < self.transitions.len()
            }
        };
        if !ok {
            return Err(DataError::Invalid("episode offsets do not partition the dataset".into()));
        }
        Ok(())
    }
}

/// `pi_b(a|s) = (1 - n) pi_t(a|s) + n / |A|`.
pub fn noisy_policy(target: &PolicyTable, noise: f64) -> Result<PolicyTable, DataError> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(DataError::NoiseLevel(noise));
    }
    let uniform = noise / target.num_actions as f64;
    Ok(PolicyTable {
        num_states: target.num_states,
        num_actions: target.num_actions,
        probs: target.probs.iter().map(|&p| (1.0 - noise) * p + uniform).collect(),
    })
}

fn rollout(
    mdp: &FiniteMdp,
    behavior: &PolicyTable,
    horizon: usize,
    budget: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Transition>,
) {
    let mut s = sample_index(&mdp.initial_dist, rng);
    for t in 0..horizon.min(budget) {
        if mdp.terminal_mask[s] {
            break;
        }
        let a = behavior.sample(s, rng);
        let s_next = sample_index(mdp.transition_row(s, a), rng);
        let terminal = mdp.terminal_mask[s_next];
        out.push(Transition {
            s,
            a,
            r: mdp.reward(s, a),
            s_next,
            terminal,
            t,
        });
        if terminal {
            break;
        }
        s = s_next;
    }
}

/// Collects `episodes` seeded rollouts, each cut at `horizon` steps or a terminal.
pub fn collect(
    mdp: &FiniteMdp,
    behavior: &PolicyTable,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    check_collect_args(mdp, behavior, horizon)?;
    if episodes == 0 {
        return Err(DataError::Invalid("episodes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::new();
    let mut episode_offsets = Vec::new();
    for _ in 0..episodes {
        let start = transitions.len();
        rollout(mdp, behavior, horizon, usize::MAX, &mut rng, &mut transitions);
        if transitions.len() > start {
            episode_offsets.push(start);
        }
    }
    Ok(Dataset {
        transitions,
        episode_offsets,
        noise_level: 0.0,
        seed,
    })
}

/// Collects whole episodes until exactly `count` transitions exist; the last
/// episode is truncated to fit.
pub fn collect_transitions(
    mdp: &FiniteMdp,
    behavior: &PolicyTable,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    check_collect_args(mdp, behavior, horizon)?;
    if count == 0 {
        return Err(DataError::Invalid("transition count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(count);
    let mut episode_offsets = Vec::new();
    let mut empty_streak = 0;
    while transitions.len() < count {
        let start = transitions.len();
        rollout(mdp, behavior, horizon, count - start, &mut rng, &mut transitions);
        if transitions.len() > start {
            episode_offsets.push(start);
            empty_streak = 0;
        } else {
            empty_streak += 1;
            if empty_streak > 10_000 {
                return Err(DataError::Invalid("initial states are all terminal".into()));
            }
        }
    }
    Ok(Dataset {
        transitions,
        episode_offsets,
        noise_level: 0.0,
        seed,
    })
}

fn check_collect_args(mdp: &FiniteMdp, behavior: &PolicyTable, horizon: usize) -> Result<(), DataError> {
    behavior.check_against(mdp)?;
    if horizon == 0 {
        return Err(DataError::Invalid("horizon must be positive".into()));
    }
    Ok(())
}

/// Picks `count` transitions uniformly without replacement, preserving their
/// original order. Each selected transition becomes its own segment.
pub fn subsample(dataset: &Dataset, count: usize, seed: u64) -> Result<Dataset, DataError> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    let count = count.min(dataset.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, dataset.len(), count).into_vec();
    picked.sort_unstable();
    Ok(Dataset {
        transitions: picked.iter().map(|&i| dataset.transitions[i]).collect(),
        episode_offsets: (0..count).collect(),
        noise_level: dataset.noise_level,
        seed,
    })
}

/// Pairs absent from the dataset that some dataset pair reaches under `pi`.
///
/// Reachability is read off the support of the conditional occupancy. Pairs of
/// terminal states are excluded: their value is fixed at zero, so they never
/// act as free variables.
pub fn missing_relevant_pairs(
    dataset: &Dataset,
    mdp: &FiniteMdp,
    policy: &PolicyTable,
) -> Result<BTreeSet<(usize, usize)>, DataError> {
    dataset.check_against(mdp)?;
    let occ = conditional_occupancy(mdp, policy)?;
    let present = dataset.unique_pairs();
    let support = Tolerances::default().support;
    let mut missing = BTreeSet::new();
    for &(s, a) in &present {
        for (j, &d) in occ.slice(mdp.pair(s, a)).iter().enumerate() {
            let (s2, a2) = mdp.unpair(j);
            if d > support && !mdp.terminal_mask[s2] && !present.contains(&(s2, a2)) {
                missing.insert((s2, a2));
            }
        }
    }
    Ok(missing)
}

/// Adds the dataset's average reward, scaled by the effective horizon, to the
/// final reward: `r_{T-1} += gamma / ((1 - gamma) T) * sum_i r_i`.
pub fn single_trajectory_prepare(trajectory: &[Transition], gamma: f64) -> Result<Vec<Transition>, DataError> {
    let Some(last) = trajectory.len().checked_sub(1) else {
        return Err(DataError::Empty);
    };
    let t_len = trajectory.len() as f64;
    let total: f64 = trajectory.iter().map(|t| t.r).sum();
    let mut out = trajectory.to_vec();
    out[last].r += gamma / ((1.0 - gamma) * t_len) * total;
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    episode: usize,
    t: usize,
    s: usize,
    a: usize,
    r: f64,
    s_next: usize,
    terminal: bool,
}

/// Metadata written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub seed: u64,
    pub noise_level: f64,
    pub mdp_hash: String,
}

/// Writes `<stem>.csv` (episode, t, s, a, r, s_next, terminal) and `<stem>.json`.
pub fn write_dataset(dataset: &Dataset, mdp: &FiniteMdp, dir: &Path, stem: &str) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?));
    for (episode, ep) in dataset.episodes().enumerate() {
        for t in ep {
            w.serialize(CsvRow {
                episode,
                t: t.t,
                s: t.s,
                a: t.a,
                r: t.r,
                s_next: t.s_next,
                terminal: t.terminal,
            })?;
        }
    }
    w.flush()?;
    let sidecar = DatasetSidecar {
        seed: dataset.seed,
        noise_level: dataset.noise_level,
        mdp_hash: mdp.content_hash(),
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path, stem: &str) -> Result<(Dataset, DatasetSidecar), DataError> {
    let sidecar: DatasetSidecar =
        serde_json::from_reader(BufReader::new(File::open(dir.join(format!("{stem}.json")))?))?;
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(dir.join(format!("{stem}.csv")))?));
    let mut transitions = Vec::new();
    let mut episode_offsets = Vec::new();
    let mut current = None;
    for row in r.deserialize() {
        let row: CsvRow = row?;
        if current != Some(row.episode) {
            episode_offsets.push(transitions.len());
            current = Some(row.episode);
        }
        transitions.push(Transition {
            s: row.s,
            a: row.a,
            r: row.r,
            s_next: row.s_next,
            terminal: row.terminal,
            t: row.t,
        });
    }
    let dataset = Dataset {
        transitions,
        episode_offsets,
        noise_level: sidecar.noise_level,
        seed: sidecar.seed,
    };
    Ok((dataset, sidecar))
}
