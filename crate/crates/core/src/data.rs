//! Synthetic interference episodes.
//!
//! An episode is `BOS`, then update blocks `UPD e v`, then query blocks
//! `QRY e`. The model must emit the latest value of `e` at the position of
//! the query's entity token.
//!
//! # File format
//!
//! One episode per line, six tab-separated fields:
//!
//! ```text
//! depth  kind  tokens  query_positions  gold_ids  superseded_positions
//! 3      pi    1 2 10 200 2 10 201 ...   13       202      1 4
//! ```
//!
//! List fields are space-separated and may be empty. Superseded positions
//! are the positions of the `UPD` tokens of superseded updates. Loading
//! rebuilds every label from the token stream and rejects lines whose stored
//! labels disagree.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{io_err, Error, Result};
use crate::rng::{stream, Rng};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const UPD: usize = 2;
pub const QRY: usize = 3;
pub const ENTITY_BASE: usize = 10;
pub const N_ENTITIES: usize = 100;
pub const VALUE_BASE: usize = 200;
pub const N_VALUES: usize = 500;
pub const VOCAB: usize = 1024;
pub const MAX_SEQ_LEN: usize = 1024;

pub fn entity_token(e: usize) -> usize {
    ENTITY_BASE + e
}

pub fn value_token(v: usize) -> usize {
    VALUE_BASE + v
}

pub fn is_entity(tok: usize) -> bool {
    (ENTITY_BASE..ENTITY_BASE + N_ENTITIES).contains(&tok)
}

pub fn is_value(tok: usize) -> bool {
    (VALUE_BASE..VALUE_BASE + N_VALUES).contains(&tok)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EpisodeKind {
    Pi,
    MultiEntity,
    MixedRelevance,
}

impl fmt::Display for EpisodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpisodeKind::Pi => "pi",
            EpisodeKind::MultiEntity => "multi",
            EpisodeKind::MixedRelevance => "mixed",
        })
    }
}

impl FromStr for EpisodeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pi" => Ok(EpisodeKind::Pi),
            "multi" => Ok(EpisodeKind::MultiEntity),
            "mixed" => Ok(EpisodeKind::MixedRelevance),
            _ => Err(format!("unknown episode kind {s:?} (pi, multi, mixed)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Update {
    /// Position of the block's `UPD` token; entity and value follow.
    pub position: usize,
    pub entity: usize,
    pub value_token: usize,
    pub superseded: bool,
    /// False for distractor entities that are never queried.
    pub queried: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    /// Position of the query's entity token, where the answer is predicted.
    pub position: usize,
    pub entity: usize,
    pub gold: usize,
    /// Earlier values of the entity, excluding the gold value.
    pub stale: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub kind: EpisodeKind,
    pub depth: usize,
    pub tokens: Vec<usize>,
    pub updates: Vec<Update>,
    pub queries: Vec<Query>,
}

impl Episode {
    /// Rebuilds all labels from a token stream.
    pub fn from_tokens(kind: EpisodeKind, depth: usize, tokens: Vec<usize>) -> Result<Self> {
        let input = |d: String| Error::Input(d);
        if tokens.first() != Some(&BOS) {
            return Err(input("episode must start with BOS".into()));
        }
        if tokens.len() > MAX_SEQ_LEN {
            return Err(input(format!("{} tokens exceeds {MAX_SEQ_LEN}", tokens.len())));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= VOCAB) {
            return Err(input(format!("token id {t} >= {VOCAB}")));
        }
        let mut updates: Vec<Update> = Vec::new();
        let mut queries: Vec<Query> = Vec::new();
        let mut i = 1;
        while i < tokens.len() {
            match tokens[i] {
                UPD if queries.is_empty() => {
                    let (Some(&e), Some(&v)) = (tokens.get(i + 1), tokens.get(i + 2)) else {
                        return Err(input(format!("truncated update block at {i}")));
                    };
                    if !is_entity(e) || !is_value(v) {
                        return Err(input(format!("malformed update block at {i}")));
                    }
                    updates.push(Update {
                        position: i,
                        entity: e - ENTITY_BASE,
                        value_token: v,
                        superseded: false,
                        queried: false,
                    });
                    i += 3;
                }
                QRY => {
                    let Some(&e) = tokens.get(i + 1).filter(|&&e| is_entity(e)) else {
                        return Err(input(format!("malformed query block at {i}")));
                    };
                    let entity = e - ENTITY_BASE;
                    let history: Vec<usize> =
                        updates.iter().filter(|u| u.entity == entity).map(|u| u.value_token).collect();
                    let Some(&gold) = history.last() else {
                        return Err(input(format!("query at {i} for an entity with no updates")));
                    };
                    let mut stale: Vec<usize> = Vec::new();
                    for &v in &history[..history.len() - 1] {
                        if v != gold && !stale.contains(&v) {
                            stale.push(v);
                        }
                    }
                    queries.push(Query { position: i + 1, entity, gold, stale });
                    i += 2;
                }
                t => return Err(input(format!("unexpected token {t} at {i}"))),
            }
        }
        let queried: HashSet<usize> = queries.iter().map(|q| q.entity).collect();
        for j in 0..updates.len() {
            let e = updates[j].entity;
            updates[j].superseded = updates[j + 1..].iter().any(|u| u.entity == e);
            updates[j].queried = queried.contains(&e);
        }
        Ok(Self { kind, depth, tokens, updates, queries })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Next-token targets with the answer positions retargeted to gold.
    /// The final position has no target unless it is an answer position.
    pub fn wake_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let t = self.tokens.len();
        let mut targets = vec![PAD; t];
        let mut mask = vec![false; t];
        for i in 0..t.saturating_sub(1) {
            targets[i] = self.tokens[i + 1];
            mask[i] = true;
        }
        for q in &self.queries {
            targets[q.position] = q.gold;
            mask[q.position] = true;
        }
        (targets, mask)
    }

    /// Targets restricted to the answer positions.
    pub fn answer_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let t = self.tokens.len();
        let mut targets = vec![PAD; t];
        let mut mask = vec![false; t];
        for q in &self.queries {
            targets[q.position] = q.gold;
            mask[q.position] = true;
        }
        (targets, mask)
    }

    /// Per-position forgetting labels: every token of a superseded or
    /// never-queried update block is marked.
    pub fn forget_labels(&self) -> Vec<bool> {
        let mut out = vec![false; self.tokens.len()];
        for u in &self.updates {
            if u.superseded || !u.queried {
                out[u.position..u.position + 3].fill(true);
            }
        }
        out
    }

    pub fn superseded_positions(&self) -> Vec<usize> {
        self.updates.iter().filter(|u| u.superseded).map(|u| u.position).collect()
    }

    fn to_line(&self) -> String {
        let join = |xs: &mut dyn Iterator<Item = usize>| xs.map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.depth,
            self.kind,
            join(&mut self.tokens.iter().copied()),
            join(&mut self.queries.iter().map(|q| q.position)),
            join(&mut self.queries.iter().map(|q| q.gold)),
            join(&mut self.superseded_positions().into_iter()),
        )
    }
}

fn check_capacity(blocks: usize, queries: usize) -> Result<()> {
    let len = 1 + 3 * blocks + 2 * queries;
    if len > MAX_SEQ_LEN {
        return Err(Error::Input(format!("episode of {len} tokens exceeds {MAX_SEQ_LEN}")));
    }
    Ok(())
}

/// `n` values with no immediate repetition.
fn value_stream(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match out.last() {
            None => rng.random_range(0..N_VALUES),
            Some(&prev) => {
                let v = rng.random_range(0..N_VALUES - 1);
                if v >= prev {
                    v + 1
                } else {
                    v
                }
            }
        };
        out.push(v);
    }
    out
}

fn build(
    kind: EpisodeKind,
    depth: usize,
    order: &[(usize, usize)],
    queried: &[usize],
) -> Result<Episode> {
    let mut tokens = vec![BOS];
    for &(e, v) in order {
        tokens.extend([UPD, entity_token(e), value_token(v)]);
    }
    for &e in queried {
        tokens.extend([QRY, entity_token(e)]);
    }
    Episode::from_tokens(kind, depth, tokens)
}

/// `n` updates to one entity followed by a single query.
pub fn gen_pi_episode(n: usize, rng: &mut Rng) -> Result<Episode> {
    if n == 0 {
        return Err(Error::Input("depth must be at least 1".into()));
    }
    check_capacity(n, 1)?;
    let e = rng.random_range(0..N_ENTITIES);
    let order: Vec<_> = value_stream(n, rng).into_iter().map(|v| (e, v)).collect();
    build(EpisodeKind::Pi, n, &order, &[e])
}

#[allow(clippy::needless_range_loop)]
fn interleaved(entities: &[usize], n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let streams: Vec<Vec<usize>> = entities.iter().map(|_| value_stream(n, rng)).collect();
    let mut order = Vec::with_capacity(entities.len() * n);
    let mut ids: Vec<usize> = (0..entities.len()).collect();
    for round in 0..n {
        ids.shuffle(rng);
        for &i in &ids {
            order.push((entities[i], streams[i][round]));
        }
    }
    order
}

fn distinct_entities(k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k > N_ENTITIES {
        return Err(Error::Input(format!("{k} entities requested, only {N_ENTITIES} exist")));
    }
    let mut all: Vec<usize> = (0..N_ENTITIES).collect();
    all.shuffle(rng);
    all.truncate(k);
    Ok(all)
}

/// `k` entities with `n` updates each, interleaved in shuffled rounds, and
/// one query per entity.
pub fn gen_multi_entity(k: usize, n: usize, rng: &mut Rng) -> Result<Episode> {
    gen_mixed_relevance(k, 0, n, rng).map(|mut e| {
        e.kind = EpisodeKind::MultiEntity;
        e
    })
}

/// Like [`gen_multi_entity`] with `distractors` extra entities that receive
/// updates but are never queried.
pub fn gen_mixed_relevance(k: usize, distractors: usize, n: usize, rng: &mut Rng) -> Result<Episode> {
    if n == 0 || k == 0 {
        return Err(Error::Input("need at least one queried entity and one update".into()));
    }
    let total = k + distractors;
    check_capacity(total * n, k)?;
    let entities = distinct_entities(total, rng)?;
    let order = interleaved(&entities, n, rng);
    let mut queried = entities[..k].to_vec();
    queried.shuffle(rng);
    build(EpisodeKind::MixedRelevance, n, &order, &queried)
}

/// Episode `index` of a named, reproducible stream.
pub fn seeded_pi(seed: u64, name: &str, index: u64, depth: usize) -> Result<Episode> {
    gen_pi_episode(depth, &mut stream(seed, name, index))
}

/// `per_depth` episodes at each depth, in depth order.
pub fn gen_set(kind: EpisodeKind, depths: &[usize], per_depth: usize, seed: u64) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(depths.len() * per_depth);
    for &d in depths {
        for i in 0..per_depth {
            let mut rng = stream(seed, &format!("episodes-{kind}-{d}"), i as u64);
            out.push(match kind {
                EpisodeKind::Pi => gen_pi_episode(d, &mut rng)?,
                EpisodeKind::MultiEntity => {
                    let k = rng.random_range(2..=4);
                    gen_multi_entity(k, d, &mut rng)?
                }
                EpisodeKind::MixedRelevance => {
                    let k = rng.random_range(1..=3);
                    let extra = rng.random_range(1..=3);
                    gen_mixed_relevance(k, extra, d, &mut rng)?
                }
            });
        }
    }
    Ok(out)
}

pub fn serialize(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for e in episodes {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    out
}

fn parse_list(field: &str, line: usize, what: &str) -> Result<Vec<usize>> {
    field
        .split_whitespace()
        .map(|x| {
            x.parse::<usize>().map_err(|e| Error::Parse { line, detail: format!("{what}: {x:?}: {e}") })
        })
        .collect()
}

pub fn deserialize(text: &str) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let perr = |detail: String| Error::Parse { line, detail };
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 6 {
            return Err(perr(format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        let depth = fields[0].trim().parse::<usize>().map_err(|e| perr(format!("depth: {e}")))?;
        let kind = fields[1].trim().parse::<EpisodeKind>().map_err(perr)?;
        let tokens = parse_list(fields[2], line, "tokens")?;
        let episode = Episode::from_tokens(kind, depth, tokens).map_err(|e| match e {
            Error::Input(d) => perr(d),
            other => other,
        })?;
        let qpos = parse_list(fields[3], line, "query positions")?;
        let gold = parse_list(fields[4], line, "gold ids")?;
        let sup = parse_list(fields[5], line, "superseded positions")?;
        if qpos != episode.queries.iter().map(|q| q.position).collect::<Vec<_>>() {
            return Err(perr("query positions disagree with the token stream".into()));
        }
        if gold != episode.queries.iter().map(|q| q.gold).collect::<Vec<_>>() {
            return Err(perr("gold ids disagree with the token stream".into()));
        }
        if sup != episode.superseded_positions() {
            return Err(perr("superseded positions disagree with the token stream".into()));
        }
        out.push(episode);
    }
    Ok(out)
}

pub fn save(episodes: &[Episode], path: &Path) -> Result<()> {
    fs::write(path, serialize(episodes)).map_err(io_err(format!("writing {}", path.display())))
}

pub fn load(path: &Path) -> Result<Vec<Episode>> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    deserialize(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn depth_one_layout() {
        let ep = Episode::from_tokens(EpisodeKind::Pi, 1, vec![1, 2, 10, 200, 3, 10]).unwrap();
        assert_eq!(ep.queries[0].gold, 200);
        assert_eq!(ep.queries[0].position, 5);
        assert!(ep.superseded_positions().is_empty());
        assert!(ep.queries[0].stale.is_empty());
    }

    #[test]
    fn depth_three_and_thirty() {
        let mut rng = Rng::seed_from_u64(3);
        let ep = gen_pi_episode(3, &mut rng).unwrap();
        assert_eq!(ep.superseded_positions().len(), 2);
        assert_eq!(ep.queries[0].gold, ep.updates[2].value_token);
        assert_eq!(gen_pi_episode(30, &mut rng).unwrap().len(), 93);
        assert!(gen_pi_episode(0, &mut rng).is_err());
    }

    #[test]
    fn multi_entity_counts() {
        let mut rng = Rng::seed_from_u64(4);
        let ep = gen_multi_entity(3, 2, &mut rng).unwrap();
        assert_eq!(ep.updates.len(), 6);
        assert_eq!(ep.queries.len(), 3);
        assert_eq!(ep.superseded_positions().len(), 3);
        for q in &ep.queries {
            let last = ep.updates.iter().rev().find(|u| u.entity == q.entity).unwrap();
            assert_eq!(q.gold, last.value_token);
        }
        assert!(gen_multi_entity(100, 4, &mut rng).is_err());
    }

    #[test]
    fn distractors_are_labelled_but_never_queried() {
        let mut rng = Rng::seed_from_u64(5);
        let ep = gen_mixed_relevance(2, 3, 4, &mut rng).unwrap();
        assert_eq!(ep.queries.len(), 2);
        let labels = ep.forget_labels();
        for u in ep.updates.iter().filter(|u| !u.queried) {
            assert!(labels[u.position..u.position + 3].iter().all(|&b| b));
        }
    }

    #[test]
    fn wake_targets_retarget_answers() {
        let ep = Episode::from_tokens(EpisodeKind::Pi, 2, vec![1, 2, 10, 200, 2, 10, 201, 3, 10]).unwrap();
        let (t, m) = ep.wake_targets();
        assert_eq!(t[8], 201);
        assert!(m[8]);
        assert_eq!(t[0], 2);
        assert_eq!(ep.queries[0].stale, vec![200]);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        assert!(deserialize("").unwrap().is_empty());
        let good = serialize(&[gen_pi_episode(2, &mut Rng::seed_from_u64(1)).unwrap()]);
        let bad = good.replacen("\t1 ", "\t1 2000 ", 1);
        let text = format!("{good}{bad}");
        match deserialize(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
