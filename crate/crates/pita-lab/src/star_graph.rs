//! The star-graph path-finding task.
//!
//! An instance of `G(d, l)` is a tree of `d` paths of length `l` hanging off
//! a common root. The model sees the shuffled edge list plus a
//! `root, goal` query and must emit the root-to-goal path. The reference
//! policy reproduces the shortcut failure of next-token pretraining: it
//! emits the root, picks a uniformly random first child, then follows the
//! unique path, which is correct with probability exactly `1/d`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::Error;
use crate::mdp::{sample_rollout, Completion, Environment, Policy, State, Token};
use crate::preference::FeatureMap;
use crate::seeding::derive_rng;
use crate::Result;

/// Token layout: node ids `0..pool`, then the four specials at the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StarVocab {
    pool: u32,
}

impl StarVocab {
    pub fn new(pool: u32) -> Result<Self> {
        if pool == 0 {
            return Err(Error::config("node pool must be positive"));
        }
        Ok(StarVocab { pool })
    }

    pub fn pool(&self) -> u32 {
        self.pool
    }

    pub fn sep(&self) -> Token {
        Token(self.pool)
    }

    pub fn qsep(&self) -> Token {
        Token(self.pool + 1)
    }

    pub fn eq(&self) -> Token {
        Token(self.pool + 2)
    }

    pub fn eos(&self) -> Token {
        Token(self.pool + 3)
    }

    pub fn vocab_size(&self) -> u32 {
        self.pool + 4
    }

    pub fn is_node(&self, token: Token) -> bool {
        token.0 < self.pool
    }
}

/// One star-graph task instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StarGraphInstance {
    degree: usize,
    path_len: usize,
    root: Token,
    goal: Token,
    /// Parent-to-child pairs in a seeded random order.
    edges: Vec<(Token, Token)>,
    /// Root-to-goal node sequence, length `path_len + 1`.
    correct_path: Vec<Token>,
}

impl StarGraphInstance {
    /// Assemble an instance from parts, checking the tree invariants.
    /// `degree = 1` is allowed here for hand-built toys; random generation
    /// requires `degree >= 2`.
    pub fn from_parts(
        degree: usize,
        path_len: usize,
        root: Token,
        goal: Token,
        edges: Vec<(Token, Token)>,
    ) -> Result<Self> {
        if degree < 1 || path_len < 1 {
            return Err(Error::config("degree and path length must be >= 1"));
        }
        if edges.len() != degree * path_len {
            return Err(Error::config(format!(
                "expected {} edges, got {}",
                degree * path_len,
                edges.len()
            )));
        }
        let mut children: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut parent: BTreeMap<u32, u32> = BTreeMap::new();
        for &(src, dst) in &edges {
            children.entry(src.0).or_default().push(dst.0);
            if parent.insert(dst.0, src.0).is_some() {
                return Err(Error::config(format!("node {dst} has two parents")));
            }
        }
        if parent.contains_key(&root.0) {
            return Err(Error::config("root must not have a parent"));
        }
        if children.get(&root.0).map_or(0, Vec::len) != degree {
            return Err(Error::config("root child count must equal the degree"));
        }
        // Walk back from the goal to the root.
        let mut path = vec![goal.0];
        let mut cur = goal.0;
        while cur != root.0 {
            cur = *parent
                .get(&cur)
                .ok_or_else(|| Error::config("goal does not connect to the root"))?;
            path.push(cur);
            if path.len() > edges.len() + 1 {
                return Err(Error::config("cycle detected"));
            }
        }
        path.reverse();
        if path.len() != path_len + 1 {
            return Err(Error::config("goal must sit at the end of a full path"));
        }
        if children.contains_key(&goal.0) {
            return Err(Error::config("goal must be a leaf"));
        }
        Ok(StarGraphInstance {
            degree,
            path_len,
            root,
            goal,
            edges,
            correct_path: path.into_iter().map(Token).collect(),
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn path_len(&self) -> usize {
        self.path_len
    }

    pub fn root(&self) -> Token {
        self.root
    }

    pub fn goal(&self) -> Token {
        self.goal
    }

    pub fn edges(&self) -> &[(Token, Token)] {
        &self.edges
    }

    pub fn correct_path(&self) -> &[Token] {
        &self.correct_path
    }

    pub fn node_count(&self) -> usize {
        self.degree * self.path_len + 1
    }

    /// The root's children in edge-list order.
    pub fn root_children(&self) -> Vec<Token> {
        self.edges.iter().filter(|(s, _)| *s == self.root).map(|(_, d)| *d).collect()
    }
}

/// Sample a `G(d, l)` instance: node ids drawn without replacement from the
/// pool, edge order a uniform permutation, the goal uniform over leaves.
pub fn generate_instance<R: Rng>(
    degree: usize,
    path_len: usize,
    node_pool: u32,
    rng: &mut R,
) -> Result<StarGraphInstance> {
    if degree < 2 {
        return Err(Error::config("degree must be >= 2"));
    }
    if path_len < 1 {
        return Err(Error::config("path length must be >= 1"));
    }
    let need = degree * path_len + 1;
    if (node_pool as usize) < need {
        return Err(Error::config(format!(
            "node pool {node_pool} too small for {need} nodes"
        )));
    }
    // Partial Fisher-Yates over the pool.
    let mut ids: Vec<u32> = (0..node_pool).collect();
    for i in 0..need {
        let j = rng.gen_range(i..ids.len());
        ids.swap(i, j);
    }
    let root = Token(ids[0]);
    let mut edges = Vec::with_capacity(degree * path_len);
    let mut leaves = Vec::with_capacity(degree);
    for p in 0..degree {
        let nodes: Vec<Token> =
            (0..path_len).map(|i| Token(ids[1 + p * path_len + i])).collect();
        edges.push((root, nodes[0]));
        for w in nodes.windows(2) {
            edges.push((w[0], w[1]));
        }
        leaves.push(nodes[path_len - 1]);
    }
    edges.shuffle(rng);
    let goal = leaves[rng.gen_range(0..degree)];
    StarGraphInstance::from_parts(degree, path_len, root, goal, edges)
}

/// Token encoding of an instance:
/// `src, dst, SEP` per edge, then `QSEP, root, goal, EQ`.
/// Context length is `3 * d * l + 4`.
pub fn encode_instance(inst: &StarGraphInstance, vocab: &StarVocab) -> Result<State> {
    let mut tokens = Vec::with_capacity(3 * inst.edges.len() + 4);
    for &(src, dst) in &inst.edges {
        if !vocab.is_node(src) || !vocab.is_node(dst) {
            return Err(Error::parse(format!("edge ({src},{dst}) outside node pool")));
        }
        tokens.push(src);
        tokens.push(dst);
        tokens.push(vocab.sep());
    }
    tokens.push(vocab.qsep());
    tokens.push(inst.root);
    tokens.push(inst.goal);
    tokens.push(vocab.eq());
    Ok(State::new(tokens))
}

/// Invert [`encode_instance`].
pub fn decode_instance(state: &State, vocab: &StarVocab) -> Result<StarGraphInstance> {
    let parsed = ParsedStarState::parse(state.tokens(), vocab)?;
    StarGraphInstance::from_parts(
        parsed.degree,
        parsed.path_len,
        Token(parsed.root),
        Token(parsed.goal),
        parsed.edges.iter().map(|&(s, d)| (Token(s), Token(d))).collect(),
    )
}

/// A state decoded against the star-graph grammar: the instance context
/// plus whatever has been emitted after `EQ`.
struct ParsedStarState {
    edges: Vec<(u32, u32)>,
    children: BTreeMap<u32, Vec<u32>>,
    root: u32,
    goal: u32,
    degree: usize,
    path_len: usize,
    /// Node tokens emitted after EQ, EOS stripped.
    emitted: Vec<u32>,
    ended: bool,
}

impl ParsedStarState {
    fn parse(tokens: &[Token], vocab: &StarVocab) -> Result<Self> {
        let eq_pos = tokens
            .iter()
            .position(|&t| t == vocab.eq())
            .ok_or_else(|| Error::parse("no EQ marker in state"))?;
        if eq_pos < 3 {
            return Err(Error::parse("context too short"));
        }
        let (root, goal) = (tokens[eq_pos - 2], tokens[eq_pos - 1]);
        if tokens[eq_pos - 3] != vocab.qsep() {
            return Err(Error::parse("expected QSEP before the root/goal query"));
        }
        if !vocab.is_node(root) || !vocab.is_node(goal) {
            return Err(Error::parse("query tokens must be nodes"));
        }
        let edge_part = &tokens[..eq_pos - 3];
        if edge_part.len() % 3 != 0 {
            return Err(Error::parse("edge list length not a multiple of 3"));
        }
        let mut edges = Vec::with_capacity(edge_part.len() / 3);
        let mut children: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for chunk in edge_part.chunks(3) {
            let (src, dst, sep) = (chunk[0], chunk[1], chunk[2]);
            if !vocab.is_node(src) || !vocab.is_node(dst) || sep != vocab.sep() {
                return Err(Error::parse(format!("malformed edge chunk {src},{dst},{sep}")));
            }
            edges.push((src.0, dst.0));
            children.entry(src.0).or_default().push(dst.0);
        }
        let degree = children.get(&root.0).map_or(0, Vec::len);
        if degree == 0 {
            return Err(Error::parse("root has no outgoing edges"));
        }
        if edges.len() % degree != 0 {
            return Err(Error::parse("edge count is not degree * path length"));
        }
        let path_len = edges.len() / degree;

        let mut emitted = Vec::new();
        let mut ended = false;
        for &t in &tokens[eq_pos + 1..] {
            if ended {
                return Err(Error::parse("tokens after EOS"));
            }
            if t == vocab.eos() {
                ended = true;
            } else if vocab.is_node(t) {
                emitted.push(t.0);
            } else {
                return Err(Error::parse(format!("unexpected generated token {t}")));
            }
        }
        Ok(ParsedStarState {
            edges,
            children,
            root: root.0,
            goal: goal.0,
            degree,
            path_len,
            emitted,
            ended,
        })
    }

    /// Follow unique children from `from` to a leaf; true iff it is the goal.
    fn unique_walk_reaches_goal(&self, from: u32) -> bool {
        let mut cur = from;
        let mut steps = 0;
        loop {
            match self.children.get(&cur) {
                None => return cur == self.goal,
                Some(kids) if kids.len() == 1 => {
                    cur = kids[0];
                    steps += 1;
                    if steps > self.edges.len() {
                        return false;
                    }
                }
                Some(_) => return false,
            }
        }
    }

    /// Root-to-goal path recovered from the edge list.
    fn correct_path(&self) -> Result<Vec<u32>> {
        let parent: BTreeMap<u32, u32> =
            self.edges.iter().map(|&(s, d)| (d, s)).collect();
        let mut path = vec![self.goal];
        let mut cur = self.goal;
        while cur != self.root {
            cur = *parent
                .get(&cur)
                .ok_or_else(|| Error::parse("goal does not connect to the root"))?;
            path.push(cur);
            if path.len() > self.edges.len() + 1 {
                return Err(Error::parse("cycle while recovering the path"));
            }
        }
        path.reverse();
        Ok(path)
    }
}

/// The analytically specified pretraining shortcut: emit the root, pick one
/// of its children uniformly, then follow unique children and finish with
/// EOS after the leaf. Works on any state in the star-graph grammar.
#[derive(Debug, Clone, Copy)]
pub struct FaultyStarPolicy {
    vocab: StarVocab,
}

/// Construct the faulty shortcut reference policy.
pub fn faulty_reference(vocab: StarVocab) -> FaultyStarPolicy {
    FaultyStarPolicy { vocab }
}

impl Policy for FaultyStarPolicy {
    fn action_distribution(&self, state: &State) -> Result<Vec<f64>> {
        let parsed = ParsedStarState::parse(state.tokens(), &self.vocab)?;
        if parsed.ended {
            return Err(Error::Domain("policy queried at a terminal state".into()));
        }
        let mut probs = vec![0.0; self.vocab.vocab_size() as usize];
        match parsed.emitted.last() {
            None => probs[parsed.root as usize] = 1.0,
            Some(&last) => match parsed.children.get(&last) {
                Some(kids) if kids.len() == 1 => probs[kids[0] as usize] = 1.0,
                Some(kids) => {
                    let p = 1.0 / kids.len() as f64;
                    for &k in kids {
                        probs[k as usize] = p;
                    }
                }
                None => probs[self.vocab.eos().0 as usize] = 1.0,
            },
        }
        Ok(probs)
    }
}

/// Exact binary reward: 1 iff the emitted node sequence equals the correct
/// path exactly, followed by EOS.
pub fn exact_reward(inst: &StarGraphInstance, completion: &Completion, vocab: &StarVocab) -> f64 {
    let full = completion.full_state();
    let Ok(parsed) = ParsedStarState::parse(full.tokens(), vocab) else {
        return 0.0;
    };
    let correct: Vec<u32> = inst.correct_path.iter().map(|t| t.0).collect();
    f64::from(parsed.ended && parsed.emitted == correct)
}

/// Exact-match reward readable from any completion's own context tokens:
/// 1 iff the emitted node sequence is the root-to-goal path, then EOS.
pub fn star_reward(vocab: StarVocab) -> impl Fn(&Completion) -> f64 + Clone + Send + Sync {
    move |c: &Completion| {
        let full = c.full_state();
        let Ok(parsed) = ParsedStarState::parse(full.tokens(), &vocab) else {
            return 0.0;
        };
        let Ok(correct) = parsed.correct_path() else {
            return 0.0;
        };
        f64::from(parsed.ended && parsed.emitted == correct)
    }
}

/// Build the environment over a set of instances of common `(d, l)`:
/// uniform initial contexts over the encodings, horizon `l + 2`, and the
/// exact-match reward parsed from each completion's own context.
pub fn star_environment(
    vocab: StarVocab,
    instances: &[StarGraphInstance],
) -> Result<Environment> {
    if instances.is_empty() {
        return Err(Error::config("need at least one instance"));
    }
    let path_len = instances[0].path_len;
    if instances.iter().any(|i| i.path_len != path_len) {
        return Err(Error::config("instances must share a path length"));
    }
    let contexts: Result<Vec<(State, f64)>> = instances
        .iter()
        .map(|inst| Ok((encode_instance(inst, &vocab)?, 1.0)))
        .collect();
    Environment::new(
        vocab.vocab_size(),
        path_len + 2,
        vocab.eos(),
        contexts?,
        star_reward(vocab),
    )
}

/// The engineered 4-dimensional state embedding, computed purely from the
/// tokens: `[bias, reaches_goal, progress, on_root]`, rescaled to norm at
/// most `bound`.
///
/// `reaches_goal` is +1 when following unique children from the last
/// emitted node (the root if none) terminates at the goal, else -1;
/// `progress` is the fraction of the path emitted; `on_root` flags states
/// where only the root has been emitted.
pub fn star_feature_map(vocab: StarVocab, bound: f64) -> FeatureMap {
    // Raw norm is at most sqrt(1 + 1 + 1 + 1) = 2.
    let scale = bound / 2.0;
    FeatureMap::new(4, bound, move |state: &State| {
        let parsed = ParsedStarState::parse(state.tokens(), &vocab)?;
        let from = parsed.emitted.last().copied().unwrap_or(parsed.root);
        let reaches = if parsed.unique_walk_reaches_goal(from) { 1.0 } else { -1.0 };
        let progress = parsed.emitted.len() as f64 / (parsed.path_len + 1) as f64;
        let on_root = f64::from(parsed.emitted.as_slice() == [parsed.root]);
        Ok(DVector::from_vec(vec![scale, scale * reaches, scale * progress, scale * on_root]))
    })
}

/// Accuracy metrics of a policy over instances: single-sample exact match
/// and majority vote over `k` samples (modal-answer ties resolved to the
/// lexicographically smallest answer).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub pass1: f64,
    pub majk: f64,
}

pub fn evaluate_policy<P: Policy + ?Sized>(
    policy: &P,
    vocab: StarVocab,
    instances: &[StarGraphInstance],
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    if k < 1 {
        return Err(Error::config("k must be >= 1"));
    }
    let results: Result<Vec<(bool, bool)>> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| {
            let env = star_environment(vocab, std::slice::from_ref(inst))?;
            let context = encode_instance(inst, &vocab)?;
            let mut rng = derive_rng(seed, "star-eval", idx as u64);
            let correct: Vec<u32> = inst.correct_path().iter().map(|t| t.0).collect();
            let mut answers: Vec<Vec<u32>> = Vec::with_capacity(k);
            for _ in 0..k {
                let c = sample_rollout(policy, &env, &context, &mut rng)?;
                let mut answer: Vec<u32> = c.suffix().iter().map(|t| t.0).collect();
                if answer.last() == Some(&vocab.eos().0) {
                    answer.pop();
                }
                answers.push(answer);
            }
            let pass1 = answers[0] == correct;
            let mut counts: BTreeMap<&[u32], usize> = BTreeMap::new();
            for a in &answers {
                *counts.entry(a.as_slice()).or_default() += 1;
            }
            // Ascending key order makes the first maximum the smallest.
            let mut modal: &[u32] = &[];
            let mut best = 0usize;
            for (answer, count) in counts {
                if count > best {
                    best = count;
                    modal = answer;
                }
            }
            Ok((pass1, modal == correct.as_slice()))
        })
        .collect();
    let results = results?;
    let n = results.len() as f64;
    Ok(EvalReport {
        pass1: results.iter().filter(|(p, _)| *p).count() as f64 / n,
        majk: results.iter().filter(|(_, m)| *m).count() as f64 / n,
    })
}

/// Plain-text serialization, one instance per line:
/// `d l root goal | src,dst;src,dst;... | p0 p1 ...`.
pub fn instance_to_line(inst: &StarGraphInstance) -> String {
    let edges: Vec<String> =
        inst.edges.iter().map(|(s, d)| format!("{},{}", s.0, d.0)).collect();
    let path: Vec<String> = inst.correct_path.iter().map(|t| t.0.to_string()).collect();
    format!(
        "{} {} {} {} | {} | {}",
        inst.degree,
        inst.path_len,
        inst.root.0,
        inst.goal.0,
        edges.join(";"),
        path.join(" ")
    )
}

pub fn instance_from_line(line: &str) -> Result<StarGraphInstance> {
    let parts: Vec<&str> = line.split('|').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::parse(format!("expected 3 '|' fields, got {}", parts.len())));
    }
    let head: Vec<&str> = parts[0].split_whitespace().collect();
    if head.len() != 4 {
        return Err(Error::parse("header must be 'd l root goal'"));
    }
    let num = |s: &str| -> Result<u32> {
        s.parse::<u32>().map_err(|e| Error::parse(format!("bad integer {s:?}: {e}")))
    };
    let degree = num(head[0])? as usize;
    let path_len = num(head[1])? as usize;
    let root = Token(num(head[2])?);
    let goal = Token(num(head[3])?);
    let mut edges = Vec::new();
    for pair in parts[1].split(';').filter(|p| !p.is_empty()) {
        let (s, d) = pair
            .split_once(',')
            .ok_or_else(|| Error::parse(format!("bad edge {pair:?}")))?;
        edges.push((Token(num(s)?), Token(num(d)?)));
    }
    let inst = StarGraphInstance::from_parts(degree, path_len, root, goal, edges)?;
    let path: Result<Vec<Token>> =
        parts[2].split_whitespace().map(|s| Ok(Token(num(s)?))).collect();
    let path = path?;
    if path != inst.correct_path {
        return Err(Error::parse("stored path disagrees with the edge list"));
    }
    Ok(inst)
}

pub fn write_instances(instances: &[StarGraphInstance], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for inst in instances {
        writeln!(file, "{}", instance_to_line(inst))?;
    }
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<StarGraphInstance>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            instance_from_line(&line)
                .map_err(|e| Error::parse(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{enumerate_completions, greedy_decode, FnPolicy};
    use approx::assert_relative_eq;

    fn vocab50() -> StarVocab {
        StarVocab::new(50).unwrap()
    }

    fn make(d: usize, l: usize, seed: u64) -> StarGraphInstance {
        let mut rng = derive_rng(seed, "star-test-gen", 0);
        generate_instance(d, l, 50, &mut rng).unwrap()
    }

    #[test]
    fn counts_for_g24_and_g38() {
        let i = make(2, 4, 1);
        assert_eq!(i.node_count(), 9);
        assert_eq!(i.edges().len(), 8);
        assert_eq!(i.correct_path().len(), 5);

        let i = make(3, 8, 2);
        assert_eq!(i.node_count(), 25);
        assert_eq!(i.edges().len(), 24);
    }

    #[test]
    fn generated_instances_satisfy_tree_invariants() {
        for seed in 0..2000u64 {
            let mut rng = derive_rng(seed, "star-invariants", 0);
            let d = 2 + (seed % 3) as usize;
            let l = 1 + (seed % 4) as usize;
            let inst = generate_instance(d, l, 50, &mut rng).unwrap();
            // from_parts re-validates everything; also check distinctness
            // and uniqueness of the goal path.
            let mut nodes: Vec<u32> = inst.edges().iter().flat_map(|&(s, t)| [s.0, t.0]).collect();
            nodes.sort_unstable();
            nodes.dedup();
            assert_eq!(nodes.len(), inst.node_count());
            assert_eq!(inst.root_children().len(), d);
            assert_eq!(inst.correct_path().last(), Some(&inst.goal()));
            assert_eq!(inst.correct_path().first(), Some(&inst.root()));
        }
    }

    #[test]
    fn pool_too_small_is_rejected() {
        let mut rng = derive_rng(0, "star-pool", 0);
        assert!(generate_instance(3, 4, 12, &mut rng).is_err());
        assert!(generate_instance(3, 4, 13, &mut rng).is_ok());
    }

    #[test]
    fn encode_smallest_instance() {
        // d=1, l=1 toy: edges [(0,1)], root 0, goal 1.
        let inst =
            StarGraphInstance::from_parts(1, 1, Token(0), Token(1), vec![(Token(0), Token(1))])
                .unwrap();
        let vocab = StarVocab::new(2).unwrap();
        let ctx = encode_instance(&inst, &vocab).unwrap();
        let ids: Vec<u32> = ctx.tokens().iter().map(|t| t.0).collect();
        // SEP=2, QSEP=3, EQ=4.
        assert_eq!(ids, vec![0, 1, 2, 3, 0, 1, 4]);
    }

    #[test]
    fn encode_decode_round_trip_and_length() {
        let vocab = vocab50();
        for seed in 0..1000u64 {
            let d = 2 + (seed % 3) as usize;
            let l = 1 + (seed % 5) as usize;
            let inst = make(d, l, seed + 10);
            let ctx = encode_instance(&inst, &vocab).unwrap();
            assert_eq!(ctx.len(), 3 * d * l + 4);
            let back = decode_instance(&ctx, &vocab).unwrap();
            assert_eq!(back, inst);
        }
    }

    #[test]
    fn faulty_policy_emits_root_then_uniform_child() {
        let vocab = vocab50();
        let inst = make(2, 4, 3);
        let ctx = encode_instance(&inst, &vocab).unwrap();
        let policy = faulty_reference(vocab);
        let probs = policy.action_distribution(&ctx).unwrap();
        assert_eq!(probs[inst.root().0 as usize], 1.0);

        let after_root = ctx.extend(inst.root());
        let probs = policy.action_distribution(&after_root).unwrap();
        for child in inst.root_children() {
            assert_relative_eq!(probs[child.0 as usize], 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn faulty_policy_support_is_d_paths_at_one_over_d() {
        let vocab = vocab50();
        for (d, seed) in [(2usize, 5u64), (3, 6), (4, 7)] {
            let inst = make(d, 3, seed);
            let env = star_environment(vocab, std::slice::from_ref(&inst)).unwrap();
            let ctx = encode_instance(&inst, &vocab).unwrap();
            let policy = faulty_reference(vocab);
            let completions = enumerate_completions(&env, &policy, &ctx, 100).unwrap();
            assert_eq!(completions.len(), d);
            for (_, p) in &completions {
                assert_relative_eq!(*p, 1.0 / d as f64, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn greedy_reference_picks_lowest_id_child() {
        let vocab = vocab50();
        let inst = make(3, 4, 8);
        let env = star_environment(vocab, std::slice::from_ref(&inst)).unwrap();
        let ctx = encode_instance(&inst, &vocab).unwrap();
        let policy = faulty_reference(vocab);
        let c = greedy_decode(&policy, &env, &ctx).unwrap();
        assert_eq!(c.suffix()[0], inst.root());
        let min_child = inst.root_children().iter().map(|t| t.0).min().unwrap();
        assert_eq!(c.suffix()[1].0, min_child);
    }

    #[test]
    fn exact_reward_cases() {
        let vocab = vocab50();
        let inst = make(2, 4, 9);
        let ctx = encode_instance(&inst, &vocab).unwrap();

        let mut correct: Vec<Token> = inst.correct_path().to_vec();
        correct.push(vocab.eos());
        let good = Completion::new(ctx.clone(), correct.clone(), true);
        assert_eq!(exact_reward(&inst, &good, &vocab), 1.0);

        // Wrong first child, rest of that path valid.
        let other_child =
            *inst.root_children().iter().find(|c| **c != inst.correct_path()[1]).unwrap();
        let mut wrong = vec![inst.root(), other_child];
        let mut cur = other_child;
        let children: BTreeMap<u32, Vec<u32>> = {
            let mut m: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for &(s, d) in inst.edges() {
                m.entry(s.0).or_default().push(d.0);
            }
            m
        };
        while let Some(kids) = children.get(&cur.0) {
            cur = Token(kids[0]);
            wrong.push(cur);
        }
        wrong.push(vocab.eos());
        let bad = Completion::new(ctx.clone(), wrong, true);
        assert_eq!(exact_reward(&inst, &bad, &vocab), 0.0);

        // Swapped interior node.
        let mut swapped = correct;
        swapped.swap(1, 2);
        let bad2 = Completion::new(ctx, swapped, true);
        assert_eq!(exact_reward(&inst, &bad2, &vocab), 0.0);
    }

    #[test]
    fn faulty_accuracy_matches_one_over_d() {
        let vocab = vocab50();
        let policy = faulty_reference(vocab);
        for (d, lo, hi) in [(2usize, 0.45, 0.55), (3, 0.28, 0.39)] {
            let mut rng = derive_rng(100 + d as u64, "star-acc-gen", 0);
            let instances: Vec<_> =
                (0..2000).map(|_| generate_instance(d, 4, 50, &mut rng).unwrap()).collect();
            let report = evaluate_policy(&policy, vocab, &instances, 1, 13).unwrap();
            assert!(
                report.pass1 >= lo && report.pass1 <= hi,
                "d={d}: pass@1 = {}",
                report.pass1
            );
            assert_eq!(report.pass1, report.majk); // maj@1 == pass@1
        }
    }

    #[test]
    fn feature_map_reachability_and_norm() {
        let vocab = vocab50();
        let phi = star_feature_map(vocab, 1.0);
        let inst = make(2, 4, 20);
        let ctx = encode_instance(&inst, &vocab).unwrap();
        let correct_child = inst.correct_path()[1];
        let wrong_child =
            *inst.root_children().iter().find(|c| **c != correct_child).unwrap();

        let scale = 0.5;
        let after_root = ctx.extend(inst.root());
        let good = phi.features(&after_root.extend(correct_child)).unwrap();
        assert_relative_eq!(good[1], scale, epsilon = 1e-15);
        let bad = phi.features(&after_root.extend(wrong_child)).unwrap();
        assert_relative_eq!(bad[1], -scale, epsilon = 1e-15);
        // on_root flags exactly the root-only state.
        assert_relative_eq!(phi.features(&after_root).unwrap()[3], scale, epsilon = 1e-15);
        assert_eq!(phi.features(&ctx).unwrap()[3], 0.0);

        // Norm bound over random reachable states.
        let env = star_environment(vocab, std::slice::from_ref(&inst)).unwrap();
        let policy = faulty_reference(vocab);
        for i in 0..200u64 {
            let mut rng = derive_rng(i, "star-feature-norm", 0);
            let c = sample_rollout(&policy, &env, &ctx, &mut rng).unwrap();
            let mut s = ctx.clone();
            for &t in c.suffix() {
                s = s.extend(t);
                if s.last() == Some(vocab.eos()) {
                    break;
                }
                assert!(phi.features(&s).unwrap().norm() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn feature_map_rejects_malformed_states() {
        let vocab = vocab50();
        let phi = star_feature_map(vocab, 1.0);
        assert!(phi.features(&State::from_ids(&[1, 2, 3])).is_err());
    }

    /// A policy that always emits the correct path (oracle decode).
    fn oracle_policy(vocab: StarVocab) -> impl Policy {
        FnPolicy(move |state: &State| {
            let parsed = ParsedStarState::parse(state.tokens(), &vocab)?;
            let path = parsed.correct_path()?;
            let mut probs = vec![0.0; vocab.vocab_size() as usize];
            let next = if parsed.emitted.len() < path.len() {
                Token(path[parsed.emitted.len()])
            } else {
                vocab.eos()
            };
            probs[next.0 as usize] = 1.0;
            Ok(probs)
        })
    }

    #[test]
    fn deterministic_correct_policy_scores_one() {
        let vocab = vocab50();
        let mut rng = derive_rng(30, "star-oracle-gen", 0);
        let instances: Vec<_> =
            (0..50).map(|_| generate_instance(2, 4, 50, &mut rng).unwrap()).collect();
        let report = evaluate_policy(&oracle_policy(vocab), vocab, &instances, 4, 31).unwrap();
        assert_eq!(report.pass1, 1.0);
        assert_eq!(report.majk, 1.0);
    }

    #[test]
    fn maj3_of_faulty_reference_is_binomial_half() {
        // d = 2: P(majority of 3 fair picks correct) = 0.5.
        let vocab = vocab50();
        let policy = faulty_reference(vocab);
        let mut rng = derive_rng(32, "star-maj3-gen", 0);
        let instances: Vec<_> =
            (0..2000).map(|_| generate_instance(2, 4, 50, &mut rng).unwrap()).collect();
        let report = evaluate_policy(&policy, vocab, &instances, 3, 33).unwrap();
        assert!((report.majk - 0.5).abs() < 0.03, "maj@3 = {}", report.majk);
    }

    #[test]
    fn serialization_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("instances.txt");
        let instances: Vec<_> = (0..20).map(|s| make(2 + (s % 2) as usize, 3, 40 + s)).collect();
        write_instances(&instances, &path).unwrap();
        let back = read_instances(&path).unwrap();
        assert_eq!(back, instances);

        let line = instance_to_line(&instances[0]);
        assert_eq!(instance_from_line(&line).unwrap(), instances[0]);
        assert!(instance_from_line("1 2 3 | bad").is_err());
    }
}
