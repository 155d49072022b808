//! Desk-scale POMDP suite: long-term memory (T-maze, non-match), memory
//! plus navigation with respawns (goal maze), and pure reactivity
//! (chase). All environments share one action set of four discrete
//! actions and emit fixed-width feature observations. Episode lengths
//! are fixed per configuration, so batched environments stay
//! phase-aligned when stepped in lockstep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Unified discrete action set.
pub const NUM_ACTIONS: usize = 4;
pub const ACTION_UP: usize = 0;
pub const ACTION_DOWN: usize = 1;
pub const ACTION_LEFT: usize = 2;
pub const ACTION_RIGHT: usize = 3;

/// One transition's outputs.
#[derive(Debug, Clone)]
pub struct EnvStep {
    /// Observation after the transition.
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Optional diagnostics (e.g. goal collections).
    pub info: Vec<(&'static str, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    TMaze,
    NonMatch,
    GoalMaze,
    Reactive,
}

impl EnvKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvKind::TMaze => "tmaze",
            EnvKind::NonMatch => "nonmatch",
            EnvKind::GoalMaze => "goalmaze",
            EnvKind::Reactive => "reactive",
        }
    }

    pub fn parse(s: &str) -> Option<EnvKind> {
        Some(match s {
            "tmaze" => EnvKind::TMaze,
            "nonmatch" => EnvKind::NonMatch,
            "goalmaze" => EnvKind::GoalMaze,
            "reactive" => EnvKind::Reactive,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// T-maze corridor length L; the cue appears at t=0 and the
    /// junction at t=L.
    pub corridor: usize,
    /// Non-match delay D between sample and choice.
    pub delay: usize,
    /// Goal-maze grid side length.
    pub grid: usize,
    /// Episode length for goal maze and reactive.
    pub episode_cap: usize,
    /// Goal-maze: number of rewarded collections (each triggers a
    /// respawn teleport).
    pub respawns: usize,
    pub seed: u64,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::Domain {
                    op: "env-config",
                    msg: format!("{what} must be positive"),
                })
            } else {
                Ok(())
            }
        };
        match self.kind {
            EnvKind::TMaze => positive(self.corridor, "corridor")?,
            EnvKind::NonMatch => positive(self.delay, "delay")?,
            EnvKind::GoalMaze => {
                positive(self.grid, "grid")?;
                positive(self.respawns, "respawns")?;
                positive(self.episode_cap, "episode_cap")?;
                if self.grid < 2 {
                    return Err(Error::Domain {
                        op: "env-config",
                        msg: "grid must be at least 2".into(),
                    });
                }
                // Minimal solvable length: one corner-to-corner trip.
                let min_len = 2 * (self.grid - 1);
                if self.episode_cap < min_len {
                    return Err(Error::Domain {
                        op: "env-config",
                        msg: format!("episode_cap {} < minimal solvable length {min_len}", self.episode_cap),
                    });
                }
            }
            EnvKind::Reactive => positive(self.episode_cap, "episode_cap")?,
        }
        Ok(())
    }

    /// Episode length in steps; constant per configuration.
    pub fn episode_len(&self) -> usize {
        match self.kind {
            EnvKind::TMaze => self.corridor + 1,
            EnvKind::NonMatch => self.delay + 2,
            EnvKind::GoalMaze | EnvKind::Reactive => self.episode_cap,
        }
    }

    pub fn obs_width(&self) -> usize {
        match self.kind {
            // [cue-up, cue-down, position fraction, junction flag]
            EnvKind::TMaze => 4,
            // [sample obj(2) ∥ left obj(2) ∥ right obj(2) ∥ phase(3)]
            EnvKind::NonMatch => 9,
            // [one-hot position ∥ collected-last-step flag]
            EnvKind::GoalMaze => self.grid * self.grid + 1,
            // [one-hot target direction]
            EnvKind::Reactive => 4,
        }
    }
}

pub trait Env {
    fn obs_width(&self) -> usize;
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }
    /// Fixed episode length of this instance.
    fn episode_len(&self) -> usize;
    /// Start a new episode and return its first observation.
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<EnvStep>;
    /// Serialize the full latent state (for checkpoints).
    fn save_state(&self) -> Vec<u8>;
    fn load_state(&mut self, bytes: &[u8]) -> Result<()>;
}

pub fn make_env(config: &EnvConfig) -> Result<Box<dyn Env>> {
    config.validate()?;
    Ok(match config.kind {
        EnvKind::TMaze => Box::new(TMaze::new(config)),
        EnvKind::NonMatch => Box::new(NonMatch::new(config)),
        EnvKind::GoalMaze => Box::new(GoalMaze::new(config)),
        EnvKind::Reactive => Box::new(Reactive::new(config)),
    })
}

/// Optimal expected episode return, by exhaustive search over the
/// (small) latent state space.
pub fn oracle_return(config: &EnvConfig) -> Result<f64> {
    config.validate()?;
    Ok(match config.kind {
        // The cue determines the junction answer; the optimal policy is
        // always right.
        EnvKind::TMaze => 1.0,
        EnvKind::NonMatch => 1.0,
        EnvKind::Reactive => 0.1 * config.episode_cap as f64,
        EnvKind::GoalMaze => goalmaze_oracle(config),
    })
}

/// splitmix64 finalizer; mixes a seed with a stream index so episodes
/// and instances get decorrelated RNG streams.
pub(crate) fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    // Per-episode seeding: the episode layout depends only on (seed,
    // episode index), never on actions taken in earlier episodes.
    ChaCha8Rng::seed_from_u64(mix64(seed, episode))
}

// ── State serialization helpers ──────────────────────────────────────

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn new() -> Self {
        ByteWriter(Vec::new())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn byte(&mut self, v: u8) {
        self.0.push(v);
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("env state truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Checkpoint("env state has trailing bytes".into()));
        }
        Ok(())
    }
}

/// RNG state shared by all envs: the per-episode stream is recreated
/// from (seed, episode) and advanced to the stored word position.
#[derive(Debug, Clone)]
struct EnvRng {
    seed: u64,
    episode: u64,
    rng: ChaCha8Rng,
}

impl EnvRng {
    fn new(seed: u64) -> Self {
        EnvRng {
            seed,
            episode: 0,
            rng: episode_rng(seed, 0),
        }
    }

    /// Advance to the next episode's stream.
    fn next_episode(&mut self) {
        self.episode += 1;
        self.rng = episode_rng(self.seed, self.episode);
    }

    fn save(&self, w: &mut ByteWriter) {
        w.u64(self.seed);
        w.u64(self.episode);
        w.u128(self.rng.get_word_pos());
    }

    fn load(r: &mut ByteReader) -> Result<Self> {
        let seed = r.u64()?;
        let episode = r.u64()?;
        let word_pos = r.u128()?;
        let mut rng = episode_rng(seed, episode);
        rng.set_word_pos(word_pos);
        Ok(EnvRng { seed, episode, rng })
    }
}

fn check_action(action: usize) -> Result<()> {
    if action >= NUM_ACTIONS {
        return Err(Error::ActionOutOfRange {
            action,
            num_actions: NUM_ACTIONS,
        });
    }
    Ok(())
}

fn check_not_done(done: bool) -> Result<()> {
    if done {
        return Err(Error::StepAfterDone);
    }
    Ok(())
}

// ── T-maze ───────────────────────────────────────────────────────────

/// Corridor of length L with a binary cue shown only at t=0. The agent
/// auto-advances down the corridor regardless of action; at the
/// junction (t=L) action up/down is scored +1 if it matches the cue,
/// −1 otherwise, and the episode ends. Isolates long-term memory.
pub struct TMaze {
    corridor: usize,
    rng: EnvRng,
    cue_up: bool,
    pos: usize,
    done: bool,
}

impl TMaze {
    fn new(cfg: &EnvConfig) -> Self {
        let mut env = TMaze {
            corridor: cfg.corridor,
            rng: EnvRng::new(cfg.seed),
            cue_up: false,
            pos: 0,
            done: true,
        };
        env.begin_episode(false);
        env
    }

    fn begin_episode(&mut self, advance: bool) {
        if advance {
            self.rng.next_episode();
        }
        self.cue_up = self.rng.rng.gen::<bool>();
        self.pos = 0;
        self.done = false;
    }

    fn obs(&self) -> Vec<f64> {
        let at_start = self.pos == 0;
        vec![
            if at_start && self.cue_up { 1.0 } else { 0.0 },
            if at_start && !self.cue_up { 1.0 } else { 0.0 },
            self.pos as f64 / self.corridor as f64,
            if self.pos == self.corridor { 1.0 } else { 0.0 },
        ]
    }
}

impl Env for TMaze {
    fn obs_width(&self) -> usize {
        4
    }
    fn episode_len(&self) -> usize {
        self.corridor + 1
    }

    fn reset(&mut self) -> Vec<f64> {
        self.begin_episode(true);
        self.obs()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        check_action(action)?;
        check_not_done(self.done)?;
        if self.pos < self.corridor {
            // Corridor auto-advances: movement is not the learning
            // problem here, memory is.
            self.pos += 1;
            Ok(EnvStep {
                obs: self.obs(),
                reward: 0.0,
                done: false,
                info: vec![],
            })
        } else {
            let correct = (action == ACTION_UP && self.cue_up)
                || (action == ACTION_DOWN && !self.cue_up);
            self.done = true;
            Ok(EnvStep {
                obs: self.obs(),
                reward: if correct { 1.0 } else { -1.0 },
                done: true,
                info: vec![],
            })
        }
    }

    fn save_state(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.rng.save(&mut w);
        w.u64(self.pos as u64);
        w.byte(self.cue_up as u8);
        w.byte(self.done as u8);
        w.0
    }

    fn load_state(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = ByteReader::new(bytes);
        self.rng = EnvRng::load(&mut r)?;
        self.pos = r.u64()? as usize;
        self.cue_up = r.byte()? != 0;
        self.done = r.byte()? != 0;
        r.finish()
    }
}

// ── Non-match ────────────────────────────────────────────────────────

/// Delayed non-match-to-sample. A sample object (of two) is shown for
/// one step, followed by D blank steps, then both objects appear on
/// random sides; choosing the side holding the non-matching object
/// scores +1, the matching one −1.
pub struct NonMatch {
    delay: usize,
    rng: EnvRng,
    sample: u8,
    left: u8,
    t: usize,
    done: bool,
}

impl NonMatch {
    fn new(cfg: &EnvConfig) -> Self {
        let mut env = NonMatch {
            delay: cfg.delay,
            rng: EnvRng::new(cfg.seed),
            sample: 0,
            left: 0,
            t: 0,
            done: true,
        };
        env.begin_episode(false);
        env
    }

    fn begin_episode(&mut self, advance: bool) {
        if advance {
            self.rng.next_episode();
        }
        self.sample = self.rng.rng.gen_range(0..2u8);
        self.left = self.rng.rng.gen_range(0..2u8);
        self.t = 0;
        self.done = false;
    }

    /// Steps: t=0 sample, t=1..=D blank delay, t=D+1 choice.
    fn obs(&self) -> Vec<f64> {
        let mut o = vec![0.0; 9];
        if self.t == 0 {
            o[self.sample as usize] = 1.0;
            o[6] = 1.0; // sample phase
        } else if self.t <= self.delay {
            o[7] = 1.0; // delay phase
        } else {
            o[2 + self.left as usize] = 1.0; // left slot
            o[4 + (1 - self.left) as usize] = 1.0; // right slot
            o[8] = 1.0; // choice phase
        }
        o
    }
}

impl Env for NonMatch {
    fn obs_width(&self) -> usize {
        9
    }
    fn episode_len(&self) -> usize {
        self.delay + 2
    }

    fn reset(&mut self) -> Vec<f64> {
        self.begin_episode(true);
        self.obs()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        check_action(action)?;
        check_not_done(self.done)?;
        if self.t <= self.delay {
            self.t += 1;
            return Ok(EnvStep {
                obs: self.obs(),
                reward: 0.0,
                done: false,
                info: vec![],
            });
        }
        // Choice step: action 0 takes the left object, 1 the right;
        // anything else is wrong by fiat.
        let chosen = match action {
            0 => Some(self.left),
            1 => Some(1 - self.left),
            _ => None,
        };
        let reward = match chosen {
            Some(obj) if obj != self.sample => 1.0,
            _ => -1.0,
        };
        self.done = true;
        Ok(EnvStep {
            obs: self.obs(),
            reward,
            done: true,
            info: vec![],
        })
    }

    fn save_state(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.rng.save(&mut w);
        w.u64(self.t as u64);
        w.byte(self.sample);
        w.byte(self.left);
        w.byte(self.done as u8);
        w.0
    }

    fn load_state(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = ByteReader::new(bytes);
        self.rng = EnvRng::load(&mut r)?;
        self.t = r.u64()? as usize;
        self.sample = r.byte()?;
        self.left = r.byte()?;
        self.done = r.byte()? != 0;
        r.finish()
    }
}

// ── Goal maze ────────────────────────────────────────────────────────

/// Open G×G room with a hidden goal cell, fixed within the episode.
/// Entering the goal scores +1 and teleports the agent to a random
/// non-goal cell; only the first `respawns` collections are rewarded
/// (and teleported). Episodes run exactly `episode_cap` steps. The
/// observation is the one-hot agent position plus a collected-last-step
/// flag — the goal coordinates are never observable.
pub struct GoalMaze {
    grid: usize,
    cap: usize,
    respawns: usize,
    rng: EnvRng,
    goal: usize,
    pos: usize,
    t: usize,
    collected: usize,
    just_collected: bool,
    done: bool,
}

impl GoalMaze {
    fn new(cfg: &EnvConfig) -> Self {
        let mut env = GoalMaze {
            grid: cfg.grid,
            cap: cfg.episode_cap,
            respawns: cfg.respawns,
            rng: EnvRng::new(cfg.seed),
            goal: 0,
            pos: 0,
            t: 0,
            collected: 0,
            just_collected: false,
            done: true,
        };
        env.begin_episode(false);
        env
    }

    fn begin_episode(&mut self, advance: bool) {
        if advance {
            self.rng.next_episode();
        }
        let cells = self.grid * self.grid;
        self.goal = self.rng.rng.gen_range(0..cells);
        self.pos = self.sample_non_goal();
        self.t = 0;
        self.collected = 0;
        self.just_collected = false;
        self.done = false;
    }

    fn sample_non_goal(&mut self) -> usize {
        let cells = self.grid * self.grid;
        loop {
            let c = self.rng.rng.gen_range(0..cells);
            if c != self.goal {
                return c;
            }
        }
    }

    fn obs(&self) -> Vec<f64> {
        let cells = self.grid * self.grid;
        let mut o = vec![0.0; cells + 1];
        o[self.pos] = 1.0;
        if self.just_collected {
            o[cells] = 1.0;
        }
        o
    }

    fn apply_move(&self, pos: usize, action: usize) -> usize {
        let g = self.grid;
        let (r, c) = (pos / g, pos % g);
        let (nr, nc) = match action {
            ACTION_UP => (r.saturating_sub(1), c),
            ACTION_DOWN => ((r + 1).min(g - 1), c),
            ACTION_LEFT => (r, c.saturating_sub(1)),
            ACTION_RIGHT => (r, (c + 1).min(g - 1)),
            _ => (r, c),
        };
        nr * g + nc
    }

    #[cfg(test)]
    pub(crate) fn goal_cell(&self) -> usize {
        self.goal
    }
}

impl Env for GoalMaze {
    fn obs_width(&self) -> usize {
        self.grid * self.grid + 1
    }
    fn episode_len(&self) -> usize {
        self.cap
    }

    fn reset(&mut self) -> Vec<f64> {
        self.begin_episode(true);
        self.obs()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        check_action(action)?;
        check_not_done(self.done)?;
        let next = self.apply_move(self.pos, action);
        let mut reward = 0.0;
        self.just_collected = false;
        if next == self.goal && self.collected < self.respawns {
            reward = 1.0;
            self.collected += 1;
            self.just_collected = true;
            self.pos = self.sample_non_goal();
        } else {
            self.pos = next;
        }
        self.t += 1;
        self.done = self.t >= self.cap;
        Ok(EnvStep {
            obs: self.obs(),
            reward,
            done: self.done,
            info: vec![("collected", self.collected as f64)],
        })
    }

    fn save_state(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.rng.save(&mut w);
        for v in [self.goal, self.pos, self.t, self.collected] {
            w.u64(v as u64);
        }
        w.byte(self.just_collected as u8);
        w.byte(self.done as u8);
        w.0
    }

    fn load_state(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = ByteReader::new(bytes);
        self.rng = EnvRng::load(&mut r)?;
        self.goal = r.u64()? as usize;
        self.pos = r.u64()? as usize;
        self.t = r.u64()? as usize;
        self.collected = r.u64()? as usize;
        self.just_collected = r.byte()? != 0;
        self.done = r.byte()? != 0;
        r.finish()
    }
}

/// Expected return of the shortest-path policy that knows the goal:
/// E over goal, spawns of the number of rewarded collections whose
/// cumulative travel time fits in the episode, capped at `respawns`.
/// Travel times come from breadth-first search on the grid graph.
fn goalmaze_oracle(cfg: &EnvConfig) -> f64 {
    let g = cfg.grid;
    let cells = g * g;
    let cap = cfg.episode_cap;
    let mut total = 0.0;
    for goal in 0..cells {
        let dist = bfs_distances(g, goal);
        // P[d] over uniform non-goal spawn cells.
        let mut pd = vec![0.0; 2 * (g - 1) + 1];
        for (cell, d) in dist.iter().enumerate() {
            if cell != goal {
                pd[*d] += 1.0 / (cells - 1) as f64;
            }
        }
        // reach[t] = P(cumulative travel time of the current trip chain
        // ends exactly at t); expected collections = Σ_k P(k-th trip
        // completes by cap), k ≤ respawns.
        let mut reach = vec![0.0; cap + 1];
        reach[0] = 1.0;
        let mut expected = 0.0;
        for _trip in 0..cfg.respawns {
            let mut next = vec![0.0; cap + 1];
            for (t, p) in reach.iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                for (d, q) in pd.iter().enumerate() {
                    if *q == 0.0 {
                        continue;
                    }
                    // A trip from distance d arrives d steps later; it
                    // must complete within the cap.
                    let arrive = t + d.max(1);
                    if arrive <= cap {
                        next[arrive] += p * q;
                    }
                }
            }
            expected += next.iter().sum::<f64>();
            reach = next;
        }
        total += expected;
    }
    total / cells as f64
}

fn bfs_distances(g: usize, from: usize) -> Vec<usize> {
    let cells = g * g;
    let mut dist = vec![usize::MAX; cells];
    let mut queue = std::collections::VecDeque::new();
    dist[from] = 0;
    queue.push_back(from);
    while let Some(p) = queue.pop_front() {
        let (r, c) = (p / g, p % g);
        let mut neighbors = Vec::with_capacity(4);
        if r > 0 {
            neighbors.push(p - g);
        }
        if r + 1 < g {
            neighbors.push(p + g);
        }
        if c > 0 {
            neighbors.push(p - 1);
        }
        if c + 1 < g {
            neighbors.push(p + 1);
        }
        for n in neighbors {
            if dist[n] == usize::MAX {
                dist[n] = dist[p] + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}

// ── Reactive ─────────────────────────────────────────────────────────

/// Pure reactivity: a target direction is re-sampled every step and
/// fully visible; matching it scores +0.1. A memoryless policy reading
/// only the current observation is optimal.
pub struct Reactive {
    cap: usize,
    rng: EnvRng,
    dir: usize,
    t: usize,
    done: bool,
}

impl Reactive {
    fn new(cfg: &EnvConfig) -> Self {
        let mut env = Reactive {
            cap: cfg.episode_cap,
            rng: EnvRng::new(cfg.seed),
            dir: 0,
            t: 0,
            done: true,
        };
        env.begin_episode(false);
        env
    }

    fn begin_episode(&mut self, advance: bool) {
        if advance {
            self.rng.next_episode();
        }
        self.dir = self.rng.rng.gen_range(0..NUM_ACTIONS);
        self.t = 0;
        self.done = false;
    }

    fn obs(&self) -> Vec<f64> {
        let mut o = vec![0.0; NUM_ACTIONS];
        o[self.dir] = 1.0;
        o
    }
}

impl Env for Reactive {
    fn obs_width(&self) -> usize {
        NUM_ACTIONS
    }
    fn episode_len(&self) -> usize {
        self.cap
    }

    fn reset(&mut self) -> Vec<f64> {
        self.begin_episode(true);
        self.obs()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        check_action(action)?;
        check_not_done(self.done)?;
        let reward = if action == self.dir { 0.1 } else { 0.0 };
        self.dir = self.rng.rng.gen_range(0..NUM_ACTIONS);
        self.t += 1;
        self.done = self.t >= self.cap;
        Ok(EnvStep {
            obs: self.obs(),
            reward,
            done: self.done,
            info: vec![],
        })
    }

    fn save_state(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.rng.save(&mut w);
        w.u64(self.dir as u64);
        w.u64(self.t as u64);
        w.byte(self.done as u8);
        w.0
    }

    fn load_state(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = ByteReader::new(bytes);
        self.rng = EnvRng::load(&mut r)?;
        self.dir = r.u64()? as usize;
        self.t = r.u64()? as usize;
        self.done = r.byte()? != 0;
        r.finish()
    }
}
