//! Synthetic interaction logs with planted, channel-specific structure.
//!
//! Every item belongs to exactly one planted structure inside its topic:
//!
//! * a co-view group, whose members get consumed by the same users at
//!   unrelated times (visible to co-occurrence scoring);
//! * a series, consumed in order and often binged back to back (visible to
//!   sequence-window embeddings);
//! * a content family, near-duplicate content vectors with members released
//!   during the simulated period (visible only to content similarity while
//!   the new members have no interactions).
//!
//! A fraction of consumption is a follow-up seeded by an earlier, well-watched
//! view of the matching structure kind, so the value of a history item as a
//! retrieval seed depends on the channel it is sent to. Tags encode
//! (topic, structure kind).

use alloc::vec::Vec;

use hashbrown::HashSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::types::{AuthorId, Catalog, Feedback, Interaction, Item, ItemId, TagId, Timestamp, UserHistory, UserId};
use crate::error::{Error, Result};
use crate::math::normalize_f32;

const DAY: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StructureKind {
    CoView,
    Series,
    ContentFamily,
}

impl StructureKind {
    pub const ALL: [StructureKind; 3] = [StructureKind::CoView, StructureKind::Series, StructureKind::ContentFamily];

    pub fn index(self) -> usize {
        match self {
            StructureKind::CoView => 0,
            StructureKind::Series => 1,
            StructureKind::ContentFamily => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub users: usize,
    pub items: usize,
    pub topics: usize,
    pub authors_per_topic: usize,
    pub content_dim: usize,
    pub days: u32,
    pub start_ts: Timestamp,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub mean_session_len: f64,
    pub max_topics_per_user: usize,
    /// Relative weight of follow-ups through (co-view, series, content).
    pub affinity_mix: [f64; 3],
    /// Share of consumption that is a seeded follow-up rather than exploration.
    pub follow_fraction: f64,
    pub binge_prob: f64,
    /// Recency decay of seed selection, in events.
    pub seed_recency: f64,
    /// Share of content-family members released during the simulated period.
    pub new_item_fraction: f64,
    pub popularity_exponent: f64,
    pub group_size: usize,
    pub series_len: usize,
    pub family_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            users: 1000,
            items: 20_000,
            topics: 50,
            authors_per_topic: 12,
            content_dim: 16,
            days: 7,
            start_ts: 1_700_000_000,
            min_interactions: 300,
            max_interactions: 400,
            mean_session_len: 12.0,
            max_topics_per_user: 4,
            affinity_mix: [1.0, 1.0, 1.0],
            follow_fraction: 0.5,
            binge_prob: 0.4,
            seed_recency: 40.0,
            new_item_fraction: 0.5,
            popularity_exponent: 0.8,
            group_size: 6,
            series_len: 8,
            family_size: 6,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.users == 0 || self.items == 0 {
            return bad("generator needs at least one user and one item");
        }
        if self.topics == 0 || self.topics > self.items {
            return bad("topics must be in 1..=items");
        }
        if self.content_dim == 0 || self.authors_per_topic == 0 || self.days == 0 {
            return bad("content_dim, authors_per_topic and days must be positive");
        }
        if self.min_interactions == 0 || self.min_interactions > self.max_interactions {
            return bad("need 0 < min_interactions <= max_interactions");
        }
        if self.group_size < 2 || self.series_len < 2 || self.family_size < 2 {
            return bad("planted structures need at least two members");
        }
        if self.affinity_mix.iter().any(|&w| !(w >= 0.0)) || self.affinity_mix.iter().sum::<f64>() <= 0.0 {
            return bad("affinity_mix must be nonnegative and not all zero");
        }
        for (name, p) in [
            ("follow_fraction", self.follow_fraction),
            ("binge_prob", self.binge_prob),
            ("new_item_fraction", self.new_item_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(alloc::format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.seed_recency > 0.0) || !(self.mean_session_len >= 1.0) {
            return bad("seed_recency must be positive and mean_session_len >= 1");
        }
        Ok(())
    }

    pub fn end_ts(&self) -> Timestamp {
        self.start_ts + self.days as i64 * DAY
    }
}

/// Ground truth for one item: which planted structure it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Planted {
    pub topic: u32,
    pub kind: StructureKind,
    pub structure: u32,
    pub position: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub catalog: Catalog,
    pub histories: Vec<UserHistory>,
    /// Indexed by item id.
    pub planted: Vec<Planted>,
    /// Members of each planted structure, in position order.
    pub structures: Vec<Vec<ItemId>>,
}

impl Corpus {
    pub fn interaction_count(&self) -> usize {
        self.histories.iter().map(|h| h.interactions.len()).sum()
    }
}

struct Topic {
    items: Vec<ItemId>,
    cumulative: Vec<f64>,
}

impl Topic {
    fn sample(&self, rng: &mut ChaCha8Rng) -> ItemId {
        let total = *self.cumulative.last().unwrap();
        let x = rng.random::<f64>() * total;
        let pos = self.cumulative.partition_point(|&c| c <= x).min(self.items.len() - 1);
        self.items[pos]
    }
}

struct World {
    catalog: Catalog,
    planted: Vec<Planted>,
    structures: Vec<Vec<ItemId>>,
    topics: Vec<Topic>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f32) -> Vec<f32> {
    (0..dim).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z as f32 }).collect::<Vec<f32>>()
}

fn build_world(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<World> {
    let dim = cfg.content_dim;
    let noise = 0.8 / libm::sqrtf(dim as f32);
    let family_noise = 0.15 / libm::sqrtf(dim as f32);
    let duration = LogNormal::new(libm::log(45.0), 0.5).unwrap();

    let mut items = Vec::with_capacity(cfg.items);
    let mut planted = Vec::with_capacity(cfg.items);
    let mut structures: Vec<Vec<ItemId>> = Vec::new();
    let mut topics = Vec::with_capacity(cfg.topics);

    for topic in 0..cfg.topics {
        let n = cfg.items / cfg.topics + usize::from(topic < cfg.items % cfg.topics);
        let mut centroid = gaussian_vec(rng, dim, 1.0);
        normalize_f32(&mut centroid);
        let author_base = (topic * cfg.authors_per_topic) as u32;
        let mut topic_items = Vec::with_capacity(n);
        let mut made = 0;
        let mut kind_cycle = 0usize;
        while made < n {
            let kind = StructureKind::ALL[kind_cycle % 3];
            kind_cycle += 1;
            let size = match kind {
                StructureKind::CoView => cfg.group_size,
                StructureKind::Series => cfg.series_len,
                StructureKind::ContentFamily => cfg.family_size,
            }
            .min(n - made);
            let structure = structures.len() as u32;
            let series_author = AuthorId(author_base + rng.random_range(0..cfg.authors_per_topic) as u32);
            let mut family_centroid: Vec<f32> = centroid.iter().zip(gaussian_vec(rng, dim, noise)).map(|(c, e)| c + e).collect();
            normalize_f32(&mut family_centroid);
            let mut members = Vec::with_capacity(size);
            for position in 0..size {
                let id = ItemId(items.len() as u32);
                let mut content: Vec<f32> = match kind {
                    StructureKind::ContentFamily => {
                        family_centroid.iter().zip(gaussian_vec(rng, dim, family_noise)).map(|(c, e)| c + e).collect()
                    }
                    _ => centroid.iter().zip(gaussian_vec(rng, dim, noise)).map(|(c, e)| c + e).collect(),
                };
                normalize_f32(&mut content);
                let author = match kind {
                    StructureKind::Series => series_author,
                    _ => AuthorId(author_base + rng.random_range(0..cfg.authors_per_topic) as u32),
                };
                // family members after the first may be released during the period
                let created_at = if kind == StructureKind::ContentFamily
                    && position > 0
                    && rng.random::<f64>() < cfg.new_item_fraction
                {
                    cfg.start_ts + rng.random_range(0..cfg.days as i64 * DAY)
                } else {
                    cfg.start_ts - rng.random_range(DAY..60 * DAY)
                };
                items.push(Item {
                    id,
                    author,
                    tag: TagId((topic * 3 + kind.index()) as u32),
                    content,
                    duration_s: duration.sample(rng).clamp(8.0, 600.0),
                    created_at,
                });
                planted.push(Planted { topic: topic as u32, kind, structure, position: position as u32 });
                members.push(id);
                topic_items.push(id);
            }
            structures.push(members);
            made += size;
        }
        // Zipf-like popularity over a random rank permutation
        let mut ranks: Vec<usize> = (0..topic_items.len()).collect();
        for i in (1..ranks.len()).rev() {
            let j = rng.random_range(0..=i);
            ranks.swap(i, j);
        }
        let mut acc = 0.0;
        let cumulative = ranks
            .iter()
            .map(|&r| {
                acc += libm::pow(r as f64 + 1.0, -cfg.popularity_exponent);
                acc
            })
            .collect();
        topics.push(Topic { items: topic_items, cumulative });
    }
    let catalog = Catalog::new(items, dim)?;
    Ok(World { catalog, planted, structures, topics })
}

struct UserProfile {
    topics: Vec<(usize, f64)>,
    rising: Option<(usize, usize)>,
    mix: [f64; 3],
    len: usize,
}

fn draw_profile(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> UserProfile {
    let k = 1 + rng.random_range(0..cfg.max_topics_per_user.max(1)).min(cfg.topics - 1);
    let gamma = Gamma::new(1.0, 1.0).unwrap();
    let mut topics: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    while topics.len() < k {
        let t = rng.random_range(0..cfg.topics);
        if topics.iter().all(|&(u, _)| u != t) {
            topics.push((t, gamma.sample(rng) + 0.05));
        }
    }
    let len = rng.random_range(cfg.min_interactions..=cfg.max_interactions);
    // half of the users pick up a new interest part way through
    let rising = if cfg.topics > k && rng.random::<f64>() < 0.5 {
        loop {
            let t = rng.random_range(0..cfg.topics);
            if topics.iter().all(|&(u, _)| u != t) {
                let from = (len as f64 * rng.random_range(0.3..0.8)) as usize;
                break Some((t, from));
            }
        }
    } else {
        None
    };
    let jitter = Gamma::new(4.0, 0.25).unwrap();
    let mut mix = [0.0; 3];
    for (m, w) in mix.iter_mut().zip(cfg.affinity_mix) {
        *m = w * jitter.sample(rng);
    }
    UserProfile { topics, rising, mix, len }
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut x = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return Some(i);
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0)
}

struct Simulator<'a> {
    cfg: &'a GeneratorConfig,
    world: &'a World,
    watch_noise: LogNormal<f64>,
}

#[derive(Clone, Copy)]
enum Origin {
    Explore,
    FollowUp,
}

impl Simulator<'_> {
    fn released(&self, id: ItemId, now: Timestamp) -> bool {
        self.world.catalog.items()[id.0 as usize].created_at < now
    }

    fn topic_weights(&self, p: &UserProfile, step: usize) -> Vec<(usize, f64)> {
        let mut w = p.topics.clone();
        if let Some((t, from)) = p.rising {
            if step >= from {
                let top = w.iter().map(|x| x.1).fold(0.0, f64::max);
                w.push((t, 1.5 * top));
            }
        }
        w
    }

    fn explore(&self, rng: &mut ChaCha8Rng, weights: &[(usize, f64)], now: Timestamp, viewed: &HashSet<ItemId>) -> ItemId {
        let topic = if rng.random::<f64>() < 0.1 {
            rng.random_range(0..self.cfg.topics)
        } else {
            let ws: Vec<f64> = weights.iter().map(|x| x.1).collect();
            weights[pick_weighted(rng, &ws).unwrap_or(0)].0
        };
        let topic = &self.world.topics[topic];
        let mut pick = topic.sample(rng);
        for _ in 0..8 {
            if self.released(pick, now) && !viewed.contains(&pick) {
                break;
            }
            pick = topic.sample(rng);
        }
        if !self.released(pick, now) {
            // fall back to the most popular released item
            pick = *topic.items.iter().find(|&&i| self.released(i, now)).unwrap_or(&topic.items[0]);
        }
        pick
    }

    fn follow_target(&self, rng: &mut ChaCha8Rng, seed: ItemId, now: Timestamp, viewed: &HashSet<ItemId>) -> Option<ItemId> {
        let planted = self.world.planted[seed.0 as usize];
        let members = &self.world.structures[planted.structure as usize];
        match planted.kind {
            StructureKind::Series => members[planted.position as usize + 1..]
                .iter()
                .copied()
                .find(|&m| !viewed.contains(&m) && self.released(m, now)),
            _ => {
                let open: Vec<ItemId> = members
                    .iter()
                    .copied()
                    .filter(|&m| m != seed && !viewed.contains(&m) && self.released(m, now))
                    .collect();
                (!open.is_empty()).then(|| open[rng.random_range(0..open.len())])
            }
        }
    }

    fn watch_time(&self, rng: &mut ChaCha8Rng, item: &Item, affinity: f64, origin: Origin) -> f64 {
        let frac = match origin {
            Origin::Explore => 0.15 + 0.7 * affinity,
            Origin::FollowUp => 0.5 + 0.4 * affinity,
        };
        let w = item.duration_s * frac * self.watch_noise.sample(rng);
        // whole tenths keep the text log exact
        libm::round(w.min(4.0 * item.duration_s) * 10.0) / 10.0
    }

    fn feedback(&self, rng: &mut ChaCha8Rng, frac: f64) -> Feedback {
        let frac = frac.min(1.5);
        let mut fb = Feedback::empty();
        if rng.random::<f64>() < 0.02 + 0.15 * frac {
            fb |= Feedback::LIKE;
        }
        if rng.random::<f64>() < 0.01 + 0.03 * frac {
            fb |= Feedback::FOLLOW;
        }
        if rng.random::<f64>() < 0.01 + 0.01 * frac {
            fb |= Feedback::COMMENT;
        }
        if rng.random::<f64>() < 0.005 + 0.02 * frac {
            fb |= Feedback::SHARE;
        }
        fb
    }

    fn simulate_user(&self, user: UserId, rng: &mut ChaCha8Rng) -> UserHistory {
        let cfg = self.cfg;
        let profile = draw_profile(cfg, rng);
        let n = profile.len;

        // session sizes and start times
        let mut sizes = Vec::new();
        let mut total = 0;
        while total < n {
            let u: f64 = rng.random::<f64>().max(1e-12);
            let s = libm::round(1.0 + (-libm::log(u)) * (cfg.mean_session_len - 1.0)) as usize;
            let s = s.clamp(1, n - total);
            sizes.push(s);
            total += s;
        }
        let span = (cfg.end_ts() - cfg.start_ts - 2 * 3600).max(sizes.len() as i64);
        let mut starts: Vec<i64> = (0..sizes.len()).map(|_| cfg.start_ts + rng.random_range(0..span)).collect();
        starts.sort_unstable();

        let mut xs: Vec<Interaction> = Vec::with_capacity(n);
        let mut viewed: HashSet<ItemId> = HashSet::with_capacity(n);
        // history indices of effective views per structure kind
        let mut seeds: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut now = starts[0];

        for (s, &size) in sizes.iter().enumerate() {
            now = now.max(starts[s]);
            let mut pending: Option<ItemId> = None;
            for _ in 0..size {
                let step = xs.len();
                let weights = self.topic_weights(&profile, step);
                let (item, origin) = if let Some(next) = pending.take().filter(|&i| self.released(i, now) && !viewed.contains(&i)) {
                    (next, Origin::FollowUp)
                } else if rng.random::<f64>() < cfg.follow_fraction {
                    let followed = pick_weighted(rng, &profile.mix).and_then(|kind| {
                        let ws: Vec<f64> = seeds[kind]
                            .iter()
                            .map(|&i| {
                                let x = &xs[i];
                                let dur = self.world.catalog.items()[x.item.0 as usize].duration_s;
                                let frac = (x.watch_s / dur).min(2.0);
                                let like = if x.feedback.contains(Feedback::LIKE) { 2.0 } else { 1.0 };
                                frac * frac * like * libm::exp(-((step - i) as f64) / cfg.seed_recency)
                            })
                            .collect();
                        let seed = xs[seeds[kind][pick_weighted(rng, &ws)?]].item;
                        self.follow_target(rng, seed, now, &viewed)
                    });
                    match followed {
                        Some(item) => (item, Origin::FollowUp),
                        None => (self.explore(rng, &weights, now, &viewed), Origin::Explore),
                    }
                } else {
                    (self.explore(rng, &weights, now, &viewed), Origin::Explore)
                };

                let meta = &self.world.catalog.items()[item.0 as usize];
                let planted = self.world.planted[item.0 as usize];
                let top = weights.iter().map(|x| x.1).fold(0.0, f64::max);
                let affinity = weights.iter().filter(|x| x.0 == planted.topic as usize).map(|x| x.1 / top).fold(0.0, f64::max);
                let watch_s = self.watch_time(rng, meta, affinity, origin);
                let feedback = self.feedback(rng, watch_s / meta.duration_s);
                xs.push(Interaction { user, item, ts: now, watch_s, feedback });
                viewed.insert(item);
                if watch_s >= super::requests::DEFAULT_EFFECTIVE_VIEW_S {
                    seeds[planted.kind.index()].push(step);
                    if planted.kind == StructureKind::Series && rng.random::<f64>() < cfg.binge_prob {
                        let members = &self.world.structures[planted.structure as usize];
                        pending = members.get(planted.position as usize + 1).copied();
                    }
                }
                now += libm::ceil(watch_s) as i64 + rng.random_range(3..30);
            }
            now += 60;
        }
        UserHistory { user, interactions: xs }
    }
}

/// Deterministic in `(cfg, seed)`; users are simulated one after another on
/// independent random streams.
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = build_world(cfg, &mut rng)?;
    let sim = Simulator { cfg, world: &world, watch_noise: LogNormal::new(-0.245, 0.7).unwrap() };
    let mut histories = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let mut user_rng = ChaCha8Rng::seed_from_u64(seed);
        user_rng.set_stream(u as u64 + 1);
        histories.push(sim.simulate_user(UserId(u as u32), &mut user_rng));
    }
    let World { catalog, planted, structures, .. } = world;
    Ok(Corpus { catalog, histories, planted, structures })
}
