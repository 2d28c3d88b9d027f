//! Synthetic long-tail interaction streams with planted content signal.
//!
//! Item popularity follows a Zipf law over a shuffled ranking. Each item has
//! a visible tag and year bucket (exported as content features) and a hidden
//! tag that is never exported. Users have a favourite visible tag and a
//! favourite hidden tag. An interaction draws an item by popularity, then a
//! user: most often one whose favourite visible tag matches, sometimes one
//! whose hidden tag matches, otherwise anyone. Ratings rise with both matches.
//! Cold items are therefore reachable through content, while popular items
//! also carry hidden-tag affinity that only their ID embedding can learn.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};

use crate::datastream::Interaction;

pub const VISIBLE_TAGS: u64 = 20;
pub const YEAR_BUCKETS: u64 = 8;
pub const HIDDEN_TAGS: u64 = 10;

const P_VISIBLE_POOL: f64 = 0.55;
const P_HIDDEN_POOL: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthStream {
    pub interactions: Vec<Interaction>,
    /// `item_id → [visible tag, year bucket]`.
    pub item_features: HashMap<u64, Vec<u64>>,
}

impl SynthStream {
    /// `user\titem\trating\ttimestamp` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::with_capacity(self.interactions.len() * 24);
        for x in &self.interactions {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                x.user_id, x.item_id, x.rating, x.timestamp
            );
        }
        s
    }

    /// `item\tfeature...` lines, sorted by item id.
    pub fn features_tsv(&self) -> String {
        let mut ids: Vec<_> = self.item_features.keys().copied().collect();
        ids.sort_unstable();
        let mut s = String::new();
        for id in ids {
            let f = &self.item_features[&id];
            let cols: Vec<String> = f.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{id}\t{}", cols.join("\t"));
        }
        s
    }
}

pub fn generate_synth_stream(
    n_items: usize,
    n_users: usize,
    n_interactions: usize,
    zipf_exponent: f64,
    seed: u64,
) -> SynthStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = n_items.max(1);
    let n_users = n_users.max(1);

    let mut by_rank: Vec<u64> = (1..=n_items as u64).collect();
    by_rank.shuffle(&mut rng);
    let visible: Vec<u64> = (0..n_items)
        .map(|_| rng.random_range(0..VISIBLE_TAGS))
        .collect();
    let year: Vec<u64> = (0..n_items)
        .map(|_| rng.random_range(0..YEAR_BUCKETS))
        .collect();
    let hidden: Vec<u64> = (0..n_items)
        .map(|_| rng.random_range(0..HIDDEN_TAGS))
        .collect();
    let fav_visible: Vec<u64> = (0..n_users)
        .map(|_| rng.random_range(0..VISIBLE_TAGS))
        .collect();
    let fav_hidden: Vec<u64> = (0..n_users)
        .map(|_| rng.random_range(0..HIDDEN_TAGS))
        .collect();

    let mut visible_pool = vec![Vec::new(); VISIBLE_TAGS as usize];
    let mut hidden_pool = vec![Vec::new(); HIDDEN_TAGS as usize];
    for u in 0..n_users {
        visible_pool[fav_visible[u] as usize].push(u);
        hidden_pool[fav_hidden[u] as usize].push(u);
    }

    let zipf = Zipf::new(n_items as f64, zipf_exponent.max(1e-6)).expect("valid zipf parameters");
    let noise = Normal::new(0.0, 0.7).expect("valid std");
    let mut interactions = Vec::with_capacity(n_interactions);
    for t in 0..n_interactions {
        let rank = (zipf.sample(&mut rng) as usize).clamp(1, n_items) - 1;
        let item = by_rank[rank] as usize - 1;
        let r: f64 = rng.random();
        let pool = if r < P_VISIBLE_POOL {
            &visible_pool[visible[item] as usize]
        } else if r < P_VISIBLE_POOL + P_HIDDEN_POOL {
            &hidden_pool[hidden[item] as usize]
        } else {
            &[][..]
        };
        let user = if pool.is_empty() {
            rng.random_range(0..n_users)
        } else {
            pool[rng.random_range(0..pool.len())]
        };
        let score = 2.0
            + 1.5 * f64::from(u8::from(fav_visible[user] == visible[item]))
            + 1.5 * f64::from(u8::from(fav_hidden[user] == hidden[item]))
            + noise.sample(&mut rng);
        let rating = ((score * 2.0).round() / 2.0).clamp(0.5, 5.0);
        interactions.push(Interaction::new(
            user as u64 + 1,
            item as u64 + 1,
            rating,
            t as u64,
        ));
    }
    let item_features = (0..n_items)
        .map(|i| (i as u64 + 1, vec![visible[i], year[i]]))
        .collect();
    SynthStream {
        interactions,
        item_features,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_tail_is_present() {
        let s = generate_synth_stream(5000, 2000, 100_000, 1.1, 1);
        let mut counts = vec![0usize; 5001];
        for x in &s.interactions {
            counts[x.item_id as usize] += 1;
        }
        let mut c: Vec<usize> = counts[1..].to_vec();
        c.sort_unstable();
        let bottom: usize = c[..250].iter().sum();
        assert!((bottom as f64) < 0.01 * s.interactions.len() as f64);
    }

    #[test]
    fn deterministic_and_empty() {
        let a = generate_synth_stream(50, 20, 300, 1.1, 9).to_tsv();
        let b = generate_synth_stream(50, 20, 300, 1.1, 9).to_tsv();
        assert_eq!(a, b);
        assert!(generate_synth_stream(50, 20, 0, 1.1, 9)
            .interactions
            .is_empty());
        let parsed = crate::datastream::load_interactions(a.as_bytes()).unwrap();
        assert_eq!(parsed.len(), 300);
    }
}
