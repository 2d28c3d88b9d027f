//! Raw ids to table rows under the default feature schema:
//! user = {user-id}; item = {item-id, popularity bucket, content columns...}.
//!
//! The popularity bucket is a coarse stand-in for sequence-derived behavior
//! features. Content columns come from an item side table when one is given;
//! otherwise two hashed columns (20 and 10 buckets) fill the content slots so
//! the schema stays well-formed, though they carry no signal.

use std::collections::HashMap;

use super::{Example, FeatureKind, FeatureSchema, FeatureSpec};
use crate::datastream::Interaction;

const HASHED_CONTENT_BUCKETS: [u64; 2] = [20, 10];

/// Dense row assignment for raw ids; row 0 is reserved for unseen ids.
#[derive(Debug, Clone, Default)]
pub struct IdVocab {
    rows: HashMap<u64, usize>,
    capacity: usize,
}

impl IdVocab {
    /// Assigns rows in first-appearance order until `capacity` is reached.
    pub fn build(ids: impl IntoIterator<Item = u64>, capacity: usize) -> Self {
        let mut rows = HashMap::new();
        for id in ids {
            if rows.len() >= capacity {
                break;
            }
            let next = rows.len() + 1;
            rows.entry(id).or_insert(next);
        }
        Self { rows, capacity }
    }

    pub fn row(&self, id: u64) -> usize {
        self.rows.get(&id).copied().unwrap_or(0)
    }

    /// Table size including the reserved row.
    pub fn table_rows(&self) -> usize {
        self.rows.len() + 1
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Row (1-based) of the popularity bucket `⌊log2(v+1)⌋`, capped.
pub fn pop_bucket(views: u64, n_buckets: usize) -> usize {
    let b = (64 - (views + 1).leading_zeros() - 1) as usize;
    1 + b.min(n_buckets - 1)
}

fn hash_bucket(id: u64, salt: u64, buckets: u64) -> u64 {
    let mut x = id ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (x ^ (x >> 31)) % buckets
}

#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    pub schema: FeatureSchema,
    users: IdVocab,
    items: IdVocab,
    n_pop_buckets: usize,
    /// Content rows per item id, one per content column.
    content: HashMap<u64, Vec<usize>>,
    hashed: bool,
}

impl FeatureEncoder {
    pub fn build(
        interactions: &[Interaction],
        item_features: Option<&HashMap<u64, Vec<u64>>>,
        emb_dim: usize,
        n_pop_buckets: usize,
    ) -> Self {
        let users = IdVocab::build(interactions.iter().map(|x| x.user_id), usize::MAX);
        let items = IdVocab::build(interactions.iter().map(|x| x.item_id), usize::MAX);
        let mut content = HashMap::new();
        let content_vocab: Vec<usize>;
        let hashed = item_features.is_none();
        match item_features {
            Some(table) => {
                let width = table.values().map(Vec::len).max().unwrap_or(0);
                let mut maxes = vec![0u64; width];
                for vals in table.values() {
                    for (m, &v) in maxes.iter_mut().zip(vals) {
                        *m = (*m).max(v);
                    }
                }
                for (&id, vals) in table {
                    let rows = (0..width)
                        .map(|j| vals.get(j).map_or(0, |&v| v as usize + 1))
                        .collect();
                    content.insert(id, rows);
                }
                content_vocab = maxes.iter().map(|&m| m as usize + 2).collect();
            }
            None => {
                content_vocab = HASHED_CONTENT_BUCKETS
                    .iter()
                    .map(|&b| b as usize + 1)
                    .collect();
            }
        }
        let mut item = vec![
            FeatureSpec::new(
                "item_id",
                items.table_rows().max(2),
                emb_dim,
                FeatureKind::BehaviorId,
            ),
            FeatureSpec::new(
                "pop_bucket",
                n_pop_buckets + 1,
                emb_dim,
                FeatureKind::BehaviorSeq,
            ),
        ];
        for (j, &v) in content_vocab.iter().enumerate() {
            item.push(FeatureSpec::new(
                &format!("content_{j}"),
                v.max(2),
                emb_dim,
                FeatureKind::Content,
            ));
        }
        let schema = FeatureSchema {
            user: vec![FeatureSpec::new(
                "user_id",
                users.table_rows().max(2),
                emb_dim,
                FeatureKind::BehaviorId,
            )],
            item,
        };
        Self {
            schema,
            users,
            items,
            n_pop_buckets,
            content,
            hashed,
        }
    }

    pub fn user_row(&self, user_id: u64) -> usize {
        self.users.row(user_id)
    }

    pub fn item_row(&self, item_id: u64) -> usize {
        self.items.row(item_id)
    }

    pub fn uses_hashed_content(&self) -> bool {
        self.hashed
    }

    fn content_rows(&self, item_id: u64) -> Vec<usize> {
        if self.hashed {
            HASHED_CONTENT_BUCKETS
                .iter()
                .enumerate()
                .map(|(j, &b)| hash_bucket(item_id, j as u64 + 1, b) as usize + 1)
                .collect()
        } else {
            let width = self.schema.item.len() - 2;
            self.content
                .get(&item_id)
                .cloned()
                .unwrap_or_else(|| vec![0; width])
        }
    }

    /// Item feature rows given the item's frozen view count.
    pub fn item_rows(&self, item_id: u64, views: u64) -> Vec<usize> {
        let mut rows = vec![
            self.item_row(item_id),
            pop_bucket(views, self.n_pop_buckets),
        ];
        rows.extend(self.content_rows(item_id));
        rows
    }

    pub fn encode(&self, x: &Interaction, views: u64) -> Example {
        Example::new(
            vec![self.user_row(x.user_id)],
            self.item_rows(x.item_id, views),
            f64::from(x.label),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_reserves_row_zero() {
        let v = IdVocab::build([10, 20, 10, 30], usize::MAX);
        assert_eq!(v.row(10), 1);
        assert_eq!(v.row(20), 2);
        assert_eq!(v.row(30), 3);
        assert_eq!(v.row(99), 0);
        assert_eq!(v.table_rows(), 4);
        let capped = IdVocab::build([1, 2, 3], 2);
        assert_eq!(capped.row(3), 0);
    }

    #[test]
    fn pop_buckets() {
        assert_eq!(pop_bucket(0, 12), 1);
        assert_eq!(pop_bucket(1, 12), 2);
        assert_eq!(pop_bucket(2, 12), 2);
        assert_eq!(pop_bucket(3, 12), 3);
        assert_eq!(pop_bucket(49, 12), 6);
        assert_eq!(pop_bucket(u64::MAX - 1, 12), 12);
    }

    #[test]
    fn encoder_uses_side_table() {
        let xs = vec![
            Interaction::new(5, 7, 4.0, 0),
            Interaction::new(6, 8, 1.0, 1),
        ];
        let side: HashMap<u64, Vec<u64>> = [(7, vec![3, 1]), (8, vec![0, 2])].into_iter().collect();
        let enc = FeatureEncoder::build(&xs, Some(&side), 4, 8);
        enc.schema.validate().unwrap();
        let ex = enc.encode(&xs[0], 3);
        assert_eq!(ex.user, vec![1]);
        assert_eq!(ex.item_row(0), Some(1));
        assert_eq!(ex.item_row(1), Some(3));
        assert_eq!(ex.item_row(2), Some(4));
        assert_eq!(ex.item_row(3), Some(2));
        assert_eq!(ex.label, 1.0);
        assert_eq!(enc.schema.item[2].vocab, 5);
    }
}
