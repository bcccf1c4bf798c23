//! Cache state carried across a document during decoding and training.
//!
//! Two parts: a FIFO dynamic cache of recently produced target words, and a
//! fixed per-document topic cache of words typical for the document's topic.
//! Membership for scoring is the union of the two.
//!
//! Dynamic-cache rules: stop words (which always include the reserved
//! tokens) are never stored, a word already present is ignored without
//! refreshing its position, and when full the oldest entry is evicted.

use crate::corpus::{StopWordIds, Vocabulary};
use crate::topics::{TopicModel, TopicsError};
use std::collections::{HashSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Topics(#[from] TopicsError),
}

pub type Result<T> = std::result::Result<T, CacheError>;

/// FIFO cache of recently produced target word ids.
#[derive(Debug, Clone, Default)]
pub struct DynamicCache {
    capacity: usize,
    queue: VecDeque<u32>,
    members: HashSet<u32>,
}

impl DynamicCache {
    /// A capacity of zero is allowed and keeps the cache permanently empty.
    pub fn new(capacity: usize) -> DynamicCache {
        DynamicCache {
            capacity,
            queue: VecDeque::with_capacity(capacity),
            members: HashSet::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.members.contains(&id)
    }

    /// Entries oldest first.
    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.queue.iter().copied()
    }

    /// Insert one word; returns whether it was stored. Stop-listed words are
    /// rejected and duplicates are ignored without moving the original.
    pub fn insert(&mut self, id: u32, stop: &StopWordIds) -> bool {
        if self.capacity == 0 || stop.contains(id) || self.members.contains(&id) {
            return false;
        }
        if self.queue.len() == self.capacity {
            let evicted = self.queue.pop_front().expect("nonempty at capacity");
            self.members.remove(&evicted);
        }
        self.queue.push_back(id);
        self.members.insert(id);
        true
    }

    /// Insert every word of a sentence, in order.
    pub fn extend_from_sentence(&mut self, ids: &[u32], stop: &StopWordIds) {
        for &id in ids {
            self.insert(id, stop);
        }
    }

    pub fn clear(&mut self) {
        self.queue.clear();
        self.members.clear();
    }
}

/// Fixed set of topical words for one document.
#[derive(Debug, Clone, Default)]
pub struct TopicCache {
    ids: Vec<u32>,
    members: HashSet<u32>,
}

impl TopicCache {
    pub fn empty() -> TopicCache {
        TopicCache::default()
    }

    /// The `size` highest-probability words of a topic, mapped into the
    /// translation vocabulary. Words outside the vocabulary are discarded,
    /// so the result may hold fewer than `size` entries.
    pub fn from_topic(
        model: &TopicModel,
        topic: usize,
        size: usize,
        vocab: &Vocabulary,
    ) -> Result<TopicCache> {
        let words = model.top_words(topic, size)?;
        let mut ids = Vec::new();
        let mut members = HashSet::new();
        for word in &words {
            if let Some(id) = vocab.id_strict(word) {
                if members.insert(id) {
                    ids.push(id);
                }
            }
        }
        Ok(TopicCache { ids, members })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.members.contains(&id)
    }

    /// Entries in topic-rank order.
    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids.iter().copied()
    }
}

/// Union of the dynamic and topic caches for one document in flight.
#[derive(Debug, Clone, Default)]
pub struct CacheState {
    pub dynamic: DynamicCache,
    pub topic: TopicCache,
}

impl CacheState {
    pub fn new(dynamic_capacity: usize) -> CacheState {
        CacheState {
            dynamic: DynamicCache::new(dynamic_capacity),
            topic: TopicCache::empty(),
        }
    }

    pub fn with_topic(dynamic_capacity: usize, topic: TopicCache) -> CacheState {
        CacheState {
            dynamic: DynamicCache::new(dynamic_capacity),
            topic,
        }
    }

    /// Reset for a new document: the dynamic cache empties, the topic cache
    /// is replaced by the new document's.
    pub fn begin_document(&mut self, topic: TopicCache) {
        self.dynamic.clear();
        self.topic = topic;
    }

    pub fn contains(&self, id: u32) -> bool {
        self.dynamic.contains(id) || self.topic.contains(id)
    }

    pub fn is_empty(&self) -> bool {
        self.dynamic.is_empty() && self.topic.is_empty()
    }

    /// Distinct member ids: dynamic entries oldest first, then topic entries
    /// not already present, in rank order. The order is deterministic so
    /// downstream scoring is reproducible.
    pub fn members(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.dynamic.iter().collect();
        for id in self.topic.iter() {
            if !self.dynamic.contains(id) {
                out.push(id);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{StopWordList, UNK_ID};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn no_stops() -> StopWordIds {
        // Only the reserved ids; resolve() always includes them.
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<unk>", "</s>", "a", "b", "c", "d", "e"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        StopWordList::minimal().resolve(&vocab)
    }

    #[test]
    fn fifo_eviction_order() {
        let stop = no_stops();
        let mut cache = DynamicCache::new(3);
        for id in [3, 4, 5, 6] {
            cache.insert(id, &stop);
        }
        assert_eq!(cache.iter().collect::<Vec<_>>(), vec![4, 5, 6]);
        assert!(!cache.contains(3));
    }

    #[test]
    fn duplicate_insert_keeps_original_position() {
        let stop = no_stops();
        let mut cache = DynamicCache::new(3);
        cache.insert(3, &stop);
        cache.insert(4, &stop);
        assert!(!cache.insert(3, &stop)); // ignored, no refresh
        cache.insert(5, &stop);
        cache.insert(6, &stop);
        // 3 was oldest despite the late re-insert, so it was evicted first.
        assert_eq!(cache.iter().collect::<Vec<_>>(), vec![4, 5, 6]);
    }

    #[test]
    fn stop_words_and_reserved_tokens_rejected() {
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<unk>", "</s>", "the", "cat"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        let stop = StopWordList::default_list().resolve(&vocab);
        let mut cache = DynamicCache::new(5);
        cache.extend_from_sentence(&vocab.encode(&["the".into(), "cat".into()]), &stop);
        assert_eq!(cache.len(), 1);
        assert!(cache.contains(vocab.id("cat")));
        assert!(!cache.insert(UNK_ID, &stop));
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let stop = no_stops();
        let mut cache = DynamicCache::new(0);
        assert!(!cache.insert(3, &stop));
        assert!(cache.is_empty());
    }

    #[test]
    fn clear_empties_dynamic_cache() {
        let stop = no_stops();
        let mut cache = DynamicCache::new(4);
        cache.extend_from_sentence(&[3, 4, 5], &stop);
        cache.clear();
        assert!(cache.is_empty());
        assert!(!cache.contains(3));
        // Reusable after clearing.
        cache.insert(5, &stop);
        assert_eq!(cache.iter().collect::<Vec<_>>(), vec![5]);
    }

    /// Straight-line reference model: a plain vector with linear scans,
    /// written independently of the real implementation.
    struct ReferenceCache {
        capacity: usize,
        items: Vec<u32>,
    }

    impl ReferenceCache {
        fn insert(&mut self, id: u32, stop: &StopWordIds) {
            if self.capacity == 0 || stop.contains(id) || self.items.contains(&id) {
                return;
            }
            if self.items.len() == self.capacity {
                self.items.remove(0);
            }
            self.items.push(id);
        }
    }

    #[test]
    fn matches_reference_model_on_random_sequences() {
        let stop = no_stops();
        let mut rng = ChaCha8Rng::seed_from_u64(4096);
        for round in 0..200 {
            let capacity = rng.gen_range(0..6);
            let mut real = DynamicCache::new(capacity);
            let mut reference = ReferenceCache {
                capacity,
                items: Vec::new(),
            };
            for step in 0..50 {
                // Ids 0..=7: includes the reserved ids to exercise rejection.
                let id = rng.gen_range(0..8u32);
                if rng.gen_bool(0.05) {
                    real.clear();
                    reference.items.clear();
                } else {
                    real.insert(id, &stop);
                    reference.insert(id, &stop);
                }
                assert_eq!(
                    real.iter().collect::<Vec<_>>(),
                    reference.items,
                    "round {round}, step {step}"
                );
                for probe in 0..8u32 {
                    assert_eq!(real.contains(probe), reference.items.contains(&probe));
                }
            }
        }
    }

    fn toy_topic_model() -> TopicModel {
        use crate::topics::LdaConfig;
        let docs = vec![
            vec!["alpha".to_string(), "beta".to_string(), "alpha".to_string()],
            vec!["gamma".to_string(), "delta".to_string(), "gamma".to_string()],
        ];
        let cfg = LdaConfig {
            topics: 2,
            sweeps: 50,
            ..LdaConfig::default()
        };
        TopicModel::fit(&docs, &cfg).unwrap()
    }

    #[test]
    fn topic_cache_discards_out_of_vocabulary_words() {
        let model = toy_topic_model();
        // Vocabulary holds only two of the four topic-model words.
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<unk>", "</s>", "alpha", "gamma"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        for topic in 0..2 {
            let cache = TopicCache::from_topic(&model, topic, 4, &vocab).unwrap();
            assert!(cache.len() <= 2, "OOV words must be dropped, not mapped");
            for id in cache.iter() {
                assert!(vocab.token(id) == "alpha" || vocab.token(id) == "gamma");
            }
        }
        assert!(TopicCache::from_topic(&model, 5, 4, &vocab).is_err());
    }

    #[test]
    fn union_membership_and_order() {
        let stop = no_stops();
        let model = toy_topic_model();
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<unk>", "</s>", "alpha", "beta", "gamma", "delta"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        // Whichever topic ranks "alpha" first.
        let topic = (0..2)
            .find(|&t| {
                TopicCache::from_topic(&model, t, 2, &vocab)
                    .unwrap()
                    .contains(vocab.id("alpha"))
            })
            .expect("alpha must top one topic");
        let tc = TopicCache::from_topic(&model, topic, 2, &vocab).unwrap();

        let mut state = CacheState::with_topic(4, tc);
        state.dynamic.insert(vocab.id("alpha"), &stop);
        state.dynamic.insert(vocab.id("delta"), &stop);

        let members = state.members();
        // Dynamic entries first in insertion order; overlap appears once.
        assert_eq!(members[0], vocab.id("alpha"));
        assert_eq!(members[1], vocab.id("delta"));
        assert_eq!(
            members.iter().collect::<std::collections::HashSet<_>>().len(),
            members.len(),
            "members must be distinct"
        );
        for &id in &members {
            assert!(state.contains(id));
        }
    }

    #[test]
    fn begin_document_resets_dynamic_and_swaps_topic() {
        let stop = no_stops();
        let mut state = CacheState::new(4);
        state.dynamic.extend_from_sentence(&[3, 4], &stop);
        assert!(!state.is_empty());
        state.begin_document(TopicCache::empty());
        assert!(state.is_empty());
        assert_eq!(state.members(), Vec::<u32>::new());
    }
}
