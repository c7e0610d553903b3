//! Users, items, channels, behavior events and hybrid sequences.
//!
//! A hybrid sequence interleaves single online item interactions with
//! in-store transactions. Each transaction occupies one position and carries
//! its item set; downstream it is either encoded into one vector or expanded
//! back into plain item tokens.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type UserId = u64;
pub type Timestamp = i64;

/// Index into the item catalog. The catalog size itself is the reserved
/// special-token id, which never names a real item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl ItemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// The id reserved for set positions in a catalog of `catalog_size` items.
    pub fn special(catalog_size: usize) -> ItemId {
        ItemId(catalog_size as u32)
    }

    pub fn in_catalog(self, catalog_size: usize) -> bool {
        self.index() < catalog_size
    }
}

impl std::fmt::Display for ItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Variant order matters: online sorts before in-store on equal timestamps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Online,
    InStore,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Online(ItemId),
    /// Ascending, duplicate free, non-empty.
    InStore(Vec<ItemId>),
}

impl Payload {
    pub fn channel(&self) -> Channel {
        match self {
            Payload::Online(_) => Channel::Online,
            Payload::InStore(_) => Channel::InStore,
        }
    }

    pub fn items(&self) -> &[ItemId] {
        match self {
            Payload::Online(item) => std::slice::from_ref(item),
            Payload::InStore(items) => items,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub user: UserId,
    pub timestamp: Timestamp,
    pub payload: Payload,
}

impl BehaviorEvent {
    pub fn online(user: UserId, timestamp: Timestamp, item: ItemId) -> Self {
        BehaviorEvent {
            user,
            timestamp,
            payload: Payload::Online(item),
        }
    }

    /// Builds an in-store event. Repeated items (quantity > 1) collapse to one
    /// member.
    pub fn in_store(
        user: UserId,
        timestamp: Timestamp,
        items: impl IntoIterator<Item = ItemId>,
    ) -> Result<Self> {
        let set: BTreeSet<ItemId> = items.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Data(format!(
                "in-store transaction of user {user} at {timestamp} has no items"
            )));
        }
        Ok(BehaviorEvent {
            user,
            timestamp,
            payload: Payload::InStore(set.into_iter().collect()),
        })
    }

    pub fn channel(&self) -> Channel {
        self.payload.channel()
    }

    fn sort_key(&self) -> (Timestamp, &Payload) {
        (self.timestamp, &self.payload)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Item(ItemId),
    /// Special-token position; the payload is the transaction's item set.
    Set(Vec<ItemId>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    pub timestamp: Timestamp,
    /// Originating channel. Items expanded from a set keep `InStore`.
    pub channel: Channel,
}

impl Token {
    pub fn item(item: ItemId, timestamp: Timestamp) -> Self {
        Token {
            kind: TokenKind::Item(item),
            timestamp,
            channel: Channel::Online,
        }
    }

    pub fn set(items: Vec<ItemId>, timestamp: Timestamp) -> Self {
        Token {
            kind: TokenKind::Set(items),
            timestamp,
            channel: Channel::InStore,
        }
    }

    pub fn is_special(&self) -> bool {
        matches!(self.kind, TokenKind::Set(_))
    }

    /// True for an online item interaction, the only kind of token that may be
    /// a prediction target.
    pub fn is_online_item(&self) -> bool {
        matches!(self.kind, TokenKind::Item(_)) && self.channel == Channel::Online
    }

    /// Vocabulary id: the item id, or the special id for set positions.
    pub fn id(&self, catalog_size: usize) -> ItemId {
        match self.kind {
            TokenKind::Item(item) => item,
            TokenKind::Set(_) => ItemId::special(catalog_size),
        }
    }

    /// Set members for special positions, `None` otherwise.
    pub fn meta(&self) -> Option<&[ItemId]> {
        match &self.kind {
            TokenKind::Set(items) => Some(items),
            TokenKind::Item(_) => None,
        }
    }

    pub fn items(&self) -> &[ItemId] {
        match &self.kind {
            TokenKind::Item(item) => std::slice::from_ref(item),
            TokenKind::Set(items) => items,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridSequence {
    pub user: UserId,
    pub max_seq_len: usize,
    pub tokens: Vec<Token>,
}

impl HybridSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_special(&self) -> bool {
        self.tokens.iter().any(Token::is_special)
    }

    pub fn online_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_online_item()).count()
    }

    /// Every item the user touched, through either channel.
    pub fn interacted_items(&self) -> BTreeSet<ItemId> {
        self.tokens
            .iter()
            .flat_map(|t| t.items().iter().copied())
            .collect()
    }

    fn truncate_front(&mut self) {
        if self.tokens.len() > self.max_seq_len {
            let excess = self.tokens.len() - self.max_seq_len;
            self.tokens.drain(..excess);
        }
    }

    /// Checks ordering, meta and length invariants, plus catalog membership.
    pub fn validate(&self, catalog_size: usize) -> Result<()> {
        if self.tokens.len() > self.max_seq_len {
            return Err(Error::Data(format!(
                "sequence of user {} has {} tokens, limit {}",
                self.user,
                self.tokens.len(),
                self.max_seq_len
            )));
        }
        for pair in self.tokens.windows(2) {
            if pair[1].timestamp < pair[0].timestamp {
                return Err(Error::Data(format!(
                    "sequence of user {} is not time ordered",
                    self.user
                )));
            }
        }
        for token in &self.tokens {
            let items = token.items();
            if items.is_empty() {
                return Err(Error::Data(format!(
                    "user {} has a special position without items",
                    self.user
                )));
            }
            if let Some(bad) = items.iter().find(|i| !i.in_catalog(catalog_size)) {
                return Err(Error::Data(format!(
                    "user {} references item {bad} outside catalog of {catalog_size}",
                    self.user
                )));
            }
        }
        Ok(())
    }
}

/// Sorts one user's events by time (online first on ties, then by item id),
/// drops exact duplicates, collapses each in-store transaction to one special
/// position and keeps the most recent `max_seq_len` positions.
pub fn build_hybrid_sequence(events: &[BehaviorEvent], max_seq_len: usize) -> Result<HybridSequence> {
    if max_seq_len == 0 {
        return Err(Error::Config("max_seq_len must be at least 1".into()));
    }
    let first = events.first().ok_or(Error::EmptySequence)?;
    let user = first.user;
    if let Some(other) = events.iter().find(|e| e.user != user) {
        return Err(Error::Contract(format!(
            "events of users {user} and {} mixed in one sequence",
            other.user
        )));
    }

    let mut ordered: Vec<&BehaviorEvent> = events.iter().collect();
    ordered.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    ordered.dedup_by(|a, b| a.sort_key() == b.sort_key());

    let tokens = ordered
        .into_iter()
        .map(|e| match &e.payload {
            Payload::Online(item) => Token::item(*item, e.timestamp),
            Payload::InStore(items) => Token::set(items.clone(), e.timestamp),
        })
        .collect();
    let mut seq = HybridSequence {
        user,
        max_seq_len,
        tokens,
    };
    seq.truncate_front();
    Ok(seq)
}

/// Expands every set position in place into its members (ascending id, shared
/// timestamp), then re-truncates to the sequence limit.
pub fn flatten_sequence(seq: &HybridSequence) -> HybridSequence {
    let mut tokens = Vec::with_capacity(seq.tokens.len());
    for token in &seq.tokens {
        match &token.kind {
            TokenKind::Item(_) => tokens.push(token.clone()),
            TokenKind::Set(items) => tokens.extend(items.iter().map(|&item| Token {
                kind: TokenKind::Item(item),
                timestamp: token.timestamp,
                channel: Channel::InStore,
            })),
        }
    }
    let mut out = HybridSequence {
        user: seq.user,
        max_seq_len: seq.max_seq_len,
        tokens,
    };
    out.truncate_front();
    out
}

/// Drops everything that did not come from the online channel.
pub fn online_only(seq: &HybridSequence) -> HybridSequence {
    HybridSequence {
        user: seq.user,
        max_seq_len: seq.max_seq_len,
        tokens: seq
            .tokens
            .iter()
            .filter(|t| t.is_online_item())
            .cloned()
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(seq: &HybridSequence, catalog: usize) -> Vec<u32> {
        seq.tokens.iter().map(|t| t.id(catalog).0).collect()
    }

    #[test]
    fn orders_and_collapses_sets() {
        let events = vec![
            BehaviorEvent::online(1, 30, ItemId(3)),
            BehaviorEvent::in_store(1, 20, [ItemId(7), ItemId(2)]).unwrap(),
            BehaviorEvent::online(1, 10, ItemId(5)),
        ];
        let seq = build_hybrid_sequence(&events, 90).unwrap();
        assert_eq!(ids(&seq, 100), vec![5, 100, 3]);
        assert_eq!(seq.tokens[1].meta(), Some(&[ItemId(2), ItemId(7)][..]));
        assert_eq!(seq.tokens[0].meta(), None);
        seq.validate(100).unwrap();
    }

    #[test]
    fn single_event() {
        let seq = build_hybrid_sequence(&[BehaviorEvent::online(9, 1, ItemId(4))], 5).unwrap();
        assert_eq!(ids(&seq, 10), vec![4]);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let events: Vec<_> = (0..5)
            .map(|i| BehaviorEvent::online(1, 100 - i, ItemId(i as u32)))
            .collect();
        let seq = build_hybrid_sequence(&events, 3).unwrap();
        // timestamps 98, 99, 100 belong to items 2, 1, 0
        assert_eq!(ids(&seq, 10), vec![2, 1, 0]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            build_hybrid_sequence(&[], 3),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn duplicates_are_dropped() {
        let e = BehaviorEvent::online(1, 5, ItemId(2));
        let s = BehaviorEvent::in_store(1, 5, [ItemId(3)]).unwrap();
        let seq = build_hybrid_sequence(&[e.clone(), s.clone(), e, s], 10).unwrap();
        assert_eq!(ids(&seq, 10), vec![2, 10]);
    }

    #[test]
    fn ties_put_online_first_then_item_id() {
        let events = vec![
            BehaviorEvent::in_store(1, 5, [ItemId(0)]).unwrap(),
            BehaviorEvent::online(1, 5, ItemId(8)),
            BehaviorEvent::online(1, 5, ItemId(3)),
        ];
        let seq = build_hybrid_sequence(&events, 10).unwrap();
        assert_eq!(ids(&seq, 10), vec![3, 8, 10]);
    }

    #[test]
    fn in_store_quantities_collapse() {
        let e = BehaviorEvent::in_store(1, 0, [ItemId(4), ItemId(4), ItemId(1)]).unwrap();
        assert_eq!(e.payload.items(), &[ItemId(1), ItemId(4)]);
        assert!(BehaviorEvent::in_store(1, 0, []).is_err());
    }

    #[test]
    fn flatten_expands_in_place() {
        let seq = HybridSequence {
            user: 1,
            max_seq_len: 10,
            tokens: vec![
                Token::item(ItemId(5), 1),
                Token::set(vec![ItemId(2), ItemId(7)], 2),
                Token::item(ItemId(3), 3),
            ],
        };
        let flat = flatten_sequence(&seq);
        assert_eq!(ids(&flat, 100), vec![5, 2, 7, 3]);
        assert_eq!(flat.tokens[1].timestamp, 2);
        assert_eq!(flat.tokens[2].channel, Channel::InStore);
        assert!(!flat.tokens[2].is_online_item());

        let online = online_only(&seq);
        assert_eq!(ids(&online, 100), vec![5, 3]);
        assert_eq!(flatten_sequence(&online), online);

        let single = HybridSequence {
            user: 1,
            max_seq_len: 10,
            tokens: vec![Token::set(vec![ItemId(9)], 0)],
        };
        assert_eq!(ids(&flatten_sequence(&single), 100), vec![9]);
    }

    #[test]
    fn flatten_retruncates() {
        let seq = HybridSequence {
            user: 1,
            max_seq_len: 2,
            tokens: vec![
                Token::item(ItemId(1), 0),
                Token::set(vec![ItemId(2), ItemId(3)], 1),
            ],
        };
        assert_eq!(ids(&flatten_sequence(&seq), 10), vec![2, 3]);
    }

    fn arb_events() -> impl Strategy<Value = Vec<BehaviorEvent>> {
        prop::collection::vec(
            (0i64..50, prop::bool::ANY, prop::collection::btree_set(0u32..20, 1..5)),
            1..30,
        )
        .prop_map(|raw| {
            raw.into_iter()
                .map(|(t, online, items)| {
                    if online {
                        BehaviorEvent::online(7, t, ItemId(*items.iter().next().unwrap()))
                    } else {
                        BehaviorEvent::in_store(7, t, items.into_iter().map(ItemId)).unwrap()
                    }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn input_order_does_not_matter(events in arb_events(), max_len in 1usize..40, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = events.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = build_hybrid_sequence(&events, max_len).unwrap();
            let b = build_hybrid_sequence(&shuffled, max_len).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.len() <= max_len);
            a.validate(20).unwrap();
        }

        #[test]
        fn flatten_preserves_item_multiset(events in arb_events()) {
            let seq = build_hybrid_sequence(&events, 1000).unwrap();
            let flat = flatten_sequence(&seq);
            prop_assert!(!flat.has_special());
            let mut expected: Vec<ItemId> = seq.tokens.iter().flat_map(|t| t.items().to_vec()).collect();
            let mut got: Vec<ItemId> = flat.tokens.iter().flat_map(|t| t.items().to_vec()).collect();
            expected.sort();
            got.sort();
            prop_assert_eq!(expected, got);
        }
    }
}
