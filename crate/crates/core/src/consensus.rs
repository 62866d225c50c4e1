//! Raft replication of protocol decisions among the operator enclaves,
//! followed by threshold signature collection.
//!
//! Election timeouts are fixed per node (`base + index * step`) so runs are
//! reproducible. Every wire message is signed by the sending enclave.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{verify, Digest, KeyPair, MultiSignature, PublicKey, Signature};
use crate::encoding::Encoder;
use crate::htlc::HtlcRequest;
use crate::types::{Address, Amount, ChainId, Tick};

/// A priced transfer for one verified deposit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferIntent {
    pub deposit_id: Digest,
    pub target_chain: ChainId,
    /// `v_T`, the target-currency amount.
    pub amount: Amount,
    pub receiver: Address,
    /// Deposit value on the source chain.
    pub source_value: Amount,
    /// Source amount entering the pool after the fee.
    pub input: Amount,
    pub deposit_timestamp: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Payload {
    Noop,
    Transfers { target_chain: ChainId, intents: Vec<TransferIntent> },
    Confirm { ids: Vec<Digest> },
    ChallengeResponse { id: Digest },
    Checkpoint { ids: Vec<Digest> },
    HtlcPair { request: HtlcRequest, input: Amount, amount: Amount, deadline: Tick },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub term: u64,
    pub index: u64,
    pub payload: Payload,
}

impl LogEntry {
    pub fn digest(&self) -> Digest {
        let mut enc = Encoder::new("log-entry");
        enc.u64(self.term)
            .u64(self.index)
            .bytes(&serde_json::to_vec(&self.payload).expect("payload serializes"));
        enc.to_digest()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum RaftMessage {
    RequestVote { term: u64, last_index: u64, last_term: u64 },
    Vote { term: u64, granted: bool },
    Append { term: u64, prev_index: u64, prev_term: u64, entries: Vec<LogEntry>, commit: u64 },
    AppendAck { term: u64, success: bool, match_index: u64 },
}

/// A Raft message bound to its sender and recipient by the sender's signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaftEnvelope {
    pub from: usize,
    pub to: usize,
    pub message: RaftMessage,
    pub signature: Signature,
}

impl RaftEnvelope {
    fn signing_bytes(from: usize, to: usize, message: &RaftMessage) -> Vec<u8> {
        let mut enc = Encoder::new("raft-message");
        enc.u64(from as u64)
            .u64(to as u64)
            .bytes(&serde_json::to_vec(message).expect("message serializes"));
        enc.finish()
    }

    pub fn seal(from: usize, to: usize, message: RaftMessage, key: &KeyPair) -> Self {
        let signature = key.sign(&Self::signing_bytes(from, to, &message));
        RaftEnvelope { from, to, message, signature }
    }

    pub fn verify(&self, sender: &PublicKey) -> bool {
        self.signature.signer == *sender
            && verify(&Self::signing_bytes(self.from, self.to, &self.message), &self.signature, sender)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaftConfig {
    pub election_base: Tick,
    pub election_step: Tick,
    pub heartbeat_interval: Tick,
    pub max_append_entries: usize,
}

impl Default for RaftConfig {
    fn default() -> Self {
        RaftConfig { election_base: 6, election_step: 3, heartbeat_interval: 2, max_append_entries: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaftMetrics {
    pub elections_started: u64,
    pub terms_won: u64,
    pub entries_committed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaftNode {
    me: usize,
    n: usize,
    config: RaftConfig,
    term: u64,
    voted_for: Option<usize>,
    log: Vec<LogEntry>,
    commit_index: u64,
    last_applied: u64,
    role: Role,
    leader_hint: Option<usize>,
    votes: Vec<bool>,
    next_index: Vec<u64>,
    match_index: Vec<u64>,
    election_deadline: Tick,
    last_broadcast: Tick,
    metrics: RaftMetrics,
}

pub type Outbox = Vec<(usize, RaftMessage)>;

impl RaftNode {
    pub fn new(me: usize, n: usize, config: RaftConfig, now: Tick) -> Self {
        let mut node = RaftNode {
            me,
            n,
            config,
            term: 0,
            voted_for: None,
            log: Vec::new(),
            commit_index: 0,
            last_applied: 0,
            role: Role::Follower,
            leader_hint: None,
            votes: vec![false; n],
            next_index: vec![1; n],
            match_index: vec![0; n],
            election_deadline: 0,
            last_broadcast: 0,
            metrics: RaftMetrics::default(),
        };
        node.reset_election_timer(now);
        node
    }

    pub fn me(&self) -> usize {
        self.me
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn leader_hint(&self) -> Option<usize> {
        self.leader_hint
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn commit_index(&self) -> u64 {
        self.commit_index
    }

    pub fn last_applied(&self) -> u64 {
        self.last_applied
    }

    pub fn metrics(&self) -> RaftMetrics {
        self.metrics
    }

    pub fn committed(&self) -> &[LogEntry] {
        &self.log[..self.commit_index as usize]
    }

    /// Entries appended locally but not yet committed.
    pub fn uncommitted(&self) -> &[LogEntry] {
        &self.log[self.commit_index as usize..]
    }

    fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    fn last_term(&self) -> u64 {
        self.log.last().map_or(0, |e| e.term)
    }

    fn term_at(&self, index: u64) -> u64 {
        if index == 0 {
            0
        } else {
            self.log[index as usize - 1].term
        }
    }

    pub fn reset_election_timer(&mut self, now: Tick) {
        self.election_deadline = now + self.config.election_base + self.me as Tick * self.config.election_step;
    }

    fn become_follower(&mut self, term: u64) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
        }
        self.role = Role::Follower;
    }

    fn become_leader(&mut self, now: Tick) -> Outbox {
        self.role = Role::Leader;
        self.leader_hint = Some(self.me);
        self.metrics.terms_won += 1;
        let next = self.last_index() + 1;
        self.next_index = vec![next; self.n];
        self.match_index = vec![0; self.n];
        // A fresh entry in the new term lets earlier entries commit.
        self.propose(Payload::Noop);
        self.broadcast(now)
    }

    fn start_election(&mut self, now: Tick) -> Outbox {
        self.term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.me);
        self.votes = vec![false; self.n];
        self.votes[self.me] = true;
        self.leader_hint = None;
        self.metrics.elections_started += 1;
        self.reset_election_timer(now);
        if self.n == 1 {
            return self.become_leader(now);
        }
        let msg = RaftMessage::RequestVote { term: self.term, last_index: self.last_index(), last_term: self.last_term() };
        (0..self.n).filter(|&p| p != self.me).map(|p| (p, msg.clone())).collect()
    }

    pub fn tick(&mut self, now: Tick) -> Outbox {
        match self.role {
            Role::Leader if now >= self.last_broadcast + self.config.heartbeat_interval => self.broadcast(now),
            Role::Leader => Vec::new(),
            _ if now >= self.election_deadline => self.start_election(now),
            _ => Vec::new(),
        }
    }

    /// Appends a payload when leader. Returns the new entry's index.
    pub fn propose(&mut self, payload: Payload) -> Option<u64> {
        if self.role != Role::Leader {
            return None;
        }
        let index = self.last_index() + 1;
        self.log.push(LogEntry { term: self.term, index, payload });
        self.match_index[self.me] = index;
        self.advance_commit();
        Some(index)
    }

    /// Sends append messages carrying any entries peers are missing.
    pub fn broadcast(&mut self, now: Tick) -> Outbox {
        if self.role != Role::Leader {
            return Vec::new();
        }
        self.last_broadcast = now;
        (0..self.n).filter(|&p| p != self.me).map(|p| (p, self.append_for(p))).collect()
    }

    fn append_for(&self, peer: usize) -> RaftMessage {
        let prev_index = self.next_index[peer] - 1;
        let end = (prev_index as usize + self.config.max_append_entries).min(self.log.len());
        RaftMessage::Append {
            term: self.term,
            prev_index,
            prev_term: self.term_at(prev_index),
            entries: self.log[prev_index as usize..end].to_vec(),
            commit: self.commit_index,
        }
    }

    fn advance_commit(&mut self) {
        let majority = self.n / 2 + 1;
        let mut n = self.last_index();
        while n > self.commit_index {
            if self.term_at(n) == self.term && self.match_index.iter().filter(|&&m| m >= n).count() >= majority {
                self.metrics.entries_committed += n - self.commit_index;
                self.commit_index = n;
                break;
            }
            n -= 1;
        }
    }

    pub fn handle(&mut self, from: usize, msg: RaftMessage, now: Tick) -> Outbox {
        if from >= self.n || from == self.me {
            return Vec::new();
        }
        match msg {
            RaftMessage::RequestVote { term, last_index, last_term } => {
                if term > self.term {
                    self.become_follower(term);
                }
                let up_to_date =
                    last_term > self.last_term() || (last_term == self.last_term() && last_index >= self.last_index());
                let granted =
                    term == self.term && up_to_date && self.voted_for.is_none_or(|v| v == from) && self.role != Role::Leader;
                if granted {
                    self.voted_for = Some(from);
                    self.reset_election_timer(now);
                }
                vec![(from, RaftMessage::Vote { term: self.term, granted })]
            }
            RaftMessage::Vote { term, granted } => {
                if term > self.term {
                    self.become_follower(term);
                    return Vec::new();
                }
                if self.role != Role::Candidate || term != self.term || !granted {
                    return Vec::new();
                }
                self.votes[from] = true;
                if self.votes.iter().filter(|&&v| v).count() > self.n / 2 {
                    return self.become_leader(now);
                }
                Vec::new()
            }
            RaftMessage::Append { term, prev_index, prev_term, entries, commit } => {
                if term < self.term {
                    return vec![(from, RaftMessage::AppendAck { term: self.term, success: false, match_index: 0 })];
                }
                self.become_follower(term);
                self.leader_hint = Some(from);
                self.reset_election_timer(now);
                if prev_index > self.last_index() || self.term_at(prev_index) != prev_term {
                    let hint = prev_index.saturating_sub(1).min(self.last_index());
                    return vec![(from, RaftMessage::AppendAck { term: self.term, success: false, match_index: hint })];
                }
                for entry in entries.iter() {
                    let i = entry.index;
                    if i <= self.last_index() {
                        if self.term_at(i) == entry.term {
                            continue;
                        }
                        assert!(i > self.commit_index, "leader tried to overwrite a committed entry");
                        self.log.truncate(i as usize - 1);
                    }
                    self.log.push(entry.clone());
                }
                let matched = prev_index + entries.len() as u64;
                let new_commit = commit.min(matched);
                if new_commit > self.commit_index {
                    self.metrics.entries_committed += new_commit - self.commit_index;
                    self.commit_index = new_commit;
                }
                vec![(from, RaftMessage::AppendAck { term: self.term, success: true, match_index: matched })]
            }
            RaftMessage::AppendAck { term, success, match_index } => {
                if term > self.term {
                    self.become_follower(term);
                    return Vec::new();
                }
                if self.role != Role::Leader || term != self.term {
                    return Vec::new();
                }
                if success {
                    if match_index > self.match_index[from] {
                        self.match_index[from] = match_index;
                    }
                    self.next_index[from] = self.match_index[from] + 1;
                    self.advance_commit();
                    if self.next_index[from] <= self.last_index() {
                        return vec![(from, self.append_for(from))];
                    }
                    Vec::new()
                } else {
                    let next = (match_index + 1).min(self.next_index[from].saturating_sub(1)).max(1);
                    self.next_index[from] = next.max(self.match_index[from] + 1);
                    vec![(from, self.append_for(from))]
                }
            }
        }
    }

    /// Committed entries not yet handed out, in log order.
    pub fn take_committed(&mut self) -> Vec<LogEntry> {
        let from = self.last_applied as usize;
        self.last_applied = self.commit_index;
        self.log[from..self.commit_index as usize].to_vec()
    }
}

/// Shares collected for one committed decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureShareSet {
    pub index: u64,
    pub digest: Digest,
    shares: BTreeMap<PublicKey, Signature>,
}

impl SignatureShareSet {
    pub fn new(index: u64, digest: Digest) -> Self {
        SignatureShareSet { index, digest, shares: BTreeMap::new() }
    }

    /// Adds a share if it comes from an authorized key and verifies over the
    /// digest. Duplicates and foreign shares are ignored. Returns whether
    /// the share was new and valid.
    pub fn add(&mut self, share: Signature, authorized: &[PublicKey]) -> bool {
        if !authorized.contains(&share.signer) || self.shares.contains_key(&share.signer) {
            return false;
        }
        if !verify(&self.digest.0, &share, &share.signer) {
            return false;
        }
        self.shares.insert(share.signer, share);
        true
    }

    pub fn len(&self) -> usize {
        self.shares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shares.is_empty()
    }

    pub fn signers(&self) -> impl Iterator<Item = &PublicKey> {
        self.shares.keys()
    }

    /// Assembles a multisig from exactly `m` shares, taking signers in
    /// `authorized` order.
    pub fn assemble(&self, authorized: &[PublicKey], m: usize) -> Option<MultiSignature> {
        if m == 0 || self.shares.len() < m {
            return None;
        }
        let chosen: Vec<Signature> = authorized.iter().filter_map(|pk| self.shares.get(pk).copied()).take(m).collect();
        (chosen.len() == m).then(|| MultiSignature::new(self.digest, m, chosen))
    }
}

pub fn collect_signatures(set: &SignatureShareSet, authorized: &[PublicKey], m: usize) -> Option<MultiSignature> {
    set.assemble(authorized, m)
}

/// Groups intents by target chain, keeping arrival order within a group, and
/// splits each group into batches of at most `max_batch`.
pub fn batch_transfers(intents: &[TransferIntent], max_batch: usize) -> Vec<(ChainId, Vec<TransferIntent>)> {
    assert!(max_batch > 0, "batch size must be positive");
    let mut groups: BTreeMap<ChainId, Vec<TransferIntent>> = BTreeMap::new();
    for intent in intents {
        groups.entry(intent.target_chain).or_default().push(intent.clone());
    }
    let mut out = Vec::new();
    for (chain, list) in groups {
        for chunk in list.chunks(max_batch) {
            out.push((chain, chunk.to_vec()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;

    /// A lossless in-memory cluster delivering messages one tick later.
    struct Cluster {
        nodes: Vec<RaftNode>,
        up: Vec<bool>,
        inflight: Vec<(usize, usize, RaftMessage)>,
        now: Tick,
    }

    impl Cluster {
        fn new(n: usize) -> Self {
            Cluster {
                nodes: (0..n).map(|i| RaftNode::new(i, n, RaftConfig::default(), 0)).collect(),
                up: vec![true; n],
                inflight: Vec::new(),
                now: 0,
            }
        }

        fn step(&mut self) {
            self.now += 1;
            let now = self.now;
            let mut out = Vec::new();
            for (from, to, msg) in std::mem::take(&mut self.inflight) {
                if self.up[to] && self.up[from] {
                    for (dst, m) in self.nodes[to].handle(from, msg, now) {
                        out.push((to, dst, m));
                    }
                }
            }
            for i in 0..self.nodes.len() {
                if self.up[i] {
                    for (dst, m) in self.nodes[i].tick(now) {
                        out.push((i, dst, m));
                    }
                }
            }
            self.inflight = out;
        }

        fn propose(&mut self, at: usize, p: Payload) -> Option<u64> {
            let idx = self.nodes[at].propose(p)?;
            let now = self.now;
            for (dst, m) in self.nodes[at].broadcast(now) {
                self.inflight.push((at, dst, m));
            }
            Some(idx)
        }

        fn leader(&self) -> Option<usize> {
            (0..self.nodes.len()).find(|&i| self.up[i] && self.nodes[i].is_leader())
        }

        fn run_until_leader(&mut self) -> usize {
            for _ in 0..200 {
                if let Some(l) = self.leader() {
                    return l;
                }
                self.step();
            }
            panic!("no leader elected");
        }

        fn check_prefixes(&self) {
            for a in &self.nodes {
                for b in &self.nodes {
                    let k = a.commit_index().min(b.commit_index()) as usize;
                    assert_eq!(a.committed()[..k], b.committed()[..k]);
                }
            }
        }
    }

    fn marker(i: u64) -> Payload {
        Payload::Confirm { ids: vec![hash(&i.to_le_bytes())] }
    }

    #[test]
    fn happy_path_commits_everywhere() {
        let mut c = Cluster::new(3);
        let l = c.run_until_leader();
        assert_eq!(l, 0, "node 0 has the shortest timeout");
        let idx = c.propose(l, marker(1)).unwrap();
        for _ in 0..4 {
            c.step();
        }
        for node in &c.nodes {
            assert!(node.commit_index() >= idx);
            assert_eq!(node.committed()[idx as usize - 1].payload, marker(1));
        }
        c.check_prefixes();
    }

    #[test]
    fn leader_crash_elects_successor() {
        let mut c = Cluster::new(3);
        let l = c.run_until_leader();
        c.nodes[l].propose(marker(1));
        for _ in 0..3 {
            c.step();
        }
        c.up[l] = false;
        let crash_at = c.now;
        let next = c.run_until_leader();
        assert_ne!(next, l);
        let idx = c.propose(next, marker(2)).unwrap();
        for _ in 0..4 {
            c.step();
        }
        let live: Vec<_> = (0..3).filter(|&i| c.up[i]).collect();
        for &i in &live {
            assert!(c.nodes[i].commit_index() >= idx);
        }
        assert!(c.now - crash_at < 30);
        c.up[l] = true;
        for _ in 0..10 {
            c.step();
        }
        c.check_prefixes();
        assert_eq!(c.nodes[l].commit_index(), c.nodes[next].commit_index());
    }

    #[test]
    fn minority_cannot_commit() {
        let mut c = Cluster::new(3);
        let l = c.run_until_leader();
        for i in 0..3 {
            if i != l {
                c.up[i] = false;
            }
        }
        let before = c.nodes[l].commit_index();
        c.nodes[l].propose(marker(9));
        for _ in 0..50 {
            c.step();
        }
        assert_eq!(c.nodes[l].commit_index(), before);
    }

    #[test]
    fn signed_envelopes_bind_sender() {
        let k = KeyPair::from_seed(b"n0");
        let env = RaftEnvelope::seal(0, 1, RaftMessage::Vote { term: 3, granted: true }, &k);
        assert!(env.verify(&k.public_key));
        let mut forged = env.clone();
        forged.message = RaftMessage::Vote { term: 4, granted: true };
        assert!(!forged.verify(&k.public_key));
        assert!(!env.verify(&KeyPair::from_seed(b"n1").public_key));
    }

    #[test]
    fn share_collection() {
        let keys: Vec<_> = (0..3).map(|i| KeyPair::from_seed(&[i])).collect();
        let auth: Vec<_> = keys.iter().map(|k| k.public_key).collect();
        let d = hash(b"batch");
        let mut set = SignatureShareSet::new(1, d);
        assert!(set.add(keys[1].sign(&d.0), &auth));
        assert!(!set.add(keys[1].sign(&d.0), &auth), "duplicate counted once");
        assert!(collect_signatures(&set, &auth, 2).is_none());
        let outsider = KeyPair::from_seed(b"x");
        assert!(!set.add(outsider.sign(&d.0), &auth));
        assert!(!set.add(keys[2].sign(b"other"), &auth));
        assert!(set.add(keys[0].sign(&d.0), &auth));
        let ms = collect_signatures(&set, &auth, 2).unwrap();
        assert!(crate::crypto::multisig_verify(&ms, &auth, 2));
        assert_eq!(ms.signers(), vec![auth[0], auth[1]]);
    }

    fn intent(i: u64, chain: ChainId) -> TransferIntent {
        TransferIntent {
            deposit_id: hash(&i.to_le_bytes()),
            target_chain: chain,
            amount: 1,
            receiver: Address::named("r"),
            source_value: 2,
            input: 1,
            deposit_timestamp: 0,
        }
    }

    #[test]
    fn batching_groups_and_splits() {
        let mut xs: Vec<_> = (0..5).map(|i| intent(i, ChainId::TARGET)).collect();
        xs.extend((5..8).map(|i| intent(i, ChainId(3))));
        let b = batch_transfers(&xs, 2000);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].1.len(), 5);
        assert_eq!(b[0].1[0].deposit_id, xs[0].deposit_id);
        let many: Vec<_> = (0..2500).map(|i| intent(i, ChainId::TARGET)).collect();
        let sizes: Vec<_> = batch_transfers(&many, 2000).iter().map(|(_, v)| v.len()).collect();
        assert_eq!(sizes, vec![2000, 500]);
        assert!(batch_transfers(&[], 10).is_empty());
    }
}
