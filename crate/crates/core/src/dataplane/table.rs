use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::appir::{MatchKind, TableDef};
use crate::fabric::StoreId;

/// Match key of a table entry. Exact entries carry no mask.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntryKey {
    pub value: Vec<u8>,
    pub mask: Option<Vec<u8>>,
    pub priority: u32,
}

impl EntryKey {
    pub fn exact(value: Vec<u8>) -> Self {
        EntryKey {
            value,
            mask: None,
            priority: 0,
        }
    }

    pub fn ternary(value: Vec<u8>, mask: Vec<u8>, priority: u32) -> Self {
        let value = value.iter().zip(&mask).map(|(v, m)| v & m).collect();
        EntryKey {
            value,
            mask: Some(mask),
            priority,
        }
    }

    pub fn matches(&self, key: &[u8]) -> bool {
        match &self.mask {
            None => self.value == key,
            Some(mask) => {
                key.len() == self.value.len()
                    && key
                        .iter()
                        .zip(mask)
                        .zip(&self.value)
                        .all(|((k, m), v)| k & m == *v)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Permit,
    Deny,
    /// Backend pool; the flow pin picks one member.
    Pool(Vec<u32>),
    Backend(u32),
    /// Per-flow state created by an `insert_state` stage.
    Flow { id: u64, pin: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub action: Action,
    pub used_bit: bool,
    pub last_hit_us: u64,
    /// Installed by the data plane (per-flow) rather than the control plane.
    pub dynamic: bool,
    pub requested_at_us: u64,
    pub installed_at_us: u64,
}

impl Entry {
    pub fn dynamic(action: Action, now_us: u64) -> Self {
        Entry {
            action,
            used_bit: true,
            last_hit_us: now_us,
            dynamic: true,
            requested_at_us: now_us,
            installed_at_us: now_us,
        }
    }

    pub fn control(action: Action, requested_at_us: u64, installed_at_us: u64) -> Self {
        Entry {
            action,
            used_bit: true,
            last_hit_us: installed_at_us,
            dynamic: false,
            requested_at_us,
            installed_at_us,
        }
    }

    /// Control-plane rules apply to packets that entered after the rule was
    /// installed; per-flow entries are visible immediately.
    fn visible_to(&self, ingress_us: u64) -> bool {
        self.used_bit && (self.dynamic || self.installed_at_us <= ingress_us)
    }
}

/// A control-plane insert that did not fit and waits for capacity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingInsert {
    pub key: EntryKey,
    pub action: Action,
    pub requested_at_us: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Lookup {
    Hit(Action),
    Miss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("table full")]
pub struct InsertError;

/// Counters of every change to the used-entry population.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableLedger {
    pub inserted: u64,
    pub expired: u64,
    pub moved_in: u64,
    pub moved_out: u64,
}

/// Runtime state of one match-action table instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableState {
    pub def: TableDef,
    pub capacity: u64,
    pub remote: Option<StoreId>,
    entries: BTreeMap<EntryKey, Entry>,
    remote_entries: BTreeMap<EntryKey, Entry>,
    pending: Vec<PendingInsert>,
    used: u64,
    id_base: u64,
    next_id: u64,
    ledger: TableLedger,
}

impl TableState {
    pub fn new(def: TableDef, capacity: u64, id_base: u64) -> Self {
        TableState {
            def,
            capacity,
            remote: None,
            entries: BTreeMap::new(),
            remote_entries: BTreeMap::new(),
            pending: Vec::new(),
            used: 0,
            id_base,
            next_id: 0,
            ledger: TableLedger::default(),
        }
    }

    pub fn name(&self) -> &str {
        &self.def.name
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn occupancy(&self) -> f64 {
        if self.capacity == 0 {
            return 0.0;
        }
        self.used as f64 / self.capacity as f64
    }

    pub fn ledger(&self) -> TableLedger {
        self.ledger
    }

    pub fn entries(&self) -> impl Iterator<Item = (&EntryKey, &Entry)> {
        self.entries.iter()
    }

    pub fn remote_entries(&self) -> impl Iterator<Item = (&EntryKey, &Entry)> {
        self.remote_entries.iter()
    }

    pub fn remote_len(&self) -> u64 {
        self.remote_entries.len() as u64
    }

    pub fn pending(&self) -> &[PendingInsert] {
        &self.pending
    }

    pub fn entry(&self, key: &EntryKey) -> Option<&Entry> {
        self.entries.get(key)
    }

    pub fn next_flow_id(&mut self) -> u64 {
        let id = self.id_base + self.next_id;
        self.next_id += 1;
        id
    }

    fn best_match<'a>(
        map: &'a BTreeMap<EntryKey, Entry>,
        kind: MatchKind,
        key: &[u8],
        ingress_us: u64,
    ) -> Option<(&'a EntryKey, &'a Entry)> {
        match kind {
            MatchKind::Exact => map
                .get_key_value(&EntryKey::exact(key.to_vec()))
                .filter(|(_, e)| e.visible_to(ingress_us)),
            // Highest priority wins; ties go to the smallest key.
            MatchKind::Ternary => map
                .iter()
                .filter(|(k, e)| e.visible_to(ingress_us) && k.matches(key))
                .fold(None, |best: Option<(&EntryKey, &Entry)>, cand| match best {
                    Some(b) if b.0.priority >= cand.0.priority => Some(b),
                    _ => Some(cand),
                }),
        }
    }

    /// Local lookup. A hit refreshes the entry's `last_hit_us`.
    pub fn lookup(&mut self, key: &[u8], now_us: u64, ingress_us: u64) -> Lookup {
        let found = Self::best_match(&self.entries, self.def.match_kind, key, ingress_us)
            .map(|(k, _)| k.clone());
        match found {
            Some(k) => {
                let e = self.entries.get_mut(&k).unwrap();
                e.last_hit_us = e.last_hit_us.max(now_us);
                Lookup::Hit(e.action.clone())
            }
            None => Lookup::Miss,
        }
    }

    /// Lookup over local and spilled entries together, as seen after a
    /// remote round trip.
    pub fn lookup_with_remote(&mut self, key: &[u8], now_us: u64, ingress_us: u64) -> Lookup {
        let kind = self.def.match_kind;
        let local = Self::best_match(&self.entries, kind, key, ingress_us).map(|(k, _)| k.clone());
        let remote =
            Self::best_match(&self.remote_entries, kind, key, ingress_us).map(|(k, _)| k.clone());
        let use_remote = match (&local, &remote) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(l), Some(r)) => r.priority > l.priority,
        };
        let (map, k) = if use_remote {
            (&mut self.remote_entries, remote)
        } else {
            (&mut self.entries, local)
        };
        match k {
            Some(k) => {
                let e = map.get_mut(&k).unwrap();
                e.last_hit_us = e.last_hit_us.max(now_us);
                Lookup::Hit(e.action.clone())
            }
            None => Lookup::Miss,
        }
    }

    /// Whether a packet that entered at `ingress_us` would need a rule the
    /// control plane requested but the table could not hold at that time.
    pub fn incomplete_for(&self, ingress_us: u64) -> bool {
        self.pending.iter().any(|p| p.requested_at_us <= ingress_us)
            || self
                .entries
                .values()
                .chain(self.remote_entries.values())
                .any(|e| {
                    !e.dynamic && e.requested_at_us <= ingress_us && ingress_us < e.installed_at_us
                })
    }

    /// Store an entry locally with its used bit set. Rejected when every
    /// slot is taken by a used entry.
    pub fn insert(&mut self, key: EntryKey, entry: Entry) -> Result<(), InsertError> {
        if let Some(existing) = self.entries.get_mut(&key) {
            if !existing.used_bit {
                if self.used >= self.capacity {
                    return Err(InsertError);
                }
                self.used += 1;
                self.ledger.inserted += 1;
            }
            *existing = Entry {
                used_bit: true,
                ..entry
            };
            return Ok(());
        }
        if self.used >= self.capacity {
            return Err(InsertError);
        }
        if self.entries.len() as u64 >= self.capacity {
            self.reclaim_one();
        }
        self.entries.insert(
            key,
            Entry {
                used_bit: true,
                ..entry
            },
        );
        self.used += 1;
        self.ledger.inserted += 1;
        Ok(())
    }

    /// Drop the least recently hit unused entry to free its slot.
    fn reclaim_one(&mut self) {
        let victim = self
            .entries
            .iter()
            .filter(|(_, e)| !e.used_bit)
            .min_by(|a, b| a.1.last_hit_us.cmp(&b.1.last_hit_us).then_with(|| a.0.cmp(b.0)))
            .map(|(k, _)| k.clone());
        if let Some(k) = victim {
            self.entries.remove(&k);
        }
    }

    /// Record an entry in remote memory. The caller has reserved the bytes.
    pub fn spill(&mut self, key: EntryKey, entry: Entry) {
        self.remote_entries.insert(key, entry);
    }

    pub fn push_pending(&mut self, pending: PendingInsert) {
        self.pending.push(pending);
    }

    pub fn take_pending(&mut self) -> Vec<PendingInsert> {
        std::mem::take(&mut self.pending)
    }

    /// Clears the used bit of dynamic entries idle for at least
    /// `idle_timeout_us`. Spilled entries that expire are removed; their
    /// count is returned so the caller can release store space.
    pub fn expire_idle(&mut self, now_us: u64, idle_timeout_us: u64) -> (u64, u64) {
        let mut local = 0;
        for e in self.entries.values_mut() {
            if e.dynamic && e.used_bit && now_us.saturating_sub(e.last_hit_us) >= idle_timeout_us {
                e.used_bit = false;
                local += 1;
            }
        }
        self.used -= local;
        self.ledger.expired += local;
        let before = self.remote_entries.len();
        self.remote_entries
            .retain(|_, e| !(e.dynamic && now_us.saturating_sub(e.last_hit_us) >= idle_timeout_us));
        (local, (before - self.remote_entries.len()) as u64)
    }

    /// Removes and returns every used entry (local first, then spilled),
    /// leaving the table empty. Unused entries are discarded.
    pub fn drain_used(&mut self) -> (Vec<(EntryKey, Entry)>, Vec<(EntryKey, Entry)>) {
        let local: Vec<_> = std::mem::take(&mut self.entries)
            .into_iter()
            .filter(|(_, e)| e.used_bit)
            .collect();
        let remote: Vec<_> = std::mem::take(&mut self.remote_entries).into_iter().collect();
        self.ledger.moved_out += self.used;
        self.used = 0;
        (local, remote)
    }

    /// Adds an entry moved from another table instance, bypassing the
    /// insert ledger counter.
    pub fn adopt(&mut self, key: EntryKey, entry: Entry) -> Result<(), InsertError> {
        if entry.used_bit {
            if self.used >= self.capacity || self.entries.contains_key(&key) {
                return Err(InsertError);
            }
            self.used += 1;
            self.ledger.moved_in += 1;
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    /// Number of local entries, used or not.
    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks the used counter against the entries and the ledger.
    pub fn audit(&self) -> Result<(), String> {
        let counted = self.entries.values().filter(|e| e.used_bit).count() as u64;
        if counted != self.used {
            return Err(format!("{}: used counter {} != {} used entries", self.def.name, self.used, counted));
        }
        if self.used > self.capacity {
            return Err(format!("{}: {} used entries exceed capacity {}", self.def.name, self.used, self.capacity));
        }
        let l = self.ledger;
        if l.inserted + l.moved_in != self.used + l.expired + l.moved_out {
            return Err(format!("{}: ledger {:?} inconsistent with {} used", self.def.name, l, self.used));
        }
        Ok(())
    }
}
