//! Virtualized KV-page and embed pools.
//!
//! Each model owns a preallocated arena of physical pages and embeds with a
//! free list. Inferlets never see physical ids: every instance has its own
//! address space that maps monotonically issued virtual indices onto
//! physical slots. Pages can be shared across address spaces through the
//! export registry; a physical page is recycled only when no address space
//! maps it and no registry entry names it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backends::wire::PhysId;
use crate::error::{ApiError, ApiResult};

pub type InstanceId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    KvPage,
    Embed,
}

/// Inferlet-scoped opaque handle. Only meaningful to the owning instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResourceHandle {
    pub owner: InstanceId,
    pub kind: ResourceKind,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvMapping {
    pub model: usize,
    pub phys: PhysId,
    pub imported: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbMapping {
    pub model: usize,
    pub phys: PhysId,
    /// Position recorded by the last `embed_txt` or forward that targets
    /// this embed, used for fusion analysis.
    pub position: Option<u32>,
}

#[derive(Debug, Default)]
struct AddressSpace {
    next_index: u64,
    kv: BTreeMap<u64, KvMapping>,
    emb: BTreeMap<u64, EmbMapping>,
}

#[derive(Debug)]
struct PagePool {
    total: usize,
    free: BTreeSet<PhysId>,
    refs: Vec<u32>,
    registered: Vec<u32>,
    pending_writes: Vec<u32>,
}

impl PagePool {
    fn new(total: usize) -> Self {
        PagePool {
            total,
            free: (0..total as PhysId).collect(),
            refs: vec![0; total],
            registered: vec![0; total],
            pending_writes: vec![0; total],
        }
    }

    fn take(&mut self, n: usize) -> Option<Vec<PhysId>> {
        if self.free.len() < n {
            return None;
        }
        let ids: Vec<PhysId> = self.free.iter().take(n).copied().collect();
        for &p in &ids {
            self.free.remove(&p);
            self.refs[p as usize] = 1;
        }
        Some(ids)
    }

    fn release(&mut self, p: PhysId) {
        let i = p as usize;
        debug_assert!(self.refs[i] > 0, "release of unreferenced page {p}");
        self.refs[i] = self.refs[i].saturating_sub(1);
        self.maybe_free(p);
    }

    fn maybe_free(&mut self, p: PhysId) {
        let i = p as usize;
        if self.refs[i] == 0 && self.registered[i] == 0 {
            self.free.insert(p);
        }
    }
}

#[derive(Debug)]
struct EmbPool {
    total: usize,
    free: BTreeSet<PhysId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Export {
    model: usize,
    pages: Vec<PhysId>,
    exporter: InstanceId,
}

/// Result of a failed lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    /// Issued to this instance and since released.
    Freed,
    /// Never issued to this instance, or the wrong kind.
    Foreign,
}

impl Lookup {
    pub fn for_use(self) -> ApiError {
        ApiError::InvalidHandle
    }

    pub fn for_free(self) -> ApiError {
        match self {
            Lookup::Freed => ApiError::DoubleFree,
            Lookup::Foreign => ApiError::InvalidHandle,
        }
    }
}

/// Free-slot counts for one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub kv_total: usize,
    pub kv_free: usize,
    pub emb_total: usize,
    pub emb_free: usize,
}

/// All resource state owned by the control layer.
#[derive(Debug)]
pub struct Resources {
    pages: Vec<PagePool>,
    embeds: Vec<EmbPool>,
    spaces: BTreeMap<InstanceId, AddressSpace>,
    registry: BTreeMap<String, Export>,
}

impl Resources {
    pub fn new(models: usize, kv_pages: usize, embeds: usize) -> Self {
        Resources {
            pages: (0..models).map(|_| PagePool::new(kv_pages)).collect(),
            embeds: (0..models)
                .map(|_| EmbPool { total: embeds, free: (0..embeds as PhysId).collect() })
                .collect(),
            spaces: BTreeMap::new(),
            registry: BTreeMap::new(),
        }
    }

    pub fn stats(&self, model: usize) -> PoolStats {
        PoolStats {
            kv_total: self.pages[model].total,
            kv_free: self.pages[model].free.len(),
            emb_total: self.embeds[model].total,
            emb_free: self.embeds[model].free.len(),
        }
    }

    pub fn create_space(&mut self, owner: InstanceId) {
        self.spaces.entry(owner).or_default();
    }

    pub fn has_space(&self, owner: InstanceId) -> bool {
        self.spaces.contains_key(&owner)
    }

    /// Drops every mapping of `owner`. Registry entries it exported survive.
    pub fn destroy_space(&mut self, owner: InstanceId) {
        let Some(space) = self.spaces.remove(&owner) else { return };
        for m in space.kv.values() {
            self.pages[m.model].release(m.phys);
        }
        for m in space.emb.values() {
            self.embeds[m.model].free.insert(m.phys);
        }
    }

    fn space_mut(&mut self, owner: InstanceId) -> ApiResult<&mut AddressSpace> {
        self.spaces.get_mut(&owner).ok_or(ApiError::InvalidHandle)
    }

    fn issue(space: &mut AddressSpace) -> u64 {
        let i = space.next_index;
        space.next_index += 1;
        i
    }

    /// Reserves `n` fresh pages. `Err(PoolExhausted)` means the caller should
    /// arbitrate and retry.
    pub fn alloc_kv(
        &mut self,
        owner: InstanceId,
        model: usize,
        n: usize,
    ) -> ApiResult<Vec<(ResourceHandle, PhysId)>> {
        if n == 0 {
            return Err(ApiError::InvalidArgument("allocation count must be positive".into()));
        }
        if !self.spaces.contains_key(&owner) {
            return Err(ApiError::InvalidHandle);
        }
        let phys = self.pages[model].take(n).ok_or(ApiError::PoolExhausted)?;
        let space = self.space_mut(owner)?;
        Ok(phys
            .into_iter()
            .map(|p| {
                let index = Self::issue(space);
                space.kv.insert(index, KvMapping { model, phys: p, imported: false });
                (ResourceHandle { owner, kind: ResourceKind::KvPage, index }, p)
            })
            .collect())
    }

    pub fn alloc_emb(
        &mut self,
        owner: InstanceId,
        model: usize,
        n: usize,
    ) -> ApiResult<Vec<(ResourceHandle, PhysId)>> {
        if n == 0 {
            return Err(ApiError::InvalidArgument("allocation count must be positive".into()));
        }
        if !self.spaces.contains_key(&owner) {
            return Err(ApiError::InvalidHandle);
        }
        let pool = &mut self.embeds[model];
        if pool.free.len() < n {
            return Err(ApiError::PoolExhausted);
        }
        let phys: Vec<PhysId> = pool.free.iter().take(n).copied().collect();
        for p in &phys {
            pool.free.remove(p);
        }
        let space = self.space_mut(owner)?;
        Ok(phys
            .into_iter()
            .map(|p| {
                let index = Self::issue(space);
                space.emb.insert(index, EmbMapping { model, phys: p, position: None });
                (ResourceHandle { owner, kind: ResourceKind::Embed, index }, p)
            })
            .collect())
    }

    fn lookup_failure(&self, caller: InstanceId, h: &ResourceHandle) -> Lookup {
        match self.spaces.get(&caller) {
            Some(space) if h.owner == caller && h.index < space.next_index => Lookup::Freed,
            _ => Lookup::Foreign,
        }
    }

    pub fn kv(&self, caller: InstanceId, h: &ResourceHandle) -> Result<&KvMapping, Lookup> {
        if h.owner != caller || h.kind != ResourceKind::KvPage {
            return Err(Lookup::Foreign);
        }
        self.spaces
            .get(&caller)
            .and_then(|s| s.kv.get(&h.index))
            .ok_or_else(|| self.lookup_failure(caller, h))
    }

    pub fn emb(&self, caller: InstanceId, h: &ResourceHandle) -> Result<&EmbMapping, Lookup> {
        if h.owner != caller || h.kind != ResourceKind::Embed {
            return Err(Lookup::Foreign);
        }
        self.spaces
            .get(&caller)
            .and_then(|s| s.emb.get(&h.index))
            .ok_or_else(|| self.lookup_failure(caller, h))
    }

    /// Whether writes into this mapping are allowed.
    pub fn kv_mutable(&self, m: &KvMapping) -> bool {
        let pool = &self.pages[m.model];
        !m.imported && pool.registered[m.phys as usize] == 0 && pool.refs[m.phys as usize] == 1
    }

    pub fn set_emb_position(&mut self, caller: InstanceId, h: &ResourceHandle, pos: Option<u32>) {
        if let Some(m) = self.spaces.get_mut(&caller).and_then(|s| s.emb.get_mut(&h.index)) {
            m.position = pos;
        }
    }

    /// Removes mappings for `handles`; physical release is deferred to
    /// [`Resources::release_kv`]. All handles are validated first.
    pub fn unmap_kv(&mut self, caller: InstanceId, handles: &[ResourceHandle]) -> ApiResult<Vec<PhysId>> {
        let mut seen = BTreeSet::new();
        for h in handles {
            self.kv(caller, h).map_err(Lookup::for_free)?;
            if !seen.insert(h.index) {
                return Err(ApiError::DoubleFree);
            }
        }
        let space = self.space_mut(caller)?;
        Ok(handles.iter().filter_map(|h| space.kv.remove(&h.index)).map(|m| m.phys).collect())
    }

    pub fn unmap_emb(&mut self, caller: InstanceId, handles: &[ResourceHandle]) -> ApiResult<Vec<PhysId>> {
        let mut seen = BTreeSet::new();
        for h in handles {
            self.emb(caller, h).map_err(Lookup::for_free)?;
            if !seen.insert(h.index) {
                return Err(ApiError::DoubleFree);
            }
        }
        let space = self.space_mut(caller)?;
        Ok(handles.iter().filter_map(|h| space.emb.remove(&h.index)).map(|m| m.phys).collect())
    }

    pub fn release_kv(&mut self, model: usize, phys: &[PhysId]) {
        for &p in phys {
            self.pages[model].release(p);
        }
    }

    pub fn release_emb(&mut self, model: usize, phys: &[PhysId]) {
        for &p in phys {
            self.embeds[model].free.insert(p);
        }
    }

    pub fn add_pending_write(&mut self, model: usize, phys: &[PhysId]) {
        for &p in phys {
            self.pages[model].pending_writes[p as usize] += 1;
        }
    }

    pub fn finish_pending_write(&mut self, model: usize, phys: &[PhysId]) {
        for &p in phys {
            let w = &mut self.pages[model].pending_writes[p as usize];
            *w = w.saturating_sub(1);
        }
    }

    /// Registers owned pages under `name`; they become immutable.
    pub fn export(&mut self, caller: InstanceId, handles: &[ResourceHandle], name: &str) -> ApiResult<()> {
        if self.registry.contains_key(name) {
            return Err(ApiError::NameTaken(name.into()));
        }
        if handles.is_empty() {
            return Err(ApiError::InvalidArgument("nothing to export".into()));
        }
        let mut pages = Vec::with_capacity(handles.len());
        let mut model = None;
        for h in handles {
            let m = self.kv(caller, h).map_err(Lookup::for_use)?;
            if m.imported {
                return Err(ApiError::InvalidArgument("imported pages cannot be re-exported".into()));
            }
            if *model.get_or_insert(m.model) != m.model {
                return Err(ApiError::InvalidArgument("pages of one export must share a model".into()));
            }
            if self.pages[m.model].pending_writes[m.phys as usize] > 0 {
                return Err(ApiError::Busy("page has queued writes; synchronize before export".into()));
            }
            pages.push(m.phys);
        }
        let model = model.unwrap_or(0);
        for &p in &pages {
            self.pages[model].registered[p as usize] += 1;
        }
        self.registry.insert(name.into(), Export { model, pages, exporter: caller });
        Ok(())
    }

    /// Maps the pages registered under `name` read-only into the caller.
    pub fn import(&mut self, caller: InstanceId, name: &str) -> ApiResult<(usize, Vec<ResourceHandle>)> {
        let export = self.registry.get(name).cloned().ok_or_else(|| ApiError::NameNotFound(name.into()))?;
        if !self.spaces.contains_key(&caller) {
            return Err(ApiError::InvalidHandle);
        }
        for &p in &export.pages {
            self.pages[export.model].refs[p as usize] += 1;
        }
        let space = self.space_mut(caller)?;
        let handles = export
            .pages
            .iter()
            .map(|&p| {
                let index = Self::issue(space);
                space.kv.insert(index, KvMapping { model: export.model, phys: p, imported: true });
                ResourceHandle { owner: caller, kind: ResourceKind::KvPage, index }
            })
            .collect();
        Ok((export.model, handles))
    }

    pub fn unexport(&mut self, caller: InstanceId, name: &str) -> ApiResult<()> {
        match self.registry.get(name) {
            None => Err(ApiError::NameNotFound(name.into())),
            Some(e) if e.exporter != caller => Err(ApiError::Denied("only the exporter may unexport".into())),
            Some(_) => {
                self.remove_export(name);
                Ok(())
            }
        }
    }

    fn remove_export(&mut self, name: &str) {
        if let Some(e) = self.registry.remove(name) {
            let pool = &mut self.pages[e.model];
            for &p in &e.pages {
                pool.registered[p as usize] -= 1;
                pool.maybe_free(p);
            }
        }
    }

    /// Drops every registry entry (server shutdown).
    pub fn clear_registry(&mut self) {
        let names: Vec<String> = self.registry.keys().cloned().collect();
        for n in names {
            self.remove_export(&n);
        }
    }

    pub fn export_names(&self) -> Vec<String> {
        self.registry.keys().cloned().collect()
    }

    /// Physical page and embed ids mapped by `owner`, per model.
    pub fn mapped(&self, owner: InstanceId) -> Vec<(usize, ResourceKind, PhysId)> {
        let Some(s) = self.spaces.get(&owner) else { return Vec::new() };
        s.kv.values()
            .map(|m| (m.model, ResourceKind::KvPage, m.phys))
            .chain(s.emb.values().map(|m| (m.model, ResourceKind::Embed, m.phys)))
            .collect()
    }

    pub fn refcount(&self, model: usize, phys: PhysId) -> u32 {
        self.pages[model].refs[phys as usize]
    }

    /// Checks pool accounting against the address spaces.
    ///
    /// Only valid when no dealloc is in flight: every referenced page must be
    /// mapped exactly `refcount` times, and free plus live (mapped or
    /// registered) slots must equal the pool size.
    pub fn check_conservation(&self) -> Result<(), String> {
        for (model, pool) in self.pages.iter().enumerate() {
            let mut maps = vec![0u32; pool.total];
            for s in self.spaces.values() {
                for m in s.kv.values().filter(|m| m.model == model) {
                    maps[m.phys as usize] += 1;
                }
            }
            let mut live = 0;
            for (p, &mapped) in maps.iter().enumerate() {
                if mapped != pool.refs[p] {
                    return Err(format!("model {model} page {p}: {mapped} mappings, refcount {}", pool.refs[p]));
                }
                let is_live = pool.refs[p] > 0 || pool.registered[p] > 0;
                if is_live == pool.free.contains(&(p as PhysId)) {
                    return Err(format!("model {model} page {p}: live={is_live} but free-list disagrees"));
                }
                live += usize::from(is_live);
            }
            if live + pool.free.len() != pool.total {
                return Err(format!("model {model}: {live} live + {} free != {}", pool.free.len(), pool.total));
            }
        }
        for (model, pool) in self.embeds.iter().enumerate() {
            let mapped: BTreeSet<PhysId> = self
                .spaces
                .values()
                .flat_map(|s| s.emb.values())
                .filter(|m| m.model == model)
                .map(|m| m.phys)
                .collect();
            if mapped.len() + pool.free.len() != pool.total || mapped.iter().any(|p| pool.free.contains(p)) {
                return Err(format!("model {model}: embed accounting mismatch"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res() -> Resources {
        let mut r = Resources::new(1, 4, 4);
        r.create_space(1);
        r.create_space(2);
        r
    }

    #[test]
    fn alloc_dealloc_conserves() {
        let mut r = res();
        let hs: Vec<_> = r.alloc_kv(1, 0, 3).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(r.stats(0).kv_free, 1);
        let phys = r.unmap_kv(1, &hs).unwrap();
        r.release_kv(0, &phys);
        assert_eq!(r.stats(0).kv_free, 4);
        assert_eq!(r.unmap_kv(1, &hs[..1]), Err(ApiError::DoubleFree));
        r.check_conservation().unwrap();
    }

    #[test]
    fn zero_count_and_exhaustion() {
        let mut r = res();
        assert!(matches!(r.alloc_kv(1, 0, 0), Err(ApiError::InvalidArgument(_))));
        assert_eq!(r.alloc_kv(1, 0, 5).unwrap_err(), ApiError::PoolExhausted);
        assert_eq!(r.stats(0).kv_free, 4, "failed alloc reserves nothing");
    }

    #[test]
    fn foreign_handle_is_invalid() {
        let mut r = res();
        let (h, _) = r.alloc_kv(1, 0, 1).unwrap()[0];
        assert_eq!(r.kv(2, &h).unwrap_err(), Lookup::Foreign);
        assert_eq!(r.unmap_kv(2, &[h]), Err(ApiError::InvalidHandle));
        let forged = ResourceHandle { owner: 2, ..h };
        assert_eq!(r.kv(2, &forged).unwrap_err(), Lookup::Foreign);
    }

    #[test]
    fn import_shares_and_survives_exporter() {
        let mut r = res();
        let hs: Vec<_> = r.alloc_kv(1, 0, 2).unwrap().into_iter().map(|x| x.0).collect();
        r.export(1, &hs, "sys").unwrap();
        assert_eq!(r.export(1, &hs, "sys"), Err(ApiError::NameTaken("sys".into())));
        let (_, imported) = r.import(2, "sys").unwrap();
        let phys = r.kv(2, &imported[0]).unwrap().phys;
        assert_eq!(r.refcount(0, phys), 2);
        assert!(!r.kv_mutable(r.kv(1, &hs[0]).unwrap()));
        assert!(matches!(r.export(2, &imported, "again"), Err(ApiError::InvalidArgument(_))));

        let released = r.unmap_kv(2, &imported[..1]).unwrap();
        r.release_kv(0, &released);
        assert_eq!(r.refcount(0, phys), 1);

        r.destroy_space(1);
        assert_eq!(r.refcount(0, phys), 0);
        assert_eq!(r.stats(0).kv_free, 2, "registry still pins both pages");
        assert_eq!(r.unexport(2, "sys"), Err(ApiError::Denied("only the exporter may unexport".into())));
        r.clear_registry();
        r.check_conservation().unwrap();
        assert_eq!(r.stats(0).kv_free, 3, "second page still mapped by importer");
    }

    #[test]
    fn export_refuses_pages_with_queued_writes() {
        let mut r = res();
        let (h, p) = r.alloc_kv(1, 0, 1).unwrap()[0];
        r.add_pending_write(0, &[p]);
        assert!(matches!(r.export(1, &[h], "x"), Err(ApiError::Busy(_))));
        r.finish_pending_write(0, &[p]);
        r.export(1, &[h], "x").unwrap();
    }

    #[test]
    fn import_unknown_name() {
        let mut r = res();
        assert_eq!(r.import(1, "nope").unwrap_err(), ApiError::NameNotFound("nope".into()));
    }
}
