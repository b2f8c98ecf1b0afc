//! Single-level page tables with 64 KiB pages, two µTLBs backed by a unified
//! second-level TLB, an AT-style query and mapping classification.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::fault::{FaultEngine, FaultEvent, MmuParams, Mutation, MutationKind};
use crate::mem::{AccessKind, Effects, MemError, MemorySystem};

pub const PAGE_BYTES: u64 = 0x10000;
pub const PTE_BYTES: u64 = 8;
/// Address span covered by one page-table directory at full scale.
pub const PTD_SPAN_BYTES: u64 = 512 << 20;

pub const PTE_VALID: u64 = 1 << 0;
pub const PTE_PAGE: u64 = 1 << 1;
pub const PTE_CACHEABLE: u64 = 1 << 2;
pub const PTE_READ_ONLY: u64 = 1 << 7;
pub const PTE_AF: u64 = 1 << 10;
pub const PTE_XN: u64 = 1 << 54;
pub const PTE_FRAME_MASK: u64 = 0x0000_FFFF_FFFF_0000;

pub const PAR_FAULT: u64 = 1;
pub const PAR_PA_MASK: u64 = 0x0000_FFFF_FFFF_F000;

pub fn identity_pte(vpage: u64) -> u64 {
    (vpage * PAGE_BYTES) | PTE_AF | PTE_CACHEABLE | PTE_PAGE | PTE_VALID
}

pub fn entries_per_ptd() -> u64 {
    PTD_SPAN_BYTES / PAGE_BYTES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmuConfig {
    pub table_base: u64,
    pub utlb_entries: usize,
    pub l2tlb_entries: usize,
    pub l2tlb_latency_cycles: u64,
}

impl Default for MmuConfig {
    fn default() -> Self {
        MmuConfig { table_base: 0x60000, utlb_entries: 8, l2tlb_entries: 64, l2tlb_latency_cycles: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MmuError {
    #[error("memory size 0x{0:x} is not a multiple of the page size")]
    MemSize(u64),
    #[error("page table region 0x{base:x}+0x{len:x} exceeds memory")]
    TableOutOfRange { base: u64, len: u64 },
    #[error(transparent)]
    Mem(#[from] MemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attrs {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
    pub cacheable: bool,
}

impl Attrs {
    pub fn from_pte(pte: u64) -> Attrs {
        Attrs {
            read: true,
            write: pte & PTE_READ_ONLY == 0,
            exec: pte & PTE_XN == 0,
            cacheable: pte & PTE_CACHEABLE != 0,
        }
    }

    /// PAR attribute byte: R=1, W=2, X=4, C=8.
    pub fn bits(self) -> u64 {
        self.read as u64 | (self.write as u64) << 1 | (self.exec as u64) << 2 | (self.cacheable as u64) << 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Intent {
    Ifetch,
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TranslationSource {
    UTlb,
    L2Tlb,
    Walk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TranslationFault {
    Unmapped,
    Permission,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationResult {
    pub vaddr: u64,
    pub paddr: Option<u64>,
    pub attrs: Option<Attrs>,
    pub source: TranslationSource,
    pub fault: Option<TranslationFault>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkEvent {
    pub vaddr: u64,
    pub walk_base: u64,
    pub pte_paddr: u64,
    pub cycle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TlbEntry {
    pub vpage: u64,
    pub ppage: u64,
    pub attrs: Attrs,
}

/// Fully associative, round-robin.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tlb {
    entries: Vec<Option<TlbEntry>>,
    next: usize,
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        Tlb { entries: vec![None; capacity.max(1)], next: 0 }
    }

    pub fn lookup(&self, vpage: u64) -> Option<TlbEntry> {
        self.entries.iter().flatten().find(|e| e.vpage == vpage).copied()
    }

    pub fn insert(&mut self, entry: TlbEntry) {
        if let Some(slot) = self.entries.iter_mut().find(|e| e.is_some_and(|e| e.vpage == entry.vpage)) {
            *slot = Some(entry);
            return;
        }
        if let Some(slot) = self.entries.iter_mut().find(|e| e.is_none()) {
            *slot = Some(entry);
            return;
        }
        self.entries[self.next] = Some(entry);
        self.next = (self.next + 1) % self.entries.len();
    }

    pub fn clear(&mut self) {
        self.entries.iter_mut().for_each(|e| *e = None);
        self.next = 0;
    }

    pub fn len(&self) -> usize {
        self.entries.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vpages(&self) -> Vec<u64> {
        self.entries.iter().flatten().map(|e| e.vpage).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TlbState {
    pub utlb_i: Tlb,
    pub utlb_d: Tlb,
    pub l2tlb: Tlb,
    pub sw_invalidate_effective: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageTables {
    pub base_paddr: u64,
    pub entries: u64,
    pub ptd_count: u64,
}

impl PageTables {
    pub fn len_bytes(&self) -> u64 {
        self.entries * PTE_BYTES
    }
}

/// Writes identity PTEs for every page of `mem_size` at `base`.
pub fn build_identity_map(mem: &mut MemorySystem, mem_size: u64, base: u64) -> Result<PageTables, MmuError> {
    if !mem_size.is_multiple_of(PAGE_BYTES) || mem_size == 0 {
        return Err(MmuError::MemSize(mem_size));
    }
    let entries = mem_size / PAGE_BYTES;
    let len = entries * PTE_BYTES;
    if !base.is_multiple_of(PTE_BYTES) || base + len > mem_size {
        return Err(MmuError::TableOutOfRange { base, len });
    }
    let bytes: Vec<u8> = (0..entries).flat_map(|v| identity_pte(v).to_le_bytes()).collect();
    mem.load_dram(base, &bytes)?;
    Ok(PageTables { base_paddr: base, entries, ptd_count: mem_size.div_ceil(PTD_SPAN_BYTES) })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Translation {
    pub result: TranslationResult,
    pub latency: u64,
    pub walk: Option<WalkEvent>,
    pub effects: Effects,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MappingClass {
    Identity,
    Zero,
    Shifted(i64),
    Fault,
}

impl fmt::Display for MappingClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MappingClass::Identity => write!(f, "IDENTITY"),
            MappingClass::Zero => write!(f, "ZERO"),
            MappingClass::Shifted(d) if *d < 0 => write!(f, "SHIFTED(-0x{:x})", d.unsigned_abs()),
            MappingClass::Shifted(d) => write!(f, "SHIFTED(+0x{d:x})"),
            MappingClass::Fault => write!(f, "FAULT"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub vpage: u64,
    pub ppage: Option<u64>,
    pub class: MappingClass,
}

impl fmt::Display for MappingEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.ppage {
            Some(p) => write!(f, "0x{:08x} -> 0x{:08x} {}", self.vpage, p, self.class),
            None => write!(f, "0x{:08x} -> ---------- {}", self.vpage, self.class),
        }
    }
}

pub fn mapping_report(entries: &[MappingEntry]) -> String {
    entries.iter().map(|e| format!("{e}\n")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mmu {
    config: MmuConfig,
    tables: PageTables,
    walk_base: u64,
    tlb: TlbState,
    corruption: Option<MmuParams>,
}

impl Mmu {
    pub fn new(config: MmuConfig, mem: &mut MemorySystem) -> Result<Self, MmuError> {
        let size = mem.config().dram_bytes;
        let tables = build_identity_map(mem, size, config.table_base)?;
        Ok(Mmu {
            tlb: TlbState {
                utlb_i: Tlb::new(config.utlb_entries),
                utlb_d: Tlb::new(config.utlb_entries),
                l2tlb: Tlb::new(config.l2tlb_entries),
                sw_invalidate_effective: true,
            },
            walk_base: tables.base_paddr,
            tables,
            config,
            corruption: None,
        })
    }

    pub fn config(&self) -> &MmuConfig {
        &self.config
    }

    pub fn tables(&self) -> &PageTables {
        &self.tables
    }

    pub fn walk_base(&self) -> u64 {
        self.walk_base
    }

    pub fn tlb(&self) -> &TlbState {
        &self.tlb
    }

    pub fn corruption(&self) -> Option<&MmuParams> {
        self.corruption.as_ref()
    }

    fn utlb(&self, intent: Intent) -> &Tlb {
        match intent {
            Intent::Ifetch => &self.tlb.utlb_i,
            _ => &self.tlb.utlb_d,
        }
    }

    fn check(vaddr: u64, entry: TlbEntry, intent: Intent, source: TranslationSource) -> TranslationResult {
        let ok = match intent {
            Intent::Ifetch => entry.attrs.exec,
            Intent::Read => entry.attrs.read,
            Intent::Write => entry.attrs.write,
        };
        let paddr = (entry.ppage * PAGE_BYTES) | (vaddr % PAGE_BYTES);
        TranslationResult {
            vaddr,
            paddr: ok.then_some(paddr),
            attrs: Some(entry.attrs),
            source,
            fault: (!ok).then_some(TranslationFault::Permission),
        }
    }

    fn decode_pte(vpage: u64, pte: u64) -> Option<TlbEntry> {
        (pte & (PTE_VALID | PTE_PAGE) == PTE_VALID | PTE_PAGE).then(|| TlbEntry {
            vpage,
            ppage: (pte & PTE_FRAME_MASK) / PAGE_BYTES,
            attrs: Attrs::from_pte(pte),
        })
    }

    fn unmapped(vaddr: u64) -> TranslationResult {
        TranslationResult {
            vaddr,
            paddr: None,
            attrs: None,
            source: TranslationSource::Walk,
            fault: Some(TranslationFault::Unmapped),
        }
    }

    /// µTLB, then L2TLB, then a table walk through L2. Successful walks fill
    /// both TLB levels.
    pub fn translate(
        &mut self,
        vaddr: u64,
        intent: Intent,
        mem: &mut MemorySystem,
        cycle: u64,
        fault: Option<&mut FaultEngine>,
    ) -> Result<Translation, MemError> {
        let vpage = vaddr / PAGE_BYTES;
        if let Some(e) = self.utlb(intent).lookup(vpage) {
            let result = Self::check(vaddr, e, intent, TranslationSource::UTlb);
            return Ok(Translation { result, latency: 0, walk: None, effects: Effects::default() });
        }
        if let Some(e) = self.tlb.l2tlb.lookup(vpage) {
            match intent {
                Intent::Ifetch => self.tlb.utlb_i.insert(e),
                _ => self.tlb.utlb_d.insert(e),
            }
            let result = Self::check(vaddr, e, intent, TranslationSource::L2Tlb);
            return Ok(Translation {
                result,
                latency: self.config.l2tlb_latency_cycles,
                walk: None,
                effects: Effects::default(),
            });
        }

        let mut hook = fault;
        let mut effects = Effects::default();
        if vpage >= self.tables.entries {
            return Ok(Translation { result: Self::unmapped(vaddr), latency: 0, walk: None, effects });
        }
        let mut walk =
            WalkEvent { vaddr, walk_base: self.walk_base, pte_paddr: self.walk_base + vpage * PTE_BYTES, cycle };
        if let Some(m) = hook.as_deref_mut().and_then(|e| e.intercept(FaultEvent::Walk(&walk), cycle)) {
            self.apply_corruption(mem, &m)?;
            effects.mutations.push(m);
            walk.walk_base = self.walk_base;
            walk.pte_paddr = self.walk_base + vpage * PTE_BYTES;
        }
        let read = match mem.access(AccessKind::Walk, walk.pte_paddr, PTE_BYTES as usize, cycle, 0, hook) {
            Ok(read) => read,
            Err(MemError::BusError { .. }) => {
                return Ok(Translation { result: Self::unmapped(vaddr), latency: 0, walk: Some(walk), effects });
            }
            Err(e) => return Err(e),
        };
        effects.absorb(read.effects);
        let latency = read.latency;
        let result = match Self::decode_pte(vpage, read.data) {
            Some(entry) => {
                let result = Self::check(vaddr, entry, intent, TranslationSource::Walk);
                if result.fault.is_none() {
                    self.tlb.l2tlb.insert(entry);
                    match intent {
                        Intent::Ifetch => self.tlb.utlb_i.insert(entry),
                        _ => self.tlb.utlb_d.insert(entry),
                    }
                }
                result
            }
            None => Self::unmapped(vaddr),
        };
        Ok(Translation { result, latency, walk: Some(walk), effects })
    }

    /// Applies an F_MMU mutation: the table contents move, the walk base is
    /// redirected, selected entries lose bits and software TLB invalidation
    /// stops reaching the µTLBs.
    pub(crate) fn apply_corruption(&mut self, mem: &mut MemorySystem, m: &Mutation) -> Result<(), MemError> {
        let MutationKind::MmuCorrupt(p) = m.kind else { return Ok(()) };
        let base = self.tables.base_paddr;
        let table = mem.probe_read(base, self.tables.len_bytes())?;
        let moved_end = (base + p.table_shift_bytes + table.len() as u64).min(mem.config().dram_bytes);
        let moved_len = (moved_end - base - p.table_shift_bytes) as usize;
        mem.poke(base + p.table_shift_bytes, &table[..moved_len])?;

        self.walk_base = m.after;
        let [lo, hi] = p.zero_range;
        for vpage in lo / PAGE_BYTES..=hi / PAGE_BYTES {
            let slot = self.walk_base + vpage * PTE_BYTES;
            let Ok(bytes) = mem.probe_read(slot, PTE_BYTES) else { continue };
            let pte = u64::from_le_bytes(bytes.try_into().unwrap()) & !p.pte_corrupt_mask;
            mem.poke(slot, &pte.to_le_bytes())?;
        }
        self.tlb.sw_invalidate_effective = false;
        self.corruption = Some(p);
        Ok(())
    }

    pub fn tlbi_all(&mut self) {
        self.tlb.l2tlb.clear();
        if self.tlb.sw_invalidate_effective {
            self.tlb.utlb_i.clear();
            self.tlb.utlb_d.clear();
        }
    }

    /// Data-read translation that never fills or reorders any TLB; the walk
    /// reads through the probe's data viewpoint.
    pub fn query(&self, vaddr: u64, mem: &MemorySystem) -> TranslationResult {
        let vpage = vaddr / PAGE_BYTES;
        if let Some(e) = self.tlb.utlb_d.lookup(vpage) {
            return Self::check(vaddr, e, Intent::Read, TranslationSource::UTlb);
        }
        if let Some(e) = self.tlb.l2tlb.lookup(vpage) {
            return Self::check(vaddr, e, Intent::Read, TranslationSource::L2Tlb);
        }
        if vpage >= self.tables.entries {
            return Self::unmapped(vaddr);
        }
        let Ok(bytes) = mem.probe_read(self.walk_base + vpage * PTE_BYTES, PTE_BYTES) else {
            return Self::unmapped(vaddr);
        };
        match Self::decode_pte(vpage, u64::from_le_bytes(bytes.try_into().unwrap())) {
            Some(e) => Self::check(vaddr, e, Intent::Read, TranslationSource::Walk),
            None => Self::unmapped(vaddr),
        }
    }

    /// PAR word: PA[47:12] | attribute byte in [63:56], or bit 0 on fault.
    pub fn at_query(&self, vaddr: u64, mem: &MemorySystem) -> u64 {
        let r = self.query(vaddr, mem);
        match (r.paddr, r.attrs) {
            (Some(pa), Some(attrs)) => (pa & PAR_PA_MASK) | attrs.bits() << 56,
            _ => PAR_FAULT,
        }
    }

    /// Classifies pages in `[lo, hi)` from their AT results.
    pub fn classify_mapping(&self, mem: &MemorySystem, lo: u64, hi: u64, stride: u64) -> Vec<MappingEntry> {
        let stride = stride.max(PAGE_BYTES);
        let mut out = Vec::new();
        let mut vpage = lo - lo % PAGE_BYTES;
        while vpage < hi {
            let par = self.at_query(vpage, mem);
            let entry = if par & PAR_FAULT != 0 {
                MappingEntry { vpage, ppage: None, class: MappingClass::Fault }
            } else {
                let ppage = par & PAR_PA_MASK;
                let class = if ppage == vpage {
                    MappingClass::Identity
                } else if ppage == 0 {
                    MappingClass::Zero
                } else {
                    MappingClass::Shifted(ppage as i64 - vpage as i64)
                };
                MappingEntry { vpage, ppage: Some(ppage), class }
            };
            out.push(entry);
            vpage += stride;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::MemoryConfig;

    fn setup() -> (Mmu, MemorySystem) {
        let mut mem = MemorySystem::new(MemoryConfig::default()).unwrap();
        let mmu = Mmu::new(MmuConfig::default(), &mut mem).unwrap();
        (mmu, mem)
    }

    #[test]
    fn sizes() {
        assert_eq!(entries_per_ptd(), 8192);
        let (mmu, _) = setup();
        assert_eq!(mmu.tables().entries, 256);
        assert_eq!(mmu.tables().ptd_count, 1);
    }

    #[test]
    fn table_must_fit() {
        let mut mem = MemorySystem::new(MemoryConfig { dram_bytes: 1 << 20, ..MemoryConfig::default() }).unwrap();
        assert!(matches!(build_identity_map(&mut mem, 1 << 20, (1 << 20) - 64), Err(MmuError::TableOutOfRange { .. })));
        assert_eq!(build_identity_map(&mut mem, 1000, 0), Err(MmuError::MemSize(1000)));
    }

    #[test]
    fn identity_and_sources() {
        let (mut mmu, mut mem) = setup();
        let t = mmu.translate(0x80004, Intent::Read, &mut mem, 0, None).unwrap();
        assert_eq!(t.result.paddr, Some(0x80004));
        assert_eq!(t.result.source, TranslationSource::Walk);
        assert_eq!(t.walk.unwrap().pte_paddr, 0x60000 + 8 * 8);
        // one PTE-sized read through the data path: a single L2 line fill
        assert_eq!(t.effects.transfers.len(), 1);
        let t = mmu.translate(0x80008, Intent::Read, &mut mem, 1, None).unwrap();
        assert_eq!(t.result.source, TranslationSource::UTlb);
        let t = mmu.translate(0x80008, Intent::Ifetch, &mut mem, 1, None).unwrap();
        assert_eq!(t.result.source, TranslationSource::L2Tlb);
        mmu.tlbi_all();
        let t = mmu.translate(0x80008, Intent::Read, &mut mem, 2, None).unwrap();
        assert_eq!(t.result.source, TranslationSource::Walk);
    }

    #[test]
    fn unmapped_and_permission() {
        let (mut mmu, mut mem) = setup();
        let t = mmu.translate(16 << 20, Intent::Read, &mut mem, 0, None).unwrap();
        assert_eq!(t.result.fault, Some(TranslationFault::Unmapped));
        assert_eq!(mmu.at_query(16 << 20, &mem), PAR_FAULT);
        let pte = identity_pte(3) | PTE_READ_ONLY | PTE_XN;
        mem.load_dram(0x60000 + 3 * 8, &pte.to_le_bytes()).unwrap();
        let t = mmu.translate(0x30000, Intent::Write, &mut mem, 0, None).unwrap();
        assert_eq!(t.result.fault, Some(TranslationFault::Permission));
        let t = mmu.translate(0x30000, Intent::Ifetch, &mut mem, 0, None).unwrap();
        assert_eq!(t.result.fault, Some(TranslationFault::Permission));
        assert!(mmu.tlb().utlb_d.is_empty());
    }

    #[test]
    fn at_query_is_pure() {
        let (mut mmu, mut mem) = setup();
        mmu.translate(0x10000, Intent::Read, &mut mem, 0, None).unwrap();
        let (m0, mem0) = (mmu.clone(), mem.clone());
        assert_eq!(mmu.at_query(0x10000, &mem), 0x10000 | 0xf << 56);
        assert_eq!(mmu.at_query(0x20010, &mem), 0x20000 | 0xf << 56);
        assert_eq!((&mmu, &mem), (&m0, &mem0));
    }

    #[test]
    fn tlb_round_robin() {
        let mut tlb = Tlb::new(2);
        let attrs = Attrs::from_pte(identity_pte(0));
        for v in 0..3 {
            tlb.insert(TlbEntry { vpage: v, ppage: v, attrs });
        }
        assert_eq!(tlb.vpages(), vec![2, 1]);
        tlb.insert(TlbEntry { vpage: 1, ppage: 9, attrs });
        assert_eq!(tlb.lookup(1).unwrap().ppage, 9);
        assert_eq!(tlb.len(), 2);
    }

    #[test]
    fn corruption_classes() {
        let (mut mmu, mut mem) = setup();
        for v in 0..8 {
            mmu.translate(v * PAGE_BYTES, Intent::Read, &mut mem, 0, None).unwrap();
        }
        let p = MmuParams {
            table_shift_bytes: 0x40,
            zero_range: [0x80000, 0xb0000],
            shift_delta: 0x740000,
            pte_corrupt_mask: PTE_FRAME_MASK,
        };
        let m = Mutation {
            kind: MutationKind::MmuCorrupt(p),
            location: 0xf00000,
            before: 0x60000,
            after: 0x60000 + 0x40 + 0x74 * 8,
            cycle: 0,
        };
        mmu.apply_corruption(&mut mem, &m).unwrap();
        let report = mmu.classify_mapping(&mem, 0, 0x100000, PAGE_BYTES);
        let classes: Vec<MappingClass> = report.iter().map(|e| e.class).collect();
        assert!(classes[..8].iter().all(|c| *c == MappingClass::Identity));
        assert!(classes[8..12].iter().all(|c| *c == MappingClass::Zero));
        assert!(classes[12..].iter().all(|c| *c == MappingClass::Shifted(0x740000)));
        assert_eq!(report[12].to_string(), "0x000c0000 -> 0x00800000 SHIFTED(+0x740000)");
        let before = mapping_report(&report);
        mmu.tlbi_all();
        assert_eq!(mapping_report(&mmu.classify_mapping(&mem, 0, 0x100000, PAGE_BYTES)), before);
    }
}
