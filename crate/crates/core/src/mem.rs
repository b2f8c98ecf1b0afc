//! DRAM plus L1I, L1D and a unified L2, with 64-byte lines moved as four
//! 16-byte bus beats.
//!
//! Every beat of a line fill or write-back is offered to the armed
//! [`FaultEngine`] before it lands. Lines are staged off to the side and only
//! marked valid once all four beats (and, under the proactive MAC policy,
//! all four block checks) are done.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::fault::{FaultEngine, FaultEvent, L2Variant, Mutation, MutationKind};
use crate::mac::{MacConfig, MacEvent, MacUnit, VerifyOutcome};

pub const LINE_BYTES: usize = 64;
pub const BEAT_BYTES: usize = 16;
pub const BEATS_PER_LINE: usize = LINE_BYTES / BEAT_BYTES;

const LINE_MASK: u64 = !(LINE_BYTES as u64 - 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MemLevel {
    L1I,
    L1D,
    L2,
    #[serde(rename = "DRAM")]
    Dram,
}

impl MemLevel {
    pub fn name(self) -> &'static str {
        match self {
            MemLevel::L1I => "L1I",
            MemLevel::L1D => "L1D",
            MemLevel::L2 => "L2",
            MemLevel::Dram => "DRAM",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessKind {
    Ifetch,
    Load,
    Store,
    /// Page-table read issued by the MMU; served by L2.
    Walk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Fill,
    Evict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub size_bytes: usize,
    pub line_bytes: usize,
    pub ways: usize,
    pub latency_cycles: u64,
}

impl CacheConfig {
    pub fn new(size_bytes: usize, ways: usize, latency_cycles: u64) -> Self {
        CacheConfig { size_bytes, line_bytes: LINE_BYTES, ways, latency_cycles }
    }

    pub fn sets(&self) -> usize {
        self.size_bytes / (self.line_bytes * self.ways)
    }

    pub fn validate(&self) -> Result<(), MemError> {
        let bad = |why: &str| Err(MemError::Config(why.to_string()));
        if self.line_bytes != LINE_BYTES {
            return bad("line_bytes must be 64");
        }
        if self.ways == 0 || self.size_bytes == 0 {
            return bad("cache needs at least one way and non-zero size");
        }
        if !self.size_bytes.is_multiple_of(self.line_bytes * self.ways) {
            return bad("size must be divisible by line_bytes * ways");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub dram_bytes: u64,
    pub dram_latency_cycles: u64,
    pub l1i: CacheConfig,
    pub l1d: CacheConfig,
    pub l2: CacheConfig,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            dram_bytes: 16 << 20,
            dram_latency_cycles: 100,
            l1i: CacheConfig::new(16 << 10, 2, 1),
            l1d: CacheConfig::new(16 << 10, 4, 1),
            l2: CacheConfig::new(512 << 10, 16, 10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MemError {
    #[error("bus error at 0x{paddr:x}")]
    BusError { paddr: u64 },
    #[error("misaligned {width}-byte access at 0x{paddr:x}")]
    Misaligned { paddr: u64, width: usize },
    #[error("invalid memory configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheLine {
    pub tag: u64,
    pub valid: bool,
    pub dirty: bool,
    pub data: [u8; LINE_BYTES],
    pub last_fill_cycle: u64,
    /// Per-16-byte-block MAC tags travelling with the data.
    pub macs: [Option<u64>; BEATS_PER_LINE],
}

impl Default for CacheLine {
    fn default() -> Self {
        CacheLine {
            tag: 0,
            valid: false,
            dirty: false,
            data: [0; LINE_BYTES],
            last_fill_cycle: 0,
            macs: [None; BEATS_PER_LINE],
        }
    }
}

/// One set-associative array with round-robin replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cache {
    level: MemLevel,
    config: CacheConfig,
    sets: usize,
    pub(crate) lines: Vec<CacheLine>,
    next_victim: Vec<usize>,
}

impl Cache {
    pub fn new(level: MemLevel, config: CacheConfig) -> Result<Self, MemError> {
        config.validate()?;
        let sets = config.sets();
        Ok(Cache {
            level,
            config,
            sets,
            lines: vec![CacheLine::default(); sets * config.ways],
            next_victim: vec![0; sets],
        })
    }

    pub fn level(&self) -> MemLevel {
        self.level
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn set_index(&self, paddr: u64) -> usize {
        ((paddr / LINE_BYTES as u64) % self.sets as u64) as usize
    }

    fn tag_of(&self, paddr: u64) -> u64 {
        paddr / LINE_BYTES as u64 / self.sets as u64
    }

    fn line_addr(&self, idx: usize) -> u64 {
        let set = idx / self.config.ways;
        (self.lines[idx].tag * self.sets as u64 + set as u64) * LINE_BYTES as u64
    }

    /// Index of the valid line holding `paddr`.
    pub fn lookup(&self, paddr: u64) -> Option<usize> {
        let set = self.set_index(paddr);
        let tag = self.tag_of(paddr);
        let ways = self.config.ways;
        (set * ways..(set + 1) * ways).find(|&i| self.lines[i].valid && self.lines[i].tag == tag)
    }

    pub fn line(&self, idx: usize) -> &CacheLine {
        &self.lines[idx]
    }

    pub fn holds(&self, paddr: u64) -> bool {
        self.lookup(paddr).is_some()
    }

    /// First invalid way, else the round-robin pointer.
    fn choose_victim(&mut self, paddr: u64) -> usize {
        let set = self.set_index(paddr);
        let ways = self.config.ways;
        let base = set * ways;
        if let Some(i) = (base..base + ways).find(|&i| !self.lines[i].valid) {
            return i;
        }
        let way = self.next_victim[set];
        self.next_victim[set] = (way + 1) % ways;
        base + way
    }

    fn invalidate_all(&mut self) {
        for line in &mut self.lines {
            line.valid = false;
            line.dirty = false;
        }
    }

    fn valid_lines(&self) -> impl Iterator<Item = (usize, &CacheLine)> {
        self.lines.iter().enumerate().filter(|(_, l)| l.valid)
    }

    /// Every way, valid or not, in set-major order.
    pub fn lines(&self) -> &[CacheLine] {
        &self.lines
    }

    /// Valid lines with their physical line address.
    pub fn resident(&self) -> impl Iterator<Item = (u64, &CacheLine)> {
        self.valid_lines().map(|(i, l)| (self.line_addr(i), l))
    }

    /// `LEVEL set way tag V D hex64bytes`, one line per valid entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (idx, line) in self.valid_lines() {
            let hex: String = line.data.iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(
                out,
                "{} {} {} {:x} {} {} {}",
                self.level.name(),
                idx / self.config.ways,
                idx % self.config.ways,
                line.tag,
                line.valid as u8,
                line.dirty as u8,
                hex
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatTransfer {
    pub direction: Direction,
    pub src: MemLevel,
    pub dst: MemLevel,
    pub beat_paddr: u64,
    pub data: [u8; BEAT_BYTES],
    pub mac: Option<u64>,
    pub cycle: u64,
}

/// One line moved between levels; records what was sent and what landed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineTransfer {
    pub direction: Direction,
    pub src: MemLevel,
    pub dst: MemLevel,
    pub line_paddr: u64,
    pub intended: Vec<BeatTransfer>,
    pub applied: Vec<BeatTransfer>,
}

impl LineTransfer {
    pub fn first_cycle(&self) -> u64 {
        self.intended.first().map_or(0, |b| b.cycle)
    }

    pub fn last_cycle(&self) -> u64 {
        self.intended.last().map_or(0, |b| b.cycle)
    }
}

/// Side effects collected while serving one request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Effects {
    pub transfers: Vec<LineTransfer>,
    pub mutations: Vec<Mutation>,
    pub mac_events: Vec<MacEvent>,
    /// Set when integrity verification failed at every level.
    pub alarm: Option<u64>,
}

impl Effects {
    pub(crate) fn absorb(&mut self, other: Effects) {
        self.transfers.extend(other.transfers);
        self.mutations.extend(other.mutations);
        self.mac_events.extend(other.mac_events);
        if self.alarm.is_none() {
            self.alarm = other.alarm;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessOutcome {
    pub data: u64,
    pub hit_level: MemLevel,
    pub latency: u64,
    pub effects: Effects,
    pub verify: Option<VerifyOutcome>,
}

pub(crate) type Hook<'a, 'b> = &'a mut Option<&'b mut FaultEngine>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemorySystem {
    config: MemoryConfig,
    pub(crate) dram: Vec<u8>,
    pub(crate) l1i: Cache,
    pub(crate) l1d: Cache,
    pub(crate) l2: Cache,
    pub(crate) mac: Option<MacUnit>,
}

fn beat_cycles(cycle: u64, latency: u64) -> [u64; BEATS_PER_LINE] {
    std::array::from_fn(|i| cycle + latency * (i as u64 + 1) / BEATS_PER_LINE as u64)
}

impl MemorySystem {
    pub fn new(config: MemoryConfig) -> Result<Self, MemError> {
        if config.dram_bytes == 0 || !config.dram_bytes.is_multiple_of(LINE_BYTES as u64) {
            return Err(MemError::Config("dram_bytes must be a non-zero multiple of 64".into()));
        }
        Ok(MemorySystem {
            dram: vec![0; config.dram_bytes as usize],
            l1i: Cache::new(MemLevel::L1I, config.l1i)?,
            l1d: Cache::new(MemLevel::L1D, config.l1d)?,
            l2: Cache::new(MemLevel::L2, config.l2)?,
            config,
            mac: None,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn enable_mac(&mut self, config: MacConfig) {
        self.mac = (!config.is_off()).then(|| MacUnit::new(config));
    }

    pub fn mac_unit(&self) -> Option<&MacUnit> {
        self.mac.as_ref()
    }

    pub fn cache(&self, level: MemLevel) -> &Cache {
        match level {
            MemLevel::L1I => &self.l1i,
            MemLevel::L1D => &self.l1d,
            MemLevel::L2 => &self.l2,
            MemLevel::Dram => panic!("DRAM is not a cache"),
        }
    }

    pub(crate) fn cache_mut(&mut self, level: MemLevel) -> &mut Cache {
        match level {
            MemLevel::L1I => &mut self.l1i,
            MemLevel::L1D => &mut self.l1d,
            MemLevel::L2 => &mut self.l2,
            MemLevel::Dram => panic!("DRAM is not a cache"),
        }
    }

    pub fn dram(&self) -> &[u8] {
        &self.dram
    }

    pub fn latency_of(&self, level: MemLevel) -> u64 {
        match level {
            MemLevel::L1I => self.config.l1i.latency_cycles,
            MemLevel::L1D => self.config.l1d.latency_cycles,
            MemLevel::L2 => self.config.l2.latency_cycles,
            MemLevel::Dram => self.config.dram_latency_cycles,
        }
    }

    fn check_range(&self, paddr: u64, len: u64) -> Result<(), MemError> {
        match paddr.checked_add(len) {
            Some(end) if end <= self.config.dram_bytes => Ok(()),
            _ => Err(MemError::BusError { paddr }),
        }
    }

    /// Writes straight into DRAM, bypassing caches. Used for image loading.
    pub fn load_dram(&mut self, paddr: u64, bytes: &[u8]) -> Result<(), MemError> {
        self.check_range(paddr, bytes.len() as u64)?;
        self.dram[paddr as usize..paddr as usize + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub(crate) fn dram_block(&self, paddr: u64) -> [u8; BEAT_BYTES] {
        self.dram[paddr as usize..paddr as usize + BEAT_BYTES].try_into().unwrap()
    }

    /// Serves one core or walker request. Misses allocate at every level on
    /// the way (write-back, write-allocate).
    pub fn access(
        &mut self,
        kind: AccessKind,
        paddr: u64,
        width: usize,
        cycle: u64,
        store_value: u64,
        fault: Option<&mut FaultEngine>,
    ) -> Result<AccessOutcome, MemError> {
        if width != 4 && width != 8 {
            return Err(MemError::Misaligned { paddr, width });
        }
        self.check_range(paddr, width as u64)?;
        if !paddr.is_multiple_of(width as u64) {
            return Err(MemError::Misaligned { paddr, width });
        }
        let mut hook = fault;
        let mut fx = Effects::default();
        let line = paddr & LINE_MASK;

        let (level, idx, hit_level, latency) = match kind {
            AccessKind::Walk => {
                let (idx, hit) = self.ensure_l2(line, cycle, &mut hook, &mut fx);
                let hit_level = if hit { MemLevel::L2 } else { MemLevel::Dram };
                (MemLevel::L2, idx, hit_level, self.latency_of(hit_level))
            }
            _ => {
                let l1 = if kind == AccessKind::Ifetch { MemLevel::L1I } else { MemLevel::L1D };
                match self.cache(l1).lookup(line) {
                    Some(idx) => (l1, idx, l1, self.latency_of(l1)),
                    None => {
                        let hit_level = if self.l2.holds(line) { MemLevel::L2 } else { MemLevel::Dram };
                        let latency = self.latency_of(hit_level);
                        let cycles = beat_cycles(cycle, latency);
                        if hit_level == MemLevel::Dram {
                            self.fill_line(MemLevel::L2, line, cycles, &mut hook, &mut fx);
                        }
                        let idx = self.fill_line(l1, line, cycles, &mut hook, &mut fx);
                        (l1, idx, hit_level, latency)
                    }
                }
            }
        };

        let mut verify = None;
        if matches!(kind, AccessKind::Ifetch | AccessKind::Load | AccessKind::Store) && fx.alarm.is_none() {
            let outcome = self.verify_consume(level, paddr, cycle, &mut fx);
            verify = outcome;
        }
        // the line may have been repaired in place, so re-resolve it
        let idx = self.cache(level).lookup(line).unwrap_or(idx);
        let off = (paddr - line) as usize;
        let data = {
            let bytes = &self.cache(level).line(idx).data[off..off + width];
            let mut buf = [0u8; 8];
            buf[..width].copy_from_slice(bytes);
            u64::from_le_bytes(buf)
        };
        if kind == AccessKind::Store && fx.alarm.is_none() {
            let bytes = store_value.to_le_bytes();
            let cache = self.cache_mut(level);
            cache.lines[idx].data[off..off + width].copy_from_slice(&bytes[..width]);
            cache.lines[idx].dirty = true;
            self.generate_on_write(level, paddr, width as u64);
        }
        Ok(AccessOutcome { data, hit_level, latency, effects: fx, verify })
    }

    fn ensure_l2(&mut self, line: u64, cycle: u64, hook: Hook, fx: &mut Effects) -> (usize, bool) {
        match self.l2.lookup(line) {
            Some(idx) => (idx, true),
            None => {
                let cycles = beat_cycles(cycle, self.config.dram_latency_cycles);
                (self.fill_line(MemLevel::L2, line, cycles, hook, fx), false)
            }
        }
    }

    /// Source level for fills into `dst`.
    fn fill_source(dst: MemLevel) -> MemLevel {
        match dst {
            MemLevel::L2 => MemLevel::Dram,
            _ => MemLevel::L2,
        }
    }

    /// Reads the four beats (with tags) of `line` as currently held by `level`.
    fn read_line(&self, level: MemLevel, line: u64) -> ([u8; LINE_BYTES], [Option<u64>; BEATS_PER_LINE]) {
        match level {
            MemLevel::Dram => {
                let data: [u8; LINE_BYTES] = self.dram[line as usize..line as usize + LINE_BYTES].try_into().unwrap();
                let macs = std::array::from_fn(|i| {
                    self.mac.as_ref().and_then(|m| m.dram_tag(line + (i * BEAT_BYTES) as u64, &self.dram))
                });
                (data, macs)
            }
            _ => {
                let cache = self.cache(level);
                let idx = cache.lookup(line).expect("fill source must hold the line");
                (cache.lines[idx].data, cache.lines[idx].macs)
            }
        }
    }

    /// Installs `line` into `dst` from its source level. Returns the line index.
    pub(crate) fn fill_line(
        &mut self,
        dst: MemLevel,
        line: u64,
        cycles: [u64; BEATS_PER_LINE],
        hook: Hook,
        fx: &mut Effects,
    ) -> usize {
        let src = Self::fill_source(dst);
        let (src_data, src_macs) = self.read_line(src, line);

        let idx = self.allocate(dst, line, cycles[0], hook, fx);

        let mut intended = Vec::with_capacity(BEATS_PER_LINE);
        let mut applied = Vec::with_capacity(BEATS_PER_LINE);
        let mut mutations = Vec::new();
        for i in 0..BEATS_PER_LINE {
            let beat = BeatTransfer {
                direction: Direction::Fill,
                src,
                dst,
                beat_paddr: line + (i * BEAT_BYTES) as u64,
                data: src_data[i * BEAT_BYTES..(i + 1) * BEAT_BYTES].try_into().unwrap(),
                mac: src_macs[i],
                cycle: cycles[i],
            };
            let landed = match hook.as_deref_mut().and_then(|e| e.intercept(FaultEvent::Beat(&beat), beat.cycle)) {
                Some(m) => {
                    mutations.push(m);
                    apply_beat_mutation(&beat, &m)
                }
                None => beat,
            };
            intended.push(beat);
            applied.push(landed);
        }

        // stage over whatever the victim way held
        let cache = self.cache(dst);
        let mut staged = CacheLine { tag: cache.tag_of(line), ..cache.lines[idx].clone() };
        staged.valid = false;
        staged.dirty = false;
        for beat in &applied {
            let off = (beat.beat_paddr - line) as usize;
            staged.data[off..off + BEAT_BYTES].copy_from_slice(&beat.data);
            staged.macs[off / BEAT_BYTES] = beat.mac;
        }
        staged.last_fill_cycle = cycles[BEATS_PER_LINE - 1];

        for m in &mutations {
            if let MutationKind::L2Shift { variant, .. } = m.kind {
                // a displaced write lands in L2 as modified data
                staged.dirty = true;
                if variant == L2Variant::F2 {
                    self.install_stale_l1d(line, &src_data, &src_macs, cycles[0], hook, fx);
                }
            }
        }

        self.verify_install(dst, line, &mut staged, cycles[BEATS_PER_LINE - 1], fx);

        staged.valid = true;
        self.cache_mut(dst).lines[idx] = staged;
        fx.mutations.extend(mutations);
        fx.transfers.push(LineTransfer { direction: Direction::Fill, src, dst, line_paddr: line, intended, applied });
        idx
    }

    /// Picks a way for `line` in `level`, writing back a dirty victim first.
    fn allocate(&mut self, level: MemLevel, line: u64, cycle: u64, hook: Hook, fx: &mut Effects) -> usize {
        let cache = self.cache_mut(level);
        let idx = cache.choose_victim(line);
        let victim = cache.lines[idx].clone();
        if victim.valid {
            let victim_addr = cache.line_addr(idx);
            cache.lines[idx].valid = false;
            cache.lines[idx].dirty = false;
            if victim.dirty {
                self.write_back(level, victim_addr, &victim.data, &victim.macs, cycle, hook, fx);
            }
        }
        idx
    }

    /// Pushes a dirty line from `from` one level outward.
    #[allow(clippy::too_many_arguments)]
    fn write_back(
        &mut self,
        from: MemLevel,
        line: u64,
        data: &[u8; LINE_BYTES],
        macs: &[Option<u64>; BEATS_PER_LINE],
        cycle: u64,
        hook: Hook,
        fx: &mut Effects,
    ) {
        match from {
            MemLevel::L1D => self.write_back_to_l2(line, data, macs, cycle, hook, fx),
            MemLevel::L2 => self.write_back_to_dram(line, data, macs, cycle, fx),
            _ => {}
        }
    }

    fn evict_beats(
        src: MemLevel,
        dst: MemLevel,
        line: u64,
        data: &[u8; LINE_BYTES],
        macs: &[Option<u64>; BEATS_PER_LINE],
        cycle: u64,
    ) -> Vec<BeatTransfer> {
        (0..BEATS_PER_LINE)
            .map(|i| BeatTransfer {
                direction: Direction::Evict,
                src,
                dst,
                beat_paddr: line + (i * BEAT_BYTES) as u64,
                data: data[i * BEAT_BYTES..(i + 1) * BEAT_BYTES].try_into().unwrap(),
                mac: macs[i],
                cycle: cycle + i as u64,
            })
            .collect()
    }

    fn write_back_to_l2(
        &mut self,
        line: u64,
        data: &[u8; LINE_BYTES],
        macs: &[Option<u64>; BEATS_PER_LINE],
        cycle: u64,
        hook: Hook,
        fx: &mut Effects,
    ) {
        let intended = Self::evict_beats(MemLevel::L1D, MemLevel::L2, line, data, macs, cycle);
        let mut applied = Vec::with_capacity(BEATS_PER_LINE);
        let mut mutations = Vec::new();
        for beat in &intended {
            let landed = match hook.as_deref_mut().and_then(|e| e.intercept(FaultEvent::Beat(beat), beat.cycle)) {
                Some(m) => {
                    mutations.push(m);
                    apply_beat_mutation(beat, &m)
                }
                None => *beat,
            };
            applied.push(landed);
        }

        let idx = match self.l2.lookup(line) {
            Some(idx) => idx,
            None => self.allocate(MemLevel::L2, line, cycle, hook, fx),
        };
        let mut staged = CacheLine { tag: self.l2.tag_of(line), ..self.l2.lines[idx].clone() };
        for beat in &applied {
            let off = (beat.beat_paddr - line) as usize;
            staged.data[off..off + BEAT_BYTES].copy_from_slice(&beat.data);
            staged.macs[off / BEAT_BYTES] = beat.mac;
        }
        staged.dirty = true;
        staged.last_fill_cycle = cycle + BEATS_PER_LINE as u64 - 1;
        if self.mac_enabled_at(MemLevel::L2) && self.proactive() {
            // the outgoing copy is the only up-to-date one
            for (i, beat) in intended.iter().enumerate() {
                let block = line + (i * BEAT_BYTES) as u64;
                let got: [u8; BEAT_BYTES] = staged.data[i * BEAT_BYTES..(i + 1) * BEAT_BYTES].try_into().unwrap();
                if !self.check_block(MemLevel::L2, block, &got, staged.macs[i], cycle, fx) {
                    if self.check_block(MemLevel::L1D, block, &beat.data, beat.mac, cycle, fx) {
                        staged.data[i * BEAT_BYTES..(i + 1) * BEAT_BYTES].copy_from_slice(&beat.data);
                        staged.macs[i] = beat.mac;
                        self.record_recovery(MemLevel::L1D, block, cycle, fx);
                    } else {
                        self.record_alarm(block, cycle, fx);
                    }
                }
            }
        }
        staged.valid = true;
        self.l2.lines[idx] = staged;
        fx.mutations.extend(mutations);
        fx.transfers.push(LineTransfer {
            direction: Direction::Evict,
            src: MemLevel::L1D,
            dst: MemLevel::L2,
            line_paddr: line,
            intended,
            applied,
        });
    }

    fn write_back_to_dram(
        &mut self,
        line: u64,
        data: &[u8; LINE_BYTES],
        macs: &[Option<u64>; BEATS_PER_LINE],
        cycle: u64,
        fx: &mut Effects,
    ) {
        let beats = Self::evict_beats(MemLevel::L2, MemLevel::Dram, line, data, macs, cycle);
        self.dram[line as usize..line as usize + LINE_BYTES].copy_from_slice(data);
        if let Some(mac) = self.mac.as_mut() {
            for (i, tag) in macs.iter().enumerate() {
                mac.set_dram_tag(line + (i * BEAT_BYTES) as u64, *tag);
            }
        }
        fx.transfers.push(LineTransfer {
            direction: Direction::Evict,
            src: MemLevel::L2,
            dst: MemLevel::Dram,
            line_paddr: line,
            intended: beats.clone(),
            applied: beats,
        });
    }

    /// F2 side effect: L1D ends up holding the pre-fault copy of `line`.
    fn install_stale_l1d(
        &mut self,
        line: u64,
        data: &[u8; LINE_BYTES],
        macs: &[Option<u64>; BEATS_PER_LINE],
        cycle: u64,
        hook: Hook,
        fx: &mut Effects,
    ) {
        if self.l1d.holds(line) {
            return;
        }
        let idx = self.allocate(MemLevel::L1D, line, cycle, hook, fx);
        let tag = self.l1d.tag_of(line);
        self.l1d.lines[idx] =
            CacheLine { tag, valid: true, dirty: false, data: *data, last_fill_cycle: cycle, macs: *macs };
    }

    /// Invalidates every L1I line without write-back.
    pub fn ic_iallu(&mut self) {
        self.l1i.invalidate_all();
    }

    /// Invalidates the L1I lines overlapping `[paddr, paddr + len)`.
    pub fn ic_invalidate_range(&mut self, paddr: u64, len: u64) {
        let mut line = paddr & LINE_MASK;
        while line < paddr + len {
            if let Some(idx) = self.l1i.lookup(line) {
                self.l1i.lines[idx].valid = false;
            }
            line += LINE_BYTES as u64;
        }
    }

    /// Clean and invalidate to the point of coherency (DRAM) for the line
    /// covering `paddr`.
    pub fn dc_civac(&mut self, paddr: u64, cycle: u64) -> Result<Effects, MemError> {
        self.check_range(paddr, 1)?;
        let line = paddr & LINE_MASK;
        let mut fx = Effects::default();
        let mut none: Option<&mut FaultEngine> = None;
        if let Some(idx) = self.l1d.lookup(line) {
            let victim = self.l1d.lines[idx].clone();
            self.l1d.lines[idx].valid = false;
            self.l1d.lines[idx].dirty = false;
            if victim.dirty {
                if self.l2.holds(line) {
                    self.write_back_to_l2(line, &victim.data, &victim.macs, cycle, &mut none, &mut fx);
                } else {
                    self.write_back_to_dram(line, &victim.data, &victim.macs, cycle, &mut fx);
                }
            }
        }
        if let Some(idx) = self.l2.lookup(line) {
            let victim = self.l2.lines[idx].clone();
            self.l2.lines[idx].valid = false;
            self.l2.lines[idx].dirty = false;
            if victim.dirty {
                self.write_back_to_dram(line, &victim.data, &victim.macs, cycle, &mut fx);
            }
        }
        Ok(fx)
    }

    /// Cleans and invalidates every line at every level.
    pub fn clean_invalidate_all(&mut self, cycle: u64) -> Effects {
        let mut fx = Effects::default();
        let mut lines: Vec<u64> = self.l1d.valid_lines().map(|(i, _)| self.l1d.line_addr(i)).collect();
        lines.extend(self.l2.valid_lines().map(|(i, _)| self.l2.line_addr(i)));
        lines.sort_unstable();
        lines.dedup();
        for line in lines {
            fx.absorb(self.dc_civac(line, cycle).expect("resident lines are in range"));
        }
        self.ic_iallu();
        fx
    }

    /// The data viewpoint: per byte, L1D over L2 over DRAM. Never allocates.
    pub fn probe_read(&self, paddr: u64, len: u64) -> Result<Vec<u8>, MemError> {
        self.check_range(paddr, len)?;
        let mut out = Vec::with_capacity(len as usize);
        for addr in paddr..paddr + len {
            let line = addr & LINE_MASK;
            let off = (addr - line) as usize;
            let byte = [&self.l1d, &self.l2]
                .into_iter()
                .find_map(|c| c.lookup(line).map(|i| c.lines[i].data[off]))
                .unwrap_or(self.dram[addr as usize]);
            out.push(byte);
        }
        Ok(out)
    }

    /// Coherent write: updates DRAM and every cached copy in place, keeping
    /// dirty state, and retags the touched blocks.
    pub fn poke(&mut self, paddr: u64, bytes: &[u8]) -> Result<(), MemError> {
        self.check_range(paddr, bytes.len() as u64)?;
        for (i, &b) in bytes.iter().enumerate() {
            let addr = paddr + i as u64;
            self.dram[addr as usize] = b;
            let line = addr & LINE_MASK;
            let off = (addr - line) as usize;
            for level in [MemLevel::L1I, MemLevel::L1D, MemLevel::L2] {
                let cache = self.cache_mut(level);
                if let Some(idx) = cache.lookup(line) {
                    cache.lines[idx].data[off] = b;
                }
            }
        }
        for level in [MemLevel::L1I, MemLevel::L1D, MemLevel::L2, MemLevel::Dram] {
            self.generate_on_write(level, paddr, bytes.len() as u64);
        }
        Ok(())
    }

    pub fn dump(&self, level: MemLevel) -> String {
        self.cache(level).dump()
    }
}

fn apply_beat_mutation(beat: &BeatTransfer, m: &Mutation) -> BeatTransfer {
    let mut out = *beat;
    match m.kind {
        MutationKind::L1iXor { mask } => {
            let off = (m.location - beat.beat_paddr) as usize;
            let word = u32::from_le_bytes(out.data[off..off + 4].try_into().unwrap()) ^ mask;
            out.data[off..off + 4].copy_from_slice(&word.to_le_bytes());
        }
        MutationKind::L2Shift { .. } => out.beat_paddr = m.after,
        MutationKind::MmuCorrupt(_) => {}
    }
    out
}
