//! Address-bound 64-bit tags over 16-byte blocks, with just-in-time and
//! proactive verification.
//!
//! Tags travel alongside the data (each cache line carries one per block) and
//! DRAM keeps its own tag store. A tag binds both the physical address and the
//! contents, so a block written to the wrong address fails its check even if
//! the bytes themselves are intact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::mem::{CacheLine, Effects, MemLevel, MemorySystem, BEATS_PER_LINE, BEAT_BYTES, LINE_BYTES};

pub const MAC_BLOCK_BYTES: usize = BEAT_BYTES;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("MAC block address 0x{0:x} is not 16-byte aligned")]
pub struct MisalignedBlock(pub u64);

fn mix(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mac_tag(key: u64, paddr: u64, block: &[u8; MAC_BLOCK_BYTES]) -> Result<u64, MisalignedBlock> {
    if !paddr.is_multiple_of(MAC_BLOCK_BYTES as u64) {
        return Err(MisalignedBlock(paddr));
    }
    let d0 = u64::from_le_bytes(block[..8].try_into().unwrap());
    let d1 = u64::from_le_bytes(block[8..].try_into().unwrap());
    Ok([paddr, d0, d1].into_iter().fold(key, |s, w| mix(s ^ w)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MacPolicy {
    #[default]
    Jit,
    Proactive,
    Off,
}

/// Level selector for `enabled_levels`; L1 covers both L1I and L1D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MacLevel {
    L1,
    L2,
    #[serde(rename = "DRAM")]
    Dram,
}

impl MacLevel {
    pub fn of(level: MemLevel) -> MacLevel {
        match level {
            MemLevel::L1I | MemLevel::L1D => MacLevel::L1,
            MemLevel::L2 => MacLevel::L2,
            MemLevel::Dram => MacLevel::Dram,
        }
    }
}

fn default_block() -> usize {
    MAC_BLOCK_BYTES
}

fn default_levels() -> Vec<MacLevel> {
    vec![MacLevel::L1, MacLevel::L2, MacLevel::Dram]
}

fn default_cost() -> u64 {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacConfig {
    pub key: u64,
    #[serde(default = "default_block")]
    pub block_bytes: usize,
    #[serde(default = "default_levels")]
    pub enabled_levels: Vec<MacLevel>,
    #[serde(default)]
    pub policy: MacPolicy,
    /// Cycles charged per tag check (counters only).
    #[serde(default = "default_cost")]
    pub check_cost: u64,
}

impl Default for MacConfig {
    fn default() -> Self {
        MacConfig {
            key: 0,
            block_bytes: MAC_BLOCK_BYTES,
            enabled_levels: default_levels(),
            policy: MacPolicy::Jit,
            check_cost: default_cost(),
        }
    }
}

impl MacConfig {
    pub fn with_policy(key: u64, policy: MacPolicy) -> Self {
        MacConfig { key, policy, ..MacConfig::default() }
    }

    pub fn is_off(&self) -> bool {
        self.policy == MacPolicy::Off
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.block_bytes != MAC_BLOCK_BYTES || !LINE_BYTES.is_multiple_of(self.block_bytes) {
            return Err(format!("block_bytes must be {MAC_BLOCK_BYTES}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MacMetrics {
    pub policy: MacPolicy,
    pub checks: u64,
    pub mismatches: u64,
    pub recoveries: u64,
    pub alarms: u64,
    pub cycles_added: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MacEventKind {
    Mismatch,
    Recovered,
    Alarm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacEvent {
    pub kind: MacEventKind,
    pub level: MemLevel,
    pub block: u64,
    pub cycle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifyStatus {
    Ok,
    RecoveredFrom(MemLevel),
    Alarm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub status: VerifyStatus,
    pub checks_performed: u64,
    pub cycles_added: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacUnit {
    config: MacConfig,
    /// Explicit DRAM tags. Blocks never written since load are tagged from
    /// their current contents on demand.
    dram_tags: BTreeMap<u64, Option<u64>>,
    metrics: MacMetrics,
    first_detection: Option<MemLevel>,
}

impl MacUnit {
    pub fn new(config: MacConfig) -> Self {
        let metrics = MacMetrics { policy: config.policy, ..MacMetrics::default() };
        MacUnit { config, dram_tags: BTreeMap::new(), metrics, first_detection: None }
    }

    pub fn config(&self) -> &MacConfig {
        &self.config
    }

    pub fn metrics(&self) -> MacMetrics {
        self.metrics
    }

    /// Level of the first mismatch seen in this run.
    pub fn first_detection(&self) -> Option<MemLevel> {
        self.first_detection
    }

    pub fn enabled(&self, level: MemLevel) -> bool {
        self.config.enabled_levels.contains(&MacLevel::of(level))
    }

    pub fn tag(&self, paddr: u64, block: &[u8; BEAT_BYTES]) -> u64 {
        mac_tag(self.config.key, paddr, block).expect("callers pass aligned blocks")
    }

    pub(crate) fn dram_tag(&self, block: u64, dram: &[u8]) -> Option<u64> {
        match self.dram_tags.get(&block) {
            Some(tag) => *tag,
            None => {
                let data: [u8; BEAT_BYTES] = dram[block as usize..block as usize + BEAT_BYTES].try_into().unwrap();
                Some(self.tag(block, &data))
            }
        }
    }

    pub(crate) fn set_dram_tag(&mut self, block: u64, tag: Option<u64>) {
        self.dram_tags.insert(block, tag);
    }

    /// Number of blocks with an explicit DRAM tag.
    pub fn explicit_dram_tags(&self) -> usize {
        self.dram_tags.len()
    }

    fn count_check(&mut self) {
        self.metrics.checks += 1;
        self.metrics.cycles_added = self.metrics.checks * self.config.check_cost;
    }
}

fn blocks_of(paddr: u64, len: u64) -> impl Iterator<Item = u64> {
    let first = paddr & !(BEAT_BYTES as u64 - 1);
    let end = paddr + len.max(1);
    (first..end).step_by(BEAT_BYTES)
}

fn outward(level: MemLevel) -> &'static [MemLevel] {
    match level {
        MemLevel::L1I | MemLevel::L1D => &[MemLevel::L2, MemLevel::Dram],
        MemLevel::L2 => &[MemLevel::Dram],
        MemLevel::Dram => &[],
    }
}

impl MemorySystem {
    pub(crate) fn mac_enabled_at(&self, level: MemLevel) -> bool {
        self.mac.as_ref().is_some_and(|m| m.enabled(level))
    }

    pub(crate) fn proactive(&self) -> bool {
        self.mac.as_ref().is_some_and(|m| m.config.policy == MacPolicy::Proactive)
    }

    /// Tags every DRAM block of an image explicitly.
    pub fn generate_on_load_image(&mut self, paddr: u64, len: u64) {
        let Some(mac) = self.mac.as_mut() else { return };
        for block in blocks_of(paddr, len) {
            let data: [u8; BEAT_BYTES] = self.dram[block as usize..block as usize + BEAT_BYTES].try_into().unwrap();
            let tag = mac.tag(block, &data);
            mac.set_dram_tag(block, Some(tag));
        }
    }

    /// Retags the blocks touched by a write at `level`. Returns how many.
    pub fn generate_on_write(&mut self, level: MemLevel, paddr: u64, len: u64) -> usize {
        let Some(mac) = self.mac.as_mut() else { return 0 };
        let mut count = 0;
        for block in blocks_of(paddr, len) {
            match level {
                MemLevel::Dram => {
                    let data: [u8; BEAT_BYTES] =
                        self.dram[block as usize..block as usize + BEAT_BYTES].try_into().unwrap();
                    let tag = mac.tag(block, &data);
                    mac.set_dram_tag(block, Some(tag));
                    count += 1;
                }
                _ => {
                    let cache = match level {
                        MemLevel::L1I => &mut self.l1i,
                        MemLevel::L1D => &mut self.l1d,
                        _ => &mut self.l2,
                    };
                    if let Some(idx) = cache.lookup(block) {
                        let line = &mut cache.lines[idx];
                        let off = (block % LINE_BYTES as u64) as usize;
                        let data: [u8; BEAT_BYTES] = line.data[off..off + BEAT_BYTES].try_into().unwrap();
                        line.macs[off / BEAT_BYTES] = Some(mac.tag(block, &data));
                        count += 1;
                    }
                }
            }
        }
        count
    }

    fn block_at(&self, level: MemLevel, block: u64) -> Option<([u8; BEAT_BYTES], Option<u64>)> {
        let off = (block % LINE_BYTES as u64) as usize;
        match level {
            MemLevel::Dram => {
                let tag = self.mac.as_ref().and_then(|m| m.dram_tag(block, &self.dram));
                Some((self.dram_block(block), tag))
            }
            _ => {
                let cache = self.cache(level);
                cache.lookup(block).map(|idx| {
                    let line = cache.line(idx);
                    (line.data[off..off + BEAT_BYTES].try_into().unwrap(), line.macs[off / BEAT_BYTES])
                })
            }
        }
    }

    fn repair(&mut self, level: MemLevel, block: u64, data: &[u8; BEAT_BYTES], tag: Option<u64>) {
        let off = (block % LINE_BYTES as u64) as usize;
        match level {
            MemLevel::Dram => {
                self.dram[block as usize..block as usize + BEAT_BYTES].copy_from_slice(data);
                if let Some(mac) = self.mac.as_mut() {
                    mac.set_dram_tag(block, tag);
                }
            }
            _ => {
                let cache = self.cache_mut(level);
                if let Some(idx) = cache.lookup(block) {
                    cache.lines[idx].data[off..off + BEAT_BYTES].copy_from_slice(data);
                    cache.lines[idx].macs[off / BEAT_BYTES] = tag;
                }
            }
        }
    }

    /// One tag check. A missing tag counts as a mismatch.
    pub(crate) fn check_block(
        &mut self,
        level: MemLevel,
        block: u64,
        data: &[u8; BEAT_BYTES],
        tag: Option<u64>,
        cycle: u64,
        fx: &mut Effects,
    ) -> bool {
        let Some(mac) = self.mac.as_mut() else { return true };
        mac.count_check();
        let ok = tag == Some(mac.tag(block, data));
        if !ok {
            mac.metrics.mismatches += 1;
            mac.first_detection.get_or_insert(level);
            fx.mac_events.push(MacEvent { kind: MacEventKind::Mismatch, level, block, cycle });
        }
        ok
    }

    pub(crate) fn record_recovery(&mut self, from: MemLevel, block: u64, cycle: u64, fx: &mut Effects) {
        if let Some(mac) = self.mac.as_mut() {
            mac.metrics.recoveries += 1;
        }
        fx.mac_events.push(MacEvent { kind: MacEventKind::Recovered, level: from, block, cycle });
    }

    pub(crate) fn record_alarm(&mut self, block: u64, cycle: u64, fx: &mut Effects) {
        if let Some(mac) = self.mac.as_mut() {
            mac.metrics.alarms += 1;
        }
        fx.mac_events.push(MacEvent { kind: MacEventKind::Alarm, level: MemLevel::Dram, block, cycle });
        fx.alarm.get_or_insert(block);
    }

    /// Checks the delivered block at consumption, escalating outward on a
    /// mismatch and repairing the bad copies from the first good one.
    pub(crate) fn verify_consume(
        &mut self,
        level: MemLevel,
        paddr: u64,
        cycle: u64,
        fx: &mut Effects,
    ) -> Option<VerifyOutcome> {
        if !self.mac_enabled_at(level) {
            return None;
        }
        let before = self.mac.as_ref().map(|m| m.metrics).unwrap_or_default();
        let block = paddr & !(BEAT_BYTES as u64 - 1);
        let mut bad = Vec::new();
        let mut status = VerifyStatus::Alarm;
        for &lvl in std::iter::once(&level).chain(outward(level)) {
            if !self.mac_enabled_at(lvl) {
                continue;
            }
            let Some((data, tag)) = self.block_at(lvl, block) else { continue };
            if self.check_block(lvl, block, &data, tag, cycle, fx) {
                if bad.is_empty() {
                    status = VerifyStatus::Ok;
                } else {
                    for &b in &bad {
                        self.repair(b, block, &data, tag);
                    }
                    self.record_recovery(lvl, block, cycle, fx);
                    status = VerifyStatus::RecoveredFrom(lvl);
                }
                break;
            }
            bad.push(lvl);
        }
        if status == VerifyStatus::Alarm {
            self.record_alarm(block, cycle, fx);
        }
        let after = self.mac.as_ref().map(|m| m.metrics).unwrap_or_default();
        Some(VerifyOutcome {
            status,
            checks_performed: after.checks - before.checks,
            cycles_added: after.cycles_added - before.cycles_added,
        })
    }

    /// Proactive install check: all four blocks of a staged line are verified
    /// before it becomes valid; bad blocks are refetched from outer levels.
    pub(crate) fn verify_install(
        &mut self,
        dst: MemLevel,
        line: u64,
        staged: &mut CacheLine,
        cycle: u64,
        fx: &mut Effects,
    ) {
        if !self.proactive() || !self.mac_enabled_at(dst) {
            return;
        }
        for i in 0..BEATS_PER_LINE {
            let block = line + (i * BEAT_BYTES) as u64;
            let range = i * BEAT_BYTES..(i + 1) * BEAT_BYTES;
            let data: [u8; BEAT_BYTES] = staged.data[range.clone()].try_into().unwrap();
            if self.check_block(dst, block, &data, staged.macs[i], cycle, fx) {
                continue;
            }
            let mut bad = Vec::new();
            let mut recovered = false;
            for &lvl in outward(dst) {
                if !self.mac_enabled_at(lvl) {
                    continue;
                }
                let Some((good, tag)) = self.block_at(lvl, block) else { continue };
                if self.check_block(lvl, block, &good, tag, cycle, fx) {
                    staged.data[range.clone()].copy_from_slice(&good);
                    staged.macs[i] = tag;
                    for &b in &bad {
                        self.repair(b, block, &good, tag);
                    }
                    self.record_recovery(lvl, block, cycle, fx);
                    recovered = true;
                    break;
                }
                bad.push(lvl);
            }
            if !recovered {
                self.record_alarm(block, cycle, fx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::{AccessKind, MemoryConfig};

    #[test]
    fn frozen_vectors() {
        // produced by a separate straight-line implementation
        assert_eq!(mac_tag(0, 0, &[0; 16]).unwrap(), 0x238275bc38fcbe91);
        let counting: [u8; 16] = std::array::from_fn(|i| i as u8);
        assert_eq!(mac_tag(0x0123456789abcdef, 0x48a00, &counting).unwrap(), 0x73a8e33632f7059d);
        assert_eq!(mac_tag(u64::MAX, 0x10, &[0xff; 16]).unwrap(), 0x2677cdf13388ce9e);
    }

    #[test]
    fn misaligned_block() {
        assert_eq!(mac_tag(1, 0x48a08, &[0; 16]), Err(MisalignedBlock(0x48a08)));
    }

    #[test]
    fn deterministic() {
        assert_eq!(mac_tag(5, 0x20, &[3; 16]), mac_tag(5, 0x20, &[3; 16]));
    }

    fn mem_with(policy: MacPolicy) -> MemorySystem {
        let mut mem = MemorySystem::new(MemoryConfig { dram_bytes: 1 << 20, ..MemoryConfig::default() }).unwrap();
        let bytes: Vec<u8> = (0..4096u32).map(|i| (i * 13) as u8).collect();
        mem.load_dram(0x8000, &bytes).unwrap();
        mem.enable_mac(MacConfig::with_policy(0xfeed, policy));
        mem.generate_on_load_image(0x8000, 4096);
        mem
    }

    #[test]
    fn image_load_tags_every_block() {
        let mem = mem_with(MacPolicy::Jit);
        assert_eq!(mem.mac_unit().unwrap().explicit_dram_tags(), 4096 / 16);
    }

    #[test]
    fn retag_counts() {
        let mut mem = mem_with(MacPolicy::Jit);
        mem.access(AccessKind::Load, 0x8000, 8, 0, 0, None).unwrap();
        assert_eq!(mem.generate_on_write(MemLevel::L1D, 0x8008, 8), 1);
        assert_eq!(mem.generate_on_write(MemLevel::L1D, 0x800c, 8), 2);
    }

    #[test]
    fn fault_free_ifetch_is_one_check() {
        let mut mem = mem_with(MacPolicy::Jit);
        let out = mem.access(AccessKind::Ifetch, 0x8000, 4, 0, 0, None).unwrap();
        let v = out.verify.unwrap();
        assert_eq!(v.status, VerifyStatus::Ok);
        assert_eq!(v.checks_performed, 1);
        assert_eq!(v.cycles_added, 3);
    }

    #[test]
    fn store_keeps_tags_valid() {
        let mut mem = mem_with(MacPolicy::Jit);
        mem.access(AccessKind::Store, 0x8010, 8, 0, 77, None).unwrap();
        let out = mem.access(AccessKind::Load, 0x8010, 8, 5, 0, None).unwrap();
        assert_eq!(out.data, 77);
        assert_eq!(out.verify.unwrap().status, VerifyStatus::Ok);
        let fx = mem.clean_invalidate_all(10);
        assert!(fx.mac_events.is_empty());
        let again = mem.access(AccessKind::Load, 0x8010, 8, 20, 0, None).unwrap();
        assert_eq!((again.data, again.verify.unwrap().status), (77, VerifyStatus::Ok));
    }

    #[test]
    fn jit_recovers_corrupted_l1_from_l2() {
        let mut mem = mem_with(MacPolicy::Jit);
        mem.access(AccessKind::Ifetch, 0x8000, 4, 0, 0, None).unwrap();
        let idx = mem.cache(MemLevel::L1I).lookup(0x8000).unwrap();
        mem.cache_mut(MemLevel::L1I).lines[idx].data[0] ^= 1;
        let out = mem.access(AccessKind::Ifetch, 0x8000, 4, 10, 0, None).unwrap();
        let v = out.verify.unwrap();
        assert_eq!(v.status, VerifyStatus::RecoveredFrom(MemLevel::L2));
        assert_eq!(v.checks_performed, 2);
        assert_eq!(out.data as u8, mem.dram()[0x8000]);
        let m = mem.mac_unit().unwrap().metrics();
        assert_eq!((m.mismatches, m.recoveries, m.alarms), (1, 1, 0));
        assert_eq!(m.cycles_added, m.checks * 3);
    }

    #[test]
    fn alarm_when_every_copy_is_bad() {
        let mut mem = mem_with(MacPolicy::Jit);
        mem.access(AccessKind::Load, 0x8040, 8, 0, 0, None).unwrap();
        for level in [MemLevel::L1D, MemLevel::L2] {
            let idx = mem.cache(level).lookup(0x8040).unwrap();
            mem.cache_mut(level).lines[idx].data[1] ^= 0x80;
        }
        mem.dram[0x8041] ^= 0x80;
        let out = mem.access(AccessKind::Load, 0x8040, 8, 10, 0, None).unwrap();
        assert_eq!(out.verify.unwrap().status, VerifyStatus::Alarm);
        assert!(out.effects.alarm.is_some());
    }

    #[test]
    fn disabled_level_is_not_checked() {
        let mut mem = MemorySystem::new(MemoryConfig { dram_bytes: 1 << 20, ..MemoryConfig::default() }).unwrap();
        mem.enable_mac(MacConfig { enabled_levels: vec![MacLevel::L2, MacLevel::Dram], ..MacConfig::default() });
        let out = mem.access(AccessKind::Load, 0, 8, 0, 0, None).unwrap();
        assert!(out.verify.is_none());
        assert_eq!(mem.mac_unit().unwrap().metrics().checks, 0);
    }

    #[test]
    fn proactive_checks_each_install() {
        let mut mem = mem_with(MacPolicy::Proactive);
        mem.access(AccessKind::Ifetch, 0x8000, 4, 0, 0, None).unwrap();
        // 4 blocks at L2, 4 at L1I, plus the consumption check
        assert_eq!(mem.mac_unit().unwrap().metrics().checks, 9);
    }

    #[test]
    fn metrics_json_shape() {
        let m = MacMetrics { policy: MacPolicy::Proactive, checks: 2, cycles_added: 6, ..MacMetrics::default() };
        let v = serde_json::to_value(m).unwrap();
        assert_eq!(v["policy"], "proactive");
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 6);
        for k in ["policy", "checks", "mismatches", "recoveries", "alarms", "cycles_added"] {
            assert!(keys.contains(&k));
        }
    }
}
