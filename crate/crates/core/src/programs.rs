//! Reference programs shipped with the simulator.

use crate::asm::{assemble, Image};

pub const LOOP_SRC: &str = include_str!("../programs/loop.s");
pub const REG_TRANSFER_SRC: &str = include_str!("../programs/reg_transfer.s");
pub const MMU_SRC: &str = include_str!("../programs/mmu.s");

pub const LOOP_EXPECTED: u64 = 2500;
pub const LOOP_START: u64 = 0x489f8;
/// The `addi x0, x0, #1` inside the inner loop.
pub const LOOP_ADD: u64 = 0x48a08;
pub const LOOP_END: u64 = 0x48a20;

pub const REG_TRANSFER_EXPECTED: u64 = 36;
pub const REG_TRANSFER_BODY: u64 = 0x489c0;
pub const REG_TRANSFER_END: u64 = 0x48a00;

pub const MMU_EXPECTED: u64 = 1;

pub fn loop_image() -> Image {
    assemble(LOOP_SRC).expect("loop.s assembles")
}

pub fn reg_transfer_image() -> Image {
    assemble(REG_TRANSFER_SRC).expect("reg_transfer.s assembles")
}

pub fn mmu_image() -> Image {
    assemble(MMU_SRC).expect("mmu.s assembles")
}
