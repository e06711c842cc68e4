//! A cycle-approximate model of address-obfuscating hardware ASLR: masked
//! address translation, a speculative core, side-channel attacks against it
//! and exhaustive non-interference checks.

pub mod addr;
pub mod attacks;
pub mod cli;
pub mod layout;
pub mod machine;
pub mod memtable;
pub mod uarch;
pub mod verify;
