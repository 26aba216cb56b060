//! Bytecode interpreter for contract accounts.
//!
//! The machine has a stack of 64-bit words (at most [`MAX_STACK`] deep), a
//! per-contract storage map from word to word, and read-only call data
//! addressed in 8-byte words. Every executed instruction costs one step.
//!
//! | byte | name | immediate | effect |
//! |------|------|-----------|--------|
//! | 0x00 | STOP | | halt successfully |
//! | 0x01 | PUSH | u64 BE | push immediate |
//! | 0x02 | POP | | drop top |
//! | 0x04 | DUP | u8 n | push copy of the n-th word from the top (0 = top) |
//! | 0x05 | SWAP | u8 n | swap top with the word n+1 below it |
//! | 0x10 | ADD | | `a + b`, overflow reverts |
//! | 0x11 | SUB | | `a - b` (a pushed first), underflow reverts |
//! | 0x12 | MUL | | `a * b`, overflow reverts |
//! | 0x13 | LT | | `a < b` as 0/1 |
//! | 0x14 | GT | | `a > b` as 0/1 |
//! | 0x15 | EQ | | `a == b` as 0/1 |
//! | 0x16 | ISZERO | | `a == 0` as 0/1 |
//! | 0x20 | SLOAD | | push `storage[key]` (missing = 0) |
//! | 0x21 | SSTORE | | pop key, pop value, `storage[key] = value` (0 deletes) |
//! | 0x30 | JUMP | u16 BE | continue at byte offset |
//! | 0x31 | JUMPI | u16 BE | pop condition, jump if non-zero |
//! | 0x40 | CALLER | | push the first 8 bytes of the caller's account id |
//! | 0x41 | CALLVALUE | | push the amount sent with the call |
//! | 0x42 | CALLDATALOAD | u8 i | push call data word i (zero padded) |
//! | 0x43 | CALLDATASIZE | | push call data length in bytes |
//! | 0x50 | LOG | | pop topic, pop data, append event |
//! | 0xFE | REVERT | | halt and discard all effects |
//!
//! Falling off the end of the code is a successful halt. Unknown opcodes,
//! truncated immediates, stack faults and arithmetic faults revert.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const MAX_STACK: usize = 1024;

pub mod op {
    pub const STOP: u8 = 0x00;
    pub const PUSH: u8 = 0x01;
    pub const POP: u8 = 0x02;
    pub const DUP: u8 = 0x04;
    pub const SWAP: u8 = 0x05;
    pub const ADD: u8 = 0x10;
    pub const SUB: u8 = 0x11;
    pub const MUL: u8 = 0x12;
    pub const LT: u8 = 0x13;
    pub const GT: u8 = 0x14;
    pub const EQ: u8 = 0x15;
    pub const ISZERO: u8 = 0x16;
    pub const SLOAD: u8 = 0x20;
    pub const SSTORE: u8 = 0x21;
    pub const JUMP: u8 = 0x30;
    pub const JUMPI: u8 = 0x31;
    pub const CALLER: u8 = 0x40;
    pub const CALLVALUE: u8 = 0x41;
    pub const CALLDATALOAD: u8 = 0x42;
    pub const CALLDATASIZE: u8 = 0x43;
    pub const LOG: u8 = 0x50;
    pub const REVERT: u8 = 0xFE;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub topic: u64,
    pub data: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Halt {
    Stopped,
    Reverted,
    OutOfSteps,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutcome {
    pub halt: Halt,
    /// Storage after execution; equal to the input unless the halt is
    /// [`Halt::Stopped`].
    pub storage: BTreeMap<u64, u64>,
    pub logs: Vec<LogEntry>,
    pub steps: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct CallContext<'a> {
    pub caller: u64,
    pub value: u64,
    pub data: &'a [u8],
}

/// Packs up to eight ASCII bytes into a word, left aligned, so that short
/// names can serve as storage keys, selectors and event topics.
pub fn word(name: &str) -> u64 {
    let mut b = [0u8; 8];
    let n = name.len().min(8);
    b[..n].copy_from_slice(&name.as_bytes()[..n]);
    u64::from_be_bytes(b)
}

/// Encodes call data words.
pub fn calldata(words: &[u64]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_be_bytes()).collect()
}

fn data_word(data: &[u8], i: usize) -> u64 {
    let mut b = [0u8; 8];
    let start = i.saturating_mul(8);
    if start < data.len() {
        let end = (start + 8).min(data.len());
        b[..end - start].copy_from_slice(&data[start..end]);
    }
    u64::from_be_bytes(b)
}

struct Machine<'a> {
    code: &'a [u8],
    pc: usize,
    stack: Vec<u64>,
    storage: BTreeMap<u64, u64>,
    logs: Vec<LogEntry>,
}

enum Step {
    Continue,
    Halt(Halt),
}

impl Machine<'_> {
    fn pop(&mut self) -> Option<u64> {
        self.stack.pop()
    }

    fn push(&mut self, v: u64) -> Option<()> {
        if self.stack.len() >= MAX_STACK {
            return None;
        }
        self.stack.push(v);
        Some(())
    }

    fn imm<const N: usize>(&mut self) -> Option<[u8; N]> {
        let bytes = self.code.get(self.pc..self.pc + N)?;
        self.pc += N;
        bytes.try_into().ok()
    }

    fn binary(&mut self, f: impl FnOnce(u64, u64) -> Option<u64>) -> Option<()> {
        let b = self.pop()?;
        let a = self.pop()?;
        let r = f(a, b)?;
        self.push(r)
    }

    /// One instruction; `None` means a fault, which reverts.
    fn step(&mut self, ctx: &CallContext<'_>) -> Option<Step> {
        let Some(&opcode) = self.code.get(self.pc) else {
            return Some(Step::Halt(Halt::Stopped));
        };
        self.pc += 1;
        match opcode {
            op::STOP => return Some(Step::Halt(Halt::Stopped)),
            op::PUSH => {
                let v = u64::from_be_bytes(self.imm::<8>()?);
                self.push(v)?;
            }
            op::POP => {
                self.pop()?;
            }
            op::DUP => {
                let [n] = self.imm::<1>()?;
                let idx = self.stack.len().checked_sub(1 + n as usize)?;
                let v = self.stack[idx];
                self.push(v)?;
            }
            op::SWAP => {
                let [n] = self.imm::<1>()?;
                let top = self.stack.len().checked_sub(1)?;
                let other = top.checked_sub(1 + n as usize)?;
                self.stack.swap(top, other);
            }
            op::ADD => self.binary(u64::checked_add)?,
            op::SUB => self.binary(u64::checked_sub)?,
            op::MUL => self.binary(u64::checked_mul)?,
            op::LT => self.binary(|a, b| Some((a < b) as u64))?,
            op::GT => self.binary(|a, b| Some((a > b) as u64))?,
            op::EQ => self.binary(|a, b| Some((a == b) as u64))?,
            op::ISZERO => {
                let a = self.pop()?;
                self.push((a == 0) as u64)?;
            }
            op::SLOAD => {
                let k = self.pop()?;
                let v = self.storage.get(&k).copied().unwrap_or(0);
                self.push(v)?;
            }
            op::SSTORE => {
                let k = self.pop()?;
                let v = self.pop()?;
                if v == 0 {
                    self.storage.remove(&k);
                } else {
                    self.storage.insert(k, v);
                }
            }
            op::JUMP => {
                self.pc = u16::from_be_bytes(self.imm::<2>()?) as usize;
            }
            op::JUMPI => {
                let target = u16::from_be_bytes(self.imm::<2>()?) as usize;
                if self.pop()? != 0 {
                    self.pc = target;
                }
            }
            op::CALLER => self.push(ctx.caller)?,
            op::CALLVALUE => self.push(ctx.value)?,
            op::CALLDATALOAD => {
                let [i] = self.imm::<1>()?;
                self.push(data_word(ctx.data, i as usize))?;
            }
            op::CALLDATASIZE => self.push(ctx.data.len() as u64)?,
            op::LOG => {
                let topic = self.pop()?;
                let data = self.pop()?;
                self.logs.push(LogEntry { topic, data });
            }
            op::REVERT => return Some(Step::Halt(Halt::Reverted)),
            _ => return None,
        }
        Some(Step::Continue)
    }
}

/// Runs `code` against a copy of `storage`. Effects are kept only when the
/// code halts successfully within `step_budget` instructions.
pub fn execute(
    code: &[u8],
    ctx: &CallContext<'_>,
    storage: &BTreeMap<u64, u64>,
    step_budget: u64,
) -> ExecOutcome {
    let mut m = Machine {
        code,
        pc: 0,
        stack: Vec::new(),
        storage: storage.clone(),
        logs: Vec::new(),
    };
    let mut steps = 0u64;
    let halt = loop {
        if steps >= step_budget {
            break Halt::OutOfSteps;
        }
        steps += 1;
        match m.step(ctx) {
            Some(Step::Continue) => {}
            Some(Step::Halt(h)) => break h,
            None => break Halt::Reverted,
        }
    };
    match halt {
        Halt::Stopped => ExecOutcome { halt, storage: m.storage, logs: m.logs, steps },
        _ => ExecOutcome { halt, storage: storage.clone(), logs: Vec::new(), steps },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("undefined label {0}")]
    UndefinedLabel(String),
    #[error("duplicate label {0}")]
    DuplicateLabel(String),
    #[error("code exceeds the 64 KiB jump range")]
    TooLong,
}

/// Builder for bytecode with symbolic jump targets.
#[derive(Debug, Default, Clone)]
pub struct Asm {
    code: Vec<u8>,
    labels: BTreeMap<String, usize>,
    fixups: Vec<(usize, String)>,
}

impl Asm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn op(mut self, opcode: u8) -> Self {
        self.code.push(opcode);
        self
    }

    pub fn push(mut self, v: u64) -> Self {
        self.code.push(op::PUSH);
        self.code.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn dup(mut self, n: u8) -> Self {
        self.code.extend_from_slice(&[op::DUP, n]);
        self
    }

    pub fn swap(mut self, n: u8) -> Self {
        self.code.extend_from_slice(&[op::SWAP, n]);
        self
    }

    pub fn calldata(mut self, i: u8) -> Self {
        self.code.extend_from_slice(&[op::CALLDATALOAD, i]);
        self
    }

    pub fn label(mut self, name: &str) -> Self {
        if self.labels.insert(name.to_string(), self.code.len()).is_some() {
            // Reported at assembly time.
            self.fixups.push((usize::MAX, name.to_string()));
        }
        self
    }

    fn jump_to(mut self, opcode: u8, name: &str) -> Self {
        self.code.push(opcode);
        self.fixups.push((self.code.len(), name.to_string()));
        self.code.extend_from_slice(&[0, 0]);
        self
    }

    pub fn jump(self, name: &str) -> Self {
        self.jump_to(op::JUMP, name)
    }

    pub fn jumpi(self, name: &str) -> Self {
        self.jump_to(op::JUMPI, name)
    }

    pub fn assemble(mut self) -> Result<Vec<u8>, AsmError> {
        if self.code.len() > u16::MAX as usize {
            return Err(AsmError::TooLong);
        }
        for (at, name) in &self.fixups {
            if *at == usize::MAX {
                return Err(AsmError::DuplicateLabel(name.clone()));
            }
            let target = *self
                .labels
                .get(name)
                .ok_or_else(|| AsmError::UndefinedLabel(name.clone()))?;
            self.code[*at..*at + 2].copy_from_slice(&(target as u16).to_be_bytes());
        }
        Ok(self.code)
    }
}

/// Increments `storage[word("count")]` on every call and logs the new value.
pub fn counter_contract() -> Vec<u8> {
    Asm::new()
        .push(word("count"))
        .op(op::SLOAD)
        .push(1)
        .op(op::ADD)
        .dup(0)
        .push(word("count"))
        .op(op::SSTORE)
        .push(word("count"))
        .op(op::LOG)
        .op(op::STOP)
        .assemble()
        .expect("static program")
}

/// Fungible token keyed by the caller's account word.
///
/// Call data word 0 selects the function:
/// - `word("init")`, supply: credit `supply` to the caller, once.
/// - `word("transfer")`, to, amount: move `amount` from caller to `to` and
///   log `(word("transfer"), amount)`.
///
/// Anything else, including empty call data, reverts. Storage key 0 marks
/// initialization; balances live under the account word.
pub fn token_contract() -> Vec<u8> {
    Asm::new()
        .calldata(0)
        .dup(0)
        .push(word("transfer"))
        .op(op::EQ)
        .jumpi("transfer")
        .push(word("init"))
        .op(op::EQ)
        .jumpi("init")
        .op(op::REVERT)
        // init: require storage[0] == 0, then storage[0] = 1 and
        // storage[caller] = supply.
        .label("init")
        .push(0)
        .op(op::SLOAD)
        .jumpi("fail")
        .push(1)
        .push(0)
        .op(op::SSTORE)
        .calldata(1)
        .op(op::CALLER)
        .op(op::SSTORE)
        .op(op::STOP)
        // transfer: stack holds the selector.
        .label("transfer")
        .op(op::POP)
        .op(op::CALLER)
        .op(op::SLOAD) // [bal]
        .dup(0)
        .calldata(2)
        .op(op::LT) // [bal, bal < amount]
        .jumpi("fail")
        .calldata(2)
        .op(op::SUB) // [bal - amount]
        .op(op::CALLER)
        .op(op::SSTORE)
        .calldata(1)
        .op(op::SLOAD)
        .calldata(2)
        .op(op::ADD) // [to_bal + amount]
        .calldata(1)
        .op(op::SSTORE)
        .calldata(2)
        .push(word("transfer"))
        .op(op::LOG)
        .op(op::STOP)
        .label("fail")
        .op(op::REVERT)
        .assemble()
        .expect("static program")
}

/// Loops forever; used to exercise the step budget.
pub fn spin_contract() -> Vec<u8> {
    Asm::new()
        .push(1)
        .push(word("touched"))
        .op(op::SSTORE)
        .label("top")
        .jump("top")
        .assemble()
        .expect("static program")
}
