//! Text-to-AST parser for the assembly subset.
//!
//! Syntax, one item per line, `#` or `;` comments:
//!
//! ```text
//! .func check            # starts a function
//! check:                 # labels open basic blocks
//!     cmp eax, 'H'
//!     je .L1             # terminators close blocks
//! .L1:
//!     ret
//! .data                  # byte data after all functions
//! msg:
//!     db "OK", 0
//! ```
//!
//! Operands are Intel order. Memory operands are `[base + index*scale + disp]`
//! with an optional `byte`/`word`/`dword` (or `BYTE PTR` style) width prefix,
//! dword implied. `sym+0x10` is a library-symbol-plus-offset operand; a bare
//! identifier is a program label. Immediates are decimal, hex, or a quoted
//! character.
//!
//! Blocks need not be explicitly terminated: a label following straight-line
//! code inserts the fall-through `jmp`, and code following a `call` or `jcc`
//! opens a fresh auto-labeled block (`.L<func>.<n>`), since `call` and `jcc`
//! are block terminators with fall-through.

use std::collections::HashSet;

use super::{
    AsmError, BasicBlock, Cc, DataDef, Function, Instruction, MemRef, Mnemonic, Operand, Program,
    Reg8, Register, Width,
};

pub fn parse_program(text: &str) -> Result<Program, AsmError> {
    let mut p = Parser::default();
    for (idx, raw) in text.lines().enumerate() {
        p.line(idx as u32 + 1, raw)?;
    }
    p.finish()
}

fn syntax(line: u32, reason: impl Into<String>) -> AsmError {
    AsmError::Syntax {
        line,
        reason: reason.into(),
    }
}

#[derive(Default)]
struct Parser {
    program: Program,
    in_data: bool,
    /// Function currently being built, with its open block if any.
    current_fn: Option<FnBuilder>,
    /// Label seen on its own line, waiting for content.
    pending_label: Option<String>,
}

struct FnBuilder {
    func: Function,
    open: Option<BasicBlock>,
    used_labels: HashSet<String>,
    auto_counter: u32,
}

impl FnBuilder {
    fn new(name: String) -> FnBuilder {
        FnBuilder {
            func: Function {
                name,
                blocks: Vec::new(),
            },
            open: None,
            used_labels: HashSet::new(),
            auto_counter: 0,
        }
    }

    /// Fresh block label that cannot collide with user labels.
    fn auto_label(&mut self) -> String {
        loop {
            let l = format!(".L{}.{}", self.func.name, self.auto_counter);
            self.auto_counter += 1;
            if !self.used_labels.contains(&l) {
                return l;
            }
        }
    }

    fn open_block(&mut self, line: u32, label: String) -> Result<(), AsmError> {
        if !self.used_labels.insert(label.clone()) {
            return Err(syntax(line, format!("duplicate label '{label}'")));
        }
        self.open = Some(BasicBlock {
            label,
            instructions: Vec::new(),
            // Placeholder; replaced when the real terminator arrives.
            terminator: Instruction::new(Mnemonic::Ret, vec![]),
        });
        Ok(())
    }

    /// Close the open block with an explicit fall-through jump to `next`.
    fn close_fallthrough(&mut self, next: &str) {
        if let Some(mut b) = self.open.take() {
            b.terminator = super::ins::jmp(next);
            self.func.blocks.push(b);
        }
    }

    fn close_terminated(&mut self, term: Instruction) {
        let mut b = self.open.take().expect("terminator without open block");
        b.terminator = term;
        self.func.blocks.push(b);
    }
}

impl Parser {
    fn line(&mut self, lineno: u32, raw: &str) -> Result<(), AsmError> {
        let mut s = raw;
        if let Some(pos) = s.find(['#', ';']) {
            s = &s[..pos];
        }
        let s = s.trim();
        if s.is_empty() {
            return Ok(());
        }

        if let Some(rest) = s.strip_prefix('.') {
            let word = rest.split_whitespace().next().unwrap_or("");
            match word {
                "func" => {
                    let name = rest["func".len()..].trim();
                    return self.start_func(lineno, name);
                }
                "data" => {
                    if rest.trim() != "data" {
                        return Err(syntax(lineno, "junk after .data"));
                    }
                    self.end_current_fn(lineno)?;
                    self.in_data = true;
                    return Ok(());
                }
                _ => {
                    // Not a directive; labels like ".L1:" also start with '.'.
                }
            }
        }

        // `label:` prefix, possibly with content after the colon.
        if let Some(colon) = s.find(':') {
            let (head, tail) = s.split_at(colon);
            let head = head.trim();
            if is_identifier(head) {
                self.take_label(lineno, head.to_string())?;
                let tail = tail[1..].trim();
                if tail.is_empty() {
                    return Ok(());
                }
                return self.content(lineno, tail);
            }
        }

        self.content(lineno, s)
    }

    fn start_func(&mut self, line: u32, name: &str) -> Result<(), AsmError> {
        if self.in_data {
            return Err(syntax(line, ".func after .data"));
        }
        if !is_identifier(name) {
            return Err(syntax(line, format!("bad function name '{name}'")));
        }
        self.end_current_fn(line)?;
        if self.program.functions.iter().any(|f| f.name == name) {
            return Err(syntax(line, format!("duplicate function '{name}'")));
        }
        self.current_fn = Some(FnBuilder::new(name.to_string()));
        Ok(())
    }

    fn end_current_fn(&mut self, line: u32) -> Result<(), AsmError> {
        if let Some(label) = self.pending_label.take() {
            return Err(syntax(line, format!("label '{label}' has no content")));
        }
        if let Some(fb) = self.current_fn.take() {
            if let Some(b) = &fb.open {
                return Err(syntax(
                    line,
                    format!("block '{}' has no terminator", b.label),
                ));
            }
            if fb.func.blocks.is_empty() {
                return Err(syntax(line, format!("function '{}' is empty", fb.func.name)));
            }
            self.program.functions.push(fb.func);
        }
        Ok(())
    }

    fn take_label(&mut self, line: u32, label: String) -> Result<(), AsmError> {
        if self.in_data {
            if self.pending_label.is_some() {
                return Err(syntax(line, "consecutive data labels"));
            }
            self.pending_label = Some(label);
            return Ok(());
        }
        if self.pending_label.is_some() {
            // Two labels in a row name the same spot; materialize the first
            // as an empty block falling through to the second.
            let first = self.pending_label.take().unwrap();
            let fb = self
                .current_fn
                .as_mut()
                .ok_or_else(|| syntax(line, "label outside a function"))?;
            fb.open_block(line, first)?;
            fb.close_fallthrough(&label);
        } else {
            let fb = self
                .current_fn
                .as_mut()
                .ok_or_else(|| syntax(line, "label outside a function"))?;
            fb.close_fallthrough(&label);
        }
        self.pending_label = Some(label);
        Ok(())
    }

    fn content(&mut self, line: u32, s: &str) -> Result<(), AsmError> {
        if self.in_data {
            return self.data_content(line, s);
        }
        let fb = self
            .current_fn
            .as_mut()
            .ok_or_else(|| syntax(line, "instruction outside a function"))?;

        if let Some(label) = self.pending_label.take() {
            fb.open_block(line, label)?;
        } else if fb.open.is_none() {
            // Fall-through continuation after a call or jcc terminator.
            let l = fb.auto_label();
            fb.open_block(line, l)?;
        }

        let mut instr = parse_instruction(line, s)?;
        instr.source_loc = Some(line);
        if instr.mnemonic.is_terminator() {
            fb.close_terminated(instr);
        } else {
            fb.open.as_mut().unwrap().instructions.push(instr);
        }
        Ok(())
    }

    fn data_content(&mut self, line: u32, s: &str) -> Result<(), AsmError> {
        let rest = s
            .strip_prefix("db")
            .filter(|r| r.is_empty() || r.starts_with(char::is_whitespace))
            .ok_or_else(|| syntax(line, "expected 'db' in data section"))?;
        let label = self
            .pending_label
            .take()
            .ok_or_else(|| syntax(line, "db without a label"))?;
        if self.program.data.iter().any(|d| d.label == label) {
            return Err(syntax(line, format!("duplicate data label '{label}'")));
        }
        let bytes = parse_db_items(line, rest.trim())?;
        self.program.data.push(DataDef { label, bytes });
        Ok(())
    }

    fn finish(mut self) -> Result<Program, AsmError> {
        let last = self
            .program
            .functions
            .last()
            .map(|f| f.blocks.len() as u32)
            .unwrap_or(0);
        self.end_current_fn(last)?;
        if let Some(label) = self.pending_label.take() {
            return Err(AsmError::Syntax {
                line: 0,
                reason: format!("label '{label}' has no content"),
            });
        }
        validate_labels(&self.program)?;
        Ok(self.program)
    }
}

/// Every Label operand must name a block in its own function, a function
/// entry, a data label, or a reserved intrinsic. Symbol+offset operands are
/// library references and resolve later, against the gadget library.
fn validate_labels(p: &Program) -> Result<(), AsmError> {
    let mut global: HashSet<&str> = HashSet::new();
    global.extend(crate::asm::INTRINSIC_NAMES);
    for f in &p.functions {
        global.insert(&f.name);
    }
    for d in &p.data {
        global.insert(&d.label);
    }
    for f in &p.functions {
        let local: HashSet<&str> = f.blocks.iter().map(|b| b.label.as_str()).collect();
        for b in &f.blocks {
            for i in b.all_instructions() {
                for op in &i.operands {
                    if let Operand::Label(l) = op {
                        if !local.contains(l.as_str()) && !global.contains(l.as_str()) {
                            return Err(AsmError::UnresolvedLabel(l.clone()));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '$' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

// --- instruction parsing --------------------------------------------------

fn parse_instruction(line: u32, s: &str) -> Result<Instruction, AsmError> {
    let (head, rest) = match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim()),
        None => (s, ""),
    };
    let mnemonic = lookup_mnemonic(line, head)?;
    let operands = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',')
            .map(|o| parse_operand(line, o.trim()))
            .collect::<Result<Vec<_>, _>>()?
    };
    check_arity(line, mnemonic, &operands)?;
    Ok(Instruction::new(mnemonic, operands))
}

fn lookup_mnemonic(line: u32, name: &str) -> Result<Mnemonic, AsmError> {
    let m = match name {
        "mov" => Mnemonic::Mov,
        "movsx" => Mnemonic::Movsx,
        "movzx" => Mnemonic::Movzx,
        "lea" => Mnemonic::Lea,
        "xchg" => Mnemonic::Xchg,
        "add" => Mnemonic::Add,
        "sub" => Mnemonic::Sub,
        "and" => Mnemonic::And,
        "or" => Mnemonic::Or,
        "xor" => Mnemonic::Xor,
        "cmp" => Mnemonic::Cmp,
        "test" => Mnemonic::Test,
        "not" => Mnemonic::Not,
        "neg" => Mnemonic::Neg,
        "inc" => Mnemonic::Inc,
        "dec" => Mnemonic::Dec,
        "mul" => Mnemonic::Mul,
        "shl" => Mnemonic::Shl,
        "shr" => Mnemonic::Shr,
        "push" => Mnemonic::Push,
        "pop" => Mnemonic::Pop,
        "pushf" | "pushfd" => Mnemonic::Pushf,
        "popf" | "popfd" => Mnemonic::Popf,
        "ret" => Mnemonic::Ret,
        "jmp" => Mnemonic::Jmp,
        "call" => Mnemonic::Call,
        _ => {
            let cc_of = |prefix: &str| {
                name.strip_prefix(prefix).and_then(Cc::from_suffix)
            };
            if let Some(cc) = cc_of("cmov") {
                Mnemonic::Cmovcc(cc)
            } else if let Some(cc) = cc_of("set") {
                Mnemonic::Setcc(cc)
            } else if let Some(cc) = cc_of("j") {
                Mnemonic::Jcc(cc)
            } else {
                return Err(AsmError::UnsupportedMnemonic {
                    line,
                    name: name.to_string(),
                });
            }
        }
    };
    Ok(m)
}

fn check_arity(line: u32, m: Mnemonic, ops: &[Operand]) -> Result<(), AsmError> {
    let want = match m {
        Mnemonic::Pushf | Mnemonic::Popf | Mnemonic::Ret => 0,
        Mnemonic::Not
        | Mnemonic::Neg
        | Mnemonic::Inc
        | Mnemonic::Dec
        | Mnemonic::Mul
        | Mnemonic::Push
        | Mnemonic::Pop
        | Mnemonic::Jmp
        | Mnemonic::Call
        | Mnemonic::Jcc(_)
        | Mnemonic::Setcc(_) => 1,
        _ => 2,
    };
    if ops.len() != want {
        return Err(syntax(
            line,
            format!("{} takes {} operand(s), got {}", m.name(), want, ops.len()),
        ));
    }
    Ok(())
}

fn parse_operand(line: u32, s: &str) -> Result<Operand, AsmError> {
    if s.is_empty() {
        return Err(syntax(line, "empty operand"));
    }

    // Memory, with optional width prefix.
    let lower = s.to_ascii_lowercase();
    for (prefix, width) in [
        ("byte", Width::Byte),
        ("word", Width::Word),
        ("dword", Width::Dword),
    ] {
        if let Some(rest) = lower.strip_prefix(prefix) {
            let rest = rest.trim_start();
            let rest = rest.strip_prefix("ptr").map(str::trim_start).unwrap_or(rest);
            if rest.starts_with('[') {
                return parse_mem(line, rest, width).map(Operand::Mem);
            }
        }
    }
    if s.starts_with('[') {
        return parse_mem(line, &lower, Width::Dword).map(Operand::Mem);
    }

    if let Some(r) = Register::from_name(&lower) {
        return Ok(Operand::Reg(r));
    }
    if let Some(r) = Reg8::from_name(&lower) {
        return Ok(Operand::Reg8(r));
    }

    if s.starts_with(['\'', '-']) || s.starts_with(|c: char| c.is_ascii_digit()) {
        return parse_imm(line, s).map(Operand::Imm);
    }

    // Identifier, possibly symbol+offset. Split at the first +/- past the
    // first character (identifiers may not contain either).
    if let Some(pos) = s[1..].find(['+', '-']).map(|i| i + 1) {
        let (name, off) = s.split_at(pos);
        let name = name.trim();
        if !is_identifier(name) {
            return Err(syntax(line, format!("bad operand '{s}'")));
        }
        let sign = if off.starts_with('-') { -1i64 } else { 1i64 };
        let mag = parse_number(line, off[1..].trim())?;
        let offset = sign
            .checked_mul(mag)
            .filter(|v| i32::try_from(*v).is_ok())
            .ok_or_else(|| syntax(line, format!("offset out of range in '{s}'")))?;
        return Ok(Operand::SymOff {
            symbol: name.to_string(),
            offset: offset as i32,
        });
    }
    if is_identifier(s) {
        return Ok(Operand::Label(s.to_string()));
    }
    Err(syntax(line, format!("bad operand '{s}'")))
}

/// Immediate: decimal, hex, or quoted char. Value must fit a 32-bit word;
/// stored as the bit pattern.
fn parse_imm(line: u32, s: &str) -> Result<i32, AsmError> {
    if let Some(body) = s.strip_prefix('\'').and_then(|t| t.strip_suffix('\'')) {
        let b = unescape_char(body)
            .ok_or_else(|| syntax(line, format!("bad character literal {s}")))?;
        return Ok(b as i32);
    }
    let (sign, mag) = match s.strip_prefix('-') {
        Some(rest) => (-1i64, rest.trim()),
        None => (1, s),
    };
    let v = sign * parse_number(line, mag)?;
    if v < -(1i64 << 31) || v >= (1i64 << 32) {
        return Err(syntax(line, format!("immediate out of 32-bit range: {s}")));
    }
    Ok(v as u32 as i32)
}

/// Non-negative decimal or 0x-hex number.
fn parse_number(line: u32, s: &str) -> Result<i64, AsmError> {
    let parsed = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16)
    } else {
        s.parse::<i64>()
    };
    parsed.map_err(|_| syntax(line, format!("bad number '{s}'")))
}

fn unescape_char(body: &str) -> Option<u8> {
    let mut chars = body.chars();
    let c = chars.next()?;
    let out = if c == '\\' {
        match chars.next()? {
            'n' => b'\n',
            't' => b'\t',
            'r' => b'\r',
            '0' => 0,
            '\\' => b'\\',
            '\'' => b'\'',
            '"' => b'"',
            _ => return None,
        }
    } else if c.is_ascii() {
        c as u8
    } else {
        return None;
    };
    chars.next().is_none().then_some(out)
}

/// `[base + index*scale + disp]`, already lowercased, starting at '['.
fn parse_mem(line: u32, s: &str, width: Width) -> Result<MemRef, AsmError> {
    let inner = s
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| syntax(line, format!("bad memory operand '{s}'")))?;

    let mut mem = MemRef {
        base: None,
        index: None,
        scale: 1,
        disp: 0,
        width,
    };
    let mut disp: i64 = 0;
    let mut any = false;

    // Split into signed terms.
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let neg = match rest.chars().next() {
            Some('+') => {
                rest = rest[1..].trim_start();
                false
            }
            Some('-') => {
                rest = rest[1..].trim_start();
                true
            }
            _ => false,
        };
        let end = rest.find(['+', '-']).unwrap_or(rest.len());
        let term = rest[..end].trim();
        rest = rest[end..].trim_start();
        if term.is_empty() {
            return Err(syntax(line, format!("bad memory operand '[{inner}]'")));
        }
        any = true;

        if let Some(star) = term.find('*') {
            if neg {
                return Err(syntax(line, "negative index term"));
            }
            let (r, k) = term.split_at(star);
            let reg = Register::from_name(r.trim())
                .ok_or_else(|| syntax(line, format!("bad index register '{r}'")))?;
            let scale = parse_number(line, k[1..].trim())?;
            if ![1, 2, 4, 8].contains(&scale) {
                return Err(syntax(line, format!("bad scale {scale}")));
            }
            if mem.index.is_some() {
                return Err(syntax(line, "two index terms"));
            }
            mem.index = Some(reg);
            mem.scale = scale as u8;
        } else if let Some(reg) = Register::from_name(term) {
            if neg {
                return Err(syntax(line, "negative register term"));
            }
            if mem.base.is_none() {
                mem.base = Some(reg);
            } else if mem.index.is_none() {
                mem.index = Some(reg);
            } else {
                return Err(syntax(line, "three register terms"));
            }
        } else {
            let v = parse_number(line, term)?;
            disp += if neg { -v } else { v };
        }
    }

    if !any {
        return Err(syntax(line, "empty memory operand"));
    }
    if disp < -(1i64 << 31) || disp >= (1i64 << 32) {
        return Err(syntax(line, "displacement out of 32-bit range"));
    }
    mem.disp = disp as u32 as i32;
    if mem.index == Some(Register::Esp) {
        return Err(syntax(line, "esp cannot be an index register"));
    }
    Ok(mem)
}

fn parse_db_items(line: u32, s: &str) -> Result<Vec<u8>, AsmError> {
    let mut out = Vec::new();
    let mut rest = s;
    loop {
        rest = rest.trim_start();
        if rest.is_empty() {
            return Err(syntax(line, "empty db item"));
        }
        if let Some(tail) = rest.strip_prefix('"') {
            let close = find_string_end(tail)
                .ok_or_else(|| syntax(line, "unterminated string"))?;
            unescape_string(line, &tail[..close], &mut out)?;
            rest = tail[close + 1..].trim_start();
        } else {
            let end = rest.find(',').unwrap_or(rest.len());
            let v = parse_imm(line, rest[..end].trim())?;
            if !(0..=255).contains(&v) {
                return Err(syntax(line, format!("db byte out of range: {v}")));
            }
            out.push(v as u8);
            rest = &rest[end..];
        }
        rest = rest.trim_start();
        if rest.is_empty() {
            return Ok(out);
        }
        rest = rest
            .strip_prefix(',')
            .ok_or_else(|| syntax(line, "expected ',' between db items"))?;
    }
}

/// Index of the closing quote, honoring backslash escapes.
fn find_string_end(s: &str) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'"' => return Some(i),
            _ => i += 1,
        }
    }
    None
}

fn unescape_string(line: u32, s: &str, out: &mut Vec<u8>) -> Result<(), AsmError> {
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            let e = chars
                .next()
                .ok_or_else(|| syntax(line, "dangling escape"))?;
            out.push(match e {
                'n' => b'\n',
                't' => b'\t',
                'r' => b'\r',
                '0' => 0,
                '\\' => b'\\',
                '"' => b'"',
                _ => return Err(syntax(line, format!("bad escape '\\{e}'"))),
            });
        } else if c.is_ascii() {
            out.push(c as u8);
        } else {
            return Err(syntax(line, format!("non-ASCII character '{c}'")));
        }
    }
    Ok(())
}
