//! AST-to-text printer, the inverse of [`parse_program`](super::parse_program).
//!
//! Output parses back to a structurally equal program. Small immediates print
//! in decimal, everything else in hex of the 32-bit pattern; memory operands
//! always carry an explicit `PTR` width prefix.

use std::fmt::Write;

use super::{DataDef, Instruction, MemRef, Operand, Program, Width};

pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    for (i, f) in p.functions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, ".func {}", f.name);
        for b in &f.blocks {
            let _ = writeln!(out, "{}:", b.label);
            for instr in b.all_instructions() {
                let _ = writeln!(out, "    {}", print_instruction(instr));
            }
        }
    }
    if !p.data.is_empty() {
        out.push_str("\n.data\n");
        for d in &p.data {
            let _ = writeln!(out, "{}:", d.label);
            let _ = writeln!(out, "    db {}", fmt_db(d));
        }
    }
    out
}

pub fn print_instruction(i: &Instruction) -> String {
    let mut s = i.mnemonic.name();
    for (k, op) in i.operands.iter().enumerate() {
        s.push_str(if k == 0 { " " } else { ", " });
        s.push_str(&fmt_operand(op));
    }
    s
}

fn fmt_operand(op: &Operand) -> String {
    match op {
        Operand::Reg(r) => r.name().to_string(),
        Operand::Reg8(r) => r.name().to_string(),
        Operand::Imm(v) => fmt_imm(*v),
        Operand::Mem(m) => fmt_mem(m),
        Operand::Label(l) => l.clone(),
        Operand::SymOff { symbol, offset } => {
            if *offset < 0 {
                format!("{}-{:#x}", symbol, -(*offset as i64))
            } else {
                format!("{}+{:#x}", symbol, offset)
            }
        }
    }
}

fn fmt_imm(v: i32) -> String {
    if (-128..=255).contains(&v) {
        v.to_string()
    } else {
        format!("{:#x}", v as u32)
    }
}

fn fmt_mem(m: &MemRef) -> String {
    let mut s = match m.width {
        Width::Byte => "BYTE PTR [",
        Width::Word => "WORD PTR [",
        Width::Dword => "DWORD PTR [",
    }
    .to_string();
    let mut any = false;
    if let Some(b) = m.base {
        s.push_str(b.name());
        any = true;
    }
    if let Some(ix) = m.index {
        if any {
            s.push('+');
        }
        s.push_str(ix.name());
        if m.scale > 1 {
            let _ = write!(s, "*{}", m.scale);
        }
        any = true;
    }
    if !any {
        let _ = write!(s, "{:#x}", m.disp as u32);
    } else if m.disp != 0 {
        if m.disp < 0 {
            let _ = write!(s, "-{:#x}", -(m.disp as i64));
        } else {
            let _ = write!(s, "+{:#x}", m.disp);
        }
    }
    s.push(']');
    s
}

/// Bytes as db items: maximal printable runs become quoted strings.
fn fmt_db(d: &DataDef) -> String {
    let quotable = |b: u8| (0x20..=0x7e).contains(&b) && b != b'"' && b != b'\\';
    let mut items: Vec<String> = Vec::new();
    let mut i = 0;
    while i < d.bytes.len() {
        let run = d.bytes[i..].iter().take_while(|&&b| quotable(b)).count();
        if run >= 2 {
            let text: String = d.bytes[i..i + run].iter().map(|&b| b as char).collect();
            items.push(format!("\"{text}\""));
            i += run;
        } else {
            items.push(d.bytes[i].to_string());
            i += 1;
        }
    }
    if items.is_empty() {
        // Zero-length data still needs an item to parse; emit nothing is a
        // syntax error, so this should not happen for valid programs.
        items.push("0".to_string());
    }
    items.join(", ")
}
