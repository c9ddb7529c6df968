//! Minimal ELF32 little-endian reader: executable PT_LOAD segments plus the
//! dynamic symbol table. Enough for gadget scanning; no relocation or
//! dynamic-linking semantics.

use super::{ExecSegment, GadgetError, LibSymbol, LibraryImage};

const PT_LOAD: u32 = 1;
const PF_X: u32 = 1;
const SHT_DYNSYM: u32 = 11;
const SHN_UNDEF: u16 = 0;

const STB_GLOBAL: u8 = 1;
const STB_WEAK: u8 = 2;
const STT_OBJECT: u8 = 1;
const STT_FUNC: u8 = 2;

struct Rd<'a>(&'a [u8]);

impl Rd<'_> {
    fn u8(&self, off: usize) -> Result<u8, GadgetError> {
        self.0
            .get(off)
            .copied()
            .ok_or(GadgetError::Truncated("byte read past end"))
    }
    fn u16(&self, off: usize) -> Result<u16, GadgetError> {
        let s = self
            .0
            .get(off..off + 2)
            .ok_or(GadgetError::Truncated("u16 read past end"))?;
        Ok(u16::from_le_bytes(s.try_into().unwrap()))
    }
    fn u32(&self, off: usize) -> Result<u32, GadgetError> {
        let s = self
            .0
            .get(off..off + 4)
            .ok_or(GadgetError::Truncated("u32 read past end"))?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    }
    fn slice(&self, off: usize, len: usize) -> Result<&[u8], GadgetError> {
        self.0
            .get(off..off + len)
            .ok_or(GadgetError::Truncated("segment data past end"))
    }
}

pub fn load_elf32(bytes: &[u8]) -> Result<LibraryImage, GadgetError> {
    let r = Rd(bytes);
    if bytes.len() < 52 {
        if bytes.len() < 4 || &bytes[..4] != b"\x7fELF" {
            return Err(GadgetError::BadMagic);
        }
        return Err(GadgetError::Truncated("header shorter than 52 bytes"));
    }
    if &bytes[..4] != b"\x7fELF" {
        return Err(GadgetError::BadMagic);
    }
    // EI_CLASS must be ELFCLASS32, EI_DATA must be little-endian.
    if r.u8(4)? != 1 || r.u8(5)? != 1 {
        return Err(GadgetError::UnsupportedClass);
    }

    let e_phoff = r.u32(0x1c)? as usize;
    let e_shoff = r.u32(0x20)? as usize;
    let e_phentsize = r.u16(0x2a)? as usize;
    let e_phnum = r.u16(0x2c)? as usize;
    let e_shentsize = r.u16(0x2e)? as usize;
    let e_shnum = r.u16(0x30)? as usize;

    // Executable loadable segments.
    let mut exec_segments = Vec::new();
    for i in 0..e_phnum {
        let ph = e_phoff + i * e_phentsize;
        let p_type = r.u32(ph)?;
        let p_offset = r.u32(ph + 0x04)? as usize;
        let p_vaddr = r.u32(ph + 0x08)?;
        let p_filesz = r.u32(ph + 0x10)? as usize;
        let p_flags = r.u32(ph + 0x18)?;
        if p_type == PT_LOAD && p_flags & PF_X != 0 {
            exec_segments.push(ExecSegment {
                vaddr: p_vaddr,
                bytes: r.slice(p_offset, p_filesz)?.to_vec(),
            });
        }
    }

    // Exported symbols out of .dynsym, names via its linked string table.
    let mut symbols = Vec::new();
    for i in 0..e_shnum {
        let sh = e_shoff + i * e_shentsize;
        if r.u32(sh + 0x04)? != SHT_DYNSYM {
            continue;
        }
        let sh_offset = r.u32(sh + 0x10)? as usize;
        let sh_size = r.u32(sh + 0x14)? as usize;
        let sh_link = r.u32(sh + 0x18)? as usize;
        let sh_entsize = r.u32(sh + 0x24)?.max(16) as usize;

        let str_sh = e_shoff + sh_link * e_shentsize;
        let str_off = r.u32(str_sh + 0x10)? as usize;
        let str_size = r.u32(str_sh + 0x14)? as usize;
        let strtab = r.slice(str_off, str_size)?;

        let count = sh_size / sh_entsize;
        for k in 0..count {
            let sym = sh_offset + k * sh_entsize;
            let st_name = r.u32(sym)? as usize;
            let st_value = r.u32(sym + 4)?;
            let st_info = r.u8(sym + 12)?;
            let st_shndx = r.u16(sym + 14)?;

            let bind = st_info >> 4;
            let typ = st_info & 0xf;
            let exported = st_shndx != SHN_UNDEF
                && st_name != 0
                && (bind == STB_GLOBAL || bind == STB_WEAK)
                && (typ == STT_FUNC || typ == STT_OBJECT);
            if !exported {
                continue;
            }
            let name_bytes = strtab
                .get(st_name..)
                .ok_or(GadgetError::Truncated("symbol name offset past strtab"))?;
            let end = name_bytes
                .iter()
                .position(|&b| b == 0)
                .ok_or(GadgetError::Truncated("unterminated symbol name"))?;
            let name = String::from_utf8_lossy(&name_bytes[..end]).into_owned();
            if !name.is_empty() {
                symbols.push(LibSymbol {
                    name,
                    vaddr: st_value,
                });
            }
        }
    }

    Ok(LibraryImage {
        exec_segments,
        symbols,
    })
}
