//! Sparse paged guest memory with page-granular permissions.

use std::collections::HashMap;

pub const PAGE_SIZE: u32 = 0x1000;

struct Page {
    bytes: Box<[u8; PAGE_SIZE as usize]>,
    writable: bool,
    exec: bool,
}

impl Page {
    fn new(writable: bool, exec: bool) -> Page {
        Page {
            bytes: Box::new([0; PAGE_SIZE as usize]),
            writable,
            exec,
        }
    }
}

#[derive(Default)]
pub struct Mem {
    pages: HashMap<u32, Page>,
}

impl Mem {
    pub fn new() -> Mem {
        Mem::default()
    }

    /// Map (or widen the permissions of) every page overlapping
    /// `[start, start+len)`. New pages are zero-filled.
    pub fn map_region(&mut self, start: u32, len: u32, writable: bool, exec: bool) {
        if len == 0 {
            return;
        }
        let first = start / PAGE_SIZE;
        let last = start.wrapping_add(len - 1) / PAGE_SIZE;
        for pn in first..=last {
            let page = self
                .pages
                .entry(pn)
                .or_insert_with(|| Page::new(writable, exec));
            page.writable |= writable;
            page.exec |= exec;
        }
    }

    /// Loader store: requires the page mapped but ignores write protection.
    pub fn load_bytes(&mut self, addr: u32, bytes: &[u8]) {
        for (i, &b) in bytes.iter().enumerate() {
            let a = addr.wrapping_add(i as u32);
            let page = self
                .pages
                .get_mut(&(a / PAGE_SIZE))
                .expect("load_bytes target must be mapped");
            page.bytes[(a % PAGE_SIZE) as usize] = b;
        }
    }

    pub fn read_u8(&self, addr: u32) -> Option<u8> {
        self.pages
            .get(&(addr / PAGE_SIZE))
            .map(|p| p.bytes[(addr % PAGE_SIZE) as usize])
    }

    pub fn write_u8(&mut self, addr: u32, v: u8) -> bool {
        match self.pages.get_mut(&(addr / PAGE_SIZE)) {
            Some(p) if p.writable => {
                p.bytes[(addr % PAGE_SIZE) as usize] = v;
                true
            }
            _ => false,
        }
    }

    pub fn read_u16(&self, addr: u32) -> Option<u16> {
        let lo = self.read_u8(addr)? as u16;
        let hi = self.read_u8(addr.wrapping_add(1))? as u16;
        Some(lo | hi << 8)
    }

    pub fn read_u32(&self, addr: u32) -> Option<u32> {
        let mut v = 0u32;
        for i in (0..4).rev() {
            v = v << 8 | self.read_u8(addr.wrapping_add(i))? as u32;
        }
        Some(v)
    }

    pub fn write_u32(&mut self, addr: u32, v: u32) -> bool {
        v.to_le_bytes()
            .iter()
            .enumerate()
            .all(|(i, &b)| self.write_u8(addr.wrapping_add(i as u32), b))
    }

    /// Copy executable bytes starting at `addr` into `buf`; stops at the
    /// first unmapped or non-executable byte. Returns the count copied.
    pub fn read_code(&self, addr: u32, buf: &mut [u8]) -> usize {
        for (i, slot) in buf.iter_mut().enumerate() {
            let a = addr.wrapping_add(i as u32);
            match self.pages.get(&(a / PAGE_SIZE)) {
                Some(p) if p.exec => *slot = p.bytes[(a % PAGE_SIZE) as usize],
                _ => return i,
            }
        }
        buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unmapped_reads_and_writes_fail() {
        let mut m = Mem::new();
        assert_eq!(m.read_u8(0x1000), None);
        assert!(!m.write_u8(0x1000, 1));
    }

    #[test]
    fn mapping_and_rw_round_trip() {
        let mut m = Mem::new();
        m.map_region(0x1ff0, 0x20, true, false); // spans two pages
        assert!(m.write_u32(0x1ffe, 0xdead_beef));
        assert_eq!(m.read_u32(0x1ffe), Some(0xdead_beef));
        assert_eq!(m.read_u8(0x3000), None);
    }

    #[test]
    fn write_protection_blocks_stores() {
        let mut m = Mem::new();
        m.map_region(0x4000, 0x1000, false, true);
        assert!(!m.write_u8(0x4000, 9));
        m.load_bytes(0x4000, &[0xc3]);
        assert_eq!(m.read_u8(0x4000), Some(0xc3));
    }

    #[test]
    fn read_code_stops_at_non_exec() {
        let mut m = Mem::new();
        m.map_region(0x4000, 0x1000, false, true);
        m.load_bytes(0x4ffe, &[0x59, 0xc3]);
        let mut buf = [0u8; 8];
        assert_eq!(m.read_code(0x4ffe, &mut buf), 2);
        assert_eq!(&buf[..2], &[0x59, 0xc3]);
    }
}
