//! Accelerated range coder, bit-exact against the reference implementation.
//!
//! The entry points speak a minimal C ABI over flat buffers (see FFI.md for
//! the exact layouts), so any caller language can bind them.  The coding
//! state machine mirrors the reference coder: 32-bit carry-less range coder
//! with underflow counting, big-endian bit packing, a single 1-bit
//! terminator, and an overflow escape of one sign bit plus an order-0
//! Exp-Golomb excess.

const STATE_BITS: u32 = 32;
const FULL: u64 = 1u64 << STATE_BITS;
const HALF: u64 = FULL >> 1;
const QUARTER: u64 = FULL >> 2;
const MASK: u64 = FULL - 1;
/// Virtual zero bytes a decoder may consume past its substream.
const EOF_SLACK_BYTES: usize = 4;

pub const STATUS_OK: i32 = 0;
pub const STATUS_BAD_TABLES: i32 = 1;
pub const STATUS_BUFFER_TOO_SMALL: i32 = 2;
pub const STATUS_BAD_INDEX: i32 = 3;
pub const STATUS_TRUNCATED: i32 = 4;

struct BitWriter {
    bytes: Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { bytes: Vec::new(), acc: 0, nbits: 0 }
    }

    fn write(&mut self, bit: u32) {
        self.acc = (self.acc << 1) | bit;
        self.nbits += 1;
        if self.nbits == 8 {
            self.bytes.push(self.acc as u8);
            self.acc = 0;
            self.nbits = 0;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.bytes.push((self.acc << (8 - self.nbits)) as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u32,
    nbits: u32,
    virtual_bytes: usize,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        BitReader { data, pos: 0, acc: 0, nbits: 0, virtual_bytes: 0 }
    }

    fn read(&mut self) -> Result<u32, i32> {
        if self.nbits == 0 {
            if self.pos < self.data.len() {
                self.acc = self.data[self.pos] as u32;
                self.pos += 1;
            } else {
                self.virtual_bytes += 1;
                if self.virtual_bytes > EOF_SLACK_BYTES {
                    return Err(STATUS_TRUNCATED);
                }
                self.acc = 0;
            }
            self.nbits = 8;
        }
        self.nbits -= 1;
        Ok((self.acc >> self.nbits) & 1)
    }
}

pub struct RangeEncoder {
    low: u64,
    high: u64,
    underflow: u64,
    out: BitWriter,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, high: MASK, underflow: 0, out: BitWriter::new() }
    }

    fn emit(&mut self, bit: u32) {
        self.out.write(bit);
        let inv = bit ^ 1;
        for _ in 0..self.underflow {
            self.out.write(inv);
        }
        self.underflow = 0;
    }

    pub fn encode(&mut self, cum_low: u64, cum_high: u64, total: u64) {
        let span = self.high - self.low + 1;
        self.high = self.low + (cum_high * span) / total - 1;
        self.low += (cum_low * span) / total;
        while ((self.low ^ self.high) & HALF) == 0 {
            self.emit((self.low >> (STATE_BITS - 1)) as u32);
            self.low = (self.low << 1) & MASK;
            self.high = ((self.high << 1) & MASK) | 1;
        }
        while self.low & !self.high & QUARTER != 0 {
            self.underflow += 1;
            self.low = (self.low << 1) ^ HALF;
            self.high = ((self.high ^ HALF) << 1) | HALF | 1;
        }
    }

    pub fn encode_bit(&mut self, bit: u32) {
        let half = 1u64 << 15;
        self.encode(bit as u64 * half, (bit as u64 + 1) * half, 1 << 16);
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.emit(1);
        self.out.finish()
    }
}

pub struct RangeDecoder<'a> {
    low: u64,
    high: u64,
    code: u64,
    input: BitReader<'a>,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, i32> {
        let mut dec = RangeDecoder { low: 0, high: MASK, code: 0, input: BitReader::new(data) };
        for _ in 0..STATE_BITS {
            dec.code = (dec.code << 1) | dec.input.read()? as u64;
        }
        Ok(dec)
    }

    pub fn decode(&mut self, cum: &[u32], total: u64) -> Result<usize, i32> {
        let span = self.high - self.low + 1;
        let offset = self.code - self.low;
        let value = ((offset + 1) * total - 1) / span;
        // highest symbol with cum[symbol] <= value
        let symbol = match cum.partition_point(|&c| (c as u64) <= value) {
            0 => 0,
            p => p - 1,
        };
        self.high = self.low + (cum[symbol + 1] as u64 * span) / total - 1;
        self.low += (cum[symbol] as u64 * span) / total;
        while ((self.low ^ self.high) & HALF) == 0 {
            self.low = (self.low << 1) & MASK;
            self.high = ((self.high << 1) & MASK) | 1;
            self.code = ((self.code << 1) & MASK) | self.input.read()? as u64;
        }
        while self.low & !self.high & QUARTER != 0 {
            self.low = (self.low << 1) ^ HALF;
            self.high = ((self.high ^ HALF) << 1) | HALF | 1;
            self.code = (self.code & HALF) | ((self.code << 1) & (MASK >> 1))
                | self.input.read()? as u64;
        }
        Ok(symbol)
    }

    pub fn decode_bit(&mut self) -> Result<u32, i32> {
        const BIT_CUM: [u32; 3] = [0, 1 << 15, 1 << 16];
        Ok(self.decode(&BIT_CUM, 1 << 16)? as u32)
    }
}

fn encode_exp_golomb(enc: &mut RangeEncoder, u: u64) {
    let m = u + 1;
    let n = 64 - m.leading_zeros();
    for _ in 0..n - 1 {
        enc.encode_bit(0);
    }
    for i in (0..n).rev() {
        enc.encode_bit(((m >> i) & 1) as u32);
    }
}

fn decode_exp_golomb(dec: &mut RangeDecoder) -> Result<u64, i32> {
    let mut n = 0u32;
    while dec.decode_bit()? == 0 {
        n += 1;
        if n > 64 {
            return Err(STATUS_TRUNCATED);
        }
    }
    let mut m = 1u64;
    for _ in 0..n {
        m = (m << 1) | dec.decode_bit()? as u64;
    }
    Ok(m - 1)
}

/// One coding table: the integer value of regular symbol 0 plus the
/// cumulative counts (the final slot is the overflow escape).
#[derive(Debug)]
pub struct Table<'a> {
    pub offset: i32,
    pub cum: &'a [u32],
}

impl<'a> Table<'a> {
    fn n_regular(&self) -> i64 {
        self.cum.len() as i64 - 2
    }
}

/// Parse the directory-plus-blob table layout (all u32 words; see FFI.md).
pub fn parse_tables(blob: &[u32]) -> Result<Vec<Table<'_>>, i32> {
    let count = *blob.first().ok_or(STATUS_BAD_TABLES)? as usize;
    let mut tables = Vec::with_capacity(count);
    for t in 0..count {
        let dir = 1 + 2 * t;
        let off = *blob.get(dir).ok_or(STATUS_BAD_TABLES)? as usize;
        let cum_len = *blob.get(dir + 1).ok_or(STATUS_BAD_TABLES)? as usize;
        if cum_len < 3 || off + 1 + cum_len > blob.len() {
            return Err(STATUS_BAD_TABLES);
        }
        let offset = blob[off] as i32;
        let cum = &blob[off + 1..off + 1 + cum_len];
        if cum[0] != 0 {
            return Err(STATUS_BAD_TABLES);
        }
        for w in cum.windows(2) {
            if w[1] <= w[0] {
                return Err(STATUS_BAD_TABLES);
            }
        }
        tables.push(Table { offset, cum });
    }
    Ok(tables)
}

pub fn encode_values(values: &[i32], indexes: &[u16], tables: &[Table<'_>]) -> Result<Vec<u8>, i32> {
    let mut enc = RangeEncoder::new();
    for (&v, &ti) in values.iter().zip(indexes) {
        let table = tables.get(ti as usize).ok_or(STATUS_BAD_INDEX)?;
        let total = *table.cum.last().unwrap() as u64;
        let k = v as i64 - table.offset as i64;
        let n_regular = table.n_regular();
        if k >= 0 && k < n_regular {
            let k = k as usize;
            enc.encode(table.cum[k] as u64, table.cum[k + 1] as u64, total);
        } else {
            let over = n_regular as usize;
            enc.encode(table.cum[over] as u64, table.cum[over + 1] as u64, total);
            if k >= n_regular {
                enc.encode_bit(0);
                encode_exp_golomb(&mut enc, (k - n_regular) as u64);
            } else {
                enc.encode_bit(1);
                encode_exp_golomb(&mut enc, (-k - 1) as u64);
            }
        }
    }
    Ok(enc.finish())
}

pub fn decode_values(data: &[u8], indexes: &[u16], tables: &[Table<'_>],
                     out: &mut [i32]) -> Result<(), i32> {
    let mut dec = RangeDecoder::new(data)?;
    for (slot, &ti) in out.iter_mut().zip(indexes) {
        let table = tables.get(ti as usize).ok_or(STATUS_BAD_INDEX)?;
        let total = *table.cum.last().unwrap() as u64;
        let mut k = dec.decode(table.cum, total)? as i64;
        let n_regular = table.n_regular();
        if k == n_regular {
            if dec.decode_bit()? == 0 {
                k = n_regular + decode_exp_golomb(&mut dec)? as i64;
            } else {
                k = -1 - decode_exp_golomb(&mut dec)? as i64;
            }
        }
        *slot = (k + table.offset as i64) as i32;
    }
    Ok(())
}

// -- C ABI ------------------------------------------------------------------

/// # Safety
/// All pointers must reference readable (respectively writable) buffers of
/// the stated lengths; see FFI.md.
#[no_mangle]
pub unsafe extern "C" fn aict_accel_encode(
    symbols: *const i32,
    indexes: *const u16,
    n: usize,
    table_blob: *const u32,
    blob_len: usize,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> i32 {
    let values = if n == 0 { &[][..] } else { std::slice::from_raw_parts(symbols, n) };
    let idx = if n == 0 { &[][..] } else { std::slice::from_raw_parts(indexes, n) };
    let blob = std::slice::from_raw_parts(table_blob, blob_len);
    let tables = match parse_tables(blob) {
        Ok(t) => t,
        Err(status) => return status,
    };
    match encode_values(values, idx, &tables) {
        Ok(bytes) => {
            if bytes.len() > out_cap {
                return STATUS_BUFFER_TOO_SMALL;
            }
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), out, bytes.len());
            *out_len = bytes.len();
            STATUS_OK
        }
        Err(status) => status,
    }
}

/// # Safety
/// All pointers must reference readable (respectively writable) buffers of
/// the stated lengths; see FFI.md.
#[no_mangle]
pub unsafe extern "C" fn aict_accel_decode(
    data: *const u8,
    data_len: usize,
    table_blob: *const u32,
    blob_len: usize,
    indexes: *const u16,
    n: usize,
    out: *mut i32,
) -> i32 {
    let bytes = if data_len == 0 { &[][..] } else { std::slice::from_raw_parts(data, data_len) };
    let idx = if n == 0 { &[][..] } else { std::slice::from_raw_parts(indexes, n) };
    let blob = std::slice::from_raw_parts(table_blob, blob_len);
    let tables = match parse_tables(blob) {
        Ok(t) => t,
        Err(status) => return status,
    };
    let out_slice = if n == 0 { &mut [][..] } else { std::slice::from_raw_parts_mut(out, n) };
    match decode_values(bytes, idx, &tables, out_slice) {
        Ok(()) => STATUS_OK,
        Err(status) => status,
    }
}
