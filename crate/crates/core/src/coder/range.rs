//! Carry-aware byte-oriented range coder, 32-bit range with 16-bit frequency
//! precision. The encoder defers a run of 0xFF bytes until the carry is
//! resolved; the decoder mirrors the renormalization exactly, so streams are
//! byte-identical across platforms.

pub const TOTAL_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << TOTAL_BITS;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Encode a symbol occupying [cum, cum+freq) of the 2^16 frequency space.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL_FREQ);
        let r = self.range / TOTAL_FREQ;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        // keep only the 24 bits below the cached byte
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        // first byte is the encoder's initial zero cache
        d.next_byte();
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// True once the decoder has consumed bytes past the end of the stream;
    /// decoding a truncated stream trips this.
    pub fn exhausted(&self) -> bool {
        self.pos > self.input.len()
    }

    /// Frequency-space position of the next symbol.
    pub fn decode_target(&self) -> u32 {
        let r = self.range / TOTAL_FREQ;
        (self.code / r).min(TOTAL_FREQ - 1)
    }

    /// Consume the symbol spanning [cum, cum+freq).
    pub fn decode_advance(&mut self, cum: u32, freq: u32) {
        let r = self.range / TOTAL_FREQ;
        self.code -= r * cum;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn roundtrip(symbols: &[u32], cums: &[u32], freqs: &[u32]) -> bool {
        let mut enc = RangeEncoder::new();
        for &s in symbols {
            enc.encode(cums[s as usize], freqs[s as usize]);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &s in symbols {
            let target = dec.decode_target();
            // linear scan is fine for the tiny test alphabet
            let mut found = None;
            for i in 0..freqs.len() {
                if target >= cums[i] && target < cums[i] + freqs[i] {
                    found = Some(i as u32);
                    break;
                }
            }
            if found != Some(s) {
                return false;
            }
            dec.decode_advance(cums[s as usize], freqs[s as usize]);
        }
        true
    }

    #[test]
    fn uniform_alphabet_roundtrip() {
        let freqs = [16384u32; 4];
        let cums = [0, 16384, 32768, 49152];
        let mut rng = DetRng::new(7);
        let symbols: Vec<u32> = (0..10_000).map(|_| rng.below(4) as u32).collect();
        assert!(roundtrip(&symbols, &cums, &freqs));
    }

    #[test]
    fn skewed_alphabet_roundtrip() {
        // heavily skewed model exercises carry propagation
        let freqs = [65533u32, 1, 1, 1];
        let cums = [0, 65533, 65534, 65535];
        let mut rng = DetRng::new(9);
        let symbols: Vec<u32> = (0..20_000)
            .map(|_| if rng.uniform() < 0.999 { 0 } else { 1 + rng.below(3) as u32 })
            .collect();
        assert!(roundtrip(&symbols, &cums, &freqs));
    }

    #[test]
    fn empty_stream_is_five_flush_bytes() {
        let enc = RangeEncoder::new();
        assert_eq!(enc.finish().len(), 5);
    }

    #[test]
    fn near_ideal_length_on_uniform_source() {
        let freqs = [256u32; 256];
        let cums: Vec<u32> = (0..256).map(|i| i * 256).collect();
        let mut rng = DetRng::new(3);
        let n = 10_000;
        let symbols: Vec<u32> = (0..n).map(|_| rng.below(256) as u32).collect();
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            enc.encode(cums[s as usize], freqs[s as usize]);
        }
        let bytes = enc.finish();
        let ideal_bits = n as f64 * 8.0;
        let actual_bits = bytes.len() as f64 * 8.0;
        assert!(actual_bits >= ideal_bits);
        assert!(actual_bits <= ideal_bits * 1.001 + 64.0, "{actual_bits}");
    }
}
