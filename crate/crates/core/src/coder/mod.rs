//! Exact entropy coding of quantized latents under the factorized model.
//! The frequency tables are a 2^16 quantization of the model PMF, every
//! in-support symbol keeps frequency >= 1, and decode(encode(x)) == x.

mod range;

pub use range::{RangeDecoder, RangeEncoder, TOTAL_FREQ};

use crate::codec::{EntropySnapshot, LatentCode};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ICMB";
pub const FORMAT_VERSION: u8 = 1;

/// Per-channel cumulative frequency tables over the symbol support.
#[derive(Clone, Debug)]
pub struct CdfTable {
    pub support: i32,
    /// cum[c][s] for s in 0..=n_symbols; cum[c][0] == 0, last == 2^16.
    cum: Vec<Vec<u32>>,
}

impl CdfTable {
    pub fn channels(&self) -> usize {
        self.cum.len()
    }

    pub fn n_symbols(&self) -> usize {
        (2 * self.support + 1) as usize
    }

    fn symbol_index(&self, value: i32) -> Result<usize> {
        if value < -self.support || value > self.support {
            return Err(Error::OutOfSupport {
                value,
                lo: -self.support,
                hi: self.support,
            });
        }
        Ok((value + self.support) as usize)
    }

    pub fn freq(&self, channel: usize, sym: usize) -> u32 {
        self.cum[channel][sym + 1] - self.cum[channel][sym]
    }

    pub fn cum(&self, channel: usize, sym: usize) -> u32 {
        self.cum[channel][sym]
    }

    /// Code length the table itself implies for one symbol, in bits.
    pub fn bits_for(&self, channel: usize, sym: usize) -> f64 {
        -((self.freq(channel, sym) as f64 / TOTAL_FREQ as f64).log2())
    }

    /// Table-implied total bits for a latent (the coder's compression
    /// target, before renormalization overhead).
    pub fn implied_bits(&self, code: &LatentCode) -> Result<f64> {
        let per_channel = code.h * code.w;
        let mut bits = 0.0;
        for c in 0..code.channels {
            for &v in &code.values[c * per_channel..(c + 1) * per_channel] {
                bits += self.bits_for(c, self.symbol_index(v)?);
            }
        }
        Ok(bits)
    }

    fn find(&self, channel: usize, target: u32) -> usize {
        // binary search for the symbol whose [cum, cum+freq) covers target
        let cum = &self.cum[channel];
        let mut lo = 0usize;
        let mut hi = cum.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if cum[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// Quantize the model PMF to integer frequencies summing to exactly 2^16,
/// with every symbol kept >= 1 so any in-support value stays decodable.
pub fn build_cdf(snapshot: &EntropySnapshot) -> CdfTable {
    let n = snapshot.n_symbols();
    let mut cum = Vec::with_capacity(snapshot.channels());
    for c in 0..snapshot.channels() {
        let pmf = snapshot.pmf_folded(c);
        let mut freqs: Vec<u32> = pmf
            .iter()
            .map(|&p| ((p * TOTAL_FREQ as f64).round() as u32).max(1))
            .collect();
        // repair the rounding drift on the most popular bins
        let mut total: i64 = freqs.iter().map(|&f| f as i64).sum();
        while total != TOTAL_FREQ as i64 {
            let step = if total < TOTAL_FREQ as i64 { 1i64 } else { -1i64 };
            // adjust the largest bin that can absorb the step
            let mut best = usize::MAX;
            for i in 0..n {
                if step < 0 && freqs[i] <= 1 {
                    continue;
                }
                if best == usize::MAX || freqs[i] > freqs[best] {
                    best = i;
                }
            }
            let delta = (total - TOTAL_FREQ as i64).unsigned_abs().min(
                if step < 0 {
                    (freqs[best] - 1) as u64
                } else {
                    u64::MAX
                },
            ) as i64;
            let applied = if step < 0 { -delta } else { delta };
            freqs[best] = (freqs[best] as i64 + applied) as u32;
            total += applied;
        }
        let mut c_acc = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        c_acc.push(0);
        for &f in &freqs {
            acc += f;
            c_acc.push(acc);
        }
        debug_assert_eq!(acc, TOTAL_FREQ);
        cum.push(c_acc);
    }
    CdfTable {
        support: snapshot.support,
        cum,
    }
}

/// Framed bitstream: header (magic, version, shape, model digest) plus the
/// range-coded payload. All integers little-endian.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub channels: u16,
    pub h: u16,
    pub w: u16,
    pub model_digest: u64,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub const HEADER_LEN: usize = 4 + 1 + 2 + 2 + 2 + 8 + 4;

    pub fn payload_bits(&self) -> u64 {
        self.payload.len() as u64 * 8
    }

    pub fn total_bytes(&self) -> usize {
        Self::HEADER_LEN + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.h.to_le_bytes());
        out.extend_from_slice(&self.w.to_le_bytes());
        out.extend_from_slice(&self.model_digest.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Bitstream> {
        if bytes.len() < Self::HEADER_LEN {
            return Err(Error::CorruptStream("truncated header".into()));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::CorruptStream(format!(
                "bad magic {:02x?}",
                &bytes[0..4]
            )));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::CorruptStream(format!(
                "unsupported version {}",
                bytes[4]
            )));
        }
        let rd16 = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let channels = rd16(5);
        let h = rd16(7);
        let w = rd16(9);
        let model_digest = u64::from_le_bytes(bytes[11..19].try_into().unwrap());
        let payload_len = u32::from_le_bytes(bytes[19..23].try_into().unwrap()) as usize;
        if bytes.len() != Self::HEADER_LEN + payload_len {
            return Err(Error::CorruptStream(format!(
                "payload length {} does not match frame size {}",
                payload_len,
                bytes.len() - Self::HEADER_LEN
            )));
        }
        Ok(Bitstream {
            channels,
            h,
            w,
            model_digest,
            payload: bytes[Self::HEADER_LEN..].to_vec(),
        })
    }
}

/// Range-encode a latent. Symbol order is channel-major, then row-major.
pub fn rc_encode(code: &LatentCode, table: &CdfTable, model_digest: u64) -> Result<Bitstream> {
    if code.model_digest != model_digest {
        return Err(Error::ModelMismatch {
            stream: code.model_digest,
            model: model_digest,
        });
    }
    let per_channel = code.h * code.w;
    let mut enc = RangeEncoder::new();
    for c in 0..code.channels {
        for &v in &code.values[c * per_channel..(c + 1) * per_channel] {
            let s = table.symbol_index(v)?;
            enc.encode(table.cum(c, s), table.freq(c, s));
        }
    }
    let payload = if code.values.is_empty() {
        Vec::new()
    } else {
        enc.finish()
    };
    Ok(Bitstream {
        channels: code.channels as u16,
        h: code.h as u16,
        w: code.w as u16,
        model_digest,
        payload,
    })
}

/// Exact inverse of `rc_encode` given the same table.
pub fn rc_decode(bs: &Bitstream, table: &CdfTable, model_digest: u64) -> Result<LatentCode> {
    if bs.model_digest != model_digest {
        return Err(Error::ModelMismatch {
            stream: bs.model_digest,
            model: model_digest,
        });
    }
    let (channels, h, w) = (bs.channels as usize, bs.h as usize, bs.w as usize);
    if channels != table.channels() {
        return Err(Error::CorruptStream(format!(
            "stream has {} channels, table has {}",
            channels,
            table.channels()
        )));
    }
    let n = channels * h * w;
    let mut values = Vec::with_capacity(n);
    if n > 0 {
        let mut dec = RangeDecoder::new(&bs.payload);
        for c in 0..channels {
            for _ in 0..h * w {
                let target = dec.decode_target();
                let sym = table.find(c, target);
                dec.decode_advance(table.cum(c, sym), table.freq(c, sym));
                if dec.exhausted() {
                    return Err(Error::CorruptStream("payload truncated".into()));
                }
                values.push(sym as i32 - table.support);
            }
        }
    }
    Ok(LatentCode {
        channels,
        h,
        w,
        values,
        model_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snapshot() -> EntropySnapshot {
        EntropySnapshot {
            support: 64,
            mu: vec![0.0, -0.8, 2.3],
            scale: vec![1.0, 0.4, 3.7],
        }
    }

    #[test]
    fn uniform_pmf_gives_even_quarters() {
        let snap = EntropySnapshot {
            support: 0,
            mu: vec![0.0],
            scale: vec![1.0],
        };
        // single-symbol support: the whole space goes to symbol 0
        let t = build_cdf(&snap);
        assert_eq!(t.freq(0, 0), TOTAL_FREQ);

        // handcrafted uniform four-symbol table
        let quarters = CdfTable {
            support: 1,
            cum: vec![vec![0, 16384, 32768, 49152, 65536]],
        };
        assert_eq!(
            (0..4).map(|s| quarters.cum(0, s)).collect::<Vec<_>>(),
            vec![0, 16384, 32768, 49152]
        );
    }

    #[test]
    fn table_is_strictly_increasing_and_complete() {
        let t = build_cdf(&snapshot());
        for c in 0..t.channels() {
            for s in 0..t.n_symbols() {
                assert!(t.freq(c, s) >= 1, "channel {c} symbol {s}");
            }
            assert_eq!(t.cum[c][0], 0);
            assert_eq!(*t.cum[c].last().unwrap(), TOTAL_FREQ);
        }
    }

    #[test]
    fn table_kl_to_default_model_is_small() {
        // default-initialized entropy model
        use crate::autodiff::Params;
        use crate::codec::FactorizedEntropyModel;
        let mut params = Params::new();
        let model = FactorizedEntropyModel::init(&mut params, "e", 4, 64);
        let snap = model.snapshot(&params);
        let t = build_cdf(&snap);
        for c in 0..snap.channels() {
            let pmf = snap.pmf_folded(c);
            let mut kl = 0.0;
            for (s, &p) in pmf.iter().enumerate() {
                if p > 0.0 {
                    let q = t.freq(c, s) as f64 / TOTAL_FREQ as f64;
                    kl += p * (p / q).log2();
                }
            }
            assert!(kl.abs() < 1e-3, "channel {c}: KL = {kl}");
        }
    }

    #[test]
    fn empty_latent_roundtrips_as_header_only() {
        let snap = snapshot();
        let t = build_cdf(&snap);
        let digest = snap.digest();
        let code = LatentCode {
            channels: 3,
            h: 0,
            w: 0,
            values: vec![],
            model_digest: digest,
        };
        let bs = rc_encode(&code, &t, digest).unwrap();
        assert!(bs.payload.is_empty());
        assert_eq!(bs.total_bytes(), Bitstream::HEADER_LEN);
        let back = rc_decode(&bs, &t, digest).unwrap();
        assert_eq!(back, code);
    }

    #[test]
    fn all_support_symbols_roundtrip() {
        let snap = snapshot();
        let t = build_cdf(&snap);
        let digest = snap.digest();
        let n = t.n_symbols();
        let values: Vec<i32> = (0..3)
            .flat_map(|_| (-snap.support..=snap.support).collect::<Vec<_>>())
            .collect();
        let code = LatentCode {
            channels: 3,
            h: 1,
            w: n,
            values,
            model_digest: digest,
        };
        let bs = rc_encode(&code, &t, digest).unwrap();
        let back = rc_decode(&bs, &t, digest).unwrap();
        assert_eq!(back, code);
    }

    #[test]
    fn digest_mismatch_is_an_error() {
        let snap = snapshot();
        let t = build_cdf(&snap);
        let code = LatentCode {
            channels: 3,
            h: 1,
            w: 1,
            values: vec![0, 0, 0],
            model_digest: 1234,
        };
        assert!(matches!(
            rc_encode(&code, &t, snap.digest()),
            Err(Error::ModelMismatch { .. })
        ));
    }

    #[test]
    fn corrupted_magic_is_an_error_not_a_panic() {
        let snap = snapshot();
        let t = build_cdf(&snap);
        let digest = snap.digest();
        let code = LatentCode {
            channels: 3,
            h: 2,
            w: 2,
            values: vec![1; 12],
            model_digest: digest,
        };
        let mut bytes = rc_encode(&code, &t, digest).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Bitstream::from_bytes(&bytes),
            Err(Error::CorruptStream(_))
        ));
    }

    #[test]
    fn out_of_support_symbol_is_a_coding_error() {
        let snap = snapshot();
        let t = build_cdf(&snap);
        let digest = snap.digest();
        let code = LatentCode {
            channels: 3,
            h: 1,
            w: 1,
            values: vec![0, 0, 200],
            model_digest: digest,
        };
        assert!(matches!(
            rc_encode(&code, &t, digest),
            Err(Error::OutOfSupport { .. })
        ));
    }

    #[test]
    fn frame_roundtrip() {
        let bs = Bitstream {
            channels: 32,
            h: 8,
            w: 8,
            model_digest: 0xDEADBEEF12345678,
            payload: vec![1, 2, 3, 4, 5],
        };
        let back = Bitstream::from_bytes(&bs.to_bytes()).unwrap();
        assert_eq!(back, bs);
    }
}
