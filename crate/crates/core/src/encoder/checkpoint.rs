//! `TENC` checkpoint format.
//!
//! ```text
//! "TENC" | u32 version | u32 input_h | u32 input_w | u32 n_stages
//! n_stages x (u32 in_ch, u32 out_ch, u32 kernel) | u32 proj_in | u32 dim
//! param_count x f32
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use super::{Architecture, EncoderError, EncoderParams, Stage, MAX_STAGES};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TENC";

pub fn encode_checkpoint(params: &EncoderParams<f32>) -> Vec<u8> {
    let a = &params.arch;
    let mut out = Vec::with_capacity(32 + 12 * a.stages.len() + 4 * params.values.len());
    out.extend_from_slice(MAGIC);
    let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(CHECKPOINT_VERSION as usize);
    put(a.input_h);
    put(a.input_w);
    put(a.stages.len());
    for s in &a.stages {
        put(s.in_ch);
        put(s.out_ch);
        put(s.kernel);
    }
    put(a.last_channels());
    put(a.dim);
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self, what: &str) -> Result<u32, EncoderError> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| EncoderError::Checkpoint(format!("truncated while reading {what}")))?;
        self.pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<EncoderParams<f32>, EncoderError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(EncoderError::Checkpoint("bad magic (expected TENC)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let input_h = r.u32("input height")? as usize;
    let input_w = r.u32("input width")? as usize;
    let n_stages = r.u32("stage count")? as usize;
    if n_stages == 0 || n_stages > MAX_STAGES {
        return Err(EncoderError::Checkpoint(format!(
            "stage count {n_stages} outside 1..={MAX_STAGES}"
        )));
    }
    let mut stages = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        stages.push(Stage {
            in_ch: r.u32("stage in_ch")? as usize,
            out_ch: r.u32("stage out_ch")? as usize,
            kernel: r.u32("stage kernel")? as usize,
        });
    }
    let proj_in = r.u32("projection input")? as usize;
    let dim = r.u32("embedding dimension")? as usize;
    let arch = Architecture {
        input_h,
        input_w,
        stages,
        dim,
    };
    arch.validate()
        .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    if proj_in != arch.last_channels() {
        return Err(EncoderError::Checkpoint(format!(
            "projection expects {proj_in} inputs but last stage has {} channels",
            arch.last_channels()
        )));
    }
    let count = arch.param_count();
    let rest = &bytes[r.pos..];
    if rest.len() != 4 * count {
        return Err(EncoderError::Checkpoint(format!(
            "weight block has {} bytes, architecture needs {}",
            rest.len(),
            4 * count
        )));
    }
    let values: Vec<f32> = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(EncoderError::Checkpoint(format!(
            "non-finite weight at index {i}"
        )));
    }
    EncoderParams::from_values(arch, values)
}

pub fn save_checkpoint(params: &EncoderParams<f32>, path: &Path) -> Result<(), EncoderError> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams<f32>, EncoderError> {
    let bytes = std::fs::read(path).map_err(|source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> EncoderParams<f32> {
        EncoderParams::init(
            Architecture::reference(64, 64),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = sample();
        let bytes = encode_checkpoint(&p);
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p.arch, q.arch);
        assert!(p
            .values
            .iter()
            .zip(&q.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(encode_checkpoint(&q), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode_checkpoint(&sample());
        let err = |b: &[u8]| decode_checkpoint(b).unwrap_err().to_string();
        assert!(err(b"TEN").contains("magic"));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(err(&v).contains("version"));
        assert!(err(&bytes[..bytes.len() - 1]).contains("weight block"));
        let mut v = bytes.clone();
        v[16] = 0;
        assert!(err(&v).contains("stage count"));
        let mut v = bytes.clone();
        let n = v.len();
        v[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(err(&v).contains("non-finite"));
        let mut v = bytes;
        v[20] = 2;
        assert!(err(&v).contains("input channels"));
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let mut b = b"TENC".to_vec();
            b.extend_from_slice(&bytes);
            let _ = decode_checkpoint(&b);
            let _ = decode_checkpoint(&bytes);
        }
    }
}
