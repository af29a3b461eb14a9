/// Byte-level vocabulary followed by the special tokens.
///
/// Layout: `0..256` raw bytes, then `BOS`, `EOS`, `PAD`, `NULLTEXT`, then the
/// `K` summary tokens `SUM_1..SUM_K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    summary_tokens: usize,
}

pub const BYTE_TOKENS: usize = 256;

impl Vocab {
    pub const BOS: usize = BYTE_TOKENS;
    pub const EOS: usize = BYTE_TOKENS + 1;
    pub const PAD: usize = BYTE_TOKENS + 2;
    pub const NULLTEXT: usize = BYTE_TOKENS + 3;
    const FIRST_SUM: usize = BYTE_TOKENS + 4;

    pub fn new(summary_tokens: usize) -> Self {
        Self { summary_tokens }
    }

    pub fn summary_tokens(&self) -> usize {
        self.summary_tokens
    }

    /// Id of `SUM_{k+1}` (zero-based `k`).
    pub fn sum(&self, k: usize) -> usize {
        assert!(k < self.summary_tokens);
        Self::FIRST_SUM + k
    }

    pub fn size(&self) -> usize {
        Self::FIRST_SUM + self.summary_tokens
    }

    pub fn is_byte(id: usize) -> bool {
        id < BYTE_TOKENS
    }
}

/// UTF-8 bytes wrapped in `BOS`/`EOS`.
pub fn tokenize(text: &str) -> Vec<usize> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(Vocab::BOS);
    ids.extend(text.bytes().map(usize::from));
    ids.push(Vocab::EOS);
    ids
}

/// Inverse of [`tokenize`]; special tokens are dropped and invalid UTF-8 is
/// replaced lossily.
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| Vocab::is_byte(id))
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
