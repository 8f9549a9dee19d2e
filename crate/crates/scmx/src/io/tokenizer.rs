//! Byte-level tokenizer: ids 0-255 are raw bytes, 256-259 are specials.
//!
//! Round trips exactly on any valid UTF-8 string, needs no external
//! assets, and leaves the vocabulary at 260 entries.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const RESERVED: u32 = 259;

/// Encodes text as BOS followed by its raw bytes.
pub fn encode(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 1);
    out.push(BOS);
    out.extend(text.bytes().map(u32::from));
    out
}

/// Encodes text as raw bytes with no leading BOS, for teacher-forced
/// continuations of an already-encoded prefix.
pub fn encode_continuation(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decodes token ids back to a string. Control ids (BOS/EOS/PAD) are
/// dropped; the reserved id and invalid UTF-8 decode to U+FFFD.
pub fn decode(tokens: &[u32]) -> String {
    let mut bytes = Vec::with_capacity(tokens.len());
    let mut out = String::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        }
    };
    for &t in tokens {
        match t {
            0..=255 => bytes.push(t as u8),
            BOS | EOS | PAD => {}
            _ => {
                flush(&mut bytes, &mut out);
                out.push(char::REPLACEMENT_CHARACTER);
            }
        }
    }
    flush(&mut bytes, &mut out);
    out
}

/// Short printable label for a token id, for CSV and report output.
pub fn token_display(token: u32) -> String {
    match token {
        BOS => "<bos>".to_string(),
        EOS => "<eos>".to_string(),
        PAD => "<pad>".to_string(),
        RESERVED => "<rsv>".to_string(),
        0x20..=0x7E => char::from(token as u8).to_string(),
        b => format!("\\x{b:02X}"),
    }
}
