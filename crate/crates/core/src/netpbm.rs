//! Binary netpbm read/write: P6 (color) for images, P5 (gray) for labels.
//! Maxval is fixed at 255. Parse errors carry the byte offset where the
//! problem was found.

use thiserror::Error;

#[derive(Debug, Error)]
#[error("{message} at byte {offset}")]
pub struct PnmError {
    pub offset: usize,
    pub message: String,
}

fn err<T>(offset: usize, message: impl Into<String>) -> Result<T, PnmError> {
    Err(PnmError { offset, message: message.into() })
}

pub fn encode_ppm(h: usize, w: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), h * w * 3);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(h: usize, w: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), h * w);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), PnmError> {
    parse(bytes, b"P6", 3)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), PnmError> {
    parse(bytes, b"P5", 1)
}

/// Header grammar: magic, then width/height/maxval as decimal tokens
/// separated by whitespace (with `#` comments allowed), then exactly one
/// whitespace byte, then the binary payload.
fn parse(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>), PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return err(0, format!("missing {} magic", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        pos = skip_separators(bytes, pos)?;
        let (value, next) = read_decimal(bytes, pos, name)?;
        fields[i] = value;
        pos = next;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return err(pos, format!("unsupported maxval {maxval}, expected 255"));
    }
    if w == 0 || h == 0 {
        return err(pos, format!("degenerate dimensions {w}x{h}"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(b) => return err(pos, format!("expected single whitespace before payload, found 0x{b:02x}")),
        None => return err(pos, "file ends before payload"),
    }
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| PnmError { offset: pos, message: format!("dimensions {w}x{h} overflow") })?;
    let have = bytes.len() - pos;
    if have < need {
        return err(pos + have, format!("payload truncated: need {need} bytes, found {have}"));
    }
    if have > need {
        return err(pos + need, format!("{} trailing bytes after payload", have - need));
    }
    Ok((h, w, bytes[pos..pos + need].to_vec()))
}

/// Whitespace and `#`-to-end-of-line comments between header tokens.
fn skip_separators(bytes: &[u8], mut pos: usize) -> Result<usize, PnmError> {
    let start = pos;
    loop {
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(pos) {
                    pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) if pos > start => return Ok(pos),
            Some(b) => return err(pos, format!("expected whitespace, found 0x{b:02x}")),
            None => return err(pos, "file ends inside header"),
        }
    }
}

fn read_decimal(bytes: &[u8], mut pos: usize, name: &str) -> Result<(usize, usize), PnmError> {
    let start = pos;
    let mut value: usize = 0;
    while let Some(&b) = bytes.get(pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = match value.checked_mul(10).and_then(|v| v.checked_add((b - b'0') as usize)) {
            Some(v) => v,
            None => return err(start, format!("{name} overflows")),
        };
        pos += 1;
    }
    if pos == start {
        return err(pos, format!("expected decimal {name}"));
    }
    Ok((value, pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn round_trip_both_formats() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|v| v as u8).collect();
        let (h, w, data) = parse_ppm(&encode_ppm(2, 3, &rgb)).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(data, rgb);

        let gray: Vec<u8> = (0..12).map(|v| (v * 7) as u8).collect();
        let (h, w, data) = parse_pgm(&encode_pgm(3, 4, &gray)).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(data, gray);
    }

    #[test]
    fn spec_example_header() {
        let mut f = b"P6 2 2 255 ".to_vec();
        f.extend_from_slice(&[9u8; 12]);
        let (h, w, data) = parse_ppm(&f).unwrap();
        assert_eq!((h, w, data.len()), (2, 2, 12));
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut f = b"P5\n# a comment\n2 1\n255\n".to_vec();
        f.extend_from_slice(&[1, 2]);
        let (h, w, data) = parse_pgm(&f).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(data, vec![1, 2]);
    }

    #[test]
    fn truncation_reports_missing_bytes() {
        let mut f = encode_ppm(2, 2, &[5u8; 12]);
        f.truncate(f.len() - 5);
        let e = parse_ppm(&f).unwrap_err();
        assert!(e.message.contains("need 12 bytes, found 7"), "{e}");
    }

    #[test]
    fn rejects_bad_magic_maxval_and_trailing() {
        assert!(parse_ppm(b"P5\n1 1\n255\nx").is_err());
        assert!(parse_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        let mut f = encode_pgm(1, 1, &[0]);
        f.push(77);
        let e = parse_pgm(&f).unwrap_err();
        assert!(e.message.contains("trailing"), "{e}");
    }

    #[test]
    fn corruption_fuzz_never_panics() {
        let mut rng = crate::rng::rng_named(99, "fuzz", &[]);
        let base = encode_ppm(4, 5, &vec![100u8; 60]);
        for _ in 0..300 {
            let mut f = base.clone();
            match rng.gen_range(0..4) {
                0 => {
                    let cut = rng.gen_range(0..f.len());
                    f.truncate(cut);
                }
                1 => {
                    let i = rng.gen_range(0..f.len());
                    f[i] = rng.gen();
                }
                2 => f.extend((0..rng.gen_range(1..10)).map(|_| rng.gen::<u8>())),
                _ => {
                    let i = rng.gen_range(0..f.len());
                    f.insert(i, rng.gen());
                }
            }
            // Must either parse or error; no panic, and success only with
            // intact geometry.
            if let Ok((h, w, data)) = parse_ppm(&f) {
                assert_eq!(data.len(), h * w * 3);
            }
        }
    }
}
