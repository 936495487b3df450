//! Binary 8-bit PGM (P5) maps.

use crate::CliError;

/// Quantizes a probability to a byte as `round(255·p)`, clamping to [0, 1].
pub fn quantize(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0)).round() as u8
}

/// Header `P5 W H 255\n` followed by `W·H` row-major bytes.
pub fn encode(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "map size does not match {width}x{height}");
    let mut out = format!("P5 {width} {height} 255\n").into_bytes();
    out.extend(values.iter().map(|&p| quantize(p)));
    out
}

/// Decodes the exact layout written by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), CliError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::usage("pgm: missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| CliError::usage("pgm: header is not ASCII"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    let [magic, w, h, max] = fields[..] else {
        return Err(CliError::usage(format!("pgm: bad header {header:?}")));
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| CliError::usage(format!("pgm: bad header {header:?}")));
    let (w, h) = (parse(w)?, parse(h)?);
    if magic != "P5" || max != "255" {
        return Err(CliError::usage(format!("pgm: unsupported header {header:?}")));
    }
    let body = &bytes[nl + 1..];
    if body.len() != w * h {
        return Err(CliError::usage(format!("pgm: expected {} bytes, found {}", w * h, body.len())));
    }
    Ok((w, h, body.to_vec()))
}
