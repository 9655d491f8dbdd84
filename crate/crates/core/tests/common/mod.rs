#![allow(dead_code)]

use std::io::Read;

use flate2::read::GzDecoder;

/// About 1 MB of text8-style Wikipedia prose: lowercase letters and single
/// spaces.
pub fn corpus() -> Vec<u8> {
    let gz = include_bytes!("../data/wiki_text8_1m.txt.gz");
    let mut text = Vec::new();
    GzDecoder::new(&gz[..])
        .read_to_end(&mut text)
        .expect("fixture is valid gzip");
    text
}
