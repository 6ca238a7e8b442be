#![no_main]

use boostret::dataset::Dataset;
use libfuzzer_sys::fuzz_target;

// Input: three little-endian u32 lengths (meta, manifest, images), then the
// four file bodies back to back. Whatever follows the images is the texts.
type Parts<'a> = (&'a [u8], &'a [u8], &'a [u8], &'a [u8]);

fn split(data: &[u8]) -> Option<Parts<'_>> {
    let len = |i: usize| -> Option<usize> {
        Some(u32::from_le_bytes(data.get(4 * i..4 * i + 4)?.try_into().ok()?) as usize)
    };
    let (a, b, c) = (len(0)?, len(1)?, len(2)?);
    let rest = &data[12..];
    let (meta, rest) = rest.split_at_checked(a)?;
    let (manifest, rest) = rest.split_at_checked(b)?;
    let (images, texts) = rest.split_at_checked(c)?;
    Some((meta, manifest, images, texts))
}

fuzz_target!(|data: &[u8]| {
    let Some((meta, manifest, images, texts)) = split(data) else {
        return;
    };
    let (Ok(meta), Ok(manifest)) = (std::str::from_utf8(meta), std::str::from_utf8(manifest)) else {
        return;
    };
    let _ = Dataset::from_parts(meta, manifest, images, texts);
});
