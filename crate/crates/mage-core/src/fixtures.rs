//! Deterministic synthetic images for tests, benchmarks and the CLI
//! `gen` subcommand.

use crate::image::{EnclaveImage, MarsRange, Variant};
use crate::measure::{EnclaveParams, MeasuredPage, SecInfo, PAGE_SIZE};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Build one image with `content_pages` random pages and `mars_pages`
/// zeroed MARS pages inserted at file index `mars_position`
/// (0 ..= content_pages). Pass `mars_pages = 0` for a plain image.
pub fn random_image(
    rng: &mut impl RngCore,
    content_pages: usize,
    mars_pages: usize,
    mars_position: usize,
    variant: Variant,
) -> EnclaveImage {
    assert!(mars_position <= content_pages);
    let total = content_pages + mars_pages;
    let enclave_size = ((total.max(1) * PAGE_SIZE) as u64).next_power_of_two();
    let params = EnclaveParams::new(1, enclave_size).unwrap();

    let perms = [SecInfo::reg_rw(), SecInfo::reg_rx(), SecInfo::tcs()];
    let mut pages = Vec::with_capacity(total);
    let mut content_emitted = 0;
    for file_index in 0..total {
        let offset = (file_index * PAGE_SIZE) as u64;
        let in_mars = mars_pages > 0
            && file_index >= mars_position
            && file_index < mars_position + mars_pages;
        if in_mars {
            pages.push(MeasuredPage::zeroed(offset, SecInfo::reg_read_only()).unwrap());
        } else {
            let mut content = [0u8; PAGE_SIZE];
            rng.fill_bytes(&mut content);
            let secinfo = perms[rng.random_range(0..perms.len())];
            pages.push(MeasuredPage::new(offset, secinfo, &content).unwrap());
            content_emitted += 1;
        }
    }
    debug_assert_eq!(content_emitted, content_pages);

    let mars_range = (mars_pages > 0).then_some(MarsRange {
        first_page: mars_position,
        page_count: mars_pages,
    });
    EnclaveImage::new(params, variant, pages, mars_range).unwrap()
}

/// Build a group of images. `content_pages` is cycled over the members;
/// MARS position is randomized per image.
pub fn random_group(
    count: usize,
    content_pages: &[usize],
    mars_pages: usize,
    variant: Variant,
    seed: u64,
) -> Vec<EnclaveImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let cp = content_pages[i % content_pages.len()];
            let pos = if mars_pages > 0 { rng.random_range(0..=cp) } else { 0 };
            random_image(&mut rng, cp, mars_pages, pos, variant)
        })
        .collect()
}
