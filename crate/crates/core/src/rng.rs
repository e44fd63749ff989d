use rand::SeedableRng;
use rand_pcg::Pcg64;

/// Seeded PCG generator used for every random decision in the crate.
pub(crate) fn seeded(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

/// Independent generator for work unit `stream` under a common seed.
pub(crate) fn stream(seed: u64, stream: u64) -> Pcg64 {
    let mut base = Pcg64::seed_from_u64(seed);
    let state = ((rand::Rng::next_u64(&mut base) as u128) << 64) | rand::Rng::next_u64(&mut base) as u128;
    Pcg64::new(state, stream as u128)
}
