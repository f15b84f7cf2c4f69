// Golden vectors for the pinned PRNG, recorded from the first oracle run
// of this implementation. Any change to the algorithm must fail here.
const GOLDEN_U64_SEED_42: [u64; 8] = [
    0x15780B2E0C2EC716,
    0x6104D9866D113A7E,
    0xAE17533239E499A1,
    0xECB8AD4703B360A1,
    0xFDE6DC7FE2EC5E64,
    0xC50DA53101795238,
    0xB82154855A65DDB2,
    0xD99A2743EBE60087,
];
const GOLDEN_FIRST_UNIFORM_SEED_42: f64 = 0.08386297105988216;
