//! Criterion benchmarks for the `hyenapixel` token mixers live in `benches/`.
