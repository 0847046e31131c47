//! Criterion benchmarks for the policy forward/backward pass and the losses.
