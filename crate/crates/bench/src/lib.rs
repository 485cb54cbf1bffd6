//! Benchmark fixtures shared by the criterion targets.

use partscope::datasets::synthetic::{generate_sample, SyntheticSpec};
use partscope::datasets::Sample;

/// One default synthetic sample at the given side length.
pub fn sample(side: usize, index: usize) -> Sample {
    let spec = SyntheticSpec { width: side, height: side, ..SyntheticSpec::default() };
    generate_sample(&spec, index)
}
