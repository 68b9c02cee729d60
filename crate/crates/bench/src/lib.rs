//! Fixtures shared by the benchmarks.

use survae::{data, presets, Flow, Noise, Result, Tensor};

/// A preset flow with data-dependent initialization already run on `x`.
pub fn ready_preset(name: &str, x: &Tensor) -> Result<Flow> {
    let mut flow = Flow::build(&presets::preset(name)?)?;
    if flow.needs_init() {
        flow.initialize(x, &mut Noise::from_seed(0))?;
    }
    Ok(flow)
}

/// `n` rows of a named dataset.
pub fn rows(dataset: &str, n: usize) -> Result<Tensor> {
    Ok(data::generate(dataset, n, 0)?.samples)
}
