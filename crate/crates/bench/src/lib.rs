//! Shared fixtures for the benchmarks.

use ragdistill::synth::{generate, SynthCorpus, SynthSpec};

/// The default synthetic corpus, optionally scaled up.
pub fn corpus(records_per_class: usize) -> SynthCorpus {
    generate(&SynthSpec { records_per_class, ..SynthSpec::default() }).expect("default spec is valid")
}
