//! Sequence files, synthetic scenarios, evaluation and result serialisation.

pub mod eval;
pub mod results;
pub mod sequence;
pub mod synth;

pub use eval::{evaluate, EvalReport};
pub use sequence::{load_sequence, save_sequence, AnnotatedDetection, Frame, SequenceFile};
pub use synth::{synth_sequence, Scenario, SynthOptions};
