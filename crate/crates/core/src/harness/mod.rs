pub mod evaluate;
pub mod fit;
pub mod generate;
pub mod lookup;
pub mod train;

pub use evaluate::{evaluate, ParityDecoder};
pub use fit::{decoder_efficiency, fit_fidelity, fit_powerlaw, pseudothreshold, FidelitySeries, FitResult};
pub use generate::{generate, generate_to_file, GenerateConfig, Lengths};
pub use lookup::{reference_decoder_d3, LookupDecoder};
pub use train::{TrainConfig, Trainer};
