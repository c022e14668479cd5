//! TAELF container format, loader and assembler.

pub mod asm;
pub mod format;
pub mod loader;

pub use asm::{assemble, assemble_full, Assembly, AssemblyError};
pub use format::{parse_taelf, Entrypoint, Import, Segment, TaElfError, TaElfFile};
pub use loader::{load, ConfigError, LoadError, StaticAnnotationConfig, TaImage};
