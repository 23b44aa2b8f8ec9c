pub use tcm_core::placeholder;
