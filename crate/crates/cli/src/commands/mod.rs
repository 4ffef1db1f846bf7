pub mod eval;
pub mod restore;
pub mod sample;
pub mod train;
pub mod verify;
