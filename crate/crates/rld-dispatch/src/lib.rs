//! Command-line driver for the dispatch toolkit: sectioned plain-text
//! case files in, CSV tables out.

pub mod case;
pub mod commands;
pub mod output;
