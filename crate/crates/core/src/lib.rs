//! Melody and harmony language modelling for folk tunes, with count-down and
//! meter-marker input features.
//!
//! The pipeline runs MIDI files through [`midi`] and [`corpus`], onto a
//! sixteenth-note grid in [`encoding`], optionally adds the [`features`]
//! columns, trains the stacked LSTM in [`nn`] through [`training`], and samples
//! new pieces with [`generation`].

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoding;
pub mod experiment;
pub mod features;
pub mod generation;
pub mod harmony;
pub mod midi;
pub mod nn;
pub mod synthetic;
pub mod training;
