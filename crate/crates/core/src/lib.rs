//! Domain adversarial training on synthetic frame corpora.
//!
//! A feature extractor feeds a task head and, through a gradient reversal
//! layer, a domain head. The sign of `lambda` picks adversarial training
//! (`> 0`), multi-task learning (`< 0`) or plain source training (`= 0`).
//!
//! ```no_run
//! use datlab::data::{gen_corpus, CorpusSpec, Split};
//! use datlab::eval::evaluate;
//! use datlab::model::HyperParams;
//! use datlab::train::train_model;
//!
//! let spec = CorpusSpec::default();
//! let train = gen_corpus(&spec).unwrap();
//! let test = gen_corpus(&spec.with_split(Split::Test)).unwrap();
//! let (model, _log) = train_model(&HyperParams::default(), &train.no_trans(), 10).unwrap();
//! println!("{:?}", evaluate(&model, &test).unwrap());
//! ```

pub mod checkpoint;
pub mod cli;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod numeric;
pub mod train;

pub use error::{Error, Result};
