//! Wrapper feature selection: a small convolutional network extracts
//! features, binary differential evolution searches feature subsets, and a
//! one-vs-rest linear SVM scores each subset by `1 - geometric mean`.

pub mod convnet;
pub mod de;
pub mod metrics;
pub mod pipeline;
pub mod svm;
