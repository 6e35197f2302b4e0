#pragma once

#include <stdexcept>
#include <string>

namespace vnode {

// Error taxonomy. The CLI maps each category to a distinct exit code
// (see tools/vnode_cli.cpp): config=2, data=3, numeric=4, verification=5.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension mismatch between tensors or between a tensor and a layer.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration (files, flags, layer geometry).
struct ConfigError : Error {
    using Error::Error;
};

// API contract violation (e.g. backward from a non-scalar root).
struct ContractError : Error {
    using Error::Error;
};

// Dataset ingestion failure (missing file, bad magic, wrong size).
struct DataError : Error {
    using Error::Error;
};

// NaN/Inf encountered during evaluation or integration.
struct DivergenceError : Error {
    using Error::Error;
};

// Adaptive solver step underflow or max-steps exceeded.
struct ConvergenceError : Error {
    using Error::Error;
};

// Checkpoint checksum, magic, or version mismatch.
struct CheckpointError : Error {
    using Error::Error;
};

} // namespace vnode
