#pragma once

#include <stdexcept>
#include <string>

namespace tpl {

// Error taxonomy. The CLI maps these onto stable exit codes, so new failure
// modes should reuse one of the existing categories where possible.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes or index ranges do not satisfy an operation's contract.
struct ShapeError : Error {
    using Error::Error;
};

// A caller violated a documented precondition (empty seed set, non-scalar
// loss, zero-norm token, ...).
struct ContractError : Error {
    using Error::Error;
};

// Bad configuration: unknown keys, out-of-range values, infeasible budgets.
struct ConfigError : Error {
    using Error::Error;
};

// Filesystem and serialization failures, including checksum/version mismatch.
struct IoError : Error {
    using Error::Error;
};

// Non-finite losses and other numeric breakdowns.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace tpl
