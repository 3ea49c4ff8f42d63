#ifndef CALIDET_ERRORS_HPP
#define CALIDET_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace calidet {

/// Malformed or inconsistent input data (files, matrices, datasets).
/// CLI maps this to exit code 2.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numeric failure at run time (divergence, non-finite activations).
/// CLI maps this to exit code 3.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace calidet

#endif // CALIDET_ERRORS_HPP
