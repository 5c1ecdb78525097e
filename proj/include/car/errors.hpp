#pragma once

#include <stdexcept>
#include <string>

namespace car {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid input: bad specs, malformed files, out-of-range parameters.
struct InvalidArgument : Error {
    using Error::Error;
};

// Design matrix is rank deficient (empty arm or collinear covariates).
struct SingularDesign : Error {
    using Error::Error;
};

// Sample covariance of the covariates is (numerically) singular.
struct SingularCovariance : Error {
    using Error::Error;
};

// Test statistic is undefined (zero standard error).
struct DegenerateTest : Error {
    using Error::Error;
};

// A sampling budget was exhausted (rerandomization attempts, rejection draws).
struct BudgetExhausted : Error {
    using Error::Error;
};

} // namespace car
