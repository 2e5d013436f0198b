#pragma once

#include <stdexcept>
#include <string>

namespace sfb {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// prob-core
struct ConflictingCertainty : Error {
    using Error::Error;
};
struct ZeroMass : Error {
    using Error::Error;
};

// adaptation
struct EmptyInput : Error {
    using Error::Error;
};
struct DegenerateClassMass : Error {
    using Error::Error;
};
struct UninformativeStable : Error {
    using Error::Error;
};
struct LearnerFailure : Error {
    using Error::Error;
};

// calibration / training
struct LengthMismatch : Error {
    using Error::Error;
};
struct EmptyEnvironment : Error {
    using Error::Error;
};
struct TooFewEnvironments : Error {
    using Error::Error;
};
struct DegenerateClass : Error {
    using Error::Error;
};
struct NonFiniteLoss : Error {
    using Error::Error;
};

// nn
struct ShapeMismatch : Error {
    using Error::Error;
};
struct StaleTape : Error {
    using Error::Error;
};
struct BadSplit : Error {
    using Error::Error;
};

// envs
struct BadMagic : Error {
    using Error::Error;
};
struct TruncatedFile : Error {
    using Error::Error;
};
struct CountMismatch : Error {
    using Error::Error;
};
struct UnsupportedGenerator : Error {
    using Error::Error;
};

// cli
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace sfb
