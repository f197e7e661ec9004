#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rlsf {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Context longer than the model can attend to.
class LengthError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the operation's domain (K > V, bad span bounds, empty batch, ...).
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// NaN/Inf showed up in a loss, gradient or parameter vector.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MissingArtifactError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace rlsf
