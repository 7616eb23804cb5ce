#pragma once

#include <stdexcept>
#include <string>

namespace d3n {

// Error taxonomy shared across the pipeline. The CLI maps these onto
// exit codes (config 2, dependency 3, everything else 4).

struct InvalidArgument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct KeyNotFound : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CorruptFile : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UnsupportedVersion : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IncompleteFeatureSet : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DependencyError : std::runtime_error {
    DependencyError(const std::string& missing_stage, const std::string& msg)
        : std::runtime_error(msg), missing_stage(missing_stage) {}
    std::string missing_stage;
};

}  // namespace d3n
