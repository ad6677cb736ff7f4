#pragma once

#include <stdexcept>
#include <string>

namespace mil {

// Error taxonomy shared by all modules. The CLI maps these onto its exit-code
// contract (2 = config/usage, 3 = missing artifact, 4 = runtime training error).
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or corrupted on-disk artifact; `offset` is the byte position when known.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what, long long offset = -1)
      : std::runtime_error(offset >= 0 ? what + " (offset " + std::to_string(offset) + ")" : what),
        offset(offset) {}
  long long offset = -1;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A metric that is undefined for the given inputs (e.g. AUC with one class).
struct UndefinedMetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Model kind does not expose the requested capability.
struct CapabilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A batch could not be assembled; `pool` names the empty source pool.
struct BatchError : std::runtime_error {
  explicit BatchError(const std::string& what, std::string pool)
      : std::runtime_error(what + " (pool " + pool + ")"), pool(std::move(pool)) {}
  std::string pool;
};

struct MissingArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mil
