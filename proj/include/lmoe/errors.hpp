#pragma once

#include <stdexcept>
#include <string>

namespace lmoe {

// Shape/dimension mismatch between tensors; messages name both shapes.
struct shape_error : std::invalid_argument {
  explicit shape_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid or inconsistent configuration; messages name the offending field.
struct config_error : std::invalid_argument {
  explicit config_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// Token id outside the vocabulary, or a character with no vocab entry.
struct vocab_error : std::out_of_range {
  explicit vocab_error(const std::string& msg) : std::out_of_range(msg) {}
};

// Malformed or empty data: empty batches, all-masked batches, bad corpora.
struct data_error : std::runtime_error {
  explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

// An API contract was violated (non-scalar backward, unnormalized simplex
// input, ...).
struct contract_error : std::logic_error {
  explicit contract_error(const std::string& msg) : std::logic_error(msg) {}
};

// Checkpoint file problems: bad magic, truncation, version mismatch.
struct checkpoint_error : std::runtime_error {
  explicit checkpoint_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Training produced a non-finite loss.
struct divergence_error : std::runtime_error {
  explicit divergence_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace lmoe
