#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ceglab {

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct dimension_error : error {
  using error::error;
};

// A softmax row with no admissible entry.
struct degenerate_row_error : error {
  using error::error;
};

struct index_error : error {
  using error::error;
};

struct contract_error : error {
  using error::error;
};

struct config_error : error {
  using error::error;
};

struct non_finite_error : error {
  using error::error;
};

struct data_error : error {
  using error::error;
};

struct io_error : error {
  using error::error;
};

struct analysis_error : error {
  using error::error;
};

struct report_error : error {
  using error::error;
};

// Raised by the trainer when the loss stops being finite. The partially
// filled log travels with the exception through RunLog::status.
struct diverged_error : error {
  diverged_error(const std::string& what, std::size_t step_)
      : error(what), step(step_) {}
  std::size_t step;
};

}  // namespace ceglab
