#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace coal {

enum class ErrorKind {
  invalid_argument,
  dimension_mismatch,
  degenerate_message,
  singular_matrix,
  not_psd,
  optimization_failure,
  parse_error,
  empty_task,
  undefined_metric,
  io_error,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries a kind so the CLI can report
// it as a machine-readable line.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace coal
