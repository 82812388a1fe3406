#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace trm {

// Error taxonomy. The CLI maps categories onto process exit codes:
// input/validation failures exit 1, training-runtime failures exit 2.
enum class Errc {
  validation,       // bad arguments, shape mismatch, out-of-range values
  bad_magic,        // file does not start with the expected magic bytes
  bad_version,      // unsupported format version or dtype code
  truncated,        // file ended before the declared payload
  config_mismatch,  // stored parameters disagree with the embedded config
  dim_mismatch,     // manifest dimensions disagree with raster payload
  missing_file,     // expected file absent
  divergence,       // non-finite loss or gradient during training
  runtime,          // other runtime failure
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}

  Errc code() const noexcept { return code_; }

  int exit_code() const noexcept {
    return (code_ == Errc::divergence || code_ == Errc::runtime) ? 2 : 1;
  }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

// Neumaier-compensated accumulator. Used wherever a sum feeds a tight
// numerical identity (LEEP scores and per-pixel map totals), so the
// decomposition checks hold to 1e-10 independent of summation order.
class Kahan {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }

  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace trm
