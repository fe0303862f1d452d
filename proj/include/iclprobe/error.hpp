#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace iclprobe {

enum class errc {
    malformed_header,
    overlapping_ranges,
    unknown_dtype,
    truncated_payload,
    io_failure,
    missing_tensor,
    shape_mismatch,
    index_out_of_range,
    token_out_of_range,
    sequence_too_long,
    invalid_template,
    empty_label,
    unknown_token,
    zero_vector,
    empty_input,
    dimension_mismatch,
    missing_capture,
    length_mismatch,
    constant_input,
    singular_system,
    single_class,
    invalid_argument,
    capture_mismatch,
};

inline std::string_view to_string(errc code)
{
    switch (code) {
    case errc::malformed_header: return "malformed header";
    case errc::overlapping_ranges: return "overlapping ranges";
    case errc::unknown_dtype: return "unknown dtype";
    case errc::truncated_payload: return "truncated payload";
    case errc::io_failure: return "i/o failure";
    case errc::missing_tensor: return "missing tensor";
    case errc::shape_mismatch: return "shape mismatch";
    case errc::index_out_of_range: return "index out of range";
    case errc::token_out_of_range: return "token out of range";
    case errc::sequence_too_long: return "sequence too long";
    case errc::invalid_template: return "invalid template";
    case errc::empty_label: return "empty label";
    case errc::unknown_token: return "unknown token";
    case errc::zero_vector: return "zero vector";
    case errc::empty_input: return "empty input";
    case errc::dimension_mismatch: return "dimension mismatch";
    case errc::missing_capture: return "missing capture";
    case errc::length_mismatch: return "length mismatch";
    case errc::constant_input: return "constant input";
    case errc::singular_system: return "singular system";
    case errc::single_class: return "single class";
    case errc::invalid_argument: return "invalid argument";
    case errc::capture_mismatch: return "capture mismatch";
    }
    return "unknown error";
}

/// Every failure raised by the library. `code()` lets callers and tests
/// distinguish failure classes without parsing the message.
class error : public std::runtime_error {
  public:
    error(errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), m_code(code)
    {}

    errc code() const noexcept { return m_code; }

  private:
    errc m_code;
};

[[noreturn]] inline void fail(errc code, const std::string& what) { throw error(code, what); }

inline void require(bool cond, errc code, const std::string& what)
{
    if (!cond) {
        fail(code, what);
    }
}

}  // namespace iclprobe
