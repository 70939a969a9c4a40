#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace retro {

using Token = std::uint32_t;

inline constexpr Token kVocabSize = 257;
inline constexpr Token kEotId = 256;
inline constexpr Token kPadId = kEotId;

/// Row-major dense matrix; the project's 2-D tensor type.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Boolean attention mask, one row per query and one column per key.
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct VocabError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct LookupError : Error { using Error::Error; };
struct IntegrityError : Error { using Error::Error; };
struct ArgumentError : Error { using Error::Error; };
struct LengthError : Error { using Error::Error; };
struct AlignmentError : Error { using Error::Error; };

inline constexpr const char* kToolVersion = "0.1.0";

void log_warning(const std::string& msg);

}  // namespace retro
