#pragma once

#include <stdexcept>
#include <string>

namespace reid {

enum class ErrorKind {
  malformed_filename,
  missing_directory,
  empty_split,
  insufficient_identities,
  insufficient_instances,
  shape_mismatch,
  unknown_head,
  odd_channels,
  non_finite_input,
  mask_too_small,
  tap_unavailable,
  label_out_of_range,
  unknown_kind,
  plan_mismatch,
  non_finite_loss,
  untrained_head,
  dim_mismatch,
  no_valid_queries,
  bad_magic,
  invalid_config,
  checkpoint_mismatch,
  io_error,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::malformed_filename: return "MalformedFilename";
    case ErrorKind::missing_directory: return "MissingDirectory";
    case ErrorKind::empty_split: return "EmptySplit";
    case ErrorKind::insufficient_identities: return "InsufficientIdentities";
    case ErrorKind::insufficient_instances: return "InsufficientInstances";
    case ErrorKind::shape_mismatch: return "ShapeMismatch";
    case ErrorKind::unknown_head: return "UnknownHead";
    case ErrorKind::odd_channels: return "OddChannels";
    case ErrorKind::non_finite_input: return "NonFiniteInput";
    case ErrorKind::mask_too_small: return "MaskTooSmall";
    case ErrorKind::tap_unavailable: return "TapUnavailable";
    case ErrorKind::label_out_of_range: return "LabelOutOfRange";
    case ErrorKind::unknown_kind: return "UnknownKind";
    case ErrorKind::plan_mismatch: return "PlanMismatch";
    case ErrorKind::non_finite_loss: return "NonFiniteLoss";
    case ErrorKind::untrained_head: return "UntrainedHead";
    case ErrorKind::dim_mismatch: return "DimMismatch";
    case ErrorKind::no_valid_queries: return "NoValidQueries";
    case ErrorKind::bad_magic: return "BadMagic";
    case ErrorKind::invalid_config: return "InvalidConfig";
    case ErrorKind::checkpoint_mismatch: return "CheckpointMismatch";
    case ErrorKind::io_error: return "IoError";
  }
  return "Unknown";
}

/// Process exit code for a failure of the given kind.
/// 1 runtime failure, 2 input/validation, 3 dimension/format, 4 empty result.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::malformed_filename:
    case ErrorKind::missing_directory:
    case ErrorKind::empty_split:
    case ErrorKind::insufficient_identities:
    case ErrorKind::insufficient_instances:
    case ErrorKind::unknown_head:
    case ErrorKind::label_out_of_range:
    case ErrorKind::unknown_kind:
    case ErrorKind::plan_mismatch:
    case ErrorKind::untrained_head:
    case ErrorKind::invalid_config:
      return 2;
    case ErrorKind::shape_mismatch:
    case ErrorKind::odd_channels:
    case ErrorKind::tap_unavailable:
    case ErrorKind::dim_mismatch:
    case ErrorKind::bad_magic:
    case ErrorKind::checkpoint_mismatch:
      return 3;
    case ErrorKind::no_valid_queries:
      return 4;
    case ErrorKind::non_finite_input:
    case ErrorKind::mask_too_small:
    case ErrorKind::non_finite_loss:
    case ErrorKind::io_error:
      return 1;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace reid
