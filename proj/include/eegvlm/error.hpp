#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace eegvlm {

enum class ErrorCode {
  // edf-ingest
  MalformedHeader,
  InconsistentSpec,
  TruncatedData,
  ChannelNotFound,
  AmbiguousChannel,
  UnknownStageText,
  // preprocess / render
  InvalidSpec,
  EmptySignal,
  DegenerateEpoch,
  // vision / alignment / lm
  ShapeMismatch,
  EmptyDataset,
  NonFiniteLoss,
  EncoderUnavailable,
  InvalidP,
  ModelUnavailable,
  NoStageFound,
  // cot
  MissingProfile,
  ServiceUnavailable,
  MalformedResponse,
  MissingAnalysis,
  NoDecidableLabel,
  InsufficientData,
  // eval
  InsufficientClass,
  LengthMismatch,
  UnknownLabel,
  EmptyMatrix,
  DegenerateKappa,
  IoFailure,
  // cli
  MissingUpstream,
  ConfigInvalid,
};

std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace eegvlm
