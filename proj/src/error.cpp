#include "eegvlm/error.hpp"

namespace eegvlm {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::InconsistentSpec: return "InconsistentSpec";
    case ErrorCode::TruncatedData: return "TruncatedData";
    case ErrorCode::ChannelNotFound: return "ChannelNotFound";
    case ErrorCode::AmbiguousChannel: return "AmbiguousChannel";
    case ErrorCode::UnknownStageText: return "UnknownStageText";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::EmptySignal: return "EmptySignal";
    case ErrorCode::DegenerateEpoch: return "DegenerateEpoch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EncoderUnavailable: return "EncoderUnavailable";
    case ErrorCode::InvalidP: return "InvalidP";
    case ErrorCode::ModelUnavailable: return "ModelUnavailable";
    case ErrorCode::NoStageFound: return "NoStageFound";
    case ErrorCode::MissingProfile: return "MissingProfile";
    case ErrorCode::ServiceUnavailable: return "ServiceUnavailable";
    case ErrorCode::MalformedResponse: return "MalformedResponse";
    case ErrorCode::MissingAnalysis: return "MissingAnalysis";
    case ErrorCode::NoDecidableLabel: return "NoDecidableLabel";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::InsufficientClass: return "InsufficientClass";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::EmptyMatrix: return "EmptyMatrix";
    case ErrorCode::DegenerateKappa: return "DegenerateKappa";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::MissingUpstream: return "MissingUpstream";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
  }
  return "Unknown";
}

}  // namespace eegvlm
