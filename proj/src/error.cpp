#include "xplain/error.hpp"

namespace xplain {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::DecodeError: return "DecodeError";
    case Errc::CropTooLarge: return "CropTooLarge";
    case Errc::RangeTagMismatch: return "RangeTagMismatch";
    case Errc::IoError: return "IoError";
    case Errc::EmptyClass: return "EmptyClass";
    case Errc::NoClasses: return "NoClasses";
    case Errc::ClassTooSmall: return "ClassTooSmall";
    case Errc::UnknownVersion: return "UnknownVersion";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::UnknownLayerName: return "UnknownLayerName";
    case Errc::RemoteUnavailable: return "RemoteUnavailable";
    case Errc::ProtocolError: return "ProtocolError";
    case Errc::GradientsUnavailable: return "GradientsUnavailable";
    case Errc::DegenerateDesign: return "DegenerateDesign";
    case Errc::TooManyFeatures: return "TooManyFeatures";
    case Errc::StyleMismatch: return "StyleMismatch";
    case Errc::EmptyMatrix: return "EmptyMatrix";
    case Errc::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

}  // namespace xplain
