#pragma once

namespace xplain {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace xplain
