#pragma once

namespace icsd {

inline constexpr const char* kToolName = "icsd";
inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace icsd
