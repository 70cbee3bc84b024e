#pragma once

namespace ssa {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ssa
