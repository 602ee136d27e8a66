#pragma once

namespace simmdg {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace simmdg
