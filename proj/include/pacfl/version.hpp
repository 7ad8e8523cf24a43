#pragma once

namespace pacfl {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace pacfl
