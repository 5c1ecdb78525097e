#pragma once

namespace car {

inline constexpr const char* kVersion = "0.1.0";

} // namespace car
