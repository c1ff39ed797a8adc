// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace qeprop {

inline constexpr const char* kToolName = "qeprop";
inline constexpr const char* kToolVersion = "1.0.0";

}  // namespace qeprop
