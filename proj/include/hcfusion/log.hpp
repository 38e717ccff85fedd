#pragma once

#include <atomic>
#include <iostream>
#include <string>

namespace hcfusion {

inline std::atomic<bool>& warnings_enabled() {
  static std::atomic<bool> enabled{true};
  return enabled;
}

inline void log_warning(const std::string& msg) {
  if (warnings_enabled()) std::cerr << "warning: " << msg << '\n';
}

inline void log_info(const std::string& msg) { std::cerr << msg << '\n'; }

}  // namespace hcfusion
