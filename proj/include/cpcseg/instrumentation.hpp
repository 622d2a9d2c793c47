// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstddef>

namespace cpcseg {

/// Per-thread call counters used by tests to verify which code paths ran.
struct Counters {
  std::size_t detect_peaks_calls = 0;
  std::size_t alignment_calls = 0;
};

inline Counters& counters() {
  thread_local Counters c;
  return c;
}

}  // namespace cpcseg
