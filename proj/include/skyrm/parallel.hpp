#pragma once

#include <functional>

namespace skyrm {

/// Caps worker threads used inside layer operations. 1 (the default) runs
/// everything on the calling thread.
void set_num_threads(int threads);
int num_threads();

/// Runs body(i) for i in [0, count). Iterations must not share mutable state.
void parallel_for(int count, const std::function<void(int)>& body);

}  // namespace skyrm
