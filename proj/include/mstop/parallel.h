#pragma once

#include <cstddef>
#include <exception>
#include <mutex>

#include <omp.h>

namespace mstop {

enum class Exec { kSerial, kParallel };

// Calls f(i) for i in [0, n). Work items must write only to their own
// output slots; the parallel variant then produces the same results as
// the serial reference regardless of thread count. The first exception
// thrown by any item is rethrown on the calling thread.
template <class F>
void for_each_index(std::size_t n, Exec exec, F&& f) {
  if (exec == Exec::kSerial || n < 2 || omp_get_max_threads() < 2) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(n); ++si) {
    try {
      f(static_cast<std::size_t>(si));
    } catch (...) {
      std::lock_guard lock(error_mutex);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace mstop
