// Shared primitives: error categories, 4-D shapes, and deterministic
// threading/reduction helpers used by every other header.
#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

namespace dmg {

// Error categories map 1:1 onto the CLI exit codes (2, 3, 4).
enum class ErrorKind { validation, missing_artifact, numerical };

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_validation(const std::string& msg) {
  throw Error(ErrorKind::validation, msg);
}
[[noreturn]] inline void fail_missing(const std::string& msg) {
  throw Error(ErrorKind::missing_artifact, msg);
}
[[noreturn]] inline void fail_numerical(const std::string& msg) {
  throw Error(ErrorKind::numerical, msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail_validation(msg);
}

// Batch-channel-height-width shape. All tensors in the library are 4-D;
// vectors and scalars use degenerate dims (e.g. {1, c, 1, 1}).
struct Shape4 {
  int64_t b = 0, c = 0, h = 0, w = 0;

  int64_t numel() const { return b * c * h * w; }
  int64_t plane() const { return h * w; }
  int64_t index(int64_t bi, int64_t ci, int64_t hi, int64_t wi) const {
    return ((bi * c + ci) * h + hi) * w + wi;
  }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << b << ", " << c << ", " << h << ", " << w << ")";
    return os.str();
  }
};

inline void require_shape(const Shape4& got, const Shape4& want, const char* what) {
  if (!(got == want)) {
    fail_validation(std::string(what) + ": expected shape " + want.str() + ", got " + got.str());
  }
}

inline int env_thread_count() {
  if (const char* e = std::getenv("DMG_THREADS")) {
    int n = std::atoi(e);
    if (n >= 1) return n;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// Fixed-size worker pool. Work is always split into one contiguous chunk per
// worker, so writes stay disjoint and results do not depend on scheduling.
class ThreadPool {
public:
  static ThreadPool& instance() {
    static ThreadPool pool(env_thread_count());
    return pool;
  }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

  // Runs fn(begin, end) over a partition of [0, n). fn must only write
  // locations owned by its own range.
  void for_each_chunk(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    int chunks = static_cast<int>(std::min<int64_t>(size(), n));
    if (chunks == 1) {
      fn(0, n);
      return;
    }
    int64_t step = (n + chunks - 1) / chunks;
    std::vector<std::function<void()>> tasks;
    for (int i = 1; i < chunks; ++i) {
      int64_t lo = i * step, hi = std::min<int64_t>(n, lo + step);
      if (lo < hi) tasks.push_back([&fn, lo, hi] { fn(lo, hi); });
    }
    pending_.store(static_cast<int>(tasks.size()));
    {
      std::lock_guard<std::mutex> lock(mu_);
      for (auto& t : tasks) queue_.push_back(std::move(t));
    }
    cv_.notify_all();
    fn(0, std::min<int64_t>(n, step));
    std::unique_lock<std::mutex> lock(done_mu_);
    done_cv_.wait(lock, [this] { return pending_.load() == 0; });
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

private:
  explicit ThreadPool(int n) {
    for (int i = 1; i < n; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void worker_loop() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
        if (stop_ && queue_.empty()) return;
        task = std::move(queue_.back());
        queue_.pop_back();
      }
      task();
      if (pending_.fetch_sub(1) == 1) {
        std::lock_guard<std::mutex> lock(done_mu_);
        done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::vector<std::function<void()>> queue_;
  std::mutex mu_, done_mu_;
  std::condition_variable cv_, done_cv_;
  std::atomic<int> pending_{0};
  bool stop_ = false;
};

// Sum in 64-bit over eight fixed lanes (lane j takes elements 8i+j), reduced
// by a fixed tree, then a serial tail. The grouping depends only on n, never
// on thread count or alignment, so every reduction that feeds a metric or a
// gradient is bit-reproducible.
template <class T>
double sum64(const T* x, int64_t n) {
  double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t n8 = n & ~int64_t(7);
  for (int64_t i = 0; i < n8; i += 8) {
    for (int j = 0; j < 8; ++j) lane[j] += static_cast<double>(x[i + j]);
  }
  double acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
               ((lane[4] + lane[5]) + (lane[6] + lane[7]));
  for (int64_t i = n8; i < n; ++i) acc += static_cast<double>(x[i]);
  return acc;
}

// Same lane structure for a sum of squared deviations from a fixed center.
template <class T>
double sumsq_dev64(const T* x, int64_t n, double center) {
  double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t n8 = n & ~int64_t(7);
  for (int64_t i = 0; i < n8; i += 8) {
    for (int j = 0; j < 8; ++j) {
      double d = static_cast<double>(x[i + j]) - center;
      lane[j] += d * d;
    }
  }
  double acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
               ((lane[4] + lane[5]) + (lane[6] + lane[7]));
  for (int64_t i = n8; i < n; ++i) {
    double d = static_cast<double>(x[i]) - center;
    acc += d * d;
  }
  return acc;
}

// Same lane structure for sum of a[i] * (x[i] - center).
template <class T>
double dot_dev64(const T* a, const T* x, int64_t n, double center) {
  double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t n8 = n & ~int64_t(7);
  for (int64_t i = 0; i < n8; i += 8) {
    for (int j = 0; j < 8; ++j) {
      lane[j] += static_cast<double>(a[i + j]) * (static_cast<double>(x[i + j]) - center);
    }
  }
  double acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
               ((lane[4] + lane[5]) + (lane[6] + lane[7]));
  for (int64_t i = n8; i < n; ++i) {
    acc += static_cast<double>(a[i]) * (static_cast<double>(x[i]) - center);
  }
  return acc;
}

template <class T>
double mean64(const T* x, int64_t n) {
  return n == 0 ? 0.0 : sum64(x, n) / static_cast<double>(n);
}

// std::allocator variant that default-initializes on resize, so buffers that
// are fully overwritten right away skip the zero-fill pass.
template <class T, class A = std::allocator<T>>
struct default_init_allocator : A {
  template <class U>
  struct rebind {
    using other =
        default_init_allocator<U, typename std::allocator_traits<A>::template rebind_alloc<U>>;
  };
  using A::A;
  template <class U>
  void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(ptr)) U;
  }
  template <class U, class... Args>
  void construct(U* ptr, Args&&... args) {
    std::allocator_traits<A>::construct(static_cast<A&>(*this), ptr, std::forward<Args>(args)...);
  }
};

// Growable per-thread scratch arena. Slots hand out reusable buffers for op
// internals (patch matrices, transposed weights); contents are garbage until
// the caller writes them. Each worker thread sees its own arena.
template <class T>
T* scratch_buffer(int slot, int64_t n) {
  thread_local std::vector<T, default_init_allocator<T>> bufs[4];
  auto& b = bufs[slot];
  if (static_cast<int64_t>(b.size()) < n) b.resize(static_cast<size_t>(n));
  return b.data();
}

}  // namespace dmg
