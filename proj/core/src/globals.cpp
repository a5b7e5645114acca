#include <atomic>
#include <cstdlib>
#include <string>

#include "cvrnet/blocks.hpp"
#include "cvrnet/parallel.hpp"
#include "cvrnet/tensor.hpp"

namespace cvrnet {

bool finite_checks_enabled() {
  const char* v = std::getenv("CVRNET_CHECK_FINITE");
  return v != nullptr && v[0] == '1' && v[1] == '\0';
}

namespace {
std::atomic<int> g_workers{1};
}

int intra_op_workers() { return g_workers.load(std::memory_order_relaxed); }

void set_intra_op_workers(int workers) {
  if (workers < 1) throw ValueError("worker count must be >= 1");
  g_workers.store(workers, std::memory_order_relaxed);
}

WidthMultiplier WidthMultiplier::parse(const std::string& text) {
  WidthMultiplier w;
  const auto slash = text.find('/');
  try {
    if (slash != std::string::npos) {
      w.num = std::stoi(text.substr(0, slash));
      w.den = std::stoi(text.substr(slash + 1));
    } else if (text.find('.') != std::string::npos) {
      // decimal form; snap to a power-of-two denominator
      const double v = std::stod(text);
      if (v <= 0) throw ValueError("width multiplier must be > 0");
      w.num = static_cast<int>(v * 256.0 + 0.5);
      w.den = 256;
      const auto g = [](int a, int b) {
        while (b) {
          const int t = a % b;
          a = b;
          b = t;
        }
        return a;
      };
      const int d = g(w.num, w.den);
      w.num /= d;
      w.den /= d;
    } else {
      w.num = std::stoi(text);
      w.den = 1;
    }
  } catch (const std::logic_error&) {
    throw ValueError("cannot parse width multiplier: " + text);
  }
  w.validate();
  return w;
}

}  // namespace cvrnet
